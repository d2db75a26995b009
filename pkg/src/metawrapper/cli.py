"""Command-line front end.

    metawrapper synth|prepare|train|eval|ablate|gradcheck|bench [--config PATH]
                [--seed N] [--out DIR] [--force] [--set key=value ...]

Exit codes: 0 success, 1 usage, 2 numerical failure, 3 tolerance failure.
"""

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import config as cfgmod
from . import model as mdl
from .bilevel import DivergenceError, InnerLoopError, Trainer, train
from .data import (MalformedRowError, PackedDataset, SplitDataset, SyntheticConfigError, build_split,
                   generate_synthetic, load_interactions)
from .evaluation import auc_or_none
from .runtime import keep_large_allocations

log = logging.getLogger("metawrapper")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_TOLERANCE = 0, 1, 2, 3
SUMMARY_FIELDS = ("method", "seed", "split", "metric", "value")


class UsageError(Exception):
    pass


class ToleranceError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers

def _out_dir(root, run_id, force):
    path = Path(root) / run_id
    if path.exists():
        if not force:
            raise UsageError(f"{path} exists; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def load_dataset(cfg, seed):
    """The configured SplitDataset: regenerated synthetic data, a prepared split
    directory, or a raw interaction file split on the fly."""
    ds = cfg["dataset"]
    if ds["source"] == "synthetic":
        return generate_synthetic(cfgmod.synthetic_config(cfg), np.random.default_rng(seed))
    path = Path(ds["path"])
    if path.is_dir():
        if (path / "split.json").exists():
            return SplitDataset.load(path)
        if (path / "split" / "split.json").exists():
            return SplitDataset.load(path / "split")
        raise UsageError(f"{path} holds no prepared split")
    if not path.exists():
        raise UsageError(f"dataset file {path} not found")
    return build_split(load_interactions(path, ds["format"]), ds["max_seq_len"], seed)


def model_config(cfg, dataset, **overrides):
    kw = cfgmod.model_kwargs(cfg)
    kw.update(overrides)
    return mdl.ModelConfig(dataset.n_items, dataset.n_categories, **kw)


def write_summary(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_FIELDS)
        for r in rows:
            w.writerow([r[k] for k in SUMMARY_FIELDS])


def _final_rows(method, seed, rec):
    keys = [("train", "loss", "full_train_loss"), ("valid", "auc", "valid_auc"),
            ("valid", "loss", "valid_loss"), ("test", "auc", "test_auc"), ("test", "loss", "test_loss")]
    rows = []
    for split, metric, key in keys:
        value = rec.get(key)
        if value is not None:
            rows.append({"method": method, "seed": seed, "split": split, "metric": metric,
                         "value": repr(float(value))})
    return rows


def _run_training(cfg, dataset, seed, out, overrides=None):
    tcfg = cfgmod.train_config(cfg, seed=seed, eval_train=True, **(overrides or {}))
    mcfg = model_config(cfg, dataset)
    params, metrics = train(dataset, mcfg, tcfg)
    out.mkdir(parents=True, exist_ok=True)
    metrics.to_jsonl(out / "metrics.jsonl")
    if cfg["output"]["checkpoint"]:
        mdl.save_checkpoint(out / "checkpoint.bin", params, mcfg, {"method": tcfg.method})
    rec = metrics.epochs[-1] if metrics.epochs else {}
    if not metrics.epochs:
        # zero epochs: report the untrained model
        trainer = Trainer(dataset, mcfg, tcfg, params)
        for name, data in (("valid", trainer.valid_data), ("test", trainer.test_data)):
            a, l = trainer.evaluate(data)
            rec[f"{name}_auc"], rec[f"{name}_loss"] = a, l
    return params, metrics, _final_rows(tcfg.method, seed, rec)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(cfg, args):
    scfg = cfgmod.synthetic_config(cfg)
    dataset = generate_synthetic(scfg, np.random.default_rng(args.seed))
    out = _out_dir(args.out, cfg["output"]["run_id"] or f"synth-s{args.seed}", args.force)
    rows = sorted(dataset.train + dataset.test, key=lambda x: (x.user_id, x.target_item[0]))
    with open(out / "interactions.tsv", "w") as fh:
        fh.write("\t".join(("user_id", "item_id", "category_id", "timestamp", "behavior")) + "\n")
        for ts, inst in enumerate(rows):
            behavior = "click" if inst.label == 1 else "other"
            fh.write(f"{inst.user_id}\t{inst.target_item[0]}\t{inst.target_item[1]}\t{ts}\t{behavior}\n")
    vocab = {"users": {str(u): u for u in range(scfg.n_users)},
             "items": {str(j): j for j in range(scfg.n_items)},
             "categories": {str(g): g for g in range(scfg.n_groups)}}
    (out / "vocab.json").write_text(json.dumps(vocab, sort_keys=True) + "\n")
    dataset.save(out / "split")
    manifest = {"seed": args.seed, "synthetic": scfg.to_dict(), "n_train": len(dataset.train),
                "n_test": len(dataset.test), "n_instances": len(dataset.train) + len(dataset.test),
                "skipped": dataset.info.get("skipped", 0)}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    (out / "config.echo").write_text(cfgmod.dumps(cfg))
    print(f"wrote {manifest['n_instances']} instances to {out}")
    return EXIT_OK


def cmd_prepare(cfg, args):
    ds = cfg["dataset"]
    if ds["source"] != "file":
        raise UsageError("prepare needs dataset.source = 'file' and dataset.path")
    inter = load_interactions(ds["path"], ds["format"])
    split = build_split(inter, ds["max_seq_len"], args.seed)
    out = _out_dir(args.out, cfg["output"]["run_id"] or f"prepare-s{args.seed}", args.force)
    inter.vocab.save(out / "vocab.json")
    split.save(out / "split")
    (out / "config.echo").write_text(cfgmod.dumps(cfg))
    print(f"{len(split.train)} train / {len(split.valid)} valid / {len(split.test)} test instances "
          f"({inter.n_duplicates} duplicate rows dropped) -> {out}")
    return EXIT_OK


def cmd_train(cfg, args):
    dataset = load_dataset(cfg, args.seed)
    points = cfgmod.grid_points(cfg)
    method = cfgmod.train_config(cfg).method
    run_id = cfg["output"]["run_id"] or f"train-{method}-s{args.seed}"
    out = _out_dir(args.out, run_id, args.force)
    (out / "config.echo").write_text(cfgmod.dumps(cfg))
    rows = []
    for point in points:
        sub = out if len(points) == 1 else out / "-".join(f"{k}{v}" for k, v in point.items())
        _, metrics, final = _run_training(cfg, dataset, args.seed, sub, point)
        for r in final:
            if point:
                r["method"] = f"{r['method']}[{','.join(f'{k}={v}' for k, v in point.items())}]"
            rows.append(r)
        test = next((r["value"] for r in final if r["split"] == "test" and r["metric"] == "auc"), None)
        print(f"{sub.name if point else method}: test_auc={test}")
    if len(points) > 1:
        rows = [r for r in rows if r["split"] == "test" and r["metric"] == "auc"]
    write_summary(out / "summary.csv", rows)
    return EXIT_OK


def cmd_eval(cfg, args):
    ckpt = args.checkpoint or cfg["eval"]["checkpoint"]
    if not ckpt:
        raise UsageError("eval needs --checkpoint or eval.checkpoint")
    params, mcfg = mdl.load_checkpoint(ckpt)
    dataset = load_dataset(cfg, args.seed)
    method = params.meta.get("method", "meta_wrapper")
    variant = "base" if method == "base" else "selector"
    rows = []
    for split in cfg["eval"]["splits"]:
        inst = getattr(dataset, split)
        if not inst:
            continue
        batch = PackedDataset(inst).all()
        p = mdl.predict_proba(params, batch, mcfg, variant)
        a = auc_or_none(p, batch.label)
        loss = mdl.mean_loss(params, batch, mcfg, variant)
        for metric, value in (("auc", a), ("loss", loss)):
            if value is not None:
                rows.append({"method": method, "seed": args.seed, "split": split, "metric": metric,
                             "value": repr(float(value))})
        print(f"{split}: auc={a} loss={loss:.6f}")
    out = _out_dir(args.out, cfg["output"]["run_id"] or f"eval-{method}-s{args.seed}", args.force)
    (out / "config.echo").write_text(cfgmod.dumps(cfg))
    write_summary(out / "summary.csv", rows)
    return EXIT_OK


ABLATION_LABELS = {"attention_only": "M1", "m2": "M2", "gdmax": "M3", "meta_wrapper": "M4"}


def cmd_ablate(cfg, args):
    methods = cfg["ablate"]["methods"] or list(ABLATION_LABELS)
    seeds = cfg["ablate"]["seeds"] or [args.seed]
    if len(seeds) < 3:
        log.warning("ablation over %d seed(s); means will have high variance", len(seeds))
    out = _out_dir(args.out, cfg["output"]["run_id"] or "ablate", args.force)
    (out / "config.echo").write_text(cfgmod.dumps(cfg))
    rows, aucs = [], {}
    for seed in seeds:
        dataset = load_dataset(cfg, seed)
        for method in methods:
            _, _, final = _run_training(cfg, dataset, seed, out / f"{method}-s{seed}", {"method": method})
            rows.extend(final)
            test = [float(r["value"]) for r in final if r["split"] == "test" and r["metric"] == "auc"]
            aucs.setdefault(method, []).extend(test)
    write_summary(out / "summary.csv", rows)
    table = {m: float(np.mean(v)) for m, v in aucs.items() if v}
    (out / "ablation.json").write_text(json.dumps({"mean_test_auc": table, "seeds": seeds}, indent=2) + "\n")
    for m in methods:
        if m in table:
            print(f"{ABLATION_LABELS.get(m, m):>3} {m:15s} mean test AUC {table[m]:.4f}")
    if all(m in table for m in ("meta_wrapper", "m2", "gdmax")):
        ok = table["meta_wrapper"] >= table["m2"] >= table["gdmax"]
        print(f"ordering M4 >= M2 >= M3: {'holds' if ok else 'does not hold'}")
    return EXIT_OK


def cmd_gradcheck(cfg, args):
    from .gradcheck import run_gradcheck
    gc = cfg["gradcheck"]
    report = run_gradcheck(seed=args.seed, n_inner=gc["n_inner"], hidden=tuple(gc["hidden"]),
                           coords_per_block=gc["coords_per_block"], corrupt=gc["corrupt"] or None)
    failed = False
    for section, tol in (("model", gc["tolerance"]), ("stub", gc["stub_tolerance"])):
        for name, err in report[section].items():
            ok = err < tol
            failed |= not ok
            print(f"{section:5s} {name:32s} max rel err {err:.3e}  {'ok' if ok else 'FAIL'} (< {tol:g})")
    out = _out_dir(args.out, cfg["output"]["run_id"] or f"gradcheck-s{args.seed}", args.force)
    (out / "gradcheck.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if failed:
        raise ToleranceError("gradient check failed")
    return EXIT_OK


def cmd_bench(cfg, args):
    from .evaluation import bench_ratio
    b = cfg["bench"]
    dataset = load_dataset(cfg, args.seed)
    mcfg = model_config(cfg, dataset)
    tcfg = cfgmod.train_config(cfg, seed=args.seed, batch_size=b["batch_size"])
    base, other = b["methods"]
    report = {"methods": [base, other], "n_steps": b["n_steps"], "warmup": b["warmup"],
              "batch_size": b["batch_size"]}
    for phase in ("train", "infer"):
        stats = bench_ratio(mcfg, dataset, phase, base, other, tcfg, b["n_steps"], b["warmup"], args.seed,
                            b["clock"])
        report[phase] = stats
        print(f"{phase:5s} {base} {stats[base]['cpu_mean_ms']:.2f} ms  {other} {stats[other]['cpu_mean_ms']:.2f} ms"
              f" (cpu)  ratio {stats['ratio_cpu']:.3f} cpu, {stats['ratio_wall']:.3f} wall")
    out = _out_dir(args.out, cfg["output"]["run_id"] or f"bench-s{args.seed}", args.force)
    (out / "bench.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "config.echo").write_text(cfgmod.dumps(cfg))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def build_parser():
    parser = _Parser(prog="metawrapper", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="TOML run configuration")
    parser.add_argument("--seed", type=int, help="run seed (overrides the config)")
    parser.add_argument("--out", help="output root directory (overrides output.dir)")
    parser.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set train.mu=0.4")
    parser.add_argument("--method", help="shorthand for --set train.method=...")
    parser.add_argument("--epochs", type=int, help="shorthand for --set train.epochs=...")
    parser.add_argument("--checkpoint", help="checkpoint to evaluate (eval)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    keep_large_allocations()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.method:
        overrides.append(f"train.method={json.dumps(args.method)}")
    if args.epochs is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out:
        overrides.append(f"output.dir={json.dumps(args.out)}")
    try:
        cfg = cfgmod.load_config(args.config, overrides)
        args.seed = cfg["seed"]
        args.out = cfg["output"]["dir"]
        return COMMANDS[args.command](cfg, args)
    except (UsageError, cfgmod.ConfigError, SyntheticConfigError, MalformedRowError,
            FileNotFoundError, mdl.OutOfVocabularyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, InnerLoopError, ad.NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ToleranceError as exc:
        print(f"tolerance failure: {exc}", file=sys.stderr)
        return EXIT_TOLERANCE


if __name__ == "__main__":
    sys.exit(main())
