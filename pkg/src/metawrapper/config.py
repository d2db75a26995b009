"""Run configuration: a TOML file layered over defaults, with dotted-key overrides.

Precedence is command-line flags > config file > defaults.  The effective
configuration is written back out as TOML so a run can be repeated from it.
"""

import copy
from dataclasses import fields

import tomli
import tomli_w

from .bilevel import TrainConfig
from .data import SyntheticConfig

DEFAULTS = {
    "seed": 0,
    "dataset": {
        "source": "synthetic",  # synthetic | file
        "path": "",
        "format": "tsv",
        "max_seq_len": 100,
        "synthetic": {f.name: f.default for f in fields(SyntheticConfig)},
    },
    "model": {
        "embed_dim": 16,
        "hidden": [80, 40],
        "selector_hidden": [80, 40],
        "pooling": "weighted_sum",
        "embed_init": 0.05,
    },
    "train": {
        **{f.name: f.default for f in fields(TrainConfig) if f.name not in ("seed", "eval_train")},
        "grid": {"mu": [], "beta": [], "n_inner": []},
    },
    "output": {"dir": "runs", "run_id": "", "checkpoint": True},
    "eval": {"checkpoint": "", "splits": ["valid", "test"]},
    "ablate": {"methods": ["attention_only", "m2", "gdmax", "meta_wrapper"], "seeds": [0, 1, 2]},
    "gradcheck": {
        "tolerance": 1e-4,
        "stub_tolerance": 1e-8,
        "n_inner": [1, 2, 3],
        "hidden": [4, 3],
        "coords_per_block": 40,
        "corrupt": "",
    },
    "bench": {"n_steps": 100, "warmup": 10, "batch_size": 128, "methods": ["attention_only", "meta_wrapper"],
              "clock": "cpu"},
}


class ConfigError(ValueError):
    pass


def _merge(base, update, path=""):
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a table")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value
    return base


def parse_value(text):
    """A TOML scalar or array from an override string; bare words become strings."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def set_dotted(cfg, dotted, value):
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[p]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def load_config(path=None, overrides=()):
    """Defaults, then the TOML file at ``path``, then ``key=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        with open(path, "rb") as fh:
            try:
                data = tomli.load(fh)
            except tomli.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        _merge(cfg, data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        set_dotted(cfg, key.strip(), parse_value(text.strip()))
    validate(cfg)
    return cfg


def validate(cfg):
    ds = cfg["dataset"]
    if ds["source"] not in ("synthetic", "file"):
        raise ConfigError("dataset.source must be 'synthetic' or 'file'")
    if ds["source"] == "file" and not ds["path"]:
        raise ConfigError("dataset.path is required when dataset.source = 'file'")
    if ds["source"] == "synthetic" and ds["path"]:
        raise ConfigError("set exactly one dataset source: dataset.path is only used with source = 'file'")
    train_config(cfg)  # raises on bad train values
    for key, values in cfg["train"]["grid"].items():
        if not isinstance(values, list):
            raise ConfigError(f"train.grid.{key} must be a list")


def dumps(cfg):
    return tomli_w.dumps(cfg)


def train_config(cfg, **overrides):
    t = {k: v for k, v in cfg["train"].items() if k != "grid"}
    t.update(seed=cfg["seed"])
    t.update(overrides)
    try:
        return TrainConfig(**t)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc


def synthetic_config(cfg):
    try:
        return SyntheticConfig(**cfg["dataset"]["synthetic"])
    except TypeError as exc:
        raise ConfigError(f"dataset.synthetic: {exc}") from exc


def model_kwargs(cfg):
    m = cfg["model"]
    return {"embed_dim": m["embed_dim"], "hidden": tuple(m["hidden"]),
            "selector_hidden": tuple(m["selector_hidden"]), "pooling": m["pooling"],
            "embed_init": m["embed_init"]}


def grid_points(cfg):
    """Cartesian product of the non-empty grid lists, as override dicts."""
    grid = {k: v for k, v in cfg["train"]["grid"].items() if v}
    points = [{}]
    for key, values in grid.items():
        points = [dict(p, **{key: v}) for p in points for v in values]
    return points
