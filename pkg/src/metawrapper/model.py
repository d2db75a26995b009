"""Base predictor, feature selector, pooling and loss.

Both networks are stacks of sigmoid dense layers.  The predictor sees the
pooled user vector next to the target embedding; the selector scores each
behaviour from ``[e_i, e_v, e_i - e_v, e_i * e_v]``.  One embedding table
holds items followed by categories; an item's representation is its item
row plus its category row.
"""

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Batch, collate

POOLING_MODES = ("weighted_sum", "softmax")
VARIANTS = ("selector", "base")
P_CLAMP = 1e-7
_MASKED_LOGIT = -1e9


class OutOfVocabularyError(KeyError):
    pass


@dataclass
class ModelConfig:
    n_items: int
    n_categories: int
    embed_dim: int = 16
    hidden: tuple = (80, 40)
    selector_hidden: tuple = (80, 40)
    pooling: str = "weighted_sum"
    embed_init: float = 0.05

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.selector_hidden = tuple(self.selector_hidden)
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"unknown pooling mode {self.pooling!r}")
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")

    @property
    def n_rows(self):
        return self.n_items + self.n_categories

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["selector_hidden"] = list(self.selector_hidden)
        return d


def _layer_names(prefix, n_layers):
    names = []
    for i in range(n_layers):
        tag = "out" if i == n_layers - 1 else str(i + 1)
        names.append((f"{prefix}_w{tag}", f"{prefix}_b{tag}"))
    return names


def predictor_layers(cfg):
    return _layer_names("pred", len(cfg.hidden) + 1)


def selector_layers(cfg):
    return _layer_names("sel", len(cfg.selector_hidden) + 1)


@dataclass
class ParamSet:
    """Predictor parameters ``theta`` (incl. the embedding table) and selector ``phi``."""

    theta: dict
    phi: dict
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def copy(self):
        return ParamSet({k: v.copy() for k, v in self.theta.items()},
                        {k: v.copy() for k, v in self.phi.items()}, self.seed, dict(self.meta))

    def blocks(self):
        for k, v in self.theta.items():
            yield "theta", k, v
        for k, v in self.phi.items():
            yield "phi", k, v

    def equal(self, other):
        return all(np.array_equal(a, b) for (_, _, a), (_, _, b) in zip(self.blocks(), other.blocks()))


def _dense_init(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)


def init_params(cfg, seed=0):
    """Seeded init: U(+-1/sqrt(fan_in)) weights, zero biases, U(+-embed_init) embeddings."""
    rng = np.random.default_rng(seed)
    theta = {"embedding": rng.uniform(-cfg.embed_init, cfg.embed_init, size=(cfg.n_rows, cfg.embed_dim))}
    dims = [2 * cfg.embed_dim, *cfg.hidden, 1]
    for (wn, bn), fi, fo in zip(predictor_layers(cfg), dims[:-1], dims[1:]):
        theta[wn], theta[bn] = _dense_init(rng, fi, fo)
    phi = {}
    dims = [4 * cfg.embed_dim, *cfg.selector_hidden, 1]
    for (wn, bn), fi, fo in zip(selector_layers(cfg), dims[:-1], dims[1:]):
        phi[wn], phi[bn] = _dense_init(rng, fi, fo)
    return ParamSet(theta, phi, seed)


# ---------------------------------------------------------------------------
# embedding rows

@dataclass
class BatchRows:
    """Embedding-table row indices for one batch, already localised to a table."""

    target: np.ndarray  # (2, B): item row, category row
    hist: np.ndarray  # (2, n_valid)
    valid_batch: np.ndarray  # (n_valid,) owning batch row of each history entry
    valid_flat: np.ndarray  # (n_valid,) position in the flattened (B, T) grid
    shape: tuple  # (B, T)


def batch_rows(batch, cfg, table_rows=None):
    """Row indices of ``batch`` in the full table, or in the sub-table ``table_rows``."""
    if batch.item.size and (batch.item.max() >= cfg.n_items or batch.item.min() < 0):
        raise OutOfVocabularyError("target item id outside the vocabulary")
    if batch.cat.size and (batch.cat.max() >= cfg.n_categories or batch.cat.min() < 0):
        raise OutOfVocabularyError("target category id outside the vocabulary")
    B, T = batch.mask.shape
    valid = batch.mask.reshape(-1) > 0
    hi, hc = batch.hist_item.reshape(-1)[valid], batch.hist_cat.reshape(-1)[valid]
    if hi.size and (hi.max() >= cfg.n_items or hc.max() >= cfg.n_categories or min(hi.min(), hc.min()) < 0):
        raise OutOfVocabularyError("history id outside the vocabulary")
    target = np.stack([batch.item, cfg.n_items + batch.cat])
    hist = np.stack([hi, cfg.n_items + hc])
    if table_rows is not None:
        target = np.searchsorted(table_rows, target)
        hist = np.searchsorted(table_rows, hist)
    flat = np.flatnonzero(valid)
    return BatchRows(target, hist, flat // T, flat, (B, T))


def touched_rows(batches, cfg):
    """Sorted unique embedding rows referenced by any of ``batches``."""
    parts = []
    for b in batches:
        valid = b.mask.reshape(-1) > 0
        parts += [b.item, cfg.n_items + b.cat, b.hist_item.reshape(-1)[valid],
                  cfg.n_items + b.hist_cat.reshape(-1)[valid]]
    return np.unique(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# networks

def _dense_stack(x, params, layers):
    for i, (wn, bn) in enumerate(layers):
        x = ad.add(ad.matmul(x, params[wn]), params[bn])
        if i < len(layers) - 1:
            x = ad.sigmoid(x)
    return x


def _embed(table, rows):
    return ad.sum(ad.gather(table, rows), axis=0)


def relevance_scores(hist_emb, target_emb, phi, cfg):
    """Selector scores for paired rows of behaviour and target embeddings, both (n, K)."""
    x = ad.concat([hist_emb, target_emb, ad.sub(hist_emb, target_emb),
                   ad.mul(hist_emb, target_emb)], axis=-1)
    logit = _dense_stack(x, phi, selector_layers(cfg))
    return ad.reshape(ad.sigmoid(logit), (hist_emb.shape[0],))


def pool(hist_emb, scores, rows, mode):
    """Pool valid history embeddings (n_valid, K) into (B, K) using per-behaviour scores."""
    B, T = rows.shape
    if mode == "weighted_sum":
        weighted = ad.mul(hist_emb, ad.reshape(scores, (scores.shape[0], 1)))
        return ad.scatter_add(weighted, rows.valid_batch, B)
    if mode == "softmax":
        grid = ad.reshape(ad.scatter_add(scores, rows.valid_flat, B * T), (B, T))
        penalty = np.full(B * T, _MASKED_LOGIT)
        penalty[rows.valid_flat] = 0.0
        weights = ad.softmax(ad.add(grid, ad.constant(penalty.reshape(B, T))), axis=-1)
        w_valid = ad.gather(ad.reshape(weights, (B * T,)), rows.valid_flat)
        weighted = ad.mul(hist_emb, ad.reshape(w_valid, (w_valid.shape[0], 1)))
        return ad.scatter_add(weighted, rows.valid_batch, B)
    raise ValueError(f"unknown pooling mode {mode!r}")


def forward_batch(theta, phi, batch, cfg, variant="selector", table_rows=None, scores=None):
    """Click probabilities for a batch.

    ``theta``/``phi`` map names to Nodes.  ``table_rows`` says which global
    rows ``theta["embedding"]`` holds when it is a sub-table.  ``scores``
    overrides the selector with fixed per-behaviour weights.
    Returns ``(p_hat, scores, r_hat)``.
    """
    rows = batch_rows(batch, cfg, table_rows)
    table = theta["embedding"]
    target = _embed(table, rows.target)
    hist = _embed(table, rows.hist)
    if scores is None:
        if variant == "base":
            scores = ad.constant(np.ones(rows.hist.shape[1]))
        elif variant == "selector":
            scores = relevance_scores(hist, ad.gather(target, rows.valid_batch), phi, cfg)
        else:
            raise ValueError(f"unknown variant {variant!r}")
        mode = "weighted_sum" if variant == "base" else cfg.pooling
    else:
        scores = ad.constant(scores) if not isinstance(scores, ad.Node) else scores
        mode = "weighted_sum"
    r_hat = pool(hist, scores, rows, mode)
    logit = _dense_stack(ad.concat([r_hat, target], axis=-1), theta, predictor_layers(cfg))
    p_hat = ad.reshape(ad.sigmoid(logit), (len(batch),))
    return p_hat, scores, r_hat


def bce(p_hat, labels):
    """Mean binary cross-entropy of a probability Node against 0/1 labels."""
    p = ad.clip(p_hat, P_CLAMP, 1.0 - P_CLAMP)
    y = ad.constant(labels)
    ll = ad.add(ad.mul(y, ad.log(p)), ad.mul(ad.sub(1.0, y), ad.log(ad.sub(1.0, p))))
    return ad.scale(ad.mean(ll), -1.0)


def batch_loss(theta, phi, batch, cfg, variant="selector", table_rows=None):
    if len(batch) == 0:
        raise ValueError("batch_loss needs a non-empty batch")
    p_hat, _, _ = forward_batch(theta, phi, batch, cfg, variant, table_rows)
    return bce(p_hat, batch.label)


def cross_entropy(y, p_hat):
    p = min(max(float(p_hat), P_CLAMP), 1.0 - P_CLAMP)
    return -y * np.log(p) - (1 - y) * np.log(1 - p)


# ---------------------------------------------------------------------------
# inference helpers (value-only, no graph)

def _const_nodes(arrays):
    return {k: ad.constant(v) for k, v in arrays.items()}


def predict_proba(params, batch, cfg, variant="selector"):
    with ad.no_grad():
        p, _, _ = forward_batch(_const_nodes(params.theta), _const_nodes(params.phi),
                                batch, cfg, variant)
    return p.value


def mean_loss(params, batch, cfg, variant="selector"):
    with ad.no_grad():
        return float(batch_loss(_const_nodes(params.theta), _const_nodes(params.phi),
                                batch, cfg, variant).value)


@dataclass
class Prediction:
    p_hat: float
    s_u: np.ndarray
    r_hat: np.ndarray


def predict(instance, params, cfg, mode=None):
    """CTR of one instance with user-interest selection."""
    if mode is not None and mode != cfg.pooling:
        cfg = ModelConfig(**{**cfg.to_dict(), "pooling": mode})
    with ad.no_grad():
        p, s, r = forward_batch(_const_nodes(params.theta), _const_nodes(params.phi),
                                collate([instance]), cfg, "selector")
    return Prediction(float(p.value[0]), s.value.copy(), r.value[0].copy())


def predict_base(instance, theta, cfg):
    """CTR with the plain sum of history embeddings as the user vector."""
    with ad.no_grad():
        p, _, _ = forward_batch(_const_nodes(theta), {}, collate([instance]), cfg, "base")
    return float(p.value[0])


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"MWCKPT"
_VERSION = 1


def save_checkpoint(path, params, model_cfg, extra=None):
    """Header (magic, version, JSON manifest) followed by raw little-endian float64 blocks."""
    entries = [{"block": blk, "name": k, "shape": list(v.shape)} for blk, k, v in params.blocks()]
    header = json.dumps({"version": _VERSION, "seed": params.seed, "model": model_cfg.to_dict(),
                         "arrays": entries, "extra": extra or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", _VERSION, len(header)))
        fh.write(header)
        for _, _, v in params.blocks():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    off = len(_MAGIC)
    version, hlen = struct.unpack_from("<II", raw, off)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off += 8
    header = json.loads(raw[off:off + hlen])
    off += hlen
    theta, phi = {}, {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(e["shape"])
        off += 8 * n
        (theta if e["block"] == "theta" else phi)[e["name"]] = arr
    cfg = ModelConfig(**header["model"])
    return ParamSet(theta, phi, header["seed"], header.get("extra", {})), cfg


__all__ = [
    "Batch", "BatchRows", "ModelConfig", "OutOfVocabularyError", "ParamSet", "Prediction",
    "batch_loss", "batch_rows", "bce", "cross_entropy", "forward_batch", "init_params",
    "load_checkpoint", "mean_loss", "pool", "predict", "predict_base", "predict_proba",
    "relevance_scores", "save_checkpoint", "touched_rows",
]
