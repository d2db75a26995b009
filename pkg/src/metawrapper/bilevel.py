"""The differentiable wrapping operator and the joint bilevel training loop.

The inner loop runs ``n_inner`` gradient steps on the predictor parameters
with the selector held fixed, recording every step in the autodiff graph so
the out-of-bag loss at the unrolled parameters can be differentiated back
into both the selector and the starting predictor.

Method variants (ablation components in brackets):

* ``base``            -- sum-pooled predictor, no selector
* ``attention_only``  -- selector + predictor on the in-bag loss   [C1]   (M1)
* ``m2``              -- adds the out-of-bag loss at un-updated theta [C1,C2] (M2)
* ``gdmax``           -- out-of-bag loss at an inner-trained, frozen theta [C1-C3] (M3)
* ``meta_wrapper``    -- out-of-bag loss through the unrolled inner loop [C1-C4] (M4)
"""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .data import PackedDataset, task_indices
from .evaluation import auc_or_none

log = logging.getLogger(__name__)

METHODS = ("base", "attention_only", "m2", "gdmax", "meta_wrapper")
METHOD_ALIASES = {"m1": "attention_only", "fs": "attention_only", "din": "attention_only",
                  "m3": "gdmax", "m4": "meta_wrapper", "mw": "meta_wrapper"}
LR_SCHEDULES = ("exponential", "invsqrt", "constant")
DIVERGENCE_LIMIT = 1e6


def canonical_method(name):
    key = name.lower()
    key = METHOD_ALIASES.get(key, key)
    if key not in METHODS:
        raise ValueError(f"unknown method {name!r}; expected one of {METHODS}")
    return key


class InnerLoopError(FloatingPointError):
    def __init__(self, step, cause=None):
        self.step = step
        super().__init__(f"non-finite gradient at inner step {step}" + (f" ({cause})" if cause else ""))


class DivergenceError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


@dataclass
class TrainConfig:
    method: str = "meta_wrapper"
    mu: float = 0.8
    beta: float = 0.01
    n_inner: int = 1
    lr: float = 0.1
    lr_schedule: str = "exponential"
    lr_decay: float = 0.9
    batch_size: int = 128
    epochs: int = 30
    in_ratio: float = 0.8
    weight_decay: float = 0.0
    seed: int = 0
    eval_train: bool = False

    def __post_init__(self):
        self.method = canonical_method(self.method)
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("mu must lie in [0, 1]")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.n_inner < 0:
            raise ValueError("n_inner must be >= 0")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class LRSchedule:
    kind: str = "exponential"
    gamma0: float = 0.1
    decay: float = 0.9
    steps_per_epoch: int = 1


def lr_schedule(i, spec):
    """Outer learning rate for 1-based step ``i``."""
    if i < 1:
        raise ValueError("step index starts at 1")
    if spec.kind == "exponential":
        epoch = (i - 1) // max(spec.steps_per_epoch, 1)
        return spec.gamma0 * spec.decay ** epoch
    if spec.kind == "invsqrt":
        return spec.gamma0 * i ** -0.5
    if spec.kind == "constant":
        return spec.gamma0
    raise ValueError(f"unknown lr schedule {spec.kind!r}")


# ---------------------------------------------------------------------------
# objectives

@dataclass
class Objective:
    """Inner and outer scalar losses: ``fn(theta_nodes, phi_nodes, batch) -> Node``."""

    inner: object
    outer: object


def ctr_objective(model_cfg, variant="selector", table_rows=None):
    def loss(theta, phi, batch):
        return mdl.batch_loss(theta, phi, batch, model_cfg, variant, table_rows)
    return Objective(loss, loss)


@dataclass
class InnerTrace:
    theta_nodes: list  # theta^(0..N), each a dict name -> Node
    beta: float
    d_in: object
    inner_losses: list = field(default_factory=list)  # L_in(theta^(j)) for j < N
    inner_grads: list = field(default_factory=list)  # grad L_in at theta^(j) for j < N


def _as_leaves(theta):
    out = {}
    for k, v in theta.items():
        if isinstance(v, ad.Node):
            out[k] = v if not v.parents else ad.detach(v)
        else:
            out[k] = ad.param(v, name=k)
    return out


def inner_update(theta, phi, d_in, beta, n_steps, loss_fn, create_graph=True):
    """Run ``n_steps`` of GD on theta as graph nodes; ``theta`` itself is untouched."""
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    if beta <= 0:
        raise ValueError("beta must be positive")
    cur = _as_leaves(theta)
    trace = InnerTrace([cur], beta, d_in)
    for j in range(1, n_steps + 1):
        try:
            loss = loss_fn(cur, phi, d_in)
            grads = ad.gradient(loss, cur, create_graph=create_graph)
        except ad.NonFiniteError as exc:
            raise InnerLoopError(j, exc) from exc
        trace.inner_losses.append(loss)
        trace.inner_grads.append(grads)
        cur = {k: ad.sub(cur[k], ad.scale(grads[k], beta)) for k in cur}
        trace.theta_nodes.append(cur)
    return trace


def joint_loss(theta, phi, d_in, d_out, mu, beta, n_inner, objective):
    """``L_in(theta, phi) + mu * L_out(U_phi(theta), phi)``; returns (Node, InnerTrace)."""
    trace = inner_update(theta, phi, d_in, beta, n_inner, objective.inner)
    theta0 = trace.theta_nodes[0]
    l_in = trace.inner_losses[0] if trace.inner_losses else objective.inner(theta0, phi, d_in)
    if d_out is None:
        return l_in, trace
    l_out = objective.outer(trace.theta_nodes[-1], phi, d_out)
    return ad.add(l_in, ad.scale(l_out, mu)), trace


def ablation_terms(theta, phi, d_in, d_out, beta, n_inner, objective, create_graph=False):
    """First-order decomposition of the unrolled out-of-bag loss.

    Returns ``(first_term, delta_term)`` Nodes: the out-of-bag loss at the
    un-updated theta, and ``-beta * sum_j <grad L_in, grad L_out>`` over the
    inner iterates theta^(0..N-1).
    """
    trace = inner_update(theta, phi, d_in, beta, n_inner, objective.inner, create_graph=True)
    first = objective.outer(trace.theta_nodes[0], phi, d_out)
    delta = None
    for k in range(n_inner):
        state = trace.theta_nodes[k]
        g_in = trace.inner_grads[k]
        g_out = ad.gradient(objective.outer(state, phi, d_out), state, create_graph=create_graph)
        for name in state:
            term = ad.sum(ad.mul(g_in[name], g_out[name]))
            delta = term if delta is None else ad.add(delta, term)
    delta = ad.constant(0.0) if delta is None else ad.scale(delta, -beta)
    return first, delta


def taylor_residual(theta, phi, d_in, d_out, beta, n_inner, objective):
    """``|L_out(theta^(N)) - L_out(theta^(0)) - Delta|`` as a float."""
    first, delta = ablation_terms(theta, phi, d_in, d_out, beta, n_inner, objective)
    trace = inner_update(theta, phi, d_in, beta, n_inner, objective.inner, create_graph=False)
    with ad.no_grad():
        unrolled = objective.outer(trace.theta_nodes[-1], phi, d_out)
    return abs(float(unrolled.value) - float(first.value) - float(delta.value))


def method_loss(method, theta, phi, d_in, d_out, cfg, objective, base_objective=None):
    """The scalar each training method minimises at one step."""
    has_out = d_out is not None and len(d_out) > 0
    if method == "base":
        return base_objective.inner(theta, phi, d_in)
    if method == "attention_only":
        return objective.inner(theta, phi, d_in)
    if method == "m2":
        l_in = objective.inner(theta, phi, d_in)
        if not has_out:
            return l_in
        return ad.add(l_in, ad.scale(objective.outer(theta, phi, d_out), cfg.mu))
    if method == "gdmax":
        l_in = objective.inner(theta, phi, d_in)
        if not has_out:
            return l_in
        trace = inner_update(theta, phi, d_in, cfg.beta, cfg.n_inner, objective.inner,
                             create_graph=False)
        frozen = {k: ad.constant(v.value) for k, v in trace.theta_nodes[-1].items()}
        return ad.add(l_in, ad.scale(objective.outer(frozen, phi, d_out), cfg.mu))
    if method == "meta_wrapper":
        loss, _ = joint_loss(theta, phi, d_in, d_out if has_out else None, cfg.mu, cfg.beta,
                             cfg.n_inner, objective)
        return loss
    raise ValueError(f"unknown method {method!r}")


def meta_gradient(theta, phi, d_in, d_out, mu, beta, n_inner, objective):
    """Gradient of the joint loss w.r.t. theta and phi (arrays in, arrays out).

    Backpropagating through the unrolled steps yields the direct out-of-bag
    term plus one Hessian-vector product per inner step for phi, and the
    in-bag gradient plus the path through theta^(0) for theta.
    """
    theta_n = {k: ad.param(v, name=k) for k, v in theta.items()}
    phi_n = {k: ad.param(v, name=k) for k, v in phi.items()}
    loss, _ = joint_loss(theta_n, phi_n, d_in, d_out, mu, beta, n_inner, objective)
    grads = ad.gradient(loss, {**theta_n, **phi_n})
    g = grads.arrays()
    return ({k: g[k] for k in theta}, {k: g[k] for k in phi}, float(loss.value))


def hypergradient(theta, phi, d_in, d_out, beta, n_inner, objective):
    """d/dphi of ``L_out(theta^(N)(phi), phi)`` with theta^(0) held fixed."""
    phi_n = {k: ad.param(v, name=k) for k, v in phi.items()}
    trace = inner_update(theta, phi_n, d_in, beta, n_inner, objective.inner, create_graph=True)
    loss = objective.outer(trace.theta_nodes[-1], phi_n, d_out)
    return ad.gradient(loss, phi_n).arrays()


# ---------------------------------------------------------------------------
# training

@dataclass
class RunMetrics:
    epochs: list = field(default_factory=list)
    grad_check: dict = field(default_factory=dict)

    TIMING_FIELDS = ("step_ms_mean",)

    def to_jsonl(self, path=None, include_timing=True):
        lines = []
        for rec in self.epochs:
            rec = {k: v for k, v in rec.items() if include_timing or k not in self.TIMING_FIELDS}
            lines.append(json.dumps(rec))
        text = "\n".join(lines) + ("\n" if lines else "")
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def series(self, key):
        return [rec[key] for rec in self.epochs]


def _step_nodes(params, rows):
    theta = {}
    for k, v in params.theta.items():
        theta[k] = ad.param(v[rows] if k == "embedding" else v, name=k)
    phi = {k: ad.param(v, name=k) for k, v in params.phi.items()}
    return theta, phi


class Trainer:
    """Holds packed data and parameters for one run of mini-batch training."""

    def __init__(self, dataset, model_cfg, cfg, params=None):
        self.dataset = dataset
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.train_data = PackedDataset(dataset.train)
        self.valid_data = PackedDataset(dataset.valid) if dataset.valid else None
        self.test_data = PackedDataset(dataset.test) if dataset.test else None
        self.params = params.copy() if params is not None else mdl.init_params(model_cfg, cfg.seed)
        self.variant = "base" if cfg.method == "base" else "selector"
        self.rng = np.random.default_rng([cfg.seed, 1])
        n_in = min(max(int(round(len(self.train_data) * cfg.in_ratio)), 1), max(len(self.train_data) - 1, 1))
        self.schedule = LRSchedule(cfg.lr_schedule, cfg.lr, cfg.lr_decay,
                                   math.ceil(n_in / cfg.batch_size))
        self.step_index = 0

    def step_gradients(self, d_in, d_out):
        """One outer-step gradient; returns (grads by name, table rows, loss value)."""
        batches = [d_in] + ([d_out] if len(d_out) else [])
        rows = mdl.touched_rows(batches, self.model_cfg)
        theta, phi = _step_nodes(self.params, rows)
        objective = ctr_objective(self.model_cfg, "selector", rows)
        base_objective = ctr_objective(self.model_cfg, "base", rows)
        loss = method_loss(self.cfg.method, theta, phi, d_in, d_out, self.cfg, objective,
                           base_objective)
        grads = ad.gradient(loss, {**theta, **phi})
        return grads.arrays(), rows, float(loss.value)

    def apply(self, grads, rows, gamma):
        wd = self.cfg.weight_decay
        for k, v in self.params.theta.items():
            g = grads[k]
            if k == "embedding":
                sub = v[rows]
                v[rows] = sub - gamma * (g + wd * sub if wd else g)
            else:
                self.params.theta[k] = v - gamma * (g + wd * v if wd else g)
        if self.cfg.method == "base":
            return
        for k, v in self.params.phi.items():
            g = grads[k]
            self.params.phi[k] = v - gamma * (g + wd * v if wd else g)

    def train_step(self, d_in, d_out):
        self.step_index += 1
        gamma = lr_schedule(self.step_index, self.schedule)
        grads, rows, loss = self.step_gradients(d_in, d_out)
        if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            raise DivergenceError(f"loss {loss} at step {self.step_index}",
                                  {"step": self.step_index, "loss": loss})
        self.apply(grads, rows, gamma)
        return loss

    def evaluate(self, data):
        if data is None or len(data) == 0:
            return None, None
        batch = data.all()
        p = mdl.predict_proba(self.params, batch, self.model_cfg, self.variant)
        return auc_or_none(p, batch.label), mdl.mean_loss(self.params, batch, self.model_cfg, self.variant)

    def run_epoch(self, epoch):
        try:
            return self._run_epoch(epoch)
        except (ad.NonFiniteError, InnerLoopError) as exc:
            raise DivergenceError(f"non-finite value at epoch {epoch}, step {self.step_index}: {exc}",
                                  {"epoch": epoch, "step": self.step_index}) from exc

    def _run_epoch(self, epoch):
        losses, inner, oob, times = [], [], [], []
        for in_idx, out_idx in task_indices(len(self.train_data), self.cfg.in_ratio,
                                            self.cfg.batch_size, self.rng):
            d_in, d_out = self.train_data.take(in_idx), self.train_data.take(out_idx)
            with ad.no_grad():
                theta_c = {k: ad.constant(v) for k, v in self.params.theta.items()}
                phi_c = {k: ad.constant(v) for k, v in self.params.phi.items()}
                inner.append(float(mdl.batch_loss(theta_c, phi_c, d_in, self.model_cfg, self.variant).value))
                if len(d_out):
                    oob.append(float(mdl.batch_loss(theta_c, phi_c, d_out, self.model_cfg, self.variant).value))
            t0 = time.perf_counter()
            losses.append(self.train_step(d_in, d_out))
            times.append(time.perf_counter() - t0)
        valid_auc, valid_loss = self.evaluate(self.valid_data)
        test_auc, test_loss = self.evaluate(self.test_data)
        rec = {
            "epoch": epoch,
            "train_loss": float(np.mean(inner)) if inner else None,
            "oob_loss": float(np.mean(oob)) if oob else None,
            "joint_loss": float(np.mean(losses)) if losses else None,
            "valid_auc": valid_auc,
            "valid_loss": valid_loss,
            "test_auc": test_auc,
            "test_loss": test_loss,
        }
        if self.cfg.eval_train:
            rec["full_train_loss"] = self.evaluate(self.train_data)[1]
        rec["step_ms_mean"] = 1e3 * float(np.mean(times)) if times else 0.0
        return rec


def train(dataset, model_cfg, cfg, params=None, on_epoch=None):
    """Mini-batch training of the configured method; returns (ParamSet, RunMetrics)."""
    trainer = Trainer(dataset, model_cfg, cfg, params)
    metrics = RunMetrics()
    for epoch in range(1, cfg.epochs + 1):
        rec = trainer.run_epoch(epoch)
        metrics.epochs.append(rec)
        log.info("epoch %d %s", epoch, rec)
        if on_epoch is not None:
            on_epoch(rec)
    return trainer.params, metrics
