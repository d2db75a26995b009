"""Finite-difference and closed-form checks of the meta-gradient.

The model check uses a K=2 network on two-behaviour histories with batches
of two; every coordinate of a block is probed unless the block is larger
than ``coords_per_block``, in which case a seeded sample is probed plus one
random directional derivative over the whole block.
"""

import numpy as np

from . import autodiff as ad
from . import model as mdl
from . import oracle
from .bilevel import Objective, ctr_objective, hypergradient, inner_update, meta_gradient
from .data import Instance, collate


def tiny_problem(seed=0, hidden=(4, 3), pooling="weighted_sum"):
    """A K=2 model, its parameters and an (in, out) pair of two-instance batches."""
    rng = np.random.default_rng(seed)
    n_items, n_cats = 6, 3
    cfg = mdl.ModelConfig(n_items, n_cats, embed_dim=2, hidden=hidden, selector_hidden=hidden,
                          pooling=pooling, embed_init=0.5)
    params = mdl.init_params(cfg, seed)

    def inst(label):
        items = rng.choice(n_items, size=3, replace=False)
        hist = tuple((int(j), int(j % n_cats)) for j in items[:2])
        return Instance(0, (int(items[2]), int(items[2] % n_cats)), hist, label)

    d_in = collate([inst(1), inst(0)])
    d_out = collate([inst(0), inst(1)])
    return cfg, params, d_in, d_out


def joint_loss_value(theta, phi, d_in, d_out, mu, beta, n_inner, objective):
    """Value of the joint loss from plain arrays (no differentiable unroll)."""
    th = {k: ad.param(v, name=k) for k, v in theta.items()}
    ph = {k: ad.constant(v, name=k) for k, v in phi.items()}
    trace = inner_update(th, ph, d_in, beta, n_inner, objective.inner, create_graph=False)
    with ad.no_grad():
        l_in = objective.inner(trace.theta_nodes[0], ph, d_in)
        l_out = objective.outer({k: ad.constant(v.value) for k, v in trace.theta_nodes[-1].items()}, ph, d_out)
    return float(l_in.value) + mu * float(l_out.value)


def _coords(rng, params, limit):
    out = {}
    for k, v in params.items():
        if v.size > limit:
            out[k] = np.sort(rng.choice(v.size, size=limit, replace=False))
    return out


def check_model(seed=0, n_inner=1, mu=0.7, beta=0.1, hidden=(4, 3), coords_per_block=40,
                corrupt=None, eps=oracle.FD_EPS):
    """Max relative error per parameter block of meta_gradient vs central differences."""
    cfg, params, d_in, d_out = tiny_problem(seed, hidden)
    objective = ctr_objective(cfg)
    g_theta, g_phi, _ = meta_gradient(params.theta, params.phi, d_in, d_out, mu, beta, n_inner, objective)
    grads = {**g_theta, **g_phi}
    if corrupt:
        if corrupt not in grads:
            raise KeyError(f"no parameter block named {corrupt!r}")
        g = grads[corrupt].copy()
        g.reshape(-1)[0] += 1e-2 * max(float(np.abs(g).max()), 1e-3)
        grads[corrupt] = g

    names_theta = list(params.theta)

    def fn(flat):
        theta = {k: flat[k] for k in names_theta}
        phi = {k: flat[k] for k in params.phi}
        return joint_loss_value(theta, phi, d_in, d_out, mu, beta, n_inner, objective)

    allp = {**params.theta, **params.phi}
    rng = np.random.default_rng([seed, 99])
    coords = _coords(rng, allp, coords_per_block)
    fd = oracle.fd_gradient(fn, allp, eps, coords)
    report = {}
    for k in allp:
        if k in coords:
            idx = coords[k]
            err = ad.relative_error(grads[k].reshape(-1)[idx], fd[k].reshape(-1)[idx])
            d = rng.normal(size=allp[k].shape)
            dd = oracle.fd_directional(fn, allp, {k: d}, eps)
            err = max(err, abs(dd - float(np.sum(grads[k] * d))) / max(abs(dd), 1e-12))
        else:
            err = ad.relative_error(grads[k], fd[k])
        report[k] = err
    return report


def check_stub(seed=0, n_inner=1, mu=0.6, beta=0.1, linear_outer=False):
    """meta_gradient vs the closed form on a random quadratic problem."""
    rng = np.random.default_rng(seed)
    stub = oracle.random_stub(rng, linear_outer=linear_outer)
    theta0 = rng.normal(size=stub.n_theta)
    phi = rng.normal(size=stub.n_phi)
    objective = Objective(stub.inner_loss, stub.outer_loss)
    g_theta, g_phi, _ = meta_gradient({"theta": theta0}, {"phi": phi}, stub, stub, mu, beta,
                                      n_inner, objective)
    want_theta, want_phi = oracle.stub_joint_gradient(stub, theta0, phi, mu, beta, n_inner)
    h_phi = hypergradient({"theta": theta0}, {"phi": phi}, stub, stub, beta, n_inner, objective)
    want_h = oracle.stub_hypergradient(stub, theta0, phi, beta, n_inner)
    return {
        "joint_theta": ad.relative_error(g_theta["theta"], want_theta),
        "joint_phi": ad.relative_error(g_phi["phi"], want_phi),
        "hypergradient": ad.relative_error(h_phi["phi"], want_h),
    }


def run_gradcheck(seed=0, n_inner=(1, 2, 3), hidden=(4, 3), coords_per_block=40, corrupt=None):
    model, stub = {}, {}
    for n in n_inner:
        for k, v in check_model(seed, n, hidden=hidden, coords_per_block=coords_per_block,
                                corrupt=corrupt).items():
            model[f"N={n} {k}"] = v
        for k, v in check_stub(seed, n).items():
            stub[f"N={n} {k}"] = v
    return {"model": model, "stub": stub}
