"""Independent reference values for tests: finite differences, pairwise AUC,
and closed-form bilevel solutions on small quadratic problems.

Nothing here goes through the reverse-mode engine except the stub loss
builders, which exist so the engine can be compared against the closed forms.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

FD_EPS = 1e-5
FD_HVP_EPS = 1e-4


def _check_finite(v):
    v = float(v)
    if not np.isfinite(v):
        raise FloatingPointError(f"non-finite function value {v}")
    return v


def fd_gradient(fn, params, eps=FD_EPS, coords=None):
    """Central differences of scalar ``fn(params)`` for each array in ``params``.

    ``coords`` optionally maps a name to flat indices to probe; other entries
    of the returned arrays are NaN.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    out = {}
    for name, arr in work.items():
        flat = arr.reshape(-1)
        idx = range(flat.size) if coords is None or name not in coords else coords[name]
        g = np.zeros(flat.size) if coords is None or name not in coords else np.full(flat.size, np.nan)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = _check_finite(fn(work))
            flat[i] = orig - eps
            down = _check_finite(fn(work))
            flat[i] = orig
            g[i] = (up - down) / (2 * eps)
        out[name] = g.reshape(arr.shape)
    return out


def fd_directional(fn, params, direction, eps=FD_EPS):
    """Central difference of ``fn`` along ``direction`` (a partial mapping of arrays)."""
    plus = {k: v + eps * direction[k] if k in direction else v for k, v in params.items()}
    minus = {k: v - eps * direction[k] if k in direction else v for k, v in params.items()}
    return (_check_finite(fn(plus)) - _check_finite(fn(minus))) / (2 * eps)


def fd_hvp(grad_fn, params, vector, eps=FD_HVP_EPS):
    """``(grad(x + eps v) - grad(x - eps v)) / 2 eps``.

    ``grad_fn(params) -> mapping of arrays``; ``vector`` perturbs a subset of
    ``params`` and the result has whatever keys ``grad_fn`` returns.
    """
    plus = {k: v + eps * vector[k] if k in vector else v for k, v in params.items()}
    minus = {k: v - eps * vector[k] if k in vector else v for k, v in params.items()}
    gp, gm = grad_fn(plus), grad_fn(minus)
    out = {}
    for k in gp:
        d = (np.asarray(gp[k], dtype=np.float64) - np.asarray(gm[k], dtype=np.float64)) / (2 * eps)
        if not np.isfinite(d).all():
            raise FloatingPointError(f"non-finite gradient difference for {k}")
        out[k] = d
    return out


def brute_auc(scores, labels):
    """Fraction of (positive, negative) pairs ordered correctly, ties worth one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos, neg = scores[labels == 1], scores[labels != 1]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


# ---------------------------------------------------------------------------
# quadratic bilevel stubs

@dataclass
class StubProblem:
    """Inner loss ``1/2 (theta - a)^T A (theta - a)`` with ``a = B phi + c``.

    Outer loss ``1/2 (theta - t)^T C (theta - t) + w^T theta + 1/2 lam |phi|^2``.
    With ``C = 0`` the outer loss is linear in theta.
    """

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    C: np.ndarray
    t: np.ndarray
    w: np.ndarray
    lam: float = 0.0

    @property
    def n_theta(self):
        return self.A.shape[0]

    @property
    def n_phi(self):
        return self.B.shape[1]

    def a(self, phi):
        return self.B @ phi + self.c

    # numpy values
    def inner_value(self, theta, phi):
        d = theta - self.a(phi)
        return 0.5 * d @ self.A @ d

    def outer_value(self, theta, phi):
        d = theta - self.t
        return 0.5 * d @ self.C @ d + self.w @ theta + 0.5 * self.lam * phi @ phi

    def inner_grad(self, theta, phi):
        return self.A @ (theta - self.a(phi))

    def outer_grad(self, theta, phi):
        return self.C @ (theta - self.t) + self.w

    # graph builders in the (theta_nodes, phi_nodes, batch) objective shape
    def inner_loss(self, theta, phi, batch=None):
        d = ad.sub(theta["theta"], ad.add(ad.matmul(ad.constant(self.B), phi["phi"]), ad.constant(self.c)))
        return ad.scale(ad.sum(ad.mul(d, ad.matmul(ad.constant(self.A), d))), 0.5)

    def outer_loss(self, theta, phi, batch=None):
        d = ad.sub(theta["theta"], ad.constant(self.t))
        quad = ad.scale(ad.sum(ad.mul(d, ad.matmul(ad.constant(self.C), d))), 0.5)
        lin = ad.sum(ad.mul(ad.constant(self.w), theta["theta"]))
        reg = ad.scale(ad.sum(ad.mul(phi["phi"], phi["phi"])), 0.5 * self.lam)
        return ad.add(ad.add(quad, lin), reg)


def random_stub(rng, n_theta=3, n_phi=2, linear_outer=False, lam=0.1):
    """A well-conditioned stub with SPD ``A`` (eigenvalues in [0.5, 2])."""
    if n_theta > 4:
        raise ValueError("stub dimension is limited to 4")
    q, _ = np.linalg.qr(rng.normal(size=(n_theta, n_theta)))
    A = q @ np.diag(rng.uniform(0.5, 2.0, n_theta)) @ q.T
    A = 0.5 * (A + A.T)
    if linear_outer:
        C = np.zeros((n_theta, n_theta))
    else:
        m = rng.normal(size=(n_theta, n_theta))
        C = m @ m.T / n_theta + 0.1 * np.eye(n_theta)
    return StubProblem(A, rng.normal(size=(n_theta, n_phi)), rng.normal(size=n_theta), C,
                       rng.normal(size=n_theta), rng.normal(size=n_theta), lam)


def stub_iterate(stub, theta0, phi, beta, n):
    """``theta^(N) = M^N (theta0 - a) + a`` with ``M = I - beta A``."""
    M = np.eye(stub.n_theta) - beta * stub.A
    a = stub.a(phi)
    return np.linalg.matrix_power(M, n) @ (theta0 - a) + a


def stub_hypergradient(stub, theta0, phi, beta, n):
    """Closed-form d/dphi of ``L_out(theta^(N)(phi), phi)``."""
    M = np.eye(stub.n_theta) - beta * stub.A
    MN = np.linalg.matrix_power(M, n)
    dtheta_dphi = (np.eye(stub.n_theta) - MN) @ stub.B
    theta_n = stub_iterate(stub, theta0, phi, beta, n)
    return dtheta_dphi.T @ stub.outer_grad(theta_n, phi) + stub.lam * phi


def stub_joint_gradient(stub, theta0, phi, mu, beta, n):
    """Closed-form gradients of ``L_in(theta0, phi) + mu L_out(theta^(N), phi)``.

    Returns ``(d/dtheta0, d/dphi)``.
    """
    M = np.eye(stub.n_theta) - beta * stub.A
    MN = np.linalg.matrix_power(M, n)
    theta_n = stub_iterate(stub, theta0, phi, beta, n)
    g_out = stub.outer_grad(theta_n, phi)
    g_in = stub.inner_grad(theta0, phi)
    d_theta = g_in + mu * MN.T @ g_out
    d_phi = -stub.B.T @ g_in + mu * ((np.eye(stub.n_theta) - MN) @ stub.B).T @ g_out + mu * stub.lam * phi
    return d_theta, d_phi


def stub_implicit_hypergradient(stub, phi):
    """Limit as N grows: theta* = a(phi), so d/dphi L_out(a(phi), phi)."""
    return stub.B.T @ stub.outer_grad(stub.a(phi), phi) + stub.lam * phi


def stub_delta(stub, theta0, phi, beta, n):
    """``-beta sum_j <grad L_in, grad L_out>`` over theta^(0..N-1) in closed form."""
    total = 0.0
    for k in range(n):
        th = stub_iterate(stub, theta0, phi, beta, k)
        total += stub.inner_grad(th, phi) @ stub.outer_grad(th, phi)
    return -beta * total
