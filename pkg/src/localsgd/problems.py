"""Distributed finite-sum objectives.

Two kinds are supported: heterogeneous quadratics built from orthonormal
directions, and l2-regularized logistic regression on a partitioned dataset.
Both store their components as a dense ``(n, m, d)`` array so all per-client
work is vectorized over clients.  Every reduction runs along the last,
contiguous axis, which makes each client's result independent of which other
clients are evaluated alongside it.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse.linalg
from scipy.special import expit


class OptimumNotCertified(RuntimeError):
    pass


@dataclass(frozen=True)
class Optimum:
    x: np.ndarray
    f: float
    grad_norm: float


@dataclass(frozen=True)
class HeterogeneityReport:
    zeta_sq_at: float
    zeta_star_sq: float | None
    sigma_star_sq: float | None


@dataclass(frozen=True, eq=False)
class GlobalProblem:
    kind: str
    n: int
    m: int
    d: int
    mu: float
    L: float
    maxLij: float
    A: np.ndarray = field(repr=False)
    AT: np.ndarray = field(repr=False)
    z: np.ndarray | None = field(default=None, repr=False)
    b: np.ndarray | None = field(default=None, repr=False)
    optimum: Optimum | None = None
    L_flagged: bool = False

    # -- vectorized primitives; X holds one row per listed client ---------

    def _clients(self, clients):
        return np.arange(self.n) if clients is None else np.asarray(clients, dtype=np.int64)

    def _rows(self, X, c):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.d:
            raise ValueError(f"expected vectors of length {self.d}, got {X.shape[-1]}")
        if X.ndim == 1:
            X = np.broadcast_to(X, (len(c), self.d))
        return X

    def local_values(self, X, clients=None) -> np.ndarray:
        c = self._clients(clients)
        X = self._rows(X, c)
        reg = 0.5 * self.mu * (X * X).sum(-1)
        if self.kind == "quadratic":
            u = (self.A[c] * (X - self.z[c])[:, None, :]).sum(-1)
            return reg + 0.5 * (1.0 - self.mu) * (u * u).sum(-1)
        t = (self.A[c] * X[:, None, :]).sum(-1) * self.b[c]
        return reg + np.logaddexp(0.0, t).sum(-1) / self.m

    def local_grads(self, X, clients=None) -> np.ndarray:
        c = self._clients(clients)
        X = self._rows(X, c)
        if self.kind == "quadratic":
            u = (self.A[c] * (X - self.z[c])[:, None, :]).sum(-1)
            w = (1.0 - self.mu) * u
        else:
            t = (self.A[c] * X[:, None, :]).sum(-1) * self.b[c]
            w = self.b[c] * expit(t) / self.m
        return self.mu * X + (self.AT[c] * w[:, None, :]).sum(-1)

    def component_grads(self, X, clients, J) -> np.ndarray:
        """Gradients of f_{i,j}(x_i) for a batch of indices per client.

        ``J`` has shape (len(clients), r); the result is (len(clients), r, d).
        """
        c = self._clients(clients)
        X = self._rows(X, c)
        J = np.asarray(J, dtype=np.int64)
        if J.size and (J.min() < 0 or J.max() >= self.m):
            raise IndexError(f"component index out of range [0, {self.m})")
        a = self.A[c[:, None], J]  # (nc, r, d)
        if self.kind == "quadratic":
            s = (a * (X - self.z[c])[:, None, :]).sum(-1)
            coef = (1.0 - self.mu) * self.m * s
        else:
            bj = self.b[c[:, None], J]
            t = (a * X[:, None, :]).sum(-1) * bj
            coef = bj * expit(t)
        return self.mu * X[:, None, :] + coef[..., None] * a

    def all_component_grads(self, x, i: int) -> np.ndarray:
        """All m component gradients of client i at x, shape (m, d)."""
        J = np.arange(self.m)[None, :]
        return self.component_grads(np.asarray(x)[None, :], [i], J)[0]

    # -- scalar conveniences ----------------------------------------------

    def value_and_grad(self, i: int, x) -> tuple[float, np.ndarray]:
        if not 0 <= i < self.n:
            raise IndexError(f"client index {i} out of range [0, {self.n})")
        x = np.asarray(x, dtype=np.float64)
        return float(self.local_values(x[None], [i])[0]), self.local_grads(x[None], [i])[0]

    def component_grad(self, i: int, j: int, x) -> np.ndarray:
        if not 0 <= i < self.n:
            raise IndexError(f"client index {i} out of range [0, {self.n})")
        x = np.asarray(x, dtype=np.float64)
        return self.component_grads(x[None], [i], [[j]])[0, 0]

    def f(self, x) -> float:
        return float(pairwise_mean(self.local_values(x)))

    def grad(self, x) -> np.ndarray:
        return pairwise_mean(self.local_grads(x))

    def f_gap(self, x) -> float:
        if self.optimum is None:
            return math.nan
        return self.f(x) - self.optimum.f

    def hessian(self, x) -> np.ndarray:
        """Dense Hessian of f (used by the exact solver only)."""
        H = self.mu * np.eye(self.d)
        if self.kind == "quadratic":
            for i in range(self.n):
                H += (1.0 - self.mu) / self.n * (self.A[i].T @ self.A[i])
            return H
        for i in range(self.n):
            t = (self.A[i] @ x) * self.b[i]
            s = expit(t)
            w = s * (1.0 - s) / (self.m * self.n)
            H += (self.A[i].T * w) @ self.A[i]
        return H

    def with_optimum(self, opt: Optimum | None) -> "GlobalProblem":
        return dataclasses.replace(self, optimum=opt)

    @property
    def L_cal(self) -> float:
        # expected smoothness of uniform single-index sampling
        return self.maxLij


def pairwise_mean(rows: np.ndarray) -> np.ndarray:
    """Mean over the leading axis by pairwise summation in index order."""
    return pairwise_sum(rows) / rows.shape[0]


def pairwise_sum(rows: np.ndarray):
    k = rows.shape[0]
    if k == 1:
        return rows[0].copy() if isinstance(rows[0], np.ndarray) else rows[0]
    h = k // 2
    return pairwise_sum(rows[:h]) + pairwise_sum(rows[h:])


# -- construction ---------------------------------------------------------


def _finish(kind, A, mu, z=None, b=None, L=None, maxLij=None, flagged=False):
    n, m, d = A.shape
    A = np.ascontiguousarray(A, dtype=np.float64)
    AT = np.ascontiguousarray(np.swapaxes(A, 1, 2))
    p = GlobalProblem(kind, n, m, d, float(mu), float(L), float(maxLij), A, AT,
                      z=z, b=b, L_flagged=flagged)
    return p


def quadratic_problem(A: np.ndarray, z: np.ndarray, mu: float, solve: bool = True) -> GlobalProblem:
    """Quadratic clients f_i = mu/2|x|^2 + (1-mu)/2 |A_i (x - z_i)|^2.

    Rows of each A_i are expected to be orthonormal, which makes L = 1.
    """
    n, m, d = A.shape
    if not 0.0 <= mu <= 1.0:
        raise ValueError("mu must lie in [0, 1]")
    lam = max(float(np.linalg.eigvalsh(A[i] @ A[i].T).max()) for i in range(n))
    L = mu + (1.0 - mu) * lam
    row_sq = float((A * A).sum(-1).max())
    maxLij = mu + (1.0 - mu) * m * row_sq
    p = _finish("quadratic", A, mu, z=np.ascontiguousarray(z, dtype=np.float64), L=L, maxLij=maxLij)
    return p.with_optimum(exact_optimum(p)) if solve else p


def logistic_problem(A: np.ndarray, b: np.ndarray, mu: float, solve: bool = True) -> GlobalProblem:
    """Logistic clients with components log(1 + exp(b<a,x>)) + mu/2|x|^2."""
    n, m, d = A.shape
    L, flagged = _logistic_L(A, mu)
    maxLij = float((A * A).sum(-1).max()) / 4.0 + mu
    p = _finish("logistic", A, mu, b=np.ascontiguousarray(b, dtype=np.float64), L=L,
                maxLij=maxLij, flagged=flagged)
    return p.with_optimum(exact_optimum(p)) if solve else p


def _logistic_L(A, mu):
    n, m, d = A.shape
    best = 0.0
    flagged = False
    for i in range(n):
        if d <= 2000:
            lam = float(np.linalg.eigvalsh(A[i].T @ A[i] / m)[-1])
        else:
            Ai = A[i]
            op = scipy.sparse.linalg.LinearOperator((d, d), matvec=lambda v, Ai=Ai: Ai.T @ (Ai @ v) / m)
            try:
                lam = float(scipy.sparse.linalg.eigsh(op, k=1, which="LA", maxiter=5000,
                                                      return_eigenvectors=False)[0])
            except scipy.sparse.linalg.ArpackNoConvergence:
                lam = float((Ai * Ai).sum(-1).max())
                flagged = True
        best = max(best, lam)
    return best / 4.0 + mu, flagged


def make_logistic(ds, part, mu: float, normalize: bool = True, solve: bool = True) -> GlobalProblem:
    """Build the logistic problem for a partitioned dataset.

    With ``normalize`` every nonzero row is rescaled to Euclidean norm 2, so
    each component has smoothness 1 + mu.
    """
    X = ds.dense()
    y = ds.labels.astype(np.float64)
    if normalize:
        norms = np.sqrt((X * X).sum(-1))
        nz = norms > 0
        X[nz] *= (2.0 / norms[nz])[:, None]
    idx = np.asarray(part.shards, dtype=np.int64)  # (n, m)
    return logistic_problem(X[idx], y[idx], mu, solve=solve)


# -- operations -----------------------------------------------------------


def value_and_grad(p: GlobalProblem, i: int, x):
    return p.value_and_grad(i, x)


def component_grad(p: GlobalProblem, i: int, j: int, x):
    return p.component_grad(i, j, x)


def _certified(p, x, g, tol):
    return float(np.linalg.norm(g)) <= tol * max(1.0, float(np.linalg.norm(x)))


def exact_optimum(p: GlobalProblem, tol: float = 1e-12, max_iter: int = 200_000) -> Optimum:
    """Minimizer of f with a gradient-norm certificate.

    Quadratics use a dense direct solve.  Logistic problems use damped Newton
    steps (when the Hessian fits in memory) followed by gradient descent with
    stepsize 1/L; either way the answer is certified by the gradient norm.
    """
    if p.kind == "quadratic":
        H = p.hessian(None)
        rhs = np.zeros(p.d)
        for i in range(p.n):
            rhs += (1.0 - p.mu) / p.n * (p.A[i].T @ (p.A[i] @ p.z[i]))
        x = scipy.linalg.solve(H, rhs, assume_a="pos")
        # one refinement step squeezes the residual toward rounding level
        x = x - scipy.linalg.solve(H, p.grad(x), assume_a="pos")
        g = p.grad(x)
        gn = float(np.linalg.norm(g))
        if gn > 1e-8 * max(1.0, float(np.linalg.norm(x))):
            raise OptimumNotCertified(f"quadratic solve residual {gn:.3e}")
        return Optimum(x, p.f(x), gn)

    if p.mu <= 0:
        raise OptimumNotCertified("logistic optimum requires mu > 0")
    x = np.zeros(p.d)
    fx = p.f(x)
    g = p.grad(x)
    if p.d <= 2000:
        for _ in range(100):
            if _certified(p, x, g, tol):
                break
            step = scipy.linalg.solve(p.hessian(x), g, assume_a="pos")
            t = 1.0
            while t > 1e-12:
                xn = x - t * step
                fn = p.f(xn)
                if fn <= fx - 1e-4 * t * float(g @ step) or t < 1e-6:
                    break
                t *= 0.5
            if fn > fx and t < 1e-6:
                break
            x, fx, g = xn, fn, p.grad(xn)
    it = 0
    while not _certified(p, x, g, tol) and it < max_iter:
        x = x - g / p.L
        g = p.grad(x)
        it += 1
    if not _certified(p, x, g, tol):
        raise OptimumNotCertified(f"gradient norm {np.linalg.norm(g):.3e} after {it} descent steps")
    return Optimum(x, p.f(x), float(np.linalg.norm(g)))


def measure_heterogeneity(p: GlobalProblem, probes) -> HeterogeneityReport:
    probes = [np.asarray(x, dtype=np.float64) for x in probes]
    if not probes:
        raise ValueError("at least one probe point is required")
    zeta = 0.0
    for x in probes:
        G = p.local_grads(x)
        dev = G - pairwise_mean(G)
        zeta = max(zeta, float(pairwise_mean((dev * dev).sum(-1))))
    zeta_star = sigma_star = None
    if p.optimum is not None:
        xs = p.optimum.x
        G = p.local_grads(xs)
        zeta_star = float(pairwise_mean((G * G).sum(-1)))
        sigma_star = sigma_star_sq(p)
    return HeterogeneityReport(zeta, zeta_star, sigma_star)


def sigma_star_sq(p: GlobalProblem, per_client: bool = False):
    """Variance of uniform single-index sampling at the optimum."""
    xs = p.optimum.x
    G = p.local_grads(xs)
    out = np.empty(p.n)
    for i in range(p.n):
        C = p.all_component_grads(xs, i) - G[i]
        out[i] = float((C * C).sum(-1).mean())
    return out if per_client else float(out.mean())


def smoothness_constants(p: GlobalProblem) -> tuple[float, float, float]:
    return p.L, p.maxLij, p.L_cal
