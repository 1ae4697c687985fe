"""Simulation of the local update rule with exact averaging."""

from __future__ import annotations

import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import methods, rng
from .methods import MethodSpec, SimState
from .problems import GlobalProblem, pairwise_mean

CSV_HEADER = ("k", "comm_rounds", "grad_evals", "f_gap_virtual", "f_gap_avg", "dist_sq", "V_k")
DIVERGENCE_FACTOR = 1e12


class DivergenceError(RuntimeError):
    def __init__(self, k: int, reason: str):
        super().__init__(f"diverged at iteration {k}: {reason}")
        self.k = k


@dataclass
class RunConfig:
    spec: MethodSpec
    gamma: float
    K: int
    eta_weight: float = 0.0
    x0: np.ndarray | None = None
    master_seed: int = 0
    record_every: int = 1

    def __post_init__(self):
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if not 0.0 <= self.eta_weight < 1.0:
            raise ValueError("eta_weight must lie in [0, 1)")
        if self.record_every < 1:
            raise ValueError("record_every must be at least 1")


@dataclass
class Trajectory:
    k: list = field(default_factory=list)
    comm_rounds: list = field(default_factory=list)
    grad_evals: list = field(default_factory=list)
    f_gap_virtual: list = field(default_factory=list)
    f_gap_avg: list = field(default_factory=list)
    dist_sq: list = field(default_factory=list)
    V_k: list = field(default_factory=list)
    final_x_avg: np.ndarray | None = None
    final_x_virtual: np.ndarray | None = None
    total_grad_evals: int = 0
    stopped_at: int | None = None
    states: list = field(default_factory=list)  # optional snapshots

    def rows(self):
        return zip(*(getattr(self, c) for c in CSV_HEADER))

    def to_csv(self, fh=None) -> str | None:
        out = io.StringIO() if fh is None else fh
        out.write(",".join(CSV_HEADER) + "\n")
        for r in self.rows():
            out.write(f"{r[0]},{r[1]},{r[2]}," + ",".join(f"{v:.17g}" for v in r[3:]) + "\n")
        return out.getvalue() if fh is None else None


def virtual_iterate(X: np.ndarray) -> np.ndarray:
    if (X == X[0]).all():
        # consensus: averaging identical rows could still round
        return X[0].copy()
    return pairwise_mean(X)


def virtual_and_discrepancy(X: np.ndarray) -> tuple[np.ndarray, float]:
    xv = virtual_iterate(X)
    D = X - xv
    return xv, float(pairwise_mean((D * D).sum(-1)))


class WeightedAverager:
    """Running average with weights w_k = (1-eta)^-(k+1), kept normalized."""

    def __init__(self, x0, eta: float = 0.0):
        if not 0.0 <= eta < 1.0:
            raise ValueError("eta must lie in [0, 1)")
        self.eta = eta
        self.x = np.array(x0, dtype=np.float64)
        self._s = 1.0  # W_k / w_k

    def push(self, x) -> np.ndarray:
        self._s = 1.0 + (1.0 - self.eta) * self._s
        rho = 1.0 / self._s
        self.x = (1.0 - rho) * self.x + rho * np.asarray(x)
        return self.x


def weighted_average(iterates, eta: float = 0.0) -> np.ndarray:
    it = iter(iterates)
    avg = WeightedAverager(next(it), eta)
    for x in it:
        avg.push(x)
    return avg.x


class _Pool:
    def __init__(self, n: int, threads: int):
        self.chunks = [c for c in np.array_split(np.arange(n), max(1, min(threads, n))) if c.size]
        self.ex = ThreadPoolExecutor(len(self.chunks)) if len(self.chunks) > 1 else None

    def directions(self, spec, problem, st, k, seed):
        if self.ex is None:
            return methods.sample_direction(spec, problem, st, self.chunks[0], k, seed)
        parts = list(self.ex.map(lambda c: methods.sample_direction(spec, problem, st, c, k, seed), self.chunks))
        return (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
                sum(p[2] for p in parts))

    def close(self):
        if self.ex is not None:
            self.ex.shutdown()


def step(spec: MethodSpec, problem: GlobalProblem, st: SimState, k: int, gamma: float, seed,
         pool: _Pool | None = None) -> tuple[bool, int]:
    """One iteration in place; returns (communicated, gradient evaluations).

    ``seed`` is a master seed or an :class:`rng.Streams` built from one.
    """
    own = pool is None
    pool = pool or _Pool(problem.n, 1)
    try:
        xv = virtual_iterate(st.X)
        streams = rng.as_streams(seed, problem.n)
        comm = methods.is_communication(spec.loop, k, streams)
        G, a, evals = pool.directions(spec, problem, st, k, streams)
        X_prev = st.X
        Xn = X_prev - gamma * G
        if comm:
            Xn[:] = pairwise_mean(Xn)
        if not np.isfinite(Xn).all():
            raise DivergenceError(k, "non-finite iterate")
        st.X = Xn
        evals += methods.refresh_state(spec, problem, st, X_prev, xv, comm, k, streams, a)
        return comm, evals
    finally:
        if own:
            pool.close()


def run(cfg: RunConfig, problem: GlobalProblem, threads: int = 1, stop_gap: float | None = None,
        snapshot_every: int | None = None) -> Trajectory:
    """Execute K iterations and record metrics.

    Rows are written at k = 0, every ``record_every`` iterations, after every
    communication, and at the end.  ``stop_gap`` ends the run early once the
    virtual gap falls to that level at a recorded row.
    """
    spec = cfg.spec
    x0 = np.zeros(problem.d) if cfg.x0 is None else np.asarray(cfg.x0, dtype=np.float64)
    streams = rng.Streams(cfg.master_seed, problem.n)
    st, evals = methods.init_state(spec, problem, x0, streams)
    tr = Trajectory()
    avg = WeightedAverager(x0, cfg.eta_weight)
    opt = problem.optimum
    comm_rounds = 0
    gap0 = None

    def record(k):
        nonlocal gap0
        xv, V = virtual_and_discrepancy(st.X)
        if opt is not None:
            gv = problem.f(xv) - opt.f
            ga = problem.f(avg.x) - opt.f
            dist = float(((xv - opt.x) ** 2).sum())
        else:
            gv = ga = dist = math.nan
        if gap0 is None:
            # a start at the optimum has no usable initial gap; floor it at rounding scale
            gap0 = max(gv, math.sqrt(np.finfo(float).eps) * max(1.0, abs(opt.f))) if opt is not None else None
        elif opt is not None and not (gv <= DIVERGENCE_FACTOR * gap0):
            raise DivergenceError(k, f"gap {gv:.3e} exceeds {DIVERGENCE_FACTOR:g} x initial")
        tr.k.append(k)
        tr.comm_rounds.append(comm_rounds)
        tr.grad_evals.append(evals)
        tr.f_gap_virtual.append(gv)
        tr.f_gap_avg.append(ga)
        tr.dist_sq.append(dist)
        tr.V_k.append(V)
        if snapshot_every and k % snapshot_every == 0:
            tr.states.append((k, st.copy()))
        return gv

    pool = _Pool(problem.n, threads)
    try:
        record(0)
        for k in range(cfg.K):
            comm, e = step(spec, problem, st, k, cfg.gamma, streams, pool)
            evals += e
            comm_rounds += comm
            xv = virtual_iterate(st.X)
            avg.push(xv)
            kk = k + 1
            if comm or kk % cfg.record_every == 0 or kk == cfg.K:
                gv = record(kk)
                if stop_gap is not None and gv <= stop_gap:
                    tr.stopped_at = kk
                    break
    finally:
        pool.close()
    tr.final_x_avg = avg.x.copy()
    tr.final_x_virtual = virtual_iterate(st.X)
    tr.total_grad_evals = evals
    tr.final_state = st
    return tr
