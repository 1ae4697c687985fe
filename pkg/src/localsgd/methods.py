"""Local directions g_i = a_i - b_i and communication schedules.

Per-client state is held in stacked ``(n, d)`` arrays so the estimator for a
chunk of clients is a handful of vectorized operations.  All randomness comes
from the counter streams in :mod:`localsgd.rng`, keyed by (seed, client,
iteration), so any chunking of clients gives bit-identical directions.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .problems import GlobalProblem, pairwise_mean

INIT_K = 2**32 - 1  # counter slot reserved for state initialization


# -- estimators a_i ----------------------------------------------------------

@dataclass(frozen=True)
class FullGradient:
    pass


@dataclass(frozen=True)
class UniformSample:
    pass


@dataclass(frozen=True)
class NoisyGradient:
    """Exact local gradient plus isotropic Gaussian noise with E|noise|^2 = variance."""
    variance: float | tuple[float, ...] = 1.0


@dataclass(frozen=True)
class LSVRG:
    q: float
    per_client_anchor: bool = True


@dataclass(frozen=True)
class StarSVRG:
    pass


@dataclass(frozen=True)
class GlobalAnchorSVRG:
    q: float


# -- shifts b_i ----------------------------------------------------------

@dataclass(frozen=True)
class NoShift:
    pass


@dataclass(frozen=True)
class StarShift:
    pass


@dataclass(frozen=True)
class LearnedShift:
    refresh_prob: float
    source: str = "current_stochastic"  # | anchor_stochastic | anchor_full
    batch: int = 1


# -- loops -----------------------------------------------------------------

@dataclass(frozen=True)
class Fixed:
    tau: int


@dataclass(frozen=True)
class Bernoulli:
    p: float


@dataclass(frozen=True)
class MethodSpec:
    estimator: object
    shift: object = NoShift()
    loop: object = Fixed(1)
    coupled_updates: bool = False
    name: str = "custom"

    def __post_init__(self):
        est = self.estimator
        if isinstance(est, LSVRG) and not est.per_client_anchor:
            object.__setattr__(self, "estimator", GlobalAnchorSVRG(est.q))

    @property
    def uses_global_anchor(self) -> bool:
        return isinstance(self.estimator, GlobalAnchorSVRG) or (
            isinstance(self.shift, LearnedShift) and self.shift.source != "current_stochastic")

    @property
    def anchor_q(self) -> float | None:
        if isinstance(self.estimator, GlobalAnchorSVRG):
            return self.estimator.q
        if isinstance(self.shift, LearnedShift) and self.shift.source != "current_stochastic":
            return self.shift.refresh_prob
        return None

    @property
    def needs_optimum(self) -> bool:
        return isinstance(self.estimator, StarSVRG) or isinstance(self.shift, StarShift)


class SpecError(ValueError):
    pass


def _prob(name, v, allow_one=True):
    if not (0.0 < v <= 1.0):
        raise SpecError(f"{name} must lie in (0, 1], got {v}")


def validate(spec: MethodSpec, problem: GlobalProblem | None = None) -> None:
    est, sh, loop = spec.estimator, spec.shift, spec.loop
    if isinstance(loop, Fixed):
        if int(loop.tau) != loop.tau or loop.tau < 1:
            raise SpecError(f"tau must be a positive integer, got {loop.tau}")
    elif isinstance(loop, Bernoulli):
        _prob("p", loop.p)
    else:
        raise SpecError(f"unknown loop {loop!r}")
    if isinstance(est, (LSVRG, GlobalAnchorSVRG)):
        _prob("q", est.q)
    if isinstance(est, NoisyGradient):
        v = np.atleast_1d(np.asarray(est.variance, dtype=float))
        if (v < 0).any():
            raise SpecError("noise variance must be non-negative")
        if problem is not None and v.size not in (1, problem.n):
            raise SpecError(f"noise variance needs 1 or {problem.n} entries")
    if isinstance(sh, LearnedShift):
        _prob("refresh_prob", sh.refresh_prob)
        if sh.source not in ("current_stochastic", "anchor_stochastic", "anchor_full"):
            raise SpecError(f"unknown shift source {sh.source!r}")
        if sh.batch < 1:
            raise SpecError("batch size must be positive")
        if isinstance(est, GlobalAnchorSVRG) and sh.source != "current_stochastic" and sh.refresh_prob != est.q:
            raise SpecError("a shift learned at the shared anchor refreshes with the anchor: refresh_prob must equal q")
    elif not isinstance(sh, (NoShift, StarShift)):
        raise SpecError(f"unknown shift {sh!r}")
    if spec.coupled_updates and isinstance(loop, Bernoulli) and spec.uses_global_anchor:
        if spec.anchor_q > loop.p:
            raise SpecError("coupled anchor refresh requires q <= p")
    if problem is not None and spec.needs_optimum and problem.optimum is None:
        raise SpecError("this method needs the exact optimum of the problem")


# -- presets ---------------------------------------------------------------

PRESETS = ("local-sgd", "local-svrg", "star-local-sgd", "ss-local-sgd",
           "star-local-sgd-star", "s-local-svrg")


def preset(name: str, *, tau: int | None = None, p: float | None = None, q: float | None = None,
           r: int | None = None, noise: float | None = None, full_gradients: bool = False,
           coupled_updates: bool | None = None, m: int | None = None) -> MethodSpec:
    """Build one of the named methods.

    ``noise`` switches the base estimator to the Gaussian-noise oracle and
    ``full_gradients`` to exact local gradients; otherwise a single uniformly
    sampled component is used.  ``m`` supplies defaults that depend on the
    local sum size (q = 1/m for the SVRG variants).
    """
    if tau is not None and p is not None:
        raise SpecError("give either tau or p, not both")
    if full_gradients and noise is not None:
        raise SpecError("full_gradients and noise are exclusive")
    base = FullGradient() if full_gradients else (NoisyGradient(noise) if noise is not None else UniformSample())

    def loop(default_tau=None, default_p=None):
        if p is not None:
            return Bernoulli(p)
        if tau is not None:
            return Fixed(tau)
        return Fixed(default_tau) if default_tau is not None else Bernoulli(default_p)

    def q_or(default):
        return q if q is not None else default

    if name == "local-sgd":
        spec = MethodSpec(base, NoShift(), loop(default_tau=10), False, name)
    elif name == "local-svrg":
        spec = MethodSpec(LSVRG(q_or(1.0 / m if m else 0.1)), NoShift(), loop(default_tau=10), False, name)
    elif name == "star-local-sgd":
        spec = MethodSpec(base, StarShift(), loop(default_tau=10), False, name)
    elif name == "ss-local-sgd":
        lp = loop(default_p=0.1)
        pp = lp.p if isinstance(lp, Bernoulli) else 1.0 / lp.tau
        qq = q_or(pp)
        rr = r if r is not None else math.ceil(1.0 / pp)
        source = "anchor_full" if full_gradients else "anchor_stochastic"
        spec = MethodSpec(base, LearnedShift(qq, source, rr), lp,
                          True if coupled_updates is None else coupled_updates, name)
        validate(spec)
        return spec
    elif name == "star-local-sgd-star":
        spec = MethodSpec(StarSVRG(), StarShift(), loop(default_tau=10), False, name)
    elif name == "s-local-svrg":
        lp = loop(default_p=0.1)
        qq = q_or(1.0 / m if m else (lp.p if isinstance(lp, Bernoulli) else 0.1))
        if isinstance(lp, Bernoulli):
            qq = min(qq, lp.p)
        spec = MethodSpec(GlobalAnchorSVRG(qq), LearnedShift(qq, "anchor_full"), lp,
                          True if coupled_updates is None else coupled_updates, name)
        validate(spec)
        return spec
    else:
        raise SpecError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    if coupled_updates is not None:
        spec = dataclasses.replace(spec, coupled_updates=coupled_updates)
    validate(spec)
    return spec


# -- state -------------------------------------------------------------------

@dataclass
class SimState:
    X: np.ndarray                      # local iterates, (n, d)
    anchors: np.ndarray | None = None  # per-client SVRG anchors
    anchor_grads: np.ndarray | None = None
    y: np.ndarray | None = None        # shared anchor
    y_grads: np.ndarray | None = None  # grad f_i(y), all clients
    shift_memory: np.ndarray | None = None  # last refreshed local estimate per client
    shifts: np.ndarray | None = None  # applied shifts, summing to exactly zero
    star_grads: np.ndarray | None = None
    y_version: int = 0

    def copy(self) -> "SimState":
        vals = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        return SimState(**{k: v.copy() if isinstance(v, np.ndarray) else v for k, v in vals.items()})


@dataclass(frozen=True)
class WorkerState:
    x: np.ndarray
    anchor: np.ndarray | None
    h: np.ndarray | None


def workers(state: SimState) -> list[WorkerState]:
    n = state.X.shape[0]
    anch = state.anchors if state.anchors is not None else None
    return [WorkerState(state.X[i], None if anch is None else anch[i],
                        None if state.shift_memory is None else state.shift_memory[i]) for i in range(n)]


def _noise_std(est: NoisyGradient, problem, clients):
    v = np.atleast_1d(np.asarray(est.variance, dtype=float))
    v = np.broadcast_to(v, (problem.n,))[clients]
    return np.sqrt(v / problem.d)


def neutral_shift(H: np.ndarray) -> np.ndarray:
    """Return h_i - mean(h) rounded onto a per-coordinate binary grid.

    On the grid every partial sum is exact, and the last row absorbs the
    residual, so the shifts sum to exactly zero in any summation order.  The
    grid step is about 2**-40 times the largest deviation.
    """
    n = H.shape[0]
    D = H - pairwise_mean(H)
    if n == 1:
        return np.zeros_like(H)
    head = 52 - int(math.ceil(math.log2(n + 1)))
    _, e = np.frexp(np.abs(D).max(axis=0))
    step = np.ldexp(1.0, e - head)
    Q = np.rint(D / step)
    Q[-1] = -Q[:-1].sum(axis=0)
    return Q * step


def init_state(spec: MethodSpec, problem: GlobalProblem, x0, seed) -> tuple[SimState, int]:
    """Initial state and the gradient evaluations it cost."""
    validate(spec, problem)
    n, d, m = problem.n, problem.d, problem.m
    seed = rng.as_streams(seed, n)
    x0 = np.asarray(x0, dtype=np.float64)
    X = np.tile(x0, (n, 1))
    st = SimState(X)
    evals = 0
    est, sh = spec.estimator, spec.shift
    if spec.needs_optimum:
        st.star_grads = problem.local_grads(problem.optimum.x)
    if isinstance(est, LSVRG):
        st.anchors = X.copy()
        st.anchor_grads = problem.local_grads(X)
        evals += n * m
    if spec.uses_global_anchor:
        st.y = x0.copy()
        evals += _refresh_anchor_quantities(spec, problem, st, np.arange(n), INIT_K, seed)
    elif isinstance(sh, LearnedShift):
        # current-source shifts start from an unbiased draw at x0
        a, _ = estimate(spec, problem, st, np.arange(n), INIT_K, seed)
        st.shift_memory = a
        st.shifts = neutral_shift(st.shift_memory)
        evals += n * _evals_per_draw(spec, problem)
    return st, evals


def _refresh_anchor_quantities(spec, problem, st, clients, k, seed) -> int:
    """Recompute everything that lives at the shared anchor y."""
    n, m = problem.n, problem.m
    evals = 0
    need_full = isinstance(spec.estimator, GlobalAnchorSVRG) or (
        isinstance(spec.shift, LearnedShift) and spec.shift.source == "anchor_full")
    if need_full:
        st.y_grads = problem.local_grads(st.y)
        evals += n * m
    sh = spec.shift
    if isinstance(sh, LearnedShift) and sh.source != "current_stochastic":
        if sh.source == "anchor_full":
            st.shift_memory = st.y_grads.copy()
        else:
            st.shift_memory = _batch_at(spec, problem, st.y, sh.batch, k, seed)
            evals += n * (m if isinstance(spec.estimator, FullGradient) else sh.batch)
        st.shifts = neutral_shift(st.shift_memory)
    st.y_version += 1
    return evals


def _batch_at(spec, problem, y, r, k, seed):
    """Average of r fresh stochastic gradients of every client at y."""
    S = rng.as_streams(seed, problem.n)
    n, d, m = problem.n, problem.d, problem.m
    c = np.arange(n)
    est = spec.estimator
    if isinstance(est, FullGradient):
        return problem.local_grads(y)
    if isinstance(est, NoisyGradient):
        # the mean of r isotropic Gaussian draws has variance / r
        z = S.normals(rng.ANCHOR_BATCH, c, k, d)
        return problem.local_grads(y) + z * (_noise_std(est, problem, c) / math.sqrt(r))[:, None]
    J = rng.indices(S.uniforms(rng.ANCHOR_BATCH, c, k, r), m)
    return problem.component_grads(y, c, J).mean(axis=1)


def _evals_per_draw(spec, problem) -> int:
    est = spec.estimator
    if isinstance(est, FullGradient):
        return problem.m
    if isinstance(est, (UniformSample, NoisyGradient)):
        return 1
    return 2


def estimate(spec: MethodSpec, problem: GlobalProblem, st: SimState, clients, k: int, seed):
    """The unbiased estimator a_i for the listed clients; returns (a, evals)."""
    S = rng.as_streams(seed, problem.n)
    c = np.asarray(clients, dtype=np.int64)
    X = st.X[c]
    est = spec.estimator
    if isinstance(est, FullGradient):
        return problem.local_grads(X, c), len(c) * problem.m
    if isinstance(est, NoisyGradient):
        z = S.normals(rng.ESTIMATOR, c, k, problem.d)
        return problem.local_grads(X, c) + z * _noise_std(est, problem, c)[:, None], len(c)
    j = rng.indices(S.uniforms(rng.ESTIMATOR, c, k, 1), problem.m)
    gx = problem.component_grads(X, c, j)[:, 0]
    if isinstance(est, UniformSample):
        return gx, len(c)
    if isinstance(est, LSVRG):
        gw = problem.component_grads(st.anchors[c], c, j)[:, 0]
        return gx - gw + st.anchor_grads[c], 2 * len(c)
    if isinstance(est, StarSVRG):
        gs = problem.component_grads(problem.optimum.x, c, j)[:, 0]
        return gx - gs + st.star_grads[c], 2 * len(c)
    if isinstance(est, GlobalAnchorSVRG):
        gy = problem.component_grads(st.y, c, j)[:, 0]
        return gx - gy + st.y_grads[c], 2 * len(c)
    raise SpecError(f"unknown estimator {est!r}")


def sample_direction(spec: MethodSpec, problem: GlobalProblem, st: SimState, clients, k: int, seed):
    """Directions g_i = a_i - b_i for the listed clients; returns (g, a, evals)."""
    c = np.asarray(clients, dtype=np.int64)
    a, evals = estimate(spec, problem, st, c, k, seed)
    sh = spec.shift
    if isinstance(sh, NoShift):
        g = a
    elif isinstance(sh, StarShift):
        g = a - st.star_grads[c]
    else:
        g = a - st.shifts[c]
    return g, a, evals


def is_communication(loop, k: int, seed) -> bool:
    S = rng.as_streams(seed, 1)
    if isinstance(loop, Fixed):
        return (k + 1) % loop.tau == 0
    return S.shared(k, 0) < loop.p


def _coupled_prob(loop, prob):
    """Refresh probability conditional on a communication event."""
    if isinstance(loop, Fixed):
        return min(1.0, prob * loop.tau)
    return min(1.0, prob / loop.p)


def refresh_state(spec: MethodSpec, problem: GlobalProblem, st: SimState, X_prev: np.ndarray,
                  virtual_x: np.ndarray, comm: bool, k: int, seed, a_prev: np.ndarray | None = None) -> int:
    """Update anchors and shifts after iteration k; returns gradient evaluations.

    ``X_prev`` and ``virtual_x`` are the local and virtual iterates at the
    start of iteration k; anchors refresh to these points.
    """
    S = rng.as_streams(seed, problem.n)
    n, m = problem.n, problem.m
    evals = 0
    allc = np.arange(n)
    coupled = spec.coupled_updates
    est, sh = spec.estimator, spec.shift

    if isinstance(est, LSVRG):
        u = S.uniforms(rng.REFRESH, allc, k, 2)[:, 0]
        if coupled:
            hit = (u < _coupled_prob(spec.loop, est.q)) & comm
        else:
            hit = u < est.q
        idx = np.flatnonzero(hit)
        if idx.size:
            st.anchors[idx] = X_prev[idx]
            st.anchor_grads[idx] = problem.local_grads(X_prev[idx], idx)
            evals += idx.size * m

    if spec.uses_global_anchor:
        q = spec.anchor_q
        if coupled:
            if isinstance(spec.loop, Bernoulli):
                hit = S.shared(k, 0) < q  # implies communication since q <= p
            else:
                hit = comm and S.shared(k, 1) < _coupled_prob(spec.loop, q)
        else:
            hit = S.shared(k, 1) < q
        if hit:
            st.y = virtual_x.copy()
            evals += _refresh_anchor_quantities(spec, problem, st, allc, k, seed)

    elif isinstance(sh, LearnedShift):
        u = S.uniforms(rng.REFRESH, allc, k, 2)[:, 1]
        if coupled:
            hit = (u < _coupled_prob(spec.loop, sh.refresh_prob)) & comm
        else:
            hit = u < sh.refresh_prob
        idx = np.flatnonzero(hit)
        if idx.size:
            st.shift_memory[idx] = a_prev[idx]
            st.shifts = neutral_shift(st.shift_memory)
    return evals
