"""Empirical checks of the assumption inequalities and of structural reductions.

Every check returns a :class:`CheckReport`.  Monte-Carlo estimates use
counter streams keyed by the caller's seed, so reports are reproducible.
Inequalities pass when ``observed - 4 SE <= bound * (1 + 0.02)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import engine, methods as M, rng, theory as T
from .problems import GlobalProblem, pairwise_mean

REL_TOL = 0.02
N_SE = 4.0


@dataclass(frozen=True)
class CheckReport:
    name: str
    passed: bool
    observed: float
    bound: float
    samples: int
    margin: float
    detail: str = ""
    skipped: bool = False

    def line(self) -> str:
        status = "SKIP" if self.skipped else ("PASS" if self.passed else "FAIL")
        return (f"{status} {self.name}: observed={self.observed:.6g} bound={self.bound:.6g} "
                f"samples={self.samples} margin={self.margin:.3g}" + (f" ({self.detail})" if self.detail else ""))


def _skip(name, why):
    return CheckReport(name, True, math.nan, math.nan, 0, math.nan, why, skipped=True)


def _merge(name: str, reports: list[CheckReport]) -> CheckReport:
    """Worst case over several sub-checks (smallest relative margin)."""
    live = [r for r in reports if not r.skipped]
    if not live:
        return _skip(name, "no applicable sub-checks")
    failed = [r for r in live if not r.passed]

    def rel(r):
        return r.margin / max(abs(r.bound), 1e-300)
    worst = min(failed or live, key=rel)
    return CheckReport(name, not failed, worst.observed, worst.bound, sum(r.samples for r in live),
                       worst.margin, f"{len(failed)}/{len(live)} failed; worst: {worst.name}")


def _ineq(name, samples: np.ndarray, bound: float) -> CheckReport:
    s = np.asarray(samples, dtype=float)
    mean = float(s.mean())
    se = float(s.std(ddof=1) / math.sqrt(s.size)) if s.size > 1 else 0.0
    slack_bound = bound * (1 + REL_TOL) + N_SE * se
    return CheckReport(name, mean <= slack_bound, mean, bound, s.size, slack_bound - mean)


# -- unbiasedness --------------------------------------------------------------

def check_unbiasedness(spec: M.MethodSpec, problem: GlobalProblem, state: M.SimState,
                       draws: int = 10_000, seed: int = 0) -> CheckReport:
    """Mean of the averaged direction against the averaged local gradient."""
    name = f"unbiasedness[{spec.name}]"
    if draws < 10_000:
        raise ValueError("at least 10^4 draws are required")
    n = problem.n
    S = rng.Streams(seed, n)
    target = pairwise_mean(problem.local_grads(state.X))
    clients = np.arange(n)
    dev = np.empty((draws, problem.d))
    for t in range(draws):
        g, _, _ = M.sample_direction(spec, problem, state, clients, t, S)
        dev[t] = pairwise_mean(g) - target
    mean = dev.mean(axis=0)
    se = dev.std(axis=0, ddof=1) / math.sqrt(draws)
    floor = 1e-12 * (1.0 + np.abs(target).max())  # rounding of exact shift sums
    z = np.abs(mean) - N_SE * se - floor
    worst = int(np.argmax(z))
    return CheckReport(name, bool((z <= 0).all()), float(abs(mean[worst])),
                       float(N_SE * se[worst] + floor), draws, float(-z[worst]))


# -- second moments --------------------------------------------------------------

def scale_bregman(obj, factor: float):
    """Copy of constants with every gap-coefficient multiplied by ``factor``."""
    if isinstance(obj, T.EstimatorParams):
        return replace(obj, bregman=obj.bregman * factor)
    split = obj.split
    if split is not None:
        split = replace(split, bregman_det=split.bregman_det * factor, bregman_var=split.bregman_var * factor)
    return replace(obj, bregman=obj.bregman * factor, bregman_avg=obj.bregman_avg * factor, split=split)


def _bregman_local(problem, X):
    """D_{f_i}(x_i, x*) per client."""
    xs = problem.optimum.x
    fx = problem.local_values(X)
    fs = problem.local_values(np.tile(xs, (problem.n, 1)))
    gs = problem.local_grads(xs)
    return fx - fs - ((X - xs) * gs).sum(-1)


def _client_sigma(spec, problem, st):
    if isinstance(spec.estimator, M.LSVRG):
        return T._component_residual_sq(problem, st.anchors)
    return np.zeros(problem.n)


def _one_state(spec, problem, kp, ep, k, st, gamma, draws, step_draws, seed):
    n = problem.n
    clients = np.arange(n)
    xv, V = engine.virtual_and_discrepancy(st.X)
    gap = problem.f(xv) - problem.optimum.f
    sig = T.sigma_sq(spec, problem, st, kp)
    S = rng.Streams(seed, n)
    G = np.empty((draws, n, problem.d))
    Aest = np.empty_like(G)
    for t in range(draws):
        g, a, _ = M.sample_direction(spec, problem, st, clients, t, S)
        G[t], Aest[t] = g, a
    tag = f"{spec.name}@k={k}"
    out = []
    # averaged second moment of local directions and of their mean
    out.append(_ineq(f"local_second_moment {tag}", (G * G).sum(-1).mean(-1),
                     2 * kp.bregman * gap + kp.sigma_weight * sig + kp.discrepancy * V + kp.noise))
    gbar = G.mean(axis=1)
    out.append(_ineq(f"mean_second_moment {tag}", (gbar * gbar).sum(-1),
                     2 * kp.bregman_avg * gap + kp.sigma_weight_avg * sig + kp.discrepancy_avg * V + kp.noise_avg))
    # mean/variance split; the conditional mean of g_i is exact
    if kp.split is not None:
        s = kp.split
        cond = problem.local_grads(st.X) - _shift_of(spec, st)
        det = float((cond * cond).sum(-1).mean())
        out.append(_ineq(f"split_mean {tag}", np.array([det, det]),
                         2 * s.bregman_det * gap + s.sigma_det * sig + s.discrepancy_det * V + s.noise_det))
        dev = G - cond
        out.append(_ineq(f"split_variance {tag}", (dev * dev).sum(-1).mean(-1),
                         2 * s.bregman_var * gap + s.sigma_var * sig + s.discrepancy_var * V + s.noise_var))
    # per-client estimator bound
    if ep is not None:
        Dl = _bregman_local(problem, st.X)
        si = _client_sigma(spec, problem, st)
        R = Aest - problem.local_grads(problem.optimum.x)
        lhs = (R * R).sum(-1)  # (draws, n)
        for i in range(n):
            out.append(_ineq(f"client_estimator {tag} i={i}", lhs[:, i],
                             2 * ep.bregman[i] * Dl[i] + ep.sigma_weight[i] * si[i] + ep.noise[i]))
    # one-step recursion of the auxiliary sequence
    if step_draws and (kp.sigma_weight or kp.sigma_weight_avg or kp.sigma_bregman):
        nxt = np.empty(step_draws)
        for t in range(step_draws):
            s2 = st.copy()
            engine.step(spec, problem, s2, k, gamma, rng.Streams(seed + 1 + t, n, window=1))
            nxt[t] = T.sigma_sq(spec, problem, s2, kp)
        out.append(_ineq(f"sigma_recursion {tag}", nxt,
                         (1 - kp.contraction) * sig + 2 * kp.sigma_bregman * gap
                         + kp.sigma_discrepancy * V + kp.sigma_noise))
    return out


def _shift_of(spec, st):
    sh = spec.shift
    if isinstance(sh, M.NoShift):
        return 0.0
    if isinstance(sh, M.StarShift):
        return st.star_grads
    return st.shifts


def check_second_moment(spec: M.MethodSpec, problem: GlobalProblem, kp: T.KeyParams, states,
                        gamma: float, draws: int = 400, step_draws: int = 200, seed: int = 0,
                        ep: T.EstimatorParams | None = None, bregman_factor: float = 1.0) -> CheckReport:
    """Audit the second-moment and recursion inequalities at trajectory states.

    ``states`` is a list of (k, SimState).  Per-client estimator bounds are
    audited too when per-client constants exist for the method.
    ``bregman_factor`` rescales the gap coefficients, which is how the suite
    tests its own power.
    """
    if problem.optimum is None:
        raise T.TheoryUnsupported("second-moment audit needs the exact optimum")
    if ep is None:
        try:
            ep = T.estimator_params(spec, problem)
        except T.TheoryUnsupported:
            ep = None
    if bregman_factor != 1.0:
        kp = scale_bregman(kp, bregman_factor)
        ep = None if ep is None else scale_bregman(ep, bregman_factor)
    reports = []
    for idx, (k, st) in enumerate(states):
        reports += _one_state(spec, problem, kp, ep, k, st, gamma, draws, step_draws, seed + 7919 * idx)
    return _merge(f"second_moment[{spec.name}]", reports)


def trajectory_states(spec: M.MethodSpec, problem: GlobalProblem, gamma: float, count: int = 50,
                      K: int | None = None, seed: int = 0, x0=None) -> list[tuple[int, M.SimState]]:
    """``count`` states sampled evenly from one run."""
    K = K or 10 * count
    every = max(1, K // count)
    tr = engine.run(engine.RunConfig(spec, gamma, every * count, x0=x0, master_seed=seed,
                                     record_every=every), problem, snapshot_every=every)
    return tr.states[:count]


# -- parallel SGD reduction -----------------------------------------------------

def _oracle_direction(problem, est, x, k, seed):
    """Average of client estimators at a common point, via the scalar API."""
    n, d, m = problem.n, problem.d, problem.m
    total = np.zeros(d)
    for i in range(n):
        if isinstance(est, M.FullGradient):
            g = problem.value_and_grad(i, x)[1]
        elif isinstance(est, M.NoisyGradient):
            var = np.broadcast_to(np.atleast_1d(np.asarray(est.variance, dtype=float)), (n,))[i]
            z = rng.normals(seed, rng.ESTIMATOR, [i], k, d)[0]
            g = problem.value_and_grad(i, x)[1] + math.sqrt(var / d) * z
        else:
            j = int(rng.indices(rng.uniforms(seed, rng.ESTIMATOR, [i], k, 1), m)[0, 0])
            g = problem.component_grad(i, j, x)
        total = total + g
    return total / n


def check_parallel_sgd_reduction(problem: GlobalProblem, gamma: float, K: int = 1000, seed: int = 0,
                                 spec: M.MethodSpec | None = None, x0=None) -> CheckReport:
    """Local-SGD with a single local step against plain minibatch SGD."""
    spec = spec or M.preset("local-sgd", tau=1)
    name = f"parallel_sgd_reduction[{spec.name}]"
    if not (isinstance(spec.loop, M.Fixed) and spec.loop.tau == 1 and isinstance(spec.shift, M.NoShift)
            and isinstance(spec.estimator, (M.FullGradient, M.NoisyGradient, M.UniformSample))):
        return _skip(name, "needs plain local SGD with one local step")
    x = np.zeros(problem.d) if x0 is None else np.array(x0, dtype=np.float64)
    st, _ = M.init_state(spec, problem, x, seed)
    S = rng.Streams(seed, problem.n)
    worst = 0.0
    for k in range(K):
        engine.step(spec, problem, st, k, gamma, S)
        x = x - gamma * _oracle_direction(problem, spec.estimator, x, k, seed)
        worst = max(worst, float(np.abs(st.X - x).max()))
    return CheckReport(name, worst <= 1e-12, worst, 1e-12, K, 1e-12 - worst)


# -- gradients ------------------------------------------------------------------

# central differences are exact on quadratics, so a wide step only trims rounding
FD_STEP = {"quadratic": 1e-3, "logistic": 1e-6}


def finite_difference_audit(problem: GlobalProblem, points: int = 20, seed: int = 0,
                            h: float | None = None) -> CheckReport:
    """Central differences of every local function against its gradient.

    Probes are the zero vector plus random Gaussian points.  The error of a
    probe is |fd - grad| / max(|grad|, 1), maximized over clients.
    """
    if points < 10:
        raise ValueError("at least 10 probe points are required")
    n, d = problem.n, problem.d
    h = FD_STEP[problem.kind] if h is None else h
    g = np.random.default_rng(seed)
    probes = [np.zeros(d)] + [g.standard_normal(d) for _ in range(points - 1)]
    worst = 0.0
    E = np.eye(d) * h
    for x in probes:
        X = np.tile(x, (n, 1))
        grad = problem.local_grads(X)
        fd = np.empty((n, d))
        for j in range(d):
            fp = problem.local_values(X + E[j])
            fm = problem.local_values(X - E[j])
            fd[:, j] = (fp - fm) / (2 * h)
        err = np.linalg.norm(fd - grad, axis=1) / np.maximum(np.linalg.norm(grad, axis=1), 1.0)
        worst = max(worst, float(err.max()))
    bound = 1e-9 if problem.kind == "quadratic" else 1e-5
    return CheckReport(f"finite_difference[{problem.kind}]", worst < bound, worst, bound, len(probes),
                       bound - worst)


def run_suite(spec: M.MethodSpec, problem: GlobalProblem, gamma: float, seed: int = 0,
              states: int = 10, draws: int = 10_000) -> list[CheckReport]:
    """The checks applicable to one method on one problem."""
    out = [finite_difference_audit(problem, seed=seed)]
    if problem.optimum is None:
        return out
    sts = trajectory_states(spec, problem, gamma, count=states, seed=seed)
    out.append(check_unbiasedness(spec, problem, sts[-1][1], draws=draws, seed=seed))
    try:
        kp = T.key_params(spec, problem)
    except T.TheoryUnsupported as exc:
        out.append(_skip(f"second_moment[{spec.name}]", str(exc)))
    else:
        out.append(check_second_moment(spec, problem, kp, sts, gamma, seed=seed))
    if isinstance(spec.loop, M.Fixed) and spec.loop.tau == 1:
        out.append(check_parallel_sgd_reduction(problem, gamma, seed=seed, spec=spec))
    return out
