"""Convergence-rate constants, stepsize bounds and iteration counts.

The pipeline is

    per-client estimator constants  ->  aggregate constants  ->  loop constants
                                                            ->  stepsize bound, rate

Aggregate constants describe three inequalities satisfied by the local
directions g_i:

* second moment of the local directions, averaged over clients
  ``<= 2*bregman*gap + sigma_weight*sigma^2 + discrepancy*V + noise``
* second moment of their average
  ``<= 2*bregman_avg*gap + sigma_weight_avg*sigma^2 + discrepancy_avg*V + noise_avg``
* recursion of the auxiliary sequence sigma^2
  ``E sigma'^2 <= (1-contraction)*sigma^2 + 2*sigma_bregman*gap + sigma_discrepancy*V + sigma_noise``

where gap = f(x) - f* at the virtual iterate and V is the discrepancy of the
local iterates.  The loop constants bound the accumulated discrepancy.

Two routes produce aggregate constants: a generic derivation from
per-client constants (works for any supported estimator/shift pair) and
hand-derived per-method constants with a tighter mean/variance split, used
for the named methods.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import methods as M
from .methods import MethodSpec
from .problems import GlobalProblem, pairwise_mean, sigma_star_sq


class TheoryUnsupported(ValueError):
    """No parameter derivation is available for this method."""


# -- per-client constants ---------------------------------------------------

@dataclass(frozen=True)
class EstimatorParams:
    """Per-client constants (arrays of length n).

    For the estimator a_i at local point x_i:
    E|a_i - grad f_i(x*)|^2 <= 2*bregman*D_i + sigma_weight*s_i^2 + noise and
    E s_i'^2 <= (1-contraction)*s_i^2 + 2*sigma_bregman*D_i + sigma_noise,
    with D_i the Bregman divergence of f_i between x_i and x*.  The shift_*
    fields describe the refresh source of a learned shift.
    """
    bregman: np.ndarray
    sigma_weight: np.ndarray
    contraction: np.ndarray
    sigma_bregman: np.ndarray
    noise: np.ndarray
    sigma_noise: np.ndarray
    shift_bregman: np.ndarray | None = None
    shift_noise: np.ndarray | None = None
    shift_contraction: np.ndarray | None = None

    def __post_init__(self):
        for f in ("bregman", "sigma_weight", "sigma_bregman", "noise", "sigma_noise"):
            if (np.asarray(getattr(self, f)) < 0).any():
                raise ValueError(f"{f} must be non-negative")
        c = np.asarray(self.contraction)
        if ((c <= 0) | (c > 1)).any():
            raise ValueError("contraction must lie in (0, 1]")

    @property
    def n(self) -> int:
        return len(self.bregman)


def _const(n, v):
    return np.full(n, float(v))


def _noise_variance(est, n):
    return np.broadcast_to(np.atleast_1d(np.asarray(est.variance, dtype=float)), (n,)).copy()


def estimator_params(spec: MethodSpec, problem: GlobalProblem) -> EstimatorParams:
    n, L, Lmax = problem.n, problem.L, problem.maxLij
    est, sh = spec.estimator, spec.shift
    zero, one = _const(n, 0), _const(n, 1)
    sig_star = None
    if isinstance(est, M.FullGradient):
        out = EstimatorParams(_const(n, L), zero, one, zero, zero, zero)
    elif isinstance(est, M.NoisyGradient):
        out = EstimatorParams(_const(n, L), zero, one, zero, _noise_variance(est, n), zero)
    elif isinstance(est, M.UniformSample):
        _need_optimum(problem)
        sig_star = sigma_star_sq(problem, per_client=True)
        # Young's inequality doubles both the smoothness and the variance term
        out = EstimatorParams(_const(n, 2 * problem.L_cal), zero, one, zero, 2 * sig_star, zero)
    elif isinstance(est, M.LSVRG):
        out = EstimatorParams(_const(n, 2 * Lmax), _const(n, 2), _const(n, est.q),
                              _const(n, est.q * Lmax), zero, zero)
    elif isinstance(est, M.StarSVRG):
        out = EstimatorParams(_const(n, Lmax), zero, one, zero, zero, zero)
    else:
        raise TheoryUnsupported(f"no per-client constants for {type(est).__name__}")

    if isinstance(sh, M.LearnedShift):
        if sh.source == "current_stochastic":
            if (out.sigma_weight > 0).any():
                raise TheoryUnsupported("a shift refreshed from a variance-reduced draw is not covered")
            sb, sn = out.bregman, out.noise
        elif sh.source == "anchor_full" or isinstance(est, M.FullGradient):
            sb, sn = _const(n, L), zero
        elif isinstance(est, M.NoisyGradient):
            sb, sn = _const(n, L), _noise_variance(est, n) / sh.batch
        elif isinstance(est, M.UniformSample):
            sb, sn = _const(n, L + 2 * problem.L_cal / sh.batch), 2 * sig_star / sh.batch
        else:
            raise TheoryUnsupported("batch shift source needs a non-variance-reduced estimator")
        out = replace(out, shift_bregman=sb, shift_noise=sn, shift_contraction=_const(n, sh.refresh_prob))
    return out


def _need_optimum(problem):
    if problem.optimum is None:
        raise TheoryUnsupported("constants depend on the exact optimum, which is unknown")


# -- aggregate constants ----------------------------------------------------

@dataclass(frozen=True)
class VarianceSplit:
    """Separate bounds for the conditional mean of g_i and its deviation."""
    bregman_det: float
    bregman_var: float
    sigma_det: float
    sigma_var: float
    discrepancy_det: float
    discrepancy_var: float
    noise_det: float
    noise_var: float

    @classmethod
    def trivial(cls, kp: "KeyParams") -> "VarianceSplit":
        # both halves bounded by the full second moment
        return cls(kp.bregman, kp.bregman, kp.sigma_weight, kp.sigma_weight,
                   kp.discrepancy, kp.discrepancy, kp.noise, kp.noise)


@dataclass(frozen=True)
class KeyParams:
    bregman: float
    bregman_avg: float
    sigma_weight: float
    sigma_weight_avg: float
    sigma_bregman: float
    discrepancy: float
    discrepancy_avg: float
    sigma_discrepancy: float
    noise: float
    noise_avg: float
    sigma_noise: float
    contraction: float
    shift_case: str  # "none" | "optimal" | "learned"
    split: VarianceSplit | None = None
    split_loose: bool = False  # split taken as the trivial one
    route: str = "generic"

    def __post_init__(self):
        if not 0.0 < self.contraction <= 1.0:
            raise ValueError("contraction must lie in (0, 1]")

    def with_split(self) -> "KeyParams":
        if self.split is not None:
            return self
        return replace(self, split=VarianceSplit.trivial(self), split_loose=True)

    def as_dict(self) -> dict:
        out = {k: getattr(self, k) for k in (
            "bregman", "bregman_avg", "sigma_weight", "sigma_weight_avg", "sigma_bregman",
            "discrepancy", "discrepancy_avg", "sigma_discrepancy", "noise", "noise_avg",
            "sigma_noise", "contraction", "shift_case", "route")}
        if self.split is not None:
            out.update({f"split_{k}": v for k, v in vars(self.split).items()})
            out["split_loose"] = self.split_loose
        return out


SHIFT_CASES = ("none", "optimal", "learned")


def derive_key_params(ep: EstimatorParams, shift_case: str, L: float,
                      star_grad_sq: float | np.ndarray = 0.0) -> KeyParams:
    """Aggregate per-client constants.

    ``star_grad_sq`` is |grad f_i(x*)|^2, per client or already averaged; it
    only enters when no shift is applied.
    """
    if ep.n == 0:
        raise ValueError("no clients")
    if shift_case not in SHIFT_CASES:
        raise ValueError(f"shift_case must be one of {SHIFT_CASES}")
    n = ep.n
    a_max = float(np.max(ep.bregman))
    D1i = np.asarray(ep.noise, dtype=float)
    if shift_case == "none":
        noise = 2.0 * float(np.mean(D1i + np.broadcast_to(star_grad_sq, (n,))))
    else:
        noise = 2.0 * float(np.mean(D1i))
    bc = float(np.max(np.asarray(ep.sigma_weight) * ep.sigma_bregman))
    sigma_noise_terms = 2.0 * np.asarray(ep.sigma_weight) * ep.sigma_noise
    contraction = float(np.min(ep.contraction))
    sigma_bregman = 4.0 * bc
    if shift_case == "learned":
        if ep.shift_bregman is None:
            raise ValueError("learned shift needs shift constants")
        contraction = min(contraction, float(np.min(ep.shift_contraction)))
        sigma_bregman += 4.0 * float(np.max(ep.shift_contraction * ep.shift_bregman))
        sigma_noise_terms = sigma_noise_terms + ep.shift_contraction * ep.shift_noise
    return KeyParams(
        bregman=4.0 * a_max,
        bregman_avg=2.0 * a_max / n + L,
        sigma_weight=2.0,
        sigma_weight_avg=1.0 / n,
        sigma_bregman=sigma_bregman,
        discrepancy=4.0 * L * a_max,
        discrepancy_avg=2.0 * L * a_max / n + 2.0 * L * L,
        sigma_discrepancy=sigma_bregman * L / 2.0,
        noise=noise,
        noise_avg=float(np.sum(D1i)) / n**2,
        sigma_noise=float(np.mean(sigma_noise_terms)),
        contraction=contraction,
        shift_case=shift_case,
    )


def _shift_case(spec: MethodSpec) -> str:
    sh = spec.shift
    if isinstance(sh, M.NoShift):
        return "none"
    if isinstance(sh, M.StarShift):
        return "optimal"
    return "learned"


@dataclass(frozen=True)
class ProblemStats:
    """Data constants the closed forms depend on."""
    n: int
    m: int
    L: float
    Lmax: float
    zeta_star_sq: float   # mean |grad f_i(x*)|^2
    sigma_star_sq: float  # mean single-index variance at x*

    @classmethod
    def of(cls, problem: GlobalProblem) -> "ProblemStats":
        z = s = math.nan
        if problem.optimum is not None:
            G = problem.local_grads(problem.optimum.x)
            z = float(pairwise_mean((G * G).sum(-1)))
            s = sigma_star_sq(problem)
        return cls(problem.n, problem.m, problem.L, problem.maxLij, z, s)


def _closed_form(spec: MethodSpec, ps: ProblemStats) -> KeyParams | None:
    """Hand-derived constants for the named method families, or None."""
    est, sh = spec.estimator, spec.shift
    n, L, Mx = ps.n, ps.L, ps.Lmax
    Lc = Mx  # expected smoothness of single-index sampling
    z2, s2 = ps.zeta_star_sq, ps.sigma_star_sq
    ubv = isinstance(est, (M.FullGradient, M.NoisyGradient))
    var = float(np.mean(_noise_variance(est, n))) if isinstance(est, M.NoisyGradient) else 0.0

    def make(split, bregman_avg, sigma_avg, disc_avg, noise_avg, rho=1.0, C=0.0, G=0.0, D2=0.0):
        return KeyParams(
            bregman=split.bregman_det + split.bregman_var, bregman_avg=bregman_avg,
            sigma_weight=split.sigma_det + split.sigma_var, sigma_weight_avg=sigma_avg,
            sigma_bregman=C, discrepancy=split.discrepancy_det + split.discrepancy_var,
            discrepancy_avg=disc_avg, sigma_discrepancy=G,
            noise=split.noise_det + split.noise_var, noise_avg=noise_avg, sigma_noise=D2,
            contraction=rho, shift_case=_shift_case(spec), split=split, route="closed_form")

    if isinstance(sh, M.NoShift):
        if ubv:
            return make(VarianceSplit(3 * L, 0, 0, 0, 3 * L * L, 0, 3 * z2, var),
                        2 * L, 0, 2 * L * L, var / n)
        if isinstance(est, M.UniformSample):
            return make(VarianceSplit(3 * L, 4 * Lc, 0, 0, 3 * L * L, 4 * Lc * L, 3 * z2, 2 * s2),
                        4 * Lc / n + 2 * L, 0, 4 * Lc * L / n + 2 * L * L, 2 * s2 / n)
        if isinstance(est, M.LSVRG):
            q = est.q
            return make(VarianceSplit(3 * L, 4 * Mx, 0, 0.5, 3 * L * L, 4 * L * Mx, 3 * z2, 0),
                        4 * Mx / n + L, 1 / n, 4 * L * Mx / n + 2 * L * L, 0,
                        rho=q, C=8 * q * Mx, G=4 * q * L * Mx)
        return None
    if isinstance(sh, M.StarShift):
        if ubv:
            return make(VarianceSplit(2 * L, 0, 0, 0, 2 * L * L, 0, 0, var),
                        2 * L, 0, 2 * L * L, var / n)
        if isinstance(est, M.StarSVRG):
            return make(VarianceSplit(2 * L, 2 * Mx, 0, 0, 2 * L * L, 2 * L * Mx, 0, 0),
                        2 * (Mx / n + L), 0, 2 * L * (Mx / n + L), 0)
        return None
    if sh.source == "current_stochastic":
        return None
    q = sh.refresh_prob
    if isinstance(est, M.GlobalAnchorSVRG) and sh.source == "anchor_full":
        return make(VarianceSplit(4 * L, 4 * Mx, 2, 2, 4 * L * L, 4 * L * Mx, 0, 0),
                    4 * Mx / n + 2 * L, 2 / n, 2 * L * (2 * Mx / n + L), 0,
                    rho=q, C=(L + Mx) * q)
    r = 1 if sh.source == "anchor_full" else sh.batch
    if ubv:
        batch_var = 0.0 if (sh.source == "anchor_full" or isinstance(est, M.FullGradient)) else var
        return make(VarianceSplit(4 * L, 0, 2, 0, 4 * L * L, 0, 2 * batch_var / r, var),
                    2 * L, 0, 2 * L * L, var / n, rho=q, C=L * q)
    if isinstance(est, M.UniformSample) and sh.source == "anchor_stochastic":
        return make(VarianceSplit(4 * L, 4 * Lc, 2, 0, 4 * L * L, 4 * Lc * L, 0, 2 * s2),
                    2 * (2 * Lc / n + L), 0, 2 * L * (2 * Lc / n + L), 2 * s2 / n,
                    rho=q, C=q * (2 * Lc / r + L), D2=2 * q * s2 / r)
    return None


def key_params(spec: MethodSpec, problem: GlobalProblem, route: str = "auto") -> KeyParams:
    """Aggregate constants for a method on a problem.

    ``route`` is "closed_form", "generic" or "auto" (closed form when available).
    """
    if route not in ("auto", "closed_form", "generic"):
        raise ValueError(f"unknown route {route!r}")
    if route != "generic":
        if problem.optimum is None and not isinstance(spec.estimator, (M.FullGradient, M.NoisyGradient)):
            _need_optimum(problem)
        kp = _closed_form(spec, ProblemStats.of(problem))
        if kp is not None:
            if any(math.isnan(v) for v in (kp.noise, kp.noise_avg, kp.sigma_noise)):
                _need_optimum(problem)
            return kp
        if route == "closed_form":
            raise TheoryUnsupported("no hand-derived constants for this configuration")
    ep = estimator_params(spec, problem)
    case = _shift_case(spec)
    star = 0.0
    if case == "none":
        _need_optimum(problem)
        G = problem.local_grads(problem.optimum.x)
        star = (G * G).sum(-1)
    return derive_key_params(ep, case, problem.L, star)


# -- loop constants ---------------------------------------------------------

@dataclass(frozen=True)
class LoopParams:
    """Discrepancy-accumulation constants of a communication schedule.

    The initial-sigma coefficient is ``lag_sigma_coef * gamma**2`` and the
    per-step noise is ``lag_noise_const + lag_noise_over_gamma / gamma``.
    """
    lag_sigma_coef: float
    lag_noise_const: float
    lag_noise_over_gamma: float
    gamma_caps: tuple[tuple[str, float], ...] = ()
    flags: tuple[str, ...] = ()

    def lag_sigma(self, gamma: float) -> float:
        return self.lag_sigma_coef * gamma * gamma

    def lag_noise(self, gamma: float) -> float:
        return self.lag_noise_const + (self.lag_noise_over_gamma / gamma if self.lag_noise_over_gamma else 0.0)

    @property
    def cap(self) -> float:
        return min((v for _, v in self.gamma_caps), default=math.inf)


def _coupling(num: float, rho: float, flags: list, what: str) -> float:
    """num / (rho (1 - rho)), with the rho = 1 convention."""
    if num == 0.0:
        return 0.0
    if rho >= 1.0:
        flags.append(f"{what}: nonzero coupling with contraction 1, cap forced to 0")
        return math.inf
    return num / (rho * (1.0 - rho))


def _inv_sqrt(scale: float, x: float) -> float:
    # scale / sqrt(x), with x = 0 meaning no restriction
    if x <= 0.0:
        return math.inf
    if math.isinf(x):
        return 0.0
    return scale / math.sqrt(x)


def loop_params(kp: KeyParams, loop, L: float, mu: float, zeta_sq: float | None = None) -> LoopParams:
    """Constants for a fixed-length or Bernoulli loop.

    ``zeta_sq`` selects the bounded-dissimilarity regime; otherwise the data
    are treated as arbitrarily heterogeneous, which needs a variance split
    (the trivial split is substituted and flagged when none is known).
    """
    if isinstance(loop, M.Fixed):
        if loop.tau == 1:
            return LoopParams(0.0, 0.0, 0.0)
    elif isinstance(loop, M.Bernoulli):
        if loop.p == 1.0:
            return LoopParams(0.0, 0.0, 0.0)
    else:
        raise ValueError(f"unknown loop {loop!r}")
    flags: list[str] = []
    rho, C, G, D2 = kp.contraction, kp.sigma_bregman, kp.sigma_discrepancy, kp.sigma_noise
    caps: list[tuple[str, float]] = []

    if zeta_sq is None:
        if kp.split is None:
            kp = kp.with_split()
        if kp.split_loose:
            flags.append("trivial variance split used")
        s = kp.split
        At, Ah, Bt, Bh, Ft, Fh, Dt, Dh = (s.bregman_det, s.bregman_var, s.sigma_det, s.sigma_var,
                                          s.discrepancy_det, s.discrepancy_var, s.noise_det, s.noise_var)
        if isinstance(loop, M.Fixed):
            t1 = loop.tau - 1
            Bs = Bt * t1 + Bh
            if mu > 0:
                caps.append(("strong_convexity", 1.0 / (4 * t1 * mu)))
            caps.append(("discrepancy", 0.5 * _inv_sqrt(1.0, math.e * t1 * (
                Ft * t1 + Fh + _coupling(2 * G * Bs, rho, flags, "discrepancy")))))
            caps.append(("smoothness", 0.25 * _inv_sqrt(1.0, 2 * math.e * L * t1 * (
                At * t1 + Ah + _coupling(2 * C * Bs, rho, flags, "smoothness")))))
            H = 4 * math.e * t1 * Bs * (2 + rho) / rho
            D3c = 2 * math.e * t1 * (Dt * t1 + Dh + 2 * D2 * Bs / rho)
            return LoopParams(H, D3c, 0.0, tuple(caps), tuple(flags))
        p = loop.p
        Bs = (p + 2) * Bt + p * Bh
        if mu > 0:
            caps.append(("strong_convexity", p / (16 * mu)))
        caps.append(("discrepancy", _inv_sqrt(p / 2, (1 - p) * ((2 + p) * Ft + p * Fh))))
        cpl = _coupling(2 * G * Bs, rho, flags, "sigma")
        caps.append(("sigma", 0.0 if math.isinf(cpl) else
                     _inv_sqrt(p * math.sqrt(3.0) / 8, (1 - p) * cpl)))
        caps.append(("smoothness", _inv_sqrt(p * math.sqrt(3.0) / 16, 2 * L * (1 - p) * (
            (2 + p) * At + p * Ah + _coupling(2 * C * Bs, rho, flags, "smoothness")))))
        H = 64 * (1 - p) * Bs * (2 + rho) / (3 * p * p * rho)
        D3c = (8 * (1 - p) / (p * p)) * ((p + 2) * Dt + p * Dh + 8 * D2 * Bs / (3 * rho))
        return LoopParams(H, D3c, 0.0, tuple(caps), tuple(flags))

    A, B, F, D1 = kp.bregman, kp.sigma_weight, kp.discrepancy, kp.noise
    if zeta_sq > 0 and mu <= 0:
        raise ValueError("the bounded-dissimilarity regime needs strong convexity")
    if isinstance(loop, M.Fixed):
        t1 = loop.tau - 1
        if mu > 0:
            caps.append(("strong_convexity", 1.0 / (4 * t1 * mu)))
        caps.append(("discrepancy", 0.5 * _inv_sqrt(1.0, t1 * (F + _coupling(2 * B * G, rho, flags, "discrepancy")))))
        caps.append(("smoothness", 0.25 * _inv_sqrt(1.0, 2 * L * t1 * (A + _coupling(2 * B * C, rho, flags, "smoothness")))))
        H = 4 * B * t1 * (2 + rho) / rho
        D3c = 2 * t1 * (D1 + 2 * B * D2 / rho)
        D3g = 2 * t1 * zeta_sq / mu if zeta_sq else 0.0
        return LoopParams(H, D3c, D3g, tuple(caps), tuple(flags))
    p = loop.p
    if mu > 0:
        caps.append(("strong_convexity", p / (8 * mu)))
    caps.append(("discrepancy", _inv_sqrt(1.0, 2 * F * (1 - p) / p)))
    cpl = _coupling(32 * B * G * (1 - p), rho, flags, "sigma")
    caps.append(("sigma", 0.0 if math.isinf(cpl) else _inv_sqrt(1.0, cpl / p)))
    caps.append(("smoothness", _inv_sqrt(1.0, 128 * L * (1 - p) * (
        A + _coupling(2 * B * C, rho, flags, "smoothness")) / p)))
    H = 16 * B * (1 - p) * (2 + rho) / (p * rho)
    D3c = (4 * (1 - p) / p) * (D1 + 4 * B * D2 / rho)
    D3g = (4 * (1 - p) / p) * zeta_sq / mu if zeta_sq else 0.0
    return LoopParams(H, D3c, D3g, tuple(caps), tuple(flags))


# -- stepsize and rate ------------------------------------------------------

def base_caps(kp: KeyParams, L: float) -> tuple[tuple[str, float], ...]:
    rho = kp.contraction
    first = 1.0 / (2.0 * (kp.bregman_avg + 4 * kp.sigma_bregman * kp.sigma_weight_avg / (3 * rho)))
    den = kp.discrepancy_avg + 4 * kp.sigma_discrepancy * kp.sigma_weight_avg / (3 * rho)
    second = L / den if den > 0 else math.inf
    return (("average_bregman", first), ("average_discrepancy", second))


def max_stepsize(kp: KeyParams, lp: LoopParams, L: float) -> float:
    return min(min(v for _, v in base_caps(kp, L)), lp.cap)


@dataclass(frozen=True)
class RateBound:
    """Bound of the form theta^K * initial + gamma * residual (or initial/K
    + gamma * residual without strong convexity) on the weighted-average gap."""
    gamma: float
    mu: float
    theta: float
    initial_terms: tuple[tuple[float, str], ...]
    residual_terms: tuple[tuple[float, str], ...]
    initial: float
    residual: float
    exceeds_max_stepsize: bool = False

    @property
    def eta(self) -> float:
        return 1.0 - self.theta

    def bound(self, K: int) -> float:
        if self.mu > 0:
            return self.theta**K * self.initial + self.gamma * self.residual
        return self.initial / max(K, 1) + self.gamma * self.residual

    def predicted_K(self, eps: float) -> int | None:
        """Smallest K with bound(K) <= eps; None when the floor is too high."""
        slack = eps - self.gamma * self.residual
        if slack <= 0:
            return None
        if self.initial <= slack:
            return 0 if self.mu > 0 else 1
        if self.mu > 0:
            return math.ceil(math.log(self.initial / slack) / -math.log1p(-self.eta))
        return math.ceil(self.initial / slack)


def rate_bound(kp: KeyParams, lp: LoopParams, gamma: float, mu: float, L: float,
               sigma0_sq: float, dist0_sq: float) -> RateBound:
    rho = kp.contraction
    eta = min(gamma * mu, rho / 4.0) if mu > 0 else 0.0
    theta = 1.0 - eta
    Hs = lp.lag_sigma(gamma)
    init_terms = (
        (2.0 / gamma, "dist0_sq"),
        (8 * kp.sigma_weight_avg * gamma / (3 * rho), "sigma0_sq"),
        (4 * L * Hs, "sigma0_sq"),
    )
    qty = {"dist0_sq": dist0_sq, "sigma0_sq": sigma0_sq}
    initial = sum(c * qty[q] for c, q in init_terms)
    res_terms = (
        (2.0, "noise_avg"),
        (8 * kp.sigma_weight_avg / (3 * rho), "sigma_noise"),
        (4 * L * gamma, "lag_noise"),
    )
    qty = {"noise_avg": kp.noise_avg, "sigma_noise": kp.sigma_noise, "lag_noise": lp.lag_noise(gamma)}
    residual = sum(c * qty[q] for c, q in res_terms if c)
    over = gamma > max_stepsize(kp, lp, L) * (1 + 1e-12)
    return RateBound(gamma, mu, theta, init_terms, res_terms, initial, residual, over)


def decreasing_stepsize(kp: KeyParams, lp: LoopParams, L: float, mu: float, K: int,
                        sigma0_sq: float, dist0_sq: float) -> float:
    """Stepsize for a horizon of K iterations balancing the bound's terms.

    With strong convexity the stepsize is min{cap, ln(max{2, min{a mu^2 K^2/c1,
    a mu^3 K^3/c2}})/(mu K)}; without it, the minimum of the cap and the
    root terms that balance each part of the initial term against the residual.
    """
    cap = max_stepsize(kp, lp, L)
    rho = kp.contraction
    c1 = 2 * kp.noise_avg + 4 * kp.sigma_weight_avg * kp.sigma_noise / (3 * rho) + 2 * L * lp.lag_noise_over_gamma
    c2 = 4 * L * lp.lag_noise_const
    if mu > 0:
        a = (2 * dist0_sq + 8 * kp.sigma_weight_avg * sigma0_sq * cap**2 / (3 * rho)
             + 4 * L * lp.lag_sigma(cap) * sigma0_sq * cap)
        cand = [math.inf]
        if c1 > 0:
            cand.append(a * mu**2 * K**2 / c1)
        if c2 > 0:
            cand.append(a * mu**3 * K**3 / c2)
        arg = max(2.0, min(cand)) if len(cand) > 1 else math.inf
        return min(cap, math.log(arg) / (mu * K))
    a = 2 * dist0_sq
    out = [cap]
    b_sigma = 8 * kp.sigma_weight_avg * sigma0_sq / (3 * rho)  # multiplies gamma^2
    b_lag = 4 * L * lp.lag_sigma_coef * sigma0_sq             # multiplies gamma^3
    if b_sigma > 0:
        out.append(math.sqrt(a / b_sigma))
    if b_lag > 0:
        out.append((a / b_lag) ** (1 / 3))
    if c1 > 0:
        out.append(math.sqrt(a / (c1 * K)))
    if c2 > 0:
        out.append((a / (c2 * K)) ** (1 / 3))
    return min(out)


# -- sigma sequence realizations ---------------------------------------------

def _component_residual_sq(problem: GlobalProblem, x_per_client: np.ndarray) -> np.ndarray:
    """(1/m) sum_j |grad f_ij(x_i) - grad f_ij(x*)|^2 per client."""
    xs = problem.optimum.x
    out = np.empty(problem.n)
    for i in range(problem.n):
        D = problem.all_component_grads(x_per_client[i], i) - problem.all_component_grads(xs, i)
        out[i] = float((D * D).sum(-1).mean())
    return out


def sigma_sq(spec: MethodSpec, problem: GlobalProblem, st: M.SimState, kp: KeyParams) -> float:
    """Value of the auxiliary sequence that ``kp`` is stated for, at state ``st``."""
    if kp.sigma_weight_avg == 0 and kp.sigma_weight == 0 and kp.sigma_bregman == 0:
        return 0.0
    _need_optimum(problem)
    est, sh = spec.estimator, spec.shift
    Gs = problem.local_grads(problem.optimum.x)
    if kp.route == "closed_form":
        if isinstance(est, M.LSVRG):
            return 4.0 * float(_component_residual_sq(problem, st.anchors).mean())
        if isinstance(est, M.GlobalAnchorSVRG):
            Y = np.tile(st.y, (problem.n, 1))
            D = st.y_grads - Gs
            return float(_component_residual_sq(problem, Y).mean()) + float(pairwise_mean((D * D).sum(-1)))
        if isinstance(sh, M.LearnedShift):
            D = st.shift_memory - Gs
            return float(pairwise_mean((D * D).sum(-1)))
        return 0.0
    ep = estimator_params(spec, problem)
    out = 0.0
    if isinstance(est, M.LSVRG):
        out += 2.0 * float(np.mean(ep.sigma_weight * _component_residual_sq(problem, st.anchors)))
    if isinstance(sh, M.LearnedShift):
        D = st.shift_memory - Gs
        out += float(pairwise_mean((D * D).sum(-1)))
    return out


# -- one-stop report ----------------------------------------------------------

@dataclass(frozen=True)
class TheoryReport:
    key: KeyParams
    loop: LoopParams
    L: float
    mu: float
    gamma_max: float
    sigma0_sq: float
    dist0_sq: float
    caps: tuple[tuple[str, float], ...] = field(default_factory=tuple)

    def rate(self, gamma: float | None = None) -> RateBound:
        g = self.gamma_max if gamma is None else gamma
        return rate_bound(self.key, self.loop, g, self.mu, self.L, self.sigma0_sq, self.dist0_sq)

    def items(self, gamma: float | None = None, eps: float | None = None) -> list[tuple[str, object]]:
        rb = self.rate(gamma)
        out = [("route", self.key.route), ("L", self.L), ("mu", self.mu)]
        out += [(k, v) for k, v in self.key.as_dict().items() if k != "route"]
        out += [("lag_sigma_coef", self.loop.lag_sigma_coef), ("lag_noise_const", self.loop.lag_noise_const),
                ("lag_noise_over_gamma", self.loop.lag_noise_over_gamma)]
        out += [(f"cap_{name}", v) for name, v in self.caps]
        out += [("gamma_max", self.gamma_max), ("gamma", rb.gamma), ("theta", rb.theta),
                ("sigma0_sq", self.sigma0_sq), ("dist0_sq", self.dist0_sq),
                ("initial", rb.initial), ("residual", rb.residual)]
        if eps is not None:
            K = rb.predicted_K(eps)
            out += [("epsilon", eps), ("predicted_K", "unreachable" if K is None else K)]
        out += [(f"flag_{i}", f) for i, f in enumerate(self.loop.flags)]
        return out


def theory_for(spec: MethodSpec, problem: GlobalProblem, x0=None, seed: int = 0,
               route: str = "auto", zeta_sq: float | None = None) -> TheoryReport:
    kp = key_params(spec, problem, route)
    lp = loop_params(kp, spec.loop, problem.L, problem.mu, zeta_sq)
    caps = base_caps(kp, problem.L) + lp.gamma_caps
    gmax = min(v for _, v in caps)
    x0 = np.zeros(problem.d) if x0 is None else np.asarray(x0, dtype=np.float64)
    if problem.optimum is not None:
        dist0 = float(((x0 - problem.optimum.x) ** 2).sum())
        st, _ = M.init_state(spec, problem, x0, seed)
        s0 = sigma_sq(spec, problem, st, kp)
    else:
        dist0 = s0 = math.nan
    return TheoryReport(kp, lp, problem.L, problem.mu, gmax, s0, dist0, caps)
