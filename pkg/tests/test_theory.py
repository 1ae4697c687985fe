import math

import numpy as np
import pytest

from localsgd import data, methods as M, theory as T


@pytest.fixture(scope="module")
def single():
    # one client, so the optimum gradient vanishes and heterogeneity is zero
    return data.make_quadratic(data.QuadraticSpec(n=1, m=3, d=5, mu=1e-2, seed=1))


def test_full_gradient_single_client_stepsize(single):
    spec = M.MethodSpec(M.FullGradient())
    kp = T.key_params(spec, single, route="generic")
    lp = T.loop_params(kp, spec.loop, single.L, single.mu)
    assert single.L == pytest.approx(1.0, abs=1e-12)
    assert T.max_stepsize(kp, lp, single.L) == pytest.approx(1 / (6 * single.L), abs=1e-12)


def test_local_gd_tau5_stepsize(quad):
    assert quad.L == pytest.approx(1.0, abs=1e-14)
    spec = M.preset("local-sgd", tau=5, full_gradients=True)
    rep = T.theory_for(spec, quad)
    assert rep.gamma_max == pytest.approx(1 / (16 * math.sqrt(6 * math.e)), abs=1e-12)
    assert dict(rep.caps)["smoothness"] == rep.gamma_max


def test_lag_noise_tau2_unit_variance(single):
    spec = M.preset("local-sgd", tau=2, noise=1.0)
    rep = T.theory_for(spec, single)
    assert rep.loop.lag_noise(0.01) == pytest.approx(2 * math.e, abs=1e-12)
    assert rep.loop.lag_noise(0.01) == rep.loop.lag_noise(0.5)


@pytest.mark.parametrize("loop", [M.Fixed(1), M.Bernoulli(1.0)])
@pytest.mark.parametrize("name", ["local-sgd", "local-svrg", "star-local-sgd-star", "ss-local-sgd"])
def test_single_step_loops_have_no_lag(quad, loop, name):
    spec = M.preset(name, m=quad.m, **({"tau": 1} if isinstance(loop, M.Fixed) else {"p": 1.0}))
    kp = T.key_params(spec, quad)
    lp = T.loop_params(kp, loop, quad.L, quad.mu)
    assert lp.lag_sigma_coef == 0.0 and lp.lag_noise_const == 0.0 and lp.lag_noise_over_gamma == 0.0
    assert lp.lag_sigma(0.3) == 0.0 and lp.lag_noise(0.3) == 0.0


def test_stepsize_shrinks_with_longer_loops(quad):
    caps = [T.theory_for(M.preset("local-sgd", tau=t), quad).gamma_max for t in (2, 5, 10, 40)]
    assert all(a > b for a, b in zip(caps, caps[1:]))
    caps = [T.theory_for(M.preset("local-sgd", p=p), quad).gamma_max for p in (0.9, 0.5, 0.1)]
    assert all(a > b for a, b in zip(caps, caps[1:]))


def test_residual_grows_with_stepsize(quad):
    rep = T.theory_for(M.preset("local-sgd", tau=4, noise=1.0), quad)
    res = [rep.rate(g).gamma * rep.rate(g).residual for g in (1e-4, 1e-3, 1e-2)]
    assert res[0] < res[1] < res[2]


def test_variance_reduced_methods_have_no_floor(quad):
    for name in ("star-local-sgd-star", "s-local-svrg"):
        rep = T.theory_for(M.preset(name, m=quad.m), quad)
        assert rep.rate().residual == 0.0
        assert rep.rate().predicted_K(1e-10) is not None


def test_predicted_K_is_first_crossing(quad):
    rep = T.theory_for(M.preset("local-svrg", tau=3, m=quad.m), quad, x0=np.ones(quad.d))
    rb = rep.rate()
    floor = rb.gamma * rb.residual
    eps = 2 * floor
    K = rb.predicted_K(eps)
    assert rb.bound(K) <= eps < rb.bound(K - 1)
    assert rb.predicted_K(0.5 * floor) is None


def test_rate_without_strong_convexity():
    kp = T.KeyParams(2.0, 2.0, 0, 0, 0, 2.0, 2.0, 0, 1.0, 0.5, 0, 1.0, "none")
    lp = T.loop_params(kp, M.Fixed(3), 1.0, 0.0)
    rb = T.rate_bound(kp, lp, 0.01, 0.0, 1.0, 0.0, 4.0)
    assert rb.theta == 1.0
    assert rb.bound(100) == pytest.approx(rb.initial / 100 + 0.01 * rb.residual)
    K = rb.predicted_K(2 * 0.01 * rb.residual)
    assert rb.bound(K) <= 2 * 0.01 * rb.residual


def test_eta_is_capped_by_contraction(quad):
    rep = T.theory_for(M.preset("s-local-svrg", p=0.1, q=0.1), quad)
    rb = rep.rate(rep.gamma_max)
    assert rb.eta == pytest.approx(min(rep.gamma_max * quad.mu, 0.1 / 4))


def test_generic_constants_from_definitions(quad):
    spec = M.preset("local-sgd", tau=2)
    kp = T.key_params(spec, quad, route="generic")
    Lc, L, n = quad.L_cal, quad.L, quad.n
    Ai = 2 * Lc
    G = quad.local_grads(quad.optimum.x)
    sig = np.array([np.mean(((quad.all_component_grads(quad.optimum.x, i) - G[i])**2).sum(-1))
                    for i in range(n)])
    assert kp.bregman == pytest.approx(4 * Ai)
    assert kp.bregman_avg == pytest.approx(2 * Ai / n + L)
    assert kp.discrepancy_avg == pytest.approx(2 * L * Ai / n + 2 * L * L)
    assert kp.noise == pytest.approx(2 * np.mean(2 * sig + (G**2).sum(-1)), rel=1e-10)
    assert kp.noise_avg == pytest.approx(np.sum(2 * sig) / n**2, rel=1e-10)
    assert kp.contraction == 1.0 and kp.sigma_weight_avg == 1 / n


def test_routes(quad):
    spec = M.preset("local-sgd", tau=5, full_gradients=True)
    assert T.key_params(spec, quad).route == "closed_form"
    assert T.key_params(spec, quad, route="generic").route == "generic"
    with pytest.raises(T.TheoryUnsupported):
        T.key_params(M.preset("s-local-svrg"), quad, route="generic")
    with pytest.raises(T.TheoryUnsupported):
        T.key_params(M.MethodSpec(M.UniformSample(), M.LearnedShift(0.5)), quad, route="closed_form")
    with pytest.raises(ValueError):
        T.key_params(spec, quad, route="other")


def test_trivial_split_is_flagged(quad):
    spec = M.MethodSpec(M.UniformSample(), M.LearnedShift(0.5), M.Fixed(3))
    rep = T.theory_for(spec, quad)
    assert rep.key.route == "generic"
    assert "trivial variance split used" in rep.loop.flags


def test_bounded_dissimilarity_regime(quad):
    kp = T.key_params(M.preset("local-sgd", tau=4), quad)
    plain = T.loop_params(kp, M.Fixed(4), quad.L, quad.mu, zeta_sq=0.0)
    het = T.loop_params(kp, M.Fixed(4), quad.L, quad.mu, zeta_sq=0.5)
    assert plain.lag_noise_over_gamma == 0.0
    assert het.lag_noise_over_gamma == pytest.approx(2 * 3 * 0.5 / quad.mu)
    with pytest.raises(ValueError):
        T.loop_params(kp, M.Fixed(4), quad.L, 0.0, zeta_sq=0.5)


def test_initial_sigma(quad):
    x0 = np.ones(quad.d)
    assert T.theory_for(M.preset("local-sgd"), quad, x0=x0).sigma0_sq == 0.0
    rep = T.theory_for(M.preset("local-svrg", m=quad.m), quad, x0=x0)
    comp = []
    for i in range(quad.n):
        D = quad.all_component_grads(x0, i) - quad.all_component_grads(quad.optimum.x, i)
        comp.append(np.mean((D**2).sum(-1)))
    assert rep.sigma0_sq == pytest.approx(4 * np.mean(comp), rel=1e-12)
    assert rep.dist0_sq == pytest.approx(float(((x0 - quad.optimum.x)**2).sum()))


def test_decreasing_stepsize_bounded_by_cap(quad):
    rep = T.theory_for(M.preset("local-sgd", tau=4), quad, x0=np.ones(quad.d))
    g_short = T.decreasing_stepsize(rep.key, rep.loop, quad.L, quad.mu, 10, rep.sigma0_sq, rep.dist0_sq)
    g_long = T.decreasing_stepsize(rep.key, rep.loop, quad.L, quad.mu, 10**7, rep.sigma0_sq, rep.dist0_sq)
    assert g_short == rep.gamma_max
    assert 0 < g_long < rep.gamma_max
    g0 = T.decreasing_stepsize(rep.key, rep.loop, quad.L, 0.0, 10**6, rep.sigma0_sq, rep.dist0_sq)
    assert 0 < g0 <= rep.gamma_max


def test_report_items(quad):
    rep = T.theory_for(M.preset("s-local-svrg", m=quad.m), quad)
    items = dict(rep.items(eps=1e-6))
    assert items["gamma_max"] == rep.gamma_max and items["route"] == "closed_form"
    assert isinstance(items["predicted_K"], int)
