import numpy as np
import pytest

from localsgd import engine, methods as M, rng
from localsgd.problems import pairwise_mean


def test_presets_assemble_expected_parts():
    s = M.preset("local-sgd")
    assert isinstance(s.estimator, M.UniformSample) and isinstance(s.shift, M.NoShift) and s.loop == M.Fixed(10)
    s = M.preset("local-svrg", m=20)
    assert s.estimator == M.LSVRG(0.05)
    s = M.preset("star-local-sgd", noise=2.0, tau=3)
    assert s.estimator == M.NoisyGradient(2.0) and isinstance(s.shift, M.StarShift) and s.loop == M.Fixed(3)
    s = M.preset("ss-local-sgd")
    assert s.loop == M.Bernoulli(0.1) and s.shift == M.LearnedShift(0.1, "anchor_stochastic", 10)
    assert s.coupled_updates
    s = M.preset("ss-local-sgd", tau=20, full_gradients=True)
    assert s.shift == M.LearnedShift(0.05, "anchor_full", 20) and isinstance(s.estimator, M.FullGradient)
    s = M.preset("star-local-sgd-star")
    assert isinstance(s.estimator, M.StarSVRG) and s.needs_optimum
    s = M.preset("s-local-svrg", p=0.1, q=0.1)
    assert s.estimator == M.GlobalAnchorSVRG(0.1) and s.shift == M.LearnedShift(0.1, "anchor_full")


def test_preset_errors():
    with pytest.raises(M.SpecError):
        M.preset("fedavg")
    with pytest.raises(M.SpecError):
        M.preset("local-sgd", tau=2, p=0.5)
    with pytest.raises(M.SpecError):
        M.preset("local-sgd", noise=1.0, full_gradients=True)
    with pytest.raises(M.SpecError):
        M.preset("local-sgd", p=0.0)
    with pytest.raises(M.SpecError):
        M.preset("local-svrg", q=1.5)


def test_validate_rejects_bad_specs(quad):
    with pytest.raises(M.SpecError):
        M.validate(M.MethodSpec(M.UniformSample(), loop=M.Fixed(0)))
    with pytest.raises(M.SpecError):
        M.validate(M.MethodSpec(M.NoisyGradient(-1.0)))
    with pytest.raises(M.SpecError):
        M.validate(M.MethodSpec(M.NoisyGradient((1.0, 2.0))), quad)
    with pytest.raises(M.SpecError):
        M.validate(M.MethodSpec(M.UniformSample(), M.LearnedShift(0.5, "elsewhere")))
    with pytest.raises(M.SpecError):
        M.validate(M.MethodSpec(M.GlobalAnchorSVRG(0.5), M.LearnedShift(0.5, "anchor_full"),
                                M.Bernoulli(0.1), coupled_updates=True))
    with pytest.raises(M.SpecError):
        M.validate(M.MethodSpec(M.StarSVRG(), M.StarShift()), quad.with_optimum(None))


def test_global_anchor_alias():
    s = M.MethodSpec(M.LSVRG(0.2, per_client_anchor=False))
    assert s.estimator == M.GlobalAnchorSVRG(0.2)


def test_neutral_shift_sums_to_exact_zero():
    g = np.random.default_rng(0)
    for n in (1, 2, 3, 7, 10, 33):
        H = g.standard_normal((n, 5)) * 10.0 ** g.integers(-8, 8, size=5)
        B = M.neutral_shift(H)
        assert (B.sum(axis=0) == 0).all()
        assert (pairwise_mean(B) == 0).all()
        assert (B[::-1].sum(axis=0) == 0).all()
        D = H - H.mean(axis=0)
        assert np.allclose(B, D, rtol=0, atol=1e-11 * np.abs(D).max() + 1e-300)


def _expected_estimate(spec, p, st, i):
    """Exact expectation of a_i over the component index."""
    X = np.tile(st.X[i], (1, 1))
    comps = np.arange(p.m)[None, :]
    gx = p.component_grads(X, [i], comps)[0].mean(0)
    est = spec.estimator
    if isinstance(est, M.UniformSample):
        return gx
    if isinstance(est, M.LSVRG):
        return gx - p.component_grads(st.anchors[i:i + 1], [i], comps)[0].mean(0) + st.anchor_grads[i]
    if isinstance(est, M.StarSVRG):
        return gx - p.component_grads(p.optimum.x[None], [i], comps)[0].mean(0) + st.star_grads[i]
    return gx - p.component_grads(st.y[None], [i], comps)[0].mean(0) + st.y_grads[i]


@pytest.mark.parametrize("name", ["local-sgd", "local-svrg", "star-local-sgd-star", "s-local-svrg"])
def test_estimators_unbiased_exactly(quad, name):
    spec = M.preset(name, m=quad.m)
    tr = engine.run(engine.RunConfig(spec, 0.05, 30, master_seed=1), quad)
    st = tr.final_state
    for i in range(quad.n):
        assert np.allclose(_expected_estimate(spec, quad, st, i), quad.local_grads(st.X)[i], atol=1e-12)


def test_svrg_exact_at_anchor(quad):
    spec = M.preset("local-svrg", m=quad.m)
    st, evals = M.init_state(spec, quad, np.ones(quad.d), 0)
    assert evals == quad.n * quad.m
    a, _ = M.estimate(spec, quad, st, np.arange(quad.n), 0, 0)
    assert np.allclose(a, quad.local_grads(st.X), atol=1e-13)


def test_star_svrg_vanishes_at_optimum(quad):
    spec = M.preset("star-local-sgd-star")
    st, _ = M.init_state(spec, quad, quad.optimum.x, 0)
    g, _, _ = M.sample_direction(spec, quad, st, np.arange(quad.n), 5, 0)
    assert np.abs(g).max() < 1e-13


def test_noisy_gradient_variance(quad):
    spec = M.MethodSpec(M.NoisyGradient(2.5))
    st, _ = M.init_state(spec, quad, np.zeros(quad.d), 0)
    S = rng.Streams(0, quad.n)
    dev = np.array([M.estimate(spec, quad, st, np.arange(quad.n), k, S)[0] - quad.local_grads(st.X)
                    for k in range(4000)])
    sq = (dev**2).sum(-1).ravel()
    assert abs(sq.mean() - 2.5) < 5 * sq.std() / np.sqrt(sq.size)


def test_fixed_loop_schedule():
    comm = [k for k in range(12) if M.is_communication(M.Fixed(4), k, 0)]
    assert comm == [3, 7, 11]


def test_bernoulli_loop_rate():
    S = rng.Streams(3, 1)
    hits = sum(M.is_communication(M.Bernoulli(0.2), k, S) for k in range(20000))
    assert abs(hits / 20000 - 0.2) < 5 * np.sqrt(0.2 * 0.8 / 20000)


def test_learned_shifts_refresh_only_at_communication(quad):
    spec = M.preset("ss-local-sgd", p=0.3, q=0.3)
    st, _ = M.init_state(spec, quad, np.zeros(quad.d), 0)
    S = rng.Streams(0, quad.n)
    for k in range(200):
        before = st.shift_memory.copy()
        comm, _ = engine.step(spec, quad, st, k, 0.05, S)
        if not comm:
            assert np.array_equal(before, st.shift_memory)
        assert (st.shifts.sum(axis=0) == 0).all()


def test_svrg_anchor_refresh_rate(quad):
    spec = M.preset("local-svrg", q=0.25, tau=1)
    st, _ = M.init_state(spec, quad, np.ones(quad.d), 0)
    S = rng.Streams(5, quad.n)
    refreshed = 0
    for k in range(2000):
        old = st.anchors.copy()
        engine.step(spec, quad, st, k, 0.01, S)
        refreshed += int((st.anchors != old).any(axis=1).sum())
    rate = refreshed / (2000 * quad.n)
    assert abs(rate - 0.25) < 5 * np.sqrt(0.25 * 0.75 / (2000 * quad.n))


def test_workers_view(quad):
    spec = M.preset("local-svrg", m=quad.m)
    st, _ = M.init_state(spec, quad, np.zeros(quad.d), 0)
    ws = M.workers(st)
    assert len(ws) == quad.n and np.array_equal(ws[1].anchor, st.anchors[1]) and ws[0].h is None
