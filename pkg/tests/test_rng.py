import threading

import numpy as np
import pytest

from localsgd import rng

# Random123 known-answer vectors for Philox4x32-10
KAT = [
    ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
    ((0xFFFFFFFF,) * 4, (0xFFFFFFFF,) * 2, (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
    ((0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344), (0xA4093822, 0x299F31D0),
     (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1)),
]


@pytest.mark.parametrize("ctr,key,expected", KAT)
def test_philox_known_answers(ctr, key, expected):
    out = rng.philox4x32(np.array(ctr, dtype=np.uint64), key)
    assert tuple(int(v) for v in out) == expected


def test_philox_vectorized_matches_single():
    ctrs = np.array([k for k, _, _ in KAT], dtype=np.uint64)
    single = np.stack([rng.philox4x32(c, (7, 9)) for c in ctrs])
    assert np.array_equal(rng.philox4x32(ctrs, (7, 9)), single)


def test_seed_key_range():
    assert rng.seed_key(2**64 - 1) == (0xFFFFFFFF, 0xFFFFFFFF)
    with pytest.raises(ValueError):
        rng.seed_key(-1)
    with pytest.raises(ValueError):
        rng.seed_key(2**64)


def test_uniform_range_and_independence_of_client_order():
    u = rng.uniforms(5, rng.ESTIMATOR, [0, 1, 2, 3], 17, 9)
    assert u.shape == (4, 9)
    assert (u >= 0).all() and (u < 1).all()
    rev = rng.uniforms(5, rng.ESTIMATOR, [3, 2, 1, 0], 17, 9)
    assert np.array_equal(u, rev[::-1])
    one = rng.uniforms(5, rng.ESTIMATOR, [2], 17, 9)
    assert np.array_equal(one[0], u[2])


def test_streams_differ_by_purpose_iteration_and_seed():
    base = rng.uniforms(1, rng.ESTIMATOR, [0], 0, 4)
    for other in (rng.uniforms(1, rng.REFRESH, [0], 0, 4), rng.uniforms(1, rng.ESTIMATOR, [0], 1, 4),
                  rng.uniforms(2, rng.ESTIMATOR, [0], 0, 4), rng.uniforms(1, rng.ESTIMATOR, [1], 0, 4)):
        assert not np.array_equal(base, other)


def test_uniform_moments():
    u = rng.uniforms(11, rng.ESTIMATOR, np.arange(100), 3, 1000).ravel()
    se = np.sqrt(1 / 12 / u.size)
    assert abs(u.mean() - 0.5) < 5 * se
    assert abs(u.var() - 1 / 12) < 0.003


def test_normal_moments():
    z = rng.normals(11, rng.ESTIMATOR, np.arange(100), 3, 1001)
    assert z.shape == (100, 1001)
    z = z.ravel()
    assert abs(z.mean()) < 5 / np.sqrt(z.size)
    assert abs(z.var() - 1.0) < 0.01
    # fourth moment of a standard normal is 3
    assert abs((z**4).mean() - 3.0) < 0.05


def test_indices_cover_range():
    u = rng.uniforms(0, rng.ESTIMATOR, [0], 0, 20000)
    j = rng.indices(u, 7)
    assert j.min() == 0 and j.max() == 6
    counts = np.bincount(j.ravel(), minlength=7)
    assert np.all(np.abs(counts - 20000 / 7) < 5 * np.sqrt(20000 / 7))
    assert rng.indices(np.array([0.999999999999999]), 3)[0] == 2


def test_iteration_counter_limit():
    with pytest.raises(ValueError):
        rng.uniforms(0, 0, [0], 2**32, 1)


def test_streams_match_direct_calls():
    S = rng.Streams(42, 5, window=8)
    for k in (0, 3, 7, 8, 30, 2):
        assert np.array_equal(S.uniforms(rng.ESTIMATOR, [1, 4], k, 3),
                              rng.uniforms(42, rng.ESTIMATOR, [1, 4], k, 3))
        assert np.array_equal(S.normals(rng.ANCHOR_BATCH, np.arange(5), k, 6),
                              rng.normals(42, rng.ANCHOR_BATCH, np.arange(5), k, 6))
        assert S.shared(k, 1) == rng.shared_uniform(42, k, 1)
    top = rng.INIT_K_LIMIT + 5
    assert np.array_equal(S.uniforms(0, [0], top, 2), rng.uniforms(42, 0, [0], top, 2))


def test_as_streams_passthrough():
    S = rng.Streams(3, 2)
    assert rng.as_streams(S, 2) is S
    assert rng.as_streams(3, 2).seed == 3


def test_streams_thread_safe():
    S = rng.Streams(9, 6, window=4)
    expected = {k: rng.uniforms(9, 0, np.arange(6), k, 2) for k in range(64)}
    bad = []

    def work(off):
        for k in range(off, 64, 3):
            if not np.array_equal(S.uniforms(0, np.arange(6), k, 2), expected[k]):
                bad.append(k)

    ts = [threading.Thread(target=work, args=(o,)) for o in range(3)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert not bad
