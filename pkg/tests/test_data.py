import numpy as np
import pytest

from localsgd import data

from conftest import synthetic_libsvm

SAMPLE = """+1 1:0.5 3:2
-1 2:-1.25

+1 1:1 2:1 4:3e-2
"""


def test_parse_basic():
    ds = data.parse_libsvm(SAMPLE)
    assert ds.count == 3 and ds.dim == 4
    assert ds.labels.tolist() == [1, -1, 1]
    assert ds.row(0) == (1, {1: 0.5, 3: 2.0})
    assert ds.row(2) == (1, {1: 1.0, 2: 1.0, 4: 0.03})
    assert np.array_equal(ds.dense(), [[0.5, 0, 2, 0], [0, -1.25, 0, 0], [1, 1, 0, 0.03]])


@pytest.mark.parametrize("text,line,fragment", [
    ("+1 1:1\nabc 2:1\n", 2, "label"),
    ("+1 1:1\n+1 2-1\n", 2, "idx:val"),
    ("+1 0:1\n", 1, "< 1"),
    ("+1 3:1 2:1\n", 1, "increasing"),
    ("+1 3:1 3:2\n", 1, "increasing"),
    ("+1 1:x\n", 1, "non-numeric"),
    ("\n\n-1 1:2\n+1 a:1\n", 4, "non-numeric"),
])
def test_parse_errors_carry_line(text, line, fragment):
    with pytest.raises(data.ParseError) as exc:
        data.parse_libsvm(text)
    assert exc.value.line == line
    assert f"line {line}" in str(exc.value) and fragment in str(exc.value)


def test_empty_file_rejected():
    with pytest.raises(data.ParseError):
        data.parse_libsvm("\n  \n")


def test_label_maps():
    assert data.parse_libsvm("1 1:1\n2 1:1\n1 1:2\n").labels.tolist() == [-1, 1, -1]
    assert data.parse_libsvm("0 1:1\n1 1:1\n").labels.tolist() == [-1, 1]
    assert data.parse_libsvm("-1 1:1\n+1 1:1\n").labels.tolist() == [-1, 1]


def test_round_trip_exact(tmp_path):
    text = synthetic_libsvm(rows=50, dim=9, seed=4)
    ds = data.parse_libsvm(text)
    again = data.parse_libsvm(data.to_libsvm(ds))
    assert again == ds
    p = tmp_path / "x.svm"
    p.write_text(data.to_libsvm(ds))
    assert data.load_libsvm(p) == ds


def test_partition_random_drops_tail_and_is_seeded():
    ds = data.parse_libsvm(synthetic_libsvm(rows=23, dim=4))
    part = data.partition(ds, 5, "random", seed=1)
    assert part.n == 5 and part.m == 4
    used = sorted(i for s in part.shards for i in s)
    assert used == list(range(20))
    assert data.partition(ds, 5, "random", seed=1) == part
    assert data.partition(ds, 5, "random", seed=2) != part


def test_partition_label_sorted():
    ds = data.parse_libsvm("+1 1:1\n-1 1:1\n+1 1:1\n-1 1:1\n+1 1:1\n-1 1:1\n+1 1:1\n")
    part = data.partition(ds, 2, "label_sorted")
    assert part.shards == ((1, 3, 5), (0, 2, 4))


def test_partition_validation():
    ds = data.parse_libsvm("+1 1:1\n-1 1:1\n")
    with pytest.raises(ValueError):
        data.partition(ds, 3)
    with pytest.raises(ValueError):
        data.partition(ds, 0)
    with pytest.raises(ValueError):
        data.partition(ds, 1, "bogus")


def test_quadratic_generator_structure():
    spec = data.QuadraticSpec(n=3, m=4, d=7, mu=0.1, seed=5)
    p = data.make_quadratic(spec)
    for i in range(3):
        assert np.allclose(p.A[i] @ p.A[i].T, np.eye(4), atol=1e-12)
    assert p.L == pytest.approx(1.0, abs=1e-12)
    assert p.maxLij == pytest.approx(0.1 + 0.9 * 4, rel=1e-12)
    again = data.make_quadratic(spec)
    assert np.array_equal(again.A, p.A) and np.array_equal(again.z, p.z)


def test_quadratic_spec_validation():
    with pytest.raises(ValueError):
        data.QuadraticSpec(n=2, m=5, d=4)
    with pytest.raises(ValueError):
        data.QuadraticSpec(n=2, m=1, d=4, mu=2.0)


def test_instance_types():
    assert data.instance_spec(0, 4, 6).m == 1
    assert data.instance_spec(3, 4, 12).m == 10
    assert data.instance_spec(1, 4, 12, seed=2).seed != data.instance_spec(3, 4, 12, seed=2).seed
    with pytest.raises(ValueError):
        data.instance_spec(4, 4, 6)
