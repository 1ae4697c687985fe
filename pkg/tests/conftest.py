import numpy as np
import pytest

from localsgd import data, problems

# lines reported by the acceptance suite, printed after the run
ACCEPTANCE_LINES: dict[int, list[str]] = {}


def synthetic_libsvm(rows=240, dim=12, seed=0, density=0.6) -> str:
    """Small sparse binary-classification file in LibSVM text form."""
    g = np.random.default_rng(seed)
    w = g.standard_normal(dim)
    out = []
    for _ in range(rows):
        mask = g.random(dim) < density
        x = np.where(mask, g.standard_normal(dim), 0.0)
        y = 1 if x @ w + 0.3 * g.standard_normal() > 0 else -1
        feats = " ".join(f"{j + 1}:{float(x[j])!r}" for j in np.flatnonzero(mask))
        out.append(f"{y:+d} {feats}".rstrip())
    return "\n".join(out) + "\n"


@pytest.fixture(scope="session")
def quad():
    return data.make_quadratic(data.QuadraticSpec(n=4, m=5, d=8, mu=1e-2, seed=3))


@pytest.fixture(scope="session")
def quad_big():
    return data.make_quadratic(data.QuadraticSpec(n=10, m=20, d=30, mu=1e-3, seed=0))


@pytest.fixture(scope="session")
def libsvm_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("data") / "toy.libsvm"
    p.write_text(synthetic_libsvm())
    return p


@pytest.fixture(scope="session")
def logit(libsvm_file):
    ds = data.load_libsvm(libsvm_file)
    return problems.make_logistic(ds, data.partition(ds, 4, "random", 0), mu=1e-2)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(ACCEPTANCE_LINES):
        for line in ACCEPTANCE_LINES[c]:
            terminalreporter.write_line(line)
