import numpy as np
import pytest


def fd_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def rel_err(a, b, floor=1e-7):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return float((np.abs(a - b) / scale).max())


def interior_point(rng, n, c, radius=0.7):
    """Random ball point at no more than `radius` of the ball radius."""
    v = rng.normal(size=n)
    v /= np.linalg.norm(v)
    return v * (radius * rng.random() / np.sqrt(c))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_tree():
    """instrument -> {shaft, jaws} beside a flat leaf 'organ'."""
    from hyciss.taxonomy import Taxonomy

    return Taxonomy(
        [
            (1, "scene", None),
            (2, "instrument", 1),
            (3, "organ", 1),
            (4, "shaft", 2),
            (5, "jaws", 2),
        ]
    )


# -- acceptance reporting --------------------------------------------------------

ACCEPTANCE_RESULTS: dict[str, str] = {}
ACCEPTANCE_EXPECTED = [f"criterion {i}" for i in range(1, 11)]
_ACCEPTANCE_RAN = {"flag": False}


def record_criterion(number: int, detail: str) -> None:
    ACCEPTANCE_RESULTS[f"criterion {number}"] = detail


def mark_acceptance_ran() -> None:
    _ACCEPTANCE_RAN["flag"] = True


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RAN["flag"]:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for key in ACCEPTANCE_EXPECTED:
        if key in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(f"PASS {key}: {ACCEPTANCE_RESULTS[key]}")
        else:
            terminalreporter.write_line(f"FAIL {key} (test failed, deselected, or skipped)")
