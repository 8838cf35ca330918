import numpy as np
import pytest

from promptseg import _accel


@pytest.fixture(params=["numpy", "numba"])
def kernel_backend(request, monkeypatch):
    """Run the test once per kernel implementation."""
    if request.param == "numba" and not _accel.HAVE_NUMBA:
        pytest.skip("numba not installed")
    monkeypatch.setattr(_accel, "USE_NUMBA", request.param == "numba")
    return request.param


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_line(request):
    """Callable ``(criterion, ok, detail)`` that prints and records one PASS/FAIL line."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(criterion, ok, detail=""):
        line = f"[acceptance {criterion}] {'PASS' if ok else 'FAIL'} {detail}".rstrip()
        print(line)
        lines.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_blob_masks(rng, n, size, max_side=None):
    """``n`` random axis-aligned rectangles (as bool rasters) on a ``size`` x ``size`` canvas."""
    from promptseg.masks import rle_encode

    max_side = max_side or size // 2
    out = []
    for i in range(n):
        w, h = rng.integers(2, max_side + 1, size=2)
        x, y = rng.integers(0, size - w + 1), rng.integers(0, size - h + 1)
        r = np.zeros((size, size), bool)
        r[y:y + h, x:x + w] = True
        out.append(rle_encode(r, quality=float(rng.choice([0.5, 0.7, 0.9, 1.0])), id=i))
    return out
