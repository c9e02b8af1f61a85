import numpy as np
import pytest

from bye.geometry import PointCloud
from bye.mapping import ObservationSample
from bye.tensor import Tensor


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / scale


def numeric_grad(fn, arrays, h=1e-3, indices=None):
    """Central differences of a scalar float64 function of numpy arrays."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size) if indices is None else indices[k]:
            old = flat[i]
            flat[i] = old + h
            up = fn(*arrays)
            flat[i] = old - h
            down = fn(*arrays)
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def gradcheck(op, arrays, h=1e-3):
    """Compare float32 reverse-mode gradients of ``op`` against float64 differences.

    ``op`` takes Tensors and returns a scalar Tensor.  Returns the worst
    norm-wise relative error over the inputs.
    """
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*ts)
    out.backward()

    def f64(*arrs):
        return float(op(*[Tensor(a, dtype=np.float64) for a in arrs]).data)

    num = numeric_grad(f64, arrays, h)
    return max(rel_error(t.grad, n) for t, n in zip(ts, num))


def random_samples(n_labels=4, per_label=6, points=40, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for lab in range(n_labels):
        base = rng.normal(size=3) * 0.3
        scale = rng.uniform(0.05, 0.2, size=3)
        for f in range(per_label):
            xyz = base + rng.normal(size=(points, 3)) * scale
            rgb = np.clip(rng.uniform(0, 1, 3) * 0 + lab / n_labels + 0.05 * rng.normal(size=(points, 3)), 0, 1)
            out.append(ObservationSample(PointCloud(np.hstack([xyz, rgb])), lab, f, xyz.mean(axis=0)))
    return out


@pytest.fixture
def samples():
    return random_samples()


# acceptance summary: one line per criterion, printed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
