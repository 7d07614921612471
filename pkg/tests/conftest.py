import numpy as np
import pytest

from trajfuse.geometry import Box3D


def random_box(rng, spread=2.0, cls=0, score=None):
    return Box3D(
        rng.uniform(-spread, spread), rng.uniform(-spread, spread), rng.uniform(-0.5, 0.5),
        rng.uniform(0.5, 4.0), rng.uniform(0.4, 2.0), rng.uniform(0.5, 2.0),
        rng.uniform(-np.pi, np.pi), cls=cls, score=float(rng.uniform()) if score is None else score)


def mc_iou3d(a: Box3D, b: Box3D, unit_samples: np.ndarray) -> float:
    """IoU from points drawn uniformly inside ``a``: the hit fraction in ``b`` times vol(a) is the overlap."""
    u = unit_samples  # (N, 3) uniform in [-0.5, 0.5]^3
    c, s = np.cos(a.theta), np.sin(a.theta)
    lx, ly, lz = u[:, 0] * a.l, u[:, 1] * a.w, u[:, 2] * a.d
    px = a.x + c * lx - s * ly
    py = a.y + s * lx + c * ly
    pz = a.z + lz
    cb, sb = np.cos(b.theta), np.sin(b.theta)
    dx, dy = px - b.x, py - b.y
    bx = cb * dx + sb * dy
    by = -sb * dx + cb * dy
    inside = (np.abs(bx) <= b.l / 2) & (np.abs(by) <= b.w / 2) & (np.abs(pz - b.z) <= b.d / 2)
    inter = inside.mean() * a.volume
    return inter / (a.volume + b.volume - inter)


def central_diff(f, x, h=1e-5):
    """Full numerical gradient of scalar ``f`` at array ``x`` (modified in place and restored)."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, n, atol=1e-6):
    a, n = np.asarray(a, dtype=float), np.asarray(n, dtype=float)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), atol))) if a.size else 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
