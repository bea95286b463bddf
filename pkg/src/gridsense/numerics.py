"""Shared numerical kernels: deterministic random streams, pseudo-inverse,
error function, complex Gaussian sampling, and finite differences.

Everything here is pure given its inputs. ``Rng`` instances are the only
stateful objects; they must not be shared across concurrent consumers --
``split`` them instead.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf as _scipy_erf


class Rng:
    """Splittable deterministic random stream.

    Backed by the Philox counter-based bit generator: equal seeds produce
    bitwise-equal sample streams, and ``split`` derives child streams that
    are statistically independent of the parent and of each other, so
    parallel consumers stay reproducible regardless of scheduling.
    """

    def __init__(self, seed: int | None = 0, _seq: np.random.SeedSequence | None = None):
        self._seq = np.random.SeedSequence(seed) if _seq is None else _seq
        self.gen = np.random.Generator(np.random.Philox(self._seq))

    @property
    def seed(self):
        return self._seq.entropy

    def split(self, n: int) -> list["Rng"]:
        """Derive ``n`` independent child streams; the parent stays usable."""
        return [Rng(_seq=child) for child in self._seq.spawn(n)]

    def child(self) -> "Rng":
        return self.split(1)[0]


def pinv(mat: np.ndarray) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via SVD.

    Singular values below ``s_max * max(rows, cols) * 1e-12`` are treated
    as zero, which keeps the inverse stable for the rank-deficient
    measurement matrices that arise when beamformer patterns repeat.
    """
    mat = np.asarray(mat)
    if mat.ndim != 2:
        raise ValueError(f"pinv expects a 2-D matrix, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise ValueError("pinv: input contains non-finite entries")
    u, s, vh = np.linalg.svd(mat, full_matrices=False)
    cutoff = s[0] * max(mat.shape) * 1e-12 if s.size else 0.0
    inv_s = np.where(s > cutoff, 1.0 / np.where(s > cutoff, s, 1.0), 0.0)
    return (vh.conj().T * inv_s) @ u.conj().T


def erf(x):
    """Error function, accurate to well below 1e-12 absolute.

    Accepts scalars or arrays; the return type follows the input.
    """
    return _scipy_erf(x)


def sample_complex_gaussian(variance: float, rng: Rng, size=None):
    """Draw circularly-symmetric complex normals with the given total variance.

    Real and imaginary parts are independent zero-mean normals carrying
    ``variance / 2`` each, so ``E|z|^2 == variance``.
    """
    if variance < 0:
        raise ValueError(f"variance must be non-negative, got {variance}")
    scale = np.sqrt(variance / 2.0)
    re = rng.gen.normal(0.0, scale, size)
    im = rng.gen.normal(0.0, scale, size)
    return re + 1j * im


def finite_diff_gradient(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    Test oracle for the analytic backpropagation paths; intentionally
    simple and independent of them.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp.flat[i] += step
        xm = x.copy()
        xm.flat[i] -= step
        grad.flat[i] = (f(xp) - f(xm)) / (2.0 * step)
    return grad
