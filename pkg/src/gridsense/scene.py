"""Target-space model: grid occupancy, complex reflection coefficients, and
scene-set generation for training and evaluation."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .numerics import Rng, sample_complex_gaussian


@dataclass(eq=False)
class SceneDistribution:
    """Per-grid occupancy priors and reflection-coefficient variances."""

    priors: np.ndarray
    reflect_var: np.ndarray

    def __post_init__(self):
        self.priors = np.asarray(self.priors, dtype=float)
        self.reflect_var = np.asarray(self.reflect_var, dtype=float)
        if self.priors.shape != self.reflect_var.shape:
            raise ValueError("priors and reflect_var must have equal length")
        if np.any(self.priors < 0) or np.any(self.priors > 1):
            raise ValueError("priors must lie in [0, 1]")
        if np.any(self.reflect_var <= 0):
            raise ValueError("reflection variances must be positive")

    @property
    def m_grids(self) -> int:
        return self.priors.shape[0]

    @classmethod
    def uniform(cls, m_grids: int, prior: float = 0.5, var: float = 1.0) -> "SceneDistribution":
        return cls(np.full(m_grids, prior), np.full(m_grids, var))


@dataclass(eq=False)
class Scene:
    """One target-space realisation: occupancy flags and coefficients."""

    q: np.ndarray   # (M,) 0/1
    nu: np.ndarray  # (M,) complex, zero exactly where unoccupied

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.int64)
        self.nu = np.asarray(self.nu, dtype=complex)


def occupancy_of(nu: np.ndarray) -> np.ndarray:
    """Binary occupancy: 1 wherever the reflection coefficient is nonzero."""
    return (np.abs(np.asarray(nu)) > 0).astype(np.int64)


def sample_scene(q: np.ndarray, dist: SceneDistribution, rng: Rng) -> np.ndarray:
    """Coefficients for a given occupancy: CN(0, reflect_var_m) where
    occupied, exactly zero elsewhere."""
    q = np.asarray(q)
    if q.shape[0] != dist.m_grids:
        raise ValueError("occupancy length does not match distribution")
    draws = np.array([sample_complex_gaussian(v, rng) for v in dist.reflect_var])
    return np.where(q > 0, draws, 0.0 + 0.0j)


def _all_occupancies(m_grids: int) -> np.ndarray:
    """All 2^M occupancy patterns; grid 1 toggles fastest."""
    idx = np.arange(2 ** m_grids)
    return (idx[:, None] >> np.arange(m_grids)) & 1


def enumerate_scene_set(m_grids: int, dist: SceneDistribution, mode: str, rng: Rng,
                        n_samples: int | None = None) -> list[Scene]:
    """Build the scene set used for loss evaluation.

    ``exhaustive`` yields all 2^M occupancy patterns (M <= 16), each paired
    with one coefficient draw; ``sampled`` draws ``n_samples`` occupancies
    from the priors.
    """
    if mode == "exhaustive":
        if m_grids > 16:
            raise ValueError(f"exhaustive scene set needs M <= 16, got {m_grids}")
        patterns = _all_occupancies(m_grids)
    elif mode == "sampled":
        if not n_samples or n_samples < 1:
            raise ValueError("sampled mode needs n_samples >= 1")
        patterns = (rng.gen.random((n_samples, m_grids)) < dist.priors).astype(np.int64)
    else:
        raise ValueError(f"unknown scene mode {mode!r}")
    return [Scene(q, sample_scene(q, dist, rng)) for q in patterns]


def resample_coefficients(scenes: list[Scene], dist: SceneDistribution, rng: Rng) -> list[Scene]:
    """Fresh coefficient draws for fixed occupancy masks."""
    return [Scene(s.q, sample_scene(s.q, dist, rng)) for s in scenes]


def save_scene_file(path, scenes: list[Scene]) -> None:
    """Occupancy-only scene file: one row ``scene_id, q_1..q_M`` per scene."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene_id"] + [f"q_{m + 1}" for m in range(len(scenes[0].q))])
        for i, s in enumerate(scenes):
            writer.writerow([i] + [int(v) for v in s.q])


def load_scene_file(path, dist: SceneDistribution, rng: Rng) -> list[Scene]:
    """Load occupancy masks and resample coefficients under the given stream."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0].strip().lower() != "scene_id":
        raise ValueError(f"scene file {path} must start with a scene_id header")
    scenes = []
    for r in rows[1:]:
        if not r or not any(cell.strip() for cell in r):
            continue
        q = np.array([int(v) for v in r[1:]], dtype=np.int64)
        if q.shape[0] != dist.m_grids:
            raise ValueError(f"scene row has {q.shape[0]} grids, expected {dist.m_grids}")
        scenes.append(Scene(q, sample_scene(q, dist, rng)))
    return scenes
