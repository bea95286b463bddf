"""Desk-scale simulator and optimizer for programmable-surface RF
occupancy sensing: reflection-channel physics, policy-gradient training of
beamformer patterns jointly with a sensing decoder, and closed-form
bounds on the achievable cross-entropy, cross-validated by Monte Carlo."""

__version__ = "0.1.0"

from .channel import (ControlMatrix, Geometry, ReflectionTable,
                      build_projection_matrix, group_elements, los_gain,
                      measurement_matrix, projection_entry, simulate_measurement)
from .numerics import Rng, erf, finite_diff_gradient, pinv, sample_complex_gaussian
from .scene import Scene, SceneDistribution, enumerate_scene_set, occupancy_of, sample_scene

__all__ = [
    "ControlMatrix", "Geometry", "ReflectionTable", "Rng", "Scene",
    "SceneDistribution", "build_projection_matrix", "enumerate_scene_set",
    "erf", "finite_diff_gradient", "group_elements", "los_gain",
    "measurement_matrix", "occupancy_of", "pinv", "projection_entry",
    "sample_complex_gaussian", "sample_scene",
]
