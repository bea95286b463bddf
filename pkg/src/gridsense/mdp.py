"""Sequential configuration selection as a Markov decision process.

A state is (k, n, C): the frame and element whose configuration is chosen
next, plus the control matrix built so far. Transitions are deterministic
and advance row-major -- all N elements of a frame, then the next frame --
so an episode makes exactly K * N decisions and sets every one-hot block
exactly once. Rewards are zero everywhere except terminal states, where
the reward is the negated mean cross-entropy of the current sensing
network over a scene set and sampled noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets
from .channel import ControlMatrix, Geometry, measurement_matrix
from .numerics import Rng, pinv, sample_complex_gaussian


@dataclass(frozen=True, eq=False)
class MdpState:
    k: int
    n: int
    control: ControlMatrix


@dataclass(frozen=True)
class Experience:
    """One (state, action) pair; rewards are recomputed at training time
    because they depend on the evolving sensing network."""

    state: MdpState
    action: int


class ReplayBuffer:
    """Ordered experiences of the current epoch; discarded after use."""

    def __init__(self):
        self._items: list[Experience] = []

    def append(self, exp: Experience) -> None:
        self._items.append(exp)

    def clear(self) -> None:
        self._items = []

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, idx):
        return self._items[idx]


def initial_state(k_frames: int, n_elements: int, n_states: int) -> MdpState:
    """(1, 1, C0): every block starts in the calibration state 1."""
    if min(k_frames, n_elements, n_states) < 1:
        raise ValueError("K, N and N_S must all be >= 1")
    return MdpState(1, 1, ControlMatrix.default(k_frames, n_elements, n_states))


def is_terminal(state: MdpState) -> bool:
    return state.k == state.control.k_frames + 1 and state.n == 1


def transition(state: MdpState, action: int) -> MdpState:
    """Set block (k, n) to the chosen state and advance the indices."""
    if is_terminal(state):
        raise ValueError("cannot transition from a terminal state")
    control = state.control.with_block(state.k, state.n, action)
    if state.n < control.n_elements:
        return MdpState(state.k, state.n + 1, control)
    return MdpState(state.k + 1, 1, control)


def mean_cross_entropy(control: ControlMatrix, w: "nets.SensingParams", scenes,
                       n_mc: int, geom: Geometry, a_proj: np.ndarray, rng: Rng,
                       gamma: np.ndarray | None = None) -> float:
    """Empirical mean cross-entropy over all scenes and n_mc noise draws.

    Gamma and its pseudo-inverse are recomputed from the control matrix
    once per call (pass ``gamma`` to skip that, e.g. for fixed-measurement
    baselines).
    """
    if not scenes:
        raise ValueError("scene set must not be empty")
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    if gamma is None:
        gamma = measurement_matrix(geom, a_proj, control)
    gamma_pinv = pinv(gamma) if w.use_decoder else None
    nu = np.stack([s.nu for s in scenes])            # (S, M)
    p_true = np.stack([s.q for s in scenes]).astype(float)
    clean = nu @ gamma.T                             # (S, K)
    clean = np.repeat(clean, n_mc, axis=0)
    p_true = np.repeat(p_true, n_mc, axis=0)
    noise = sample_complex_gaussian(2.0 * geom.effective_noise_power, rng, size=clean.shape)
    p_hat, _ = nets.sensing_forward(w, clean + noise, gamma_pinv)
    return float(np.mean(nets.cross_entropy(p_hat, p_true)))


def reward(state: MdpState, w: "nets.SensingParams", scenes, n_mc: int,
           geom: Geometry, a_proj: np.ndarray, rng: Rng) -> float:
    """0 for non-terminal states, else the negated mean cross-entropy of
    the sensing network under the terminal control matrix."""
    if not is_terminal(state):
        return 0.0
    return -mean_cross_entropy(state.control, w, scenes, n_mc, geom, a_proj, rng)


def episode_return(buffer: ReplayBuffer, terminal_reward: float) -> np.ndarray:
    """Per-experience returns. Intermediate rewards are all zero, so every
    experience's return equals the terminal reward."""
    return np.full(len(buffer), float(terminal_reward))
