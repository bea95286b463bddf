"""Policy-gradient training with a progressing reward: the policy network
picks element configurations frame by frame, the sensing network is
retrained alongside it, and the (always-negative) reward is the negated
mean cross-entropy of the current sensing network, so it improves as
training proceeds.

Each epoch rolls one episode from the initial state to a terminal state,
computes the terminal reward by Monte Carlo over the scene set and sampled
noise, updates the policy parameters with the score-function estimator,
then updates the sensing parameters by gradient descent on the same
cross-entropy, and finally discards the replay buffer.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import mdp, nets
from .channel import ControlMatrix, Geometry, measurement_matrix
from .numerics import Rng, pinv, sample_complex_gaussian
from .scene import SceneDistribution, enumerate_scene_set, resample_coefficients

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Knobs of one training run. ``n_elements`` counts effective
    (independently controllable) elements after any grouping."""

    k_frames: int
    n_elements: int
    n_states: int
    m_grids: int
    epochs: int = 2000
    n_mc: int = 8
    lr0: float = 1e-3
    seed: int = 1
    scene_mode: str = "resample"        # "fixed" | "resample"
    scene_resample_every: int = 1       # epochs between coefficient redraws
    scene_samples: int = 0              # 0 = exhaustive occupancy set
    eval_every: int = 20
    eval_noise_draws: int = 8
    use_baseline: bool = True
    baseline_window: int = 64
    eval_rollouts: int = 4              # policy samples averaged per evaluation
    grad_clip: float = 10.0
    group_hidden: tuple = (64, 32)
    head_hidden: tuple = (64,)
    head_gain: float = 4.0
    head_out_gain: float = 0.1
    sensing_hidden: tuple = (256,)
    sensing_first_gain: float = 8.0
    sensing_out_gain: float = 0.1
    policy_kind: str = "symmetric"      # "symmetric" | "single"
    sensing_decoder: bool = True
    sensing_kind: str = "mlp"           # "mlp" | "threshold"
    feature_scale: float | str = "auto"

    def __post_init__(self):
        if min(self.k_frames, self.n_elements, self.n_states, self.m_grids) < 1:
            raise ValueError("all structural counts must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("initial learning rate must be positive")
        if self.epochs < 0 or self.n_mc < 1:
            raise ValueError("epochs must be >= 0 and n_mc >= 1")
        if self.scene_mode not in ("fixed", "resample"):
            raise ValueError(f"unknown scene mode {self.scene_mode!r}")


@dataclass
class TraceRow:
    epoch: int
    ce_eval: float
    reward_mean: float
    grad_norm_theta: float
    grad_norm_w: float
    lr: float
    seconds: float


@dataclass
class LossTrace:
    rows: list = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ValueError("trace epochs must be strictly increasing")
        self.rows.append(row)

    @property
    def initial_ce(self) -> float:
        return self.rows[0].ce_eval

    @property
    def final_ce(self) -> float:
        return self.rows[-1].ce_eval


@dataclass(eq=False)
class SensingTask:
    """The physical context a training run operates in."""

    geom: Geometry
    a_proj: np.ndarray
    dist: SceneDistribution

    @property
    def m_grids(self) -> int:
        return self.dist.m_grids


def lr_schedule(lr0: float, n_ep: int) -> float:
    """Inverse decay: half the initial rate after 1000 epochs."""
    return lr0 / (1.0 + n_ep * 1e-3)


def bsg_step(x: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
    """Closed-form minimiser of the proximal subproblem
    g.(x' - x) + |x' - x|^2 / (2 lr), which is the plain gradient step."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    return np.asarray(x, dtype=float) - lr * np.asarray(g, dtype=float)


def select_action(theta: nets.PolicyParams, state: mdp.MdpState, a_proj: np.ndarray,
                  rng: Rng) -> int:
    """Sample an action (1-based) from the policy distribution."""
    if mdp.is_terminal(state):
        raise ValueError("cannot select an action in a terminal state")
    probs, _ = nets.policy_forward(theta, state, a_proj)
    u = rng.gen.random()
    return int(np.searchsorted(np.cumsum(probs), u) + 1)


def rollout_episode(theta: nets.PolicyParams, cfg: TrainConfig, a_proj: np.ndarray,
                    rng: Rng):
    """One episode from the initial state; returns the filled replay buffer
    (K * N experiences in visit order) and the terminal state."""
    state = mdp.initial_state(cfg.k_frames, cfg.n_elements, cfg.n_states)
    buffer = mdp.ReplayBuffer()
    while not mdp.is_terminal(state):
        action = select_action(theta, state, a_proj, rng)
        buffer.append(mdp.Experience(state, action))
        state = mdp.transition(state, action)
    return buffer, state


def greedy_control(theta: nets.PolicyParams, cfg: TrainConfig, a_proj: np.ndarray) -> ControlMatrix:
    """Deterministic argmax rollout; evaluation-only mode of the policy."""
    state = mdp.initial_state(cfg.k_frames, cfg.n_elements, cfg.n_states)
    while not mdp.is_terminal(state):
        probs, _ = nets.policy_forward(theta, state, a_proj)
        state = mdp.transition(state, int(np.argmax(probs)) + 1)
    return state.control


def monte_carlo_reward(control: ControlMatrix, w: nets.SensingParams, scenes,
                       n_mc: int, task: SensingTask, rng: Rng) -> float:
    """Negated empirical mean cross-entropy; the measurement matrix and its
    pseudo-inverse are rebuilt from the control matrix once per call."""
    return -mdp.mean_cross_entropy(control, w, scenes, n_mc, task.geom, task.a_proj, rng)


def _clipped(grad: np.ndarray, clip: float):
    norm = float(np.linalg.norm(grad))
    if not np.isfinite(norm):
        raise FloatingPointError(f"non-finite gradient (norm={norm})")
    if clip > 0 and norm > clip:
        return grad * (clip / norm), norm
    return grad, norm


def update_policy(theta: nets.PolicyParams, buffer: mdp.ReplayBuffer,
                  returns: np.ndarray, baseline: float, lr: float,
                  a_proj: np.ndarray, grad_clip: float = 10.0) -> float:
    """Ascent step along mean_e (G_e - b) grad ln pi; returns the pre-clip
    gradient norm. The baseline shifts no fixed point (score-function
    identity) but stops uniformly-negative returns suppressing every
    sampled action."""
    if len(buffer) != len(returns):
        raise ValueError("buffer and returns are misaligned")
    if len(buffer) == 0:
        return 0.0
    weights = (np.asarray(returns, dtype=float) - baseline) / len(buffer)
    states = [e.state for e in buffer]
    actions = [e.action for e in buffer]
    grad = nets.policy_batch_grad(theta, states, actions, weights, a_proj)
    step, norm = _clipped(grad, grad_clip)
    theta.set_flat(theta.get_flat() + lr * step)
    return norm


def _sensing_batch(control: ControlMatrix | None, scenes, n_mc: int, geom: Geometry,
                   a_proj: np.ndarray | None, rng: Rng, gamma: np.ndarray | None = None):
    """Measurement/label batch of size len(scenes) * n_mc for one control."""
    if gamma is None:
        gamma = measurement_matrix(geom, a_proj, control)
    nu = np.stack([s.nu for s in scenes])
    p_true = np.repeat(np.stack([s.q for s in scenes]).astype(float), n_mc, axis=0)
    clean = np.repeat(nu @ gamma.T, n_mc, axis=0)
    noise = sample_complex_gaussian(2.0 * geom.effective_noise_power, rng, size=clean.shape)
    return gamma, clean + noise, p_true


def update_sensing(w: nets.SensingParams, control: ControlMatrix | None, scenes,
                   n_mc: int, task: SensingTask, lr: float, rng: Rng,
                   grad_clip: float = 10.0, gamma: np.ndarray | None = None):
    """Descent step on the batch cross-entropy; returns (loss, grad norm)."""
    gamma, ytilde, p_true = _sensing_batch(control, scenes, n_mc, task.geom,
                                           task.a_proj, rng, gamma=gamma)
    gamma_pinv = pinv(gamma) if w.use_decoder else None
    loss, grad = nets.sensing_loss_grad(w, ytilde, p_true, gamma_pinv)
    step, norm = _clipped(grad, grad_clip)
    w.set_flat(w.get_flat() - lr * step)
    return loss, norm


def _auto_feature_scale(a_proj: np.ndarray) -> float:
    fnorm = float(np.linalg.norm(a_proj))
    if fnorm == 0.0:
        return 1.0
    return float(np.sqrt(a_proj.shape[1]) / fnorm)


def _raw_input_scale(cfg: TrainConfig, task: SensingTask,
                     gamma: np.ndarray | None = None) -> float:
    """Normalisation for the decoder-free pipeline: 1 / RMS measurement
    magnitude under seeded random controls and typical scenes, so the raw
    desk-scale measurements land in the MLP's useful range."""
    probe = Rng(0xC0FFEE)
    mags = []
    for _ in range(8):
        if gamma is None:
            control = ControlMatrix.random(cfg.k_frames, cfg.n_elements,
                                           cfg.n_states, probe)
            g = measurement_matrix(task.geom, task.a_proj, control)
        else:
            g = gamma
        nu = sample_complex_gaussian(1.0, probe, size=task.m_grids) \
            * np.sqrt(task.dist.reflect_var) * (probe.gen.random(task.m_grids) < task.dist.priors)
        mags.append(np.abs(g @ nu))
    rms = float(np.sqrt(np.mean(np.concatenate(mags) ** 2)))
    return 1.0 / rms if rms > 0 else 1.0


def _evaluation_set(task: SensingTask, cfg: TrainConfig, rng: Rng):
    """Held-out scenes with frozen coefficients and frozen noise draws, so
    the trace metric moves only when the parameters do."""
    mode = "exhaustive" if cfg.scene_samples == 0 else "sampled"
    scenes = enumerate_scene_set(task.m_grids, task.dist, mode, rng,
                                 n_samples=cfg.scene_samples or None)
    noise = sample_complex_gaussian(
        2.0 * task.geom.effective_noise_power, rng,
        size=(len(scenes) * cfg.eval_noise_draws, cfg.k_frames))
    return scenes, noise


def _eval_ce(w: nets.SensingParams, gamma: np.ndarray, scenes, noise: np.ndarray,
             draws: int) -> float:
    nu = np.stack([s.nu for s in scenes])
    p_true = np.repeat(np.stack([s.q for s in scenes]).astype(float), draws, axis=0)
    ytilde = np.repeat(nu @ gamma.T, draws, axis=0) + noise[:, :gamma.shape[0]]
    gamma_pinv = pinv(gamma) if w.use_decoder else None
    p_hat, _ = nets.sensing_forward(w, ytilde, gamma_pinv)
    return float(np.mean(nets.cross_entropy(p_hat, p_true)))


def _training_scenes(task: SensingTask, cfg: TrainConfig, rng: Rng):
    mode = "exhaustive" if cfg.scene_samples == 0 else "sampled"
    return enumerate_scene_set(task.m_grids, task.dist, mode, rng,
                               n_samples=cfg.scene_samples or None)


def train(task: SensingTask, cfg: TrainConfig):
    """Full training run; returns (policy, sensing, trace).

    Within an epoch the policy is updated first (with the sensing
    parameters fixed), then the sensing network on fresh samples from the
    epoch's terminal control matrix. Transient numeric failures skip the
    epoch and are logged rather than aborting the run.
    """
    master = Rng(cfg.seed)
    r_theta, r_w, r_scene, r_eval, r_epochs = master.split(5)
    fs = _auto_feature_scale(task.a_proj) if cfg.feature_scale == "auto" else float(cfg.feature_scale)
    theta = nets.PolicyParams.create(
        task.m_grids, cfg.k_frames, cfg.n_elements, cfg.n_states, r_theta,
        group_hidden=cfg.group_hidden, head_hidden=cfg.head_hidden,
        kind=cfg.policy_kind, feature_scale=fs,
        head_gain=cfg.head_gain, out_gain=cfg.head_out_gain)
    if cfg.sensing_kind == "threshold":
        w = nets.SensingParams.create_threshold(task.m_grids)
    else:
        scale = 1.0 if cfg.sensing_decoder else _raw_input_scale(cfg, task)
        w = nets.SensingParams.create(task.m_grids, r_w, hidden=cfg.sensing_hidden,
                                      use_decoder=cfg.sensing_decoder,
                                      k_frames=cfg.k_frames,
                                      first_gain=cfg.sensing_first_gain,
                                      out_gain=cfg.sensing_out_gain,
                                      input_scale=scale)
    trace = LossTrace()
    if cfg.epochs == 0:
        return theta, w, trace

    scenes = _training_scenes(task, cfg, r_scene)
    eval_scenes, eval_noise = _evaluation_set(task, cfg, r_eval)
    eval_seeds = r_eval.split(max(cfg.eval_rollouts, 1))

    def evaluate() -> float:
        # frozen-seed policy rollouts: measures the system as it operates,
        # deterministically for fixed parameters
        total = 0.0
        for seed_rng in eval_seeds:
            control = rollout_episode(theta, cfg, task.a_proj,
                                      Rng(_seq=seed_rng._seq))[1].control
            gamma = measurement_matrix(task.geom, task.a_proj, control)
            total += _eval_ce(w, gamma, eval_scenes, eval_noise, cfg.eval_noise_draws)
        return total / max(cfg.eval_rollouts, 1)

    t_start = time.perf_counter()
    trace.append(TraceRow(0, evaluate(), float("nan"), float("nan"), float("nan"),
                          cfg.lr0, 0.0))
    reward_window = deque(maxlen=cfg.baseline_window)
    for ep in range(1, cfg.epochs + 1):
        lr = lr_schedule(cfg.lr0, ep)
        ep_rng = r_epochs.child()
        r_roll, r_reward, r_sense, r_coeff = ep_rng.split(4)
        gn_theta = gn_w = float("nan")
        reward_val = float("nan")
        try:
            if cfg.scene_mode == "resample" and (ep - 1) % cfg.scene_resample_every == 0:
                scenes = resample_coefficients(scenes, task.dist, r_coeff)
            buffer, terminal = rollout_episode(theta, cfg, task.a_proj, r_roll)
            reward_val = monte_carlo_reward(terminal.control, w, scenes,
                                            cfg.n_mc, task, r_reward)
            returns = mdp.episode_return(buffer, reward_val)
            baseline = float(np.mean(reward_window)) if (cfg.use_baseline and reward_window) else (
                reward_val if cfg.use_baseline else 0.0)
            gn_theta = update_policy(theta, buffer, returns, baseline, lr,
                                     task.a_proj, cfg.grad_clip)
            reward_window.append(reward_val)
            _, gn_w = update_sensing(w, terminal.control, scenes, cfg.n_mc,
                                     task, lr, r_sense, cfg.grad_clip)
            buffer.clear()
        except (FloatingPointError, np.linalg.LinAlgError) as err:
            log.warning("skipping epoch %d after numeric failure: %s", ep, err)
        if ep % cfg.eval_every == 0 or ep == cfg.epochs:
            trace.append(TraceRow(ep, evaluate(), reward_val, gn_theta, gn_w, lr,
                                  time.perf_counter() - t_start))
    return theta, w, trace


def train_sensing_only(gamma: np.ndarray, task: SensingTask, cfg: TrainConfig):
    """Train only the sensing network against a fixed measurement matrix
    (random-control and MIMO baselines); returns (sensing, trace)."""
    master = Rng(cfg.seed)
    _, r_w, r_scene, r_eval, r_epochs = master.split(5)
    if cfg.sensing_kind == "threshold":
        w = nets.SensingParams.create_threshold(task.m_grids)
    else:
        scale = 1.0 if cfg.sensing_decoder else _raw_input_scale(cfg, task, gamma=gamma)
        w = nets.SensingParams.create(task.m_grids, r_w, hidden=cfg.sensing_hidden,
                                      use_decoder=cfg.sensing_decoder,
                                      k_frames=gamma.shape[0],
                                      first_gain=cfg.sensing_first_gain,
                                      out_gain=cfg.sensing_out_gain,
                                      input_scale=scale)
    trace = LossTrace()
    if cfg.epochs == 0:
        return w, trace
    scenes = _training_scenes(task, cfg, r_scene)
    eval_scenes, eval_noise = _evaluation_set(task, cfg, r_eval)
    # eval noise was drawn for k_frames columns; fixed gamma may differ
    if eval_noise.shape[1] < gamma.shape[0]:
        extra = sample_complex_gaussian(
            2.0 * task.geom.effective_noise_power, r_eval,
            size=(eval_noise.shape[0], gamma.shape[0] - eval_noise.shape[1]))
        eval_noise = np.concatenate([eval_noise, extra], axis=1)
    t_start = time.perf_counter()
    trace.append(TraceRow(0, _eval_ce(w, gamma, eval_scenes, eval_noise,
                                      cfg.eval_noise_draws),
                          float("nan"), float("nan"), float("nan"), cfg.lr0, 0.0))
    for ep in range(1, cfg.epochs + 1):
        lr = lr_schedule(cfg.lr0, ep)
        ep_rng = r_epochs.child()
        r_sense, r_coeff = ep_rng.split(2)
        gn_w = float("nan")
        loss = float("nan")
        try:
            if cfg.scene_mode == "resample" and (ep - 1) % cfg.scene_resample_every == 0:
                scenes = resample_coefficients(scenes, task.dist, r_coeff)
            loss, gn_w = update_sensing(w, None, scenes, cfg.n_mc, task, lr,
                                        r_sense, cfg.grad_clip, gamma=gamma)
        except (FloatingPointError, np.linalg.LinAlgError) as err:
            log.warning("skipping epoch %d after numeric failure: %s", ep, err)
        if ep % cfg.eval_every == 0 or ep == cfg.epochs:
            trace.append(TraceRow(ep, _eval_ce(w, gamma, eval_scenes, eval_noise,
                                               cfg.eval_noise_draws),
                                  -loss, float("nan"), gn_w, lr,
                                  time.perf_counter() - t_start))
    return w, trace
