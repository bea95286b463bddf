"""From-scratch multilayer perceptrons with exact backpropagation, plus the
two task networks built from them:

* the policy network -- two symmetric MLP groups with parameters shared
  across the K frame slots (one consumes the real part of each frame's
  calibrated gain row, the other the imaginary part), followed by a head
  MLP ending in a softmax over the element states;
* the sensing network -- a parameter-free pseudo-inverse decoder followed
  by an MLP mapping the decoded coefficients to per-grid occupancy
  probabilities.

Gradients are computed analytically; ``numerics.finite_diff_gradient`` is
the independent oracle in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .channel import ControlMatrix
from .numerics import Rng

if TYPE_CHECKING:  # pragma: no cover
    from .mdp import MdpState

PROB_CLAMP = 1e-7
_EXP_LIMIT = 500.0  # keeps exp() finite for runaway logits


def _relu(z):
    return np.maximum(z, 0.0)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -_EXP_LIMIT, _EXP_LIMIT)))


def _softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(np.clip(shifted, -_EXP_LIMIT, 0.0))
    return e / e.sum(axis=1, keepdims=True)


class Mlp:
    """Fully connected network: affine layers with ReLU hidden activations
    and a configurable output activation (identity | sigmoid | softmax).

    Weights are He-style fan-in-scaled uniform, biases zero. ``forward``
    operates on batches of row vectors and returns a cache that ``backward``
    consumes; caches are invalidated whenever the parameters change.
    """

    def __init__(self, layer_sizes, out_activation: str = "identity", rng: Rng | None = None):
        if len(layer_sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        if out_activation not in ("identity", "sigmoid", "softmax"):
            raise ValueError(f"unknown output activation {out_activation!r}")
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.out_activation = out_activation
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            if rng is None:
                w = np.zeros((fan_out, fan_in))
                b = np.zeros(fan_out)
            else:
                bound = np.sqrt(6.0 / fan_in)
                w = rng.gen.uniform(-bound, bound, size=(fan_out, fan_in))
                # small nonzero biases keep pre-activations off the ReLU kink
                # for the all-zero feature rows of untouched frames
                b = rng.gen.uniform(-0.1 * bound, 0.1 * bound, size=fan_out)
            self.weights.append(w)
            self.biases.append(b)
        self._version = 0

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray):
        """Returns (output, cache); ``x`` is (batch, d_in) or (d_in,)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.layer_sizes[0]:
            raise ValueError(f"input width {x.shape[1]} != expected {self.layer_sizes[0]}")
        inputs = [x]
        pre = []
        h = x
        for l in range(self.n_layers):
            z = h @ self.weights[l].T + self.biases[l]
            pre.append(z)
            if l < self.n_layers - 1:
                h = _relu(z)
                inputs.append(h)
            else:
                if self.out_activation == "identity":
                    h = z
                elif self.out_activation == "sigmoid":
                    h = _sigmoid(z)
                else:
                    h = _softmax(z)
        cache = {"inputs": inputs, "pre": pre, "out": h, "version": self._version}
        return h, cache

    def backward(self, cache, grad_out: np.ndarray):
        """Exact gradients given d(loss)/d(output).

        Returns ``(param_grads, grad_in)`` where ``param_grads`` is a list
        of (dW, db) pairs, batch-summed, and ``grad_in`` is the gradient
        with respect to the input rows.
        """
        if cache["version"] != self._version:
            raise ValueError("stale cache: parameters changed since the forward pass")
        grad_out = np.atleast_2d(np.asarray(grad_out, dtype=float))
        y = cache["out"]
        if self.out_activation == "identity":
            dz = grad_out
        elif self.out_activation == "sigmoid":
            dz = grad_out * y * (1.0 - y)
        else:
            dz = y * grad_out - y * np.sum(y * grad_out, axis=1, keepdims=True)
        param_grads = [None] * self.n_layers
        for l in range(self.n_layers - 1, -1, -1):
            x_l = cache["inputs"][l]
            param_grads[l] = (dz.T @ x_l, dz.sum(axis=0))
            if l > 0:
                dx = dz @ self.weights[l]
                dz = dx * (cache["pre"][l - 1] > 0)
            else:
                grad_in = dz @ self.weights[l]
        return param_grads, grad_in

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.param_count():
            raise ValueError("flat parameter vector has the wrong length")
        pos = 0
        for l in range(self.n_layers):
            w, b = self.weights[l], self.biases[l]
            self.weights[l] = flat[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[l] = flat[pos:pos + b.size].copy()
            pos += b.size
        self._version += 1

    @staticmethod
    def flatten_grads(param_grads) -> np.ndarray:
        parts = []
        for dw, db in param_grads:
            parts.append(dw.ravel())
            parts.append(db.ravel())
        return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Policy network
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class PolicyParams:
    """Policy-network parameters.

    ``kind == "symmetric"`` uses the two shared-parameter groups, so the
    group parameter count is independent of K. ``kind == "single"``
    replaces them with one wide MLP over all frames at once (the
    complexity-comparison baseline).
    """

    k_frames: int
    n_elements: int
    n_states: int
    m_grids: int
    kind: str = "symmetric"
    group_r: Mlp | None = None
    group_i: Mlp | None = None
    single: Mlp | None = None
    head: Mlp | None = None
    feature_scale: float = 1.0

    @classmethod
    def create(cls, m_grids: int, k_frames: int, n_elements: int, n_states: int,
               rng: Rng, group_hidden=(64, 32), head_hidden=(64,),
               kind: str = "symmetric", feature_scale: float = 1.0,
               head_gain: float = 4.0, out_gain: float = 0.1) -> "PolicyParams":
        """He init throughout, with the head's hidden layers widened by
        ``head_gain`` and its logit layer damped by ``out_gain``: the
        initial policy starts near uniform while plain SGD steps move the
        logits at a useful rate."""
        if kind not in ("symmetric", "single"):
            raise ValueError(f"unknown policy kind {kind!r}")
        feat_dim = 2 * k_frames * group_hidden[-1]
        head = Mlp([k_frames + n_elements + feat_dim, *head_hidden, n_states],
                   out_activation="softmax", rng=rng)
        for l in range(head.n_layers - 1):
            head.weights[l] *= head_gain
            head.biases[l] *= head_gain
        head.weights[-1] *= out_gain
        head.biases[-1] *= out_gain
        if kind == "symmetric":
            group_r = Mlp([m_grids, *group_hidden], rng=rng)
            group_i = Mlp([m_grids, *group_hidden], rng=rng)
            return cls(k_frames, n_elements, n_states, m_grids, kind,
                       group_r=group_r, group_i=group_i, head=head,
                       feature_scale=feature_scale)
        single = Mlp([2 * k_frames * m_grids, 64, feat_dim], rng=rng)
        return cls(k_frames, n_elements, n_states, m_grids, kind,
                   single=single, head=head, feature_scale=feature_scale)

    def _feature_mlps(self):
        if self.kind == "symmetric":
            return [self.group_r, self.group_i]
        return [self.single]

    def mlps(self):
        return self._feature_mlps() + [self.head]

    def param_count(self) -> int:
        return sum(m.param_count() for m in self.mlps())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([m.get_flat() for m in self.mlps()])

    def set_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for m in self.mlps():
            n = m.param_count()
            m.set_flat(flat[pos:pos + n])
            pos += n
        if pos != flat.size:
            raise ValueError("flat parameter vector has the wrong length")


def _calibrated_rows(theta: PolicyParams, control: ControlMatrix, a_proj: np.ndarray) -> np.ndarray:
    """(c_f - c0) A for every frame, scaled for conditioning; (K, M) complex."""
    c0 = ControlMatrix.default(control.k_frames, control.n_elements, control.n_states)
    return ((control.binary() - c0.binary()) @ a_proj) * theta.feature_scale


def _policy_features(theta: PolicyParams, states, a_proj: np.ndarray):
    """Stacked head inputs for a batch of MDP states.

    Returns (z, caches) where z is (batch, K + N + feat_dim) and caches
    hold whatever the feature MLPs need for backprop.
    """
    k_fr, n_el = theta.k_frames, theta.n_elements
    rows = np.stack([_calibrated_rows(theta, s.control, a_proj) for s in states])  # (B, K, M)
    batch = rows.shape[0]
    onehots = np.zeros((batch, k_fr + n_el))
    for b, s in enumerate(states):
        if not 1 <= s.k <= k_fr:
            raise ValueError(f"state frame index {s.k} outside [1, {k_fr}]")
        onehots[b, s.k - 1] = 1.0
        onehots[b, k_fr + s.n - 1] = 1.0
    if theta.kind == "symmetric":
        xr = rows.real.reshape(batch * k_fr, theta.m_grids)
        xi = rows.imag.reshape(batch * k_fr, theta.m_grids)
        gr, cache_r = theta.group_r.forward(xr)
        gi, cache_i = theta.group_i.forward(xi)
        feats = np.concatenate(
            [gr.reshape(batch, -1), gi.reshape(batch, -1)], axis=1)
        caches = ("symmetric", cache_r, cache_i)
    else:
        x = np.concatenate(
            [rows.real.reshape(batch, -1), rows.imag.reshape(batch, -1)], axis=1)
        feats, cache_s = theta.single.forward(x)
        caches = ("single", cache_s)
    return np.concatenate([onehots, feats], axis=1), caches


def _policy_backward(theta: PolicyParams, head_cache, feat_caches, dy: np.ndarray) -> np.ndarray:
    """Flat parameter gradient from d(loss)/d(softmax output) rows."""
    head_grads, dz = theta.head.backward(head_cache, dy)
    feat = dz[:, theta.k_frames + theta.n_elements:]
    if feat_caches[0] == "symmetric":
        batch = dy.shape[0]
        half = feat.shape[1] // 2
        dg_r = feat[:, :half].reshape(batch * theta.k_frames, -1)
        dg_i = feat[:, half:].reshape(batch * theta.k_frames, -1)
        grads_r, _ = theta.group_r.backward(feat_caches[1], dg_r)
        grads_i, _ = theta.group_i.backward(feat_caches[2], dg_i)
        return np.concatenate([Mlp.flatten_grads(grads_r),
                               Mlp.flatten_grads(grads_i),
                               Mlp.flatten_grads(head_grads)])
    grads_s, _ = theta.single.backward(feat_caches[1], feat)
    return np.concatenate([Mlp.flatten_grads(grads_s), Mlp.flatten_grads(head_grads)])


def policy_forward(theta: PolicyParams, state: "MdpState", a_proj: np.ndarray):
    """Action probabilities for one state; returns (probs, cache).

    The probabilities come from a softmax, so they are positive and sum to
    one to floating-point accuracy.
    """
    z, feat_caches = _policy_features(theta, [state], a_proj)
    probs, head_cache = theta.head.forward(z)
    return probs[0], (head_cache, feat_caches)


def policy_grad_logprob(theta: PolicyParams, state: "MdpState", action: int,
                        a_proj: np.ndarray) -> np.ndarray:
    """Exact gradient of ln pi_a(s) with respect to the flat parameters."""
    probs, (head_cache, feat_caches) = policy_forward(theta, state, a_proj)
    p_a = probs[action - 1]
    if p_a <= 0.0:
        raise FloatingPointError(f"action {action} has zero probability; log-gradient undefined")
    dy = np.zeros((1, theta.n_states))
    dy[0, action - 1] = 1.0 / p_a
    return _policy_backward(theta, head_cache, feat_caches, dy)


def policy_batch_grad(theta: PolicyParams, states, actions, weights,
                      a_proj: np.ndarray) -> np.ndarray:
    """Flat gradient of sum_e weights[e] * ln pi_{a_e}(s_e), in one pass.

    Equivalent to summing weighted :func:`policy_grad_logprob` results but
    batches the shared-parameter groups across experiences and frames.
    """
    z, feat_caches = _policy_features(theta, states, a_proj)
    probs, head_cache = theta.head.forward(z)
    dy = np.zeros_like(probs)
    for b, (a, w) in enumerate(zip(actions, weights)):
        p_a = probs[b, a - 1]
        if p_a <= 0.0:
            raise FloatingPointError(f"action {a} has zero probability; log-gradient undefined")
        dy[b, a - 1] = w / p_a
    return _policy_backward(theta, head_cache, feat_caches, dy)


# ---------------------------------------------------------------------------
# Sensing network
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SensingParams:
    """Sensing-network parameters.

    ``use_decoder`` selects the model-aided pipeline (pseudo-inverse decode
    to 2M reals, then the MLP); without it the MLP consumes the raw
    measurement split into real and imaginary parts (2K inputs), scaled by
    ``input_scale`` so that desk-scale path gains land in the MLP's useful
    input range. The ``threshold`` kind drops the MLP entirely and scores
    the decoded magnitudes through a two-parameter logistic -- a trained
    scalar threshold at ``-b / a``.
    """

    m_grids: int
    kind: str = "mlp"
    use_decoder: bool = True
    mlp: Mlp | None = None
    scalars: np.ndarray | None = None  # (a, b) for the threshold kind
    input_scale: float = 1.0

    @classmethod
    def create(cls, m_grids: int, rng: Rng, hidden=(256,), use_decoder: bool = True,
               k_frames: int | None = None, first_gain: float = 8.0,
               out_gain: float = 0.1, input_scale: float = 1.0) -> "SensingParams":
        """He-initialised MLP with a widened first layer and a damped output
        layer: rich random features from the start, near-ignorant initial
        probabilities, and fast output-layer learning under plain SGD."""
        in_dim = 2 * m_grids if use_decoder else 2 * int(k_frames)
        mlp = Mlp([in_dim, *hidden, m_grids], out_activation="sigmoid", rng=rng)
        mlp.weights[0] *= first_gain
        mlp.biases[0] *= first_gain
        mlp.weights[-1] *= out_gain
        mlp.biases[-1] *= out_gain
        return cls(m_grids, "mlp", use_decoder, mlp=mlp, input_scale=input_scale)

    @classmethod
    def create_threshold(cls, m_grids: int) -> "SensingParams":
        return cls(m_grids, "threshold", True, scalars=np.array([1.0, 0.0]))

    def param_count(self) -> int:
        return self.mlp.param_count() if self.kind == "mlp" else 2

    def get_flat(self) -> np.ndarray:
        return self.mlp.get_flat() if self.kind == "mlp" else self.scalars.copy()

    def set_flat(self, flat: np.ndarray) -> None:
        if self.kind == "mlp":
            self.mlp.set_flat(flat)
        else:
            self.scalars = np.asarray(flat, dtype=float).copy()


def sensing_forward(w: SensingParams, ytilde: np.ndarray, gamma_pinv: np.ndarray | None):
    """Per-grid occupancy probabilities for measurement row(s).

    Returns (p_hat, cache) with p_hat of shape (batch, M); probabilities
    are open-interval (0, 1) sigmoids, clamping happens at the loss.
    """
    ytilde = np.atleast_2d(np.asarray(ytilde, dtype=complex))
    if w.use_decoder:
        if gamma_pinv is None:
            raise ValueError("decoder pipeline needs the pseudo-inverse")
        nu_hat = ytilde @ gamma_pinv.T
        x = np.concatenate([nu_hat.real, nu_hat.imag], axis=1)
    else:
        x = np.concatenate([ytilde.real, ytilde.imag], axis=1) * w.input_scale
    if w.kind == "mlp":
        p_hat, cache = w.mlp.forward(x)
        return p_hat, ("mlp", cache)
    a, b = w.scalars
    mag = np.abs(x[:, :w.m_grids] + 1j * x[:, w.m_grids:])
    p_hat = _sigmoid(a * mag + b)
    return p_hat, ("threshold", mag, p_hat)


def cross_entropy(p_hat: np.ndarray, p_true: np.ndarray, clamp: float = PROB_CLAMP) -> np.ndarray:
    """Per-sample cross-entropy, summed over grids, with probabilities
    clamped to [clamp, 1 - clamp] before the logs."""
    p_hat = np.atleast_2d(np.asarray(p_hat, dtype=float))
    p_true = np.atleast_2d(np.asarray(p_true, dtype=float))
    pc = np.clip(p_hat, clamp, 1.0 - clamp)
    return -np.sum(p_true * np.log(pc) + (1.0 - p_true) * np.log(1.0 - pc), axis=1)


def sensing_loss_grad(w: SensingParams, ytilde: np.ndarray, p_true: np.ndarray,
                      gamma_pinv: np.ndarray | None, clamp: float = PROB_CLAMP):
    """Mean cross-entropy over a batch and its exact flat gradient.

    Where the clamp is active the loss is locally constant in the output,
    so those entries contribute exactly zero gradient.
    """
    ytilde = np.atleast_2d(np.asarray(ytilde, dtype=complex))
    p_true = np.atleast_2d(np.asarray(p_true, dtype=float))
    if ytilde.shape[0] == 0:
        raise ValueError("empty batch")
    p_hat, (kind, *cache) = sensing_forward(w, ytilde, gamma_pinv)
    batch = p_hat.shape[0]
    loss = float(np.mean(cross_entropy(p_hat, p_true, clamp)))
    pc = np.clip(p_hat, clamp, 1.0 - clamp)
    unclamped = (p_hat == pc)
    dp = np.where(unclamped, (pc - p_true) / (pc * (1.0 - pc)), 0.0) / batch
    if kind == "mlp":
        grads, _ = w.mlp.backward(cache[0], dp)
        return loss, Mlp.flatten_grads(grads)
    mag, p_sig = cache
    dz = dp * p_sig * (1.0 - p_sig)
    return loss, np.array([float(np.sum(dz * mag)), float(np.sum(dz))])


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

_CHECKPOINT_VERSION = 1


def _mlp_state(prefix: str, mlp: Mlp) -> dict:
    out = {f"{prefix}_sizes": np.array(mlp.layer_sizes),
           f"{prefix}_act": np.array(mlp.out_activation)}
    for l, (wt, bias) in enumerate(zip(mlp.weights, mlp.biases)):
        out[f"{prefix}_w{l}"] = wt
        out[f"{prefix}_b{l}"] = bias
    return out


def _mlp_from_state(prefix: str, data) -> Mlp:
    sizes = [int(s) for s in data[f"{prefix}_sizes"]]
    mlp = Mlp(sizes, out_activation=str(data[f"{prefix}_act"]))
    for l in range(mlp.n_layers):
        mlp.weights[l] = data[f"{prefix}_w{l}"].copy()
        mlp.biases[l] = data[f"{prefix}_b{l}"].copy()
    return mlp


def save_checkpoint(path, policy: PolicyParams | None = None,
                    sensing: SensingParams | None = None) -> None:
    """Versioned binary dump of layer sizes and parameter arrays; the
    round-trip is bit-exact."""
    blob = {"version": np.array(_CHECKPOINT_VERSION)}
    if policy is not None:
        blob["policy_meta"] = np.array([policy.k_frames, policy.n_elements,
                                        policy.n_states, policy.m_grids])
        blob["policy_kind"] = np.array(policy.kind)
        blob["policy_feature_scale"] = np.array(policy.feature_scale)
        for name, mlp in zip(("group_r", "group_i", "single", "head"),
                             (policy.group_r, policy.group_i, policy.single, policy.head)):
            if mlp is not None:
                blob.update(_mlp_state(f"policy_{name}", mlp))
    if sensing is not None:
        blob["sensing_meta"] = np.array([sensing.m_grids, int(sensing.use_decoder)])
        blob["sensing_kind"] = np.array(sensing.kind)
        blob["sensing_input_scale"] = np.array(sensing.input_scale)
        if sensing.kind == "mlp":
            blob.update(_mlp_state("sensing_mlp", sensing.mlp))
        else:
            blob["sensing_scalars"] = sensing.scalars
    np.savez(path, **blob)


def load_checkpoint(path) -> dict:
    """Inverse of :func:`save_checkpoint`; returns whatever was stored under
    keys ``"policy"`` and ``"sensing"``."""
    with np.load(path, allow_pickle=False) as data:
        if int(data["version"]) != _CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {int(data['version'])}")
        out = {}
        if "policy_meta" in data:
            k_fr, n_el, n_st, m_gr = (int(v) for v in data["policy_meta"])
            kind = str(data["policy_kind"])
            nets = {}
            for name in ("group_r", "group_i", "single", "head"):
                if f"policy_{name}_sizes" in data:
                    nets[name] = _mlp_from_state(f"policy_{name}", data)
            out["policy"] = PolicyParams(
                k_fr, n_el, n_st, m_gr, kind,
                group_r=nets.get("group_r"), group_i=nets.get("group_i"),
                single=nets.get("single"), head=nets.get("head"),
                feature_scale=float(data["policy_feature_scale"]))
        if "sensing_meta" in data:
            m_gr, use_dec = (int(v) for v in data["sensing_meta"])
            kind = str(data["sensing_kind"])
            scale = float(data["sensing_input_scale"])
            if kind == "mlp":
                out["sensing"] = SensingParams(m_gr, kind, bool(use_dec),
                                               mlp=_mlp_from_state("sensing_mlp", data),
                                               input_scale=scale)
            else:
                out["sensing"] = SensingParams(m_gr, kind, bool(use_dec),
                                               scalars=data["sensing_scalars"].copy(),
                                               input_scale=scale)
        return out
