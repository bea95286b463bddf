"""Closed-form performance analysis of the linear-decoder threshold
detector: decoded-statistic variances under the empty/occupied hypotheses,
false-alarm and miss probabilities, per-grid loss and its derivative,
optimal judging thresholds, and the cross-entropy upper bound with its
induced sensing-accuracy lower bound.

The decoded statistic for grid m is mu_m = Re(nu_hat_m) + Im(nu_hat_m)
with nu_hat = pinv(Gamma) ytilde. Conditioned on the occupancy of the
other grids, mu_m is exactly zero-mean Gaussian, which is what makes every
probability below closed-form. The detector compares mu_m^2 against the
transformed threshold rho_hat; all error probabilities are mixtures over
the interferer occupancies weighted by their priors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import ControlMatrix, Geometry, measurement_matrix
from .numerics import Rng, erf, pinv, sample_complex_gaussian

DEFAULT_CAP = -float(np.log(1e-7))  # CE cost of one confidently wrong hard decision


@dataclass(eq=False)
class BoundInstance:
    """Everything the closed-form quantities are computed from.

    ``noise_mode`` selects how decoder statistics are computed: ``"row"``
    (default) uses only row m of the pseudo-inverse and of Xi, which is the
    variance that the scalar decode actually has and is what the Monte
    Carlo oracles confirm; ``"printed"`` reproduces the published sum over
    all rows for comparison tables.
    """

    gamma: np.ndarray        # (K, M)
    gamma_pinv: np.ndarray   # (M, K)
    xi: np.ndarray           # (M, M) = gamma_pinv @ gamma
    priors: np.ndarray       # (M,)
    reflect_var: np.ndarray  # (M,)
    noise_power: float
    cap: float = DEFAULT_CAP
    noise_mode: str = "row"

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=complex)
        self.gamma_pinv = np.asarray(self.gamma_pinv, dtype=complex)
        self.xi = np.asarray(self.xi, dtype=complex)
        self.priors = np.asarray(self.priors, dtype=float)
        self.reflect_var = np.asarray(self.reflect_var, dtype=float)
        if self.cap <= 0:
            raise ValueError("the loss cap must be positive")
        if self.noise_power < 0:
            raise ValueError("noise power must be non-negative")
        if self.noise_mode not in ("row", "printed"):
            raise ValueError(f"unknown noise mode {self.noise_mode!r}")
        resid = np.linalg.norm(self.xi - self.gamma_pinv @ self.gamma)
        if resid > 1e-10 * max(1.0, np.linalg.norm(self.xi)):
            raise ValueError("xi is inconsistent with gamma_pinv @ gamma")

    @property
    def m_grids(self) -> int:
        return self.gamma.shape[1]

    @classmethod
    def from_gamma(cls, gamma: np.ndarray, priors, reflect_var, noise_power: float,
                   cap: float = DEFAULT_CAP, noise_mode: str = "row") -> "BoundInstance":
        gamma = np.asarray(gamma, dtype=complex)
        gp = pinv(gamma)
        return cls(gamma, gp, gp @ gamma, priors, reflect_var, noise_power,
                   cap=cap, noise_mode=noise_mode)

    @classmethod
    def from_control(cls, geom: Geometry, a_proj: np.ndarray, control: ControlMatrix,
                     priors, reflect_var, cap: float = DEFAULT_CAP,
                     noise_mode: str = "row") -> "BoundInstance":
        gamma = measurement_matrix(geom, a_proj, control)
        return cls.from_gamma(gamma, priors, reflect_var,
                              geom.effective_noise_power, cap=cap, noise_mode=noise_mode)


# ---------------------------------------------------------------------------
# Decoder statistics
# ---------------------------------------------------------------------------

def decode_statistic(inst: BoundInstance, ytilde: np.ndarray, m: int):
    """mu_m = Re + Im of the m-th decoded coefficient (m is 1-based);
    accepts a single measurement vector or a batch of rows."""
    ytilde = np.asarray(ytilde, dtype=complex)
    nu_hat_m = ytilde @ inst.gamma_pinv[m - 1]
    return nu_hat_m.real + nu_hat_m.imag


def _noise_variance(inst: BoundInstance, m: int) -> float:
    if inst.noise_mode == "row":
        return 2.0 * inst.noise_power * float(np.sum(np.abs(inst.gamma_pinv[m - 1]) ** 2))
    return inst.noise_power * float(np.sum(np.abs(inst.gamma_pinv) ** 2))


def _interference_coeffs(inst: BoundInstance, m: int) -> np.ndarray:
    """Per-interferer variance contributions, in grid order skipping m."""
    others = [j for j in range(inst.m_grids) if j != m - 1]
    if inst.noise_mode == "row":
        weights = np.abs(inst.xi[m - 1, others]) ** 2
    else:
        weights = np.array([np.sum(np.abs(inst.xi[j]) ** 2) for j in others])
    return inst.reflect_var[others] * weights


def _self_variance(inst: BoundInstance, m: int) -> float:
    if inst.noise_mode == "row":
        return inst.reflect_var[m - 1] * float(np.abs(inst.xi[m - 1, m - 1]) ** 2)
    return inst.reflect_var[m - 1] * float(np.sum(np.abs(inst.xi[m - 1]) ** 2))


def variances(inst: BoundInstance, m: int, patterns: np.ndarray):
    """(eps0, eps1) of mu_m for a batch of interferer occupancies.

    ``patterns`` is (Q, M-1) with grid order ascending and grid m skipped.
    """
    patterns = np.atleast_2d(np.asarray(patterns, dtype=float))
    if patterns.shape[1] != inst.m_grids - 1:
        raise ValueError(f"patterns need {inst.m_grids - 1} interferer flags")
    eps0 = patterns @ _interference_coeffs(inst, m) + _noise_variance(inst, m)
    return eps0, eps0 + _self_variance(inst, m)


def variance_empty(inst: BoundInstance, m: int, q_minus_m) -> float:
    """Variance of mu_m with grid m empty: interference from the occupied
    other grids through row m of Xi, plus Rx noise (per-frame variance
    2 * noise_power) through row m of the pseudo-inverse."""
    eps0, _ = variances(inst, m, q_minus_m)
    return float(eps0[0])


def variance_occupied(inst: BoundInstance, m: int, q_minus_m) -> float:
    """As :func:`variance_empty` plus the grid's own reflection variance
    through the diagonal entry of Xi."""
    _, eps1 = variances(inst, m, q_minus_m)
    return float(eps1[0])


def prior_prob(priors: np.ndarray, m: int, q_minus_m) -> np.ndarray:
    """Prior probability of interferer occupancies (product over grids
    other than m); vectorised over patterns."""
    priors = np.asarray(priors, dtype=float)
    patterns = np.atleast_2d(np.asarray(q_minus_m, dtype=float))
    p_others = np.delete(priors, m - 1)
    probs = np.where(patterns > 0, p_others, 1.0 - p_others)
    return probs.prod(axis=1)


# ---------------------------------------------------------------------------
# Threshold detector
# ---------------------------------------------------------------------------

def _detector_sums(eps0: np.ndarray, eps1: np.ndarray):
    """(S, L): the unweighted sums over the detector's occupancy set that
    turn the raw threshold rho into the mu^2 threshold rho_hat."""
    s = float(np.sum((eps1 - eps0) / (eps1 * eps0)))
    l = float(np.sum(np.log(eps1 / eps0)))
    return s, l


def rho_hat(eps0: np.ndarray, eps1: np.ndarray, rho: float) -> float:
    """Transformed threshold on mu^2 equivalent to the raw rho."""
    eps0 = np.atleast_1d(np.asarray(eps0, dtype=float))
    eps1 = np.atleast_1d(np.asarray(eps1, dtype=float))
    s, l = _detector_sums(eps0, eps1)
    if s <= 0:
        raise ValueError("degenerate detector: eps1 equals eps0 for every occupancy")
    return (0.5 * l + rho) / s


def rho_from_hat(eps0: np.ndarray, eps1: np.ndarray, rho_hat_value: float) -> float:
    """Inverse of :func:`rho_hat`."""
    s, l = _detector_sums(np.atleast_1d(eps0), np.atleast_1d(eps1))
    if s <= 0:
        raise ValueError("degenerate detector: eps1 equals eps0 for every occupancy")
    return rho_hat_value * s - 0.5 * l


def judgement_variable(eps0: np.ndarray, eps1: np.ndarray, mu):
    """Log-density-difference statistic in the parameterisation matched to
    :func:`rho_hat`, so tau <= rho exactly when mu^2 <= rho_hat."""
    s, l = _detector_sums(np.atleast_1d(eps0), np.atleast_1d(eps1))
    return np.asarray(mu) ** 2 * s - 0.5 * l


def detect(mu, rho_hat_value: float):
    """1 (occupied) iff mu^2 exceeds the transformed threshold."""
    if not np.isfinite(rho_hat_value):
        raise ValueError("rho_hat must be finite")
    return (np.asarray(mu) ** 2 > rho_hat_value).astype(np.int64)


def error_probs(inst: BoundInstance, m: int, rho_hat_value: float,
                patterns: np.ndarray, weights: np.ndarray | None = None):
    """Closed-form (P_falsealarm, P_miss) of the threshold detector.

    mu_m^2 given the interferers is chi-squared (one degree of freedom,
    scaled), so each mixture component contributes an erf term. ``weights``
    default to the interferer priors; pass normalised weights for sampled
    subsets.
    """
    if rho_hat_value < 0:
        raise ValueError("rho_hat must be non-negative")
    patterns = np.atleast_2d(np.asarray(patterns))
    if weights is None:
        weights = prior_prob(inst.priors, m, patterns)
    eps0, eps1 = variances(inst, m, patterns)
    p_fa = 1.0 - float(np.sum(weights * erf(np.sqrt(rho_hat_value / (2.0 * eps0)))))
    p_miss = float(np.sum(weights * erf(np.sqrt(rho_hat_value / (2.0 * eps1)))))
    return p_fa, p_miss


def grid_loss(inst: BoundInstance, m: int, rho: float, patterns: np.ndarray,
              weights: np.ndarray | None = None) -> float:
    """Expected capped cross-entropy of grid m at raw threshold rho."""
    patterns = np.atleast_2d(np.asarray(patterns))
    eps0, eps1 = variances(inst, m, patterns)
    rh = rho_hat(eps0, eps1, rho)
    return _grid_loss_at_hat(inst, m, rh, patterns, weights)


def _grid_loss_at_hat(inst: BoundInstance, m: int, rho_hat_value: float,
                      patterns: np.ndarray, weights: np.ndarray | None = None) -> float:
    p_fa, p_miss = error_probs(inst, m, max(rho_hat_value, 0.0), patterns, weights)
    p_tilde = inst.priors[m - 1]
    return inst.cap * (1.0 - p_tilde) * p_fa + inst.cap * p_tilde * p_miss


def grid_loss_derivative(inst: BoundInstance, m: int, rho: float, patterns: np.ndarray,
                         weights: np.ndarray | None = None) -> float:
    """Exact d(grid_loss)/d(rho); singular at rho_hat = 0 (the 1/sqrt term)."""
    patterns = np.atleast_2d(np.asarray(patterns))
    if weights is None:
        weights = prior_prob(inst.priors, m, patterns)
    eps0, eps1 = variances(inst, m, patterns)
    s, _ = _detector_sums(eps0, eps1)
    rh = rho_hat(eps0, eps1, rho)
    if rh <= 0:
        raise ValueError("grid-loss derivative is singular at rho_hat = 0")
    p_tilde = inst.priors[m - 1]
    phi = ((1.0 - p_tilde) * np.exp(-rh / (2.0 * eps0)) / np.sqrt(8.0 * eps0 * rh)
           - p_tilde * np.exp(-rh / (2.0 * eps1)) / np.sqrt(8.0 * eps1 * rh))
    return float(-2.0 * inst.cap / np.sqrt(np.pi) * (1.0 / s) * np.sum(weights * phi))


def optimal_rho_single(inst: BoundInstance, m: int, q_minus_m) -> float:
    """Closed-form optimal raw threshold when the interferer occupancy is
    known, clamped to the admissible range [-ln(eps1/eps0)/2, inf)."""
    eps0, eps1 = variances(inst, m, q_minus_m)
    eps0, eps1 = float(eps0[0]), float(eps1[0])
    if not (eps1 > eps0 > 0):
        raise ValueError("degenerate detector: need eps1 > eps0 > 0")
    p_tilde = float(inst.priors[m - 1])
    lower = -0.5 * np.log(eps1 / eps0)
    if p_tilde >= 1.0:
        return lower
    if p_tilde <= 0.0:
        return np.inf
    if p_tilde > np.sqrt(eps1 / (eps0 + eps1)):
        rho = 0.5 * np.log(eps0 / eps1)
    else:
        rho = 2.0 * np.log((1.0 - p_tilde) / p_tilde) - 0.5 * np.log(eps0 / eps1)
    return float(max(rho, lower))


def estimate_rho(inst: BoundInstance, m: int, patterns: np.ndarray) -> float:
    """Sampled threshold estimator: mean of the per-occupancy optima."""
    patterns = np.atleast_2d(np.asarray(patterns))
    if patterns.shape[0] == 0:
        raise ValueError("need at least one sampled occupancy")
    return float(np.mean([optimal_rho_single(inst, m, q) for q in patterns]))


# ---------------------------------------------------------------------------
# Occupancy sets
# ---------------------------------------------------------------------------

def enumerate_interferers(m_grids: int) -> np.ndarray:
    """All 2^(M-1) interferer occupancies; first grid toggles fastest."""
    if m_grids - 1 > 12:
        raise ValueError("exhaustive interferer enumeration limited to M <= 13")
    n = max(m_grids - 1, 0)
    idx = np.arange(2 ** n)
    return ((idx[:, None] >> np.arange(n)) & 1).astype(np.int64)


def sample_interferers(m_grids: int, count: int, rng: Rng) -> np.ndarray:
    """Uniformly sampled interferer occupancies, drawn in antithetic pairs
    (each draw together with its complement) to balance the sample."""
    n = m_grids - 1
    half = (count + 1) // 2
    base = (rng.gen.random((half, n)) < 0.5).astype(np.int64)
    return np.concatenate([base, 1 - base], axis=0)[:count]


# ---------------------------------------------------------------------------
# Upper bound
# ---------------------------------------------------------------------------

def _golden_section(fn, lo: float, hi: float, iters: int = 90):
    """Plain golden-section minimiser on [lo, hi]."""
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = fn(d)
    x = (a + b) / 2.0
    return x, fn(x)


def minimize_grid_loss(inst: BoundInstance, m: int, patterns: np.ndarray,
                       weights: np.ndarray | None = None, grid_points: int = 256):
    """Numerically minimise the grid loss over the mu^2 threshold.

    Coarse geometric scan to bracket the minimum (the mixture loss need
    not be unimodal), then golden-section refinement; endpoints included.
    Returns (rho_hat_star, loss_star).
    """
    patterns = np.atleast_2d(np.asarray(patterns))
    eps0, eps1 = variances(inst, m, patterns)
    hi = 72.0 * float(np.max(eps1))  # erf saturates: beyond this the loss is flat
    candidates = np.concatenate([[0.0], np.geomspace(hi * 1e-9, hi, grid_points)])
    losses = np.array([_grid_loss_at_hat(inst, m, rh, patterns, weights)
                       for rh in candidates])
    best = int(np.argmin(losses))
    lo_b = candidates[max(best - 1, 0)]
    hi_b = candidates[min(best + 1, len(candidates) - 1)]
    x, fx = _golden_section(
        lambda rh: _grid_loss_at_hat(inst, m, rh, patterns, weights), lo_b, hi_b)
    if losses[best] < fx:
        return float(candidates[best]), float(losses[best])
    return float(x), float(fx)


@dataclass
class GridBound:
    m: int
    rho_star: float
    rho_hat: float
    p_fa: float
    p_miss: float
    loss: float
    eps0_mean: float
    eps1_mean: float


@dataclass
class BoundReport:
    grids: list = field(default_factory=list)
    l_ub: float = 0.0
    p_err_ub: float = 0.0
    p_acc_lb: float = 0.0


def upper_bound(inst: BoundInstance, mode: str = "exact", rng: Rng | None = None,
                sample_count: int = 256) -> BoundReport:
    """Cross-entropy upper bound L_ub = sum_m L_m and the per-grid pieces.

    ``exact`` enumerates every interferer occupancy (M <= 13) and
    numerically minimises each grid's loss over the threshold; ``sampled``
    uses a uniformly sampled occupancy subset and the mean-of-optima
    threshold estimator.
    """
    report = BoundReport()
    for m in range(1, inst.m_grids + 1):
        if mode == "exact":
            patterns = enumerate_interferers(inst.m_grids)
            weights = None
            rh_star, loss = minimize_grid_loss(inst, m, patterns, weights)
            eps0, eps1 = variances(inst, m, patterns)
            rho_star = rho_from_hat(eps0, eps1, rh_star)
        elif mode == "sampled":
            if rng is None:
                raise ValueError("sampled mode needs an rng")
            patterns = sample_interferers(inst.m_grids, sample_count, rng)
            raw = prior_prob(inst.priors, m, patterns)
            weights = raw / raw.sum() if raw.sum() > 0 else None
            rho_star = estimate_rho(inst, m, patterns)
            eps0, eps1 = variances(inst, m, patterns)
            rh_star = max(rho_hat(eps0, eps1, rho_star), 0.0)
            loss = _grid_loss_at_hat(inst, m, rh_star, patterns, weights)
        else:
            raise ValueError(f"unknown bound mode {mode!r}")
        p_fa, p_miss = error_probs(inst, m, rh_star, patterns, weights)
        w_mean = prior_prob(inst.priors, m, patterns) if weights is None else weights
        w_mean = w_mean / w_mean.sum()
        report.grids.append(GridBound(
            m, float(rho_star), float(rh_star), p_fa, p_miss, loss,
            float(np.sum(w_mean * eps0)), float(np.sum(w_mean * eps1))))
        report.l_ub += loss
    report.p_err_ub = report.l_ub / inst.cap
    report.p_acc_lb = accuracy_lower_bound(report.l_ub, inst.cap, inst.m_grids)
    return report


def accuracy_lower_bound(l_ub: float, cap: float, m_grids: int) -> float:
    """Per-grid sensing-accuracy lower bound implied by the loss bound."""
    if cap <= 0 or m_grids < 1:
        raise ValueError("cap must be positive and m_grids >= 1")
    return 1.0 - l_ub / (cap * m_grids)


# ---------------------------------------------------------------------------
# Monte Carlo validation
# ---------------------------------------------------------------------------

def mc_error_probs(inst: BoundInstance, m: int, rho_hat_value: float, n_draws: int,
                   rng: Rng, chunk: int = 100_000):
    """Empirical (P_falsealarm, P_miss) of the detector on grid m.

    Independent simulation route: draw interferers from the priors and
    coefficients/noise from their distributions, decode, threshold.
    """
    counts = np.zeros(2)
    done = 0
    m_grids = inst.m_grids
    while done < n_draws:
        n = min(chunk, n_draws - done)
        occ = (rng.gen.random((n, m_grids)) < inst.priors).astype(float)
        coeff = sample_complex_gaussian(1.0, rng, size=(n, m_grids))
        nu = occ * coeff * np.sqrt(inst.reflect_var)
        noise = sample_complex_gaussian(2.0 * inst.noise_power, rng,
                                        size=(n, inst.gamma.shape[0]))
        # H0: grid m forced empty; H1: forced occupied
        nu_h0 = nu.copy()
        nu_h0[:, m - 1] = 0.0
        nu_h1 = nu.copy()
        nu_h1[:, m - 1] = coeff[:, m - 1] * np.sqrt(inst.reflect_var[m - 1])
        dec_h0 = detect(decode_statistic(inst, nu_h0 @ inst.gamma.T + noise, m),
                        rho_hat_value)
        dec_h1 = detect(decode_statistic(inst, nu_h1 @ inst.gamma.T + noise, m),
                        rho_hat_value)
        counts[0] += np.sum(dec_h0 == 1)
        counts[1] += np.sum(dec_h1 == 0)
        done += n
    return counts[0] / n_draws, counts[1] / n_draws


def mc_detector_ce(inst: BoundInstance, rho_hats: np.ndarray, n_draws: int,
                   rng: Rng, chunk: int = 100_000):
    """Empirical mean scene cross-entropy of the hard threshold detector,
    capping each wrong per-grid decision at the instance's cap.

    Returns (mean, standard error).
    """
    rho_hats = np.asarray(rho_hats, dtype=float)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n_draws:
        n = min(chunk, n_draws - done)
        occ = (rng.gen.random((n, inst.m_grids)) < inst.priors).astype(float)
        nu = occ * sample_complex_gaussian(1.0, rng, size=(n, inst.m_grids)) \
            * np.sqrt(inst.reflect_var)
        noise = sample_complex_gaussian(2.0 * inst.noise_power, rng,
                                        size=(n, inst.gamma.shape[0]))
        ytilde = nu @ inst.gamma.T + noise
        nu_hat = ytilde @ inst.gamma_pinv.T
        mu = nu_hat.real + nu_hat.imag
        dec = (mu ** 2 > rho_hats).astype(float)
        ce = inst.cap * np.sum(dec != occ, axis=1)
        total += float(np.sum(ce))
        total_sq += float(np.sum(ce ** 2))
        done += n
    mean = total / n_draws
    var = max(total_sq / n_draws - mean ** 2, 0.0)
    return mean, float(np.sqrt(var / n_draws))
