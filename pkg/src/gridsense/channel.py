"""Reflection-channel physics: geometry, element reflection coefficients,
line-of-sight gain, projection matrix, measurement matrix, and noisy
measurement simulation.

Conventions used throughout:

* frame index ``k``, element index ``n``, configuration/state index ``i``,
  and grid index ``m`` are all 1-based in public signatures;
* the projection matrix ``A`` has one row per (element, state) pair, laid
  out as element-major blocks of ``n_states`` rows, matching the one-hot
  block layout of control-matrix rows so that ``c @ A`` sums the gains of
  the selected states.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng, sample_complex_gaussian

FOUR_PI = 4.0 * np.pi


@dataclass(eq=False)
class Geometry:
    """Scene geometry and RF constants for the single-transceiver setup.

    Positions are metres; the reconfigurable elements live in the y-z
    plane. ``noise_power`` is the receiver noise power (W); the optional
    ``env_scatter_power`` models residual environmental scattering as
    extra Gaussian noise when the surroundings are not static.
    """

    tx_position: np.ndarray
    rx_position: np.ndarray
    element_positions: np.ndarray  # (N, 3)
    grid_centers: np.ndarray       # (M, 3)
    wavelength: float
    tx_gain: float = 1.0
    rx_gain: float = 1.0
    power: float = 1.0
    tx_symbol: complex = 1.0 + 0.0j
    noise_power: float = 0.0
    env_scatter_power: float = 0.0

    def __post_init__(self):
        self.tx_position = np.asarray(self.tx_position, dtype=float)
        self.rx_position = np.asarray(self.rx_position, dtype=float)
        self.element_positions = np.atleast_2d(np.asarray(self.element_positions, dtype=float))
        self.grid_centers = np.atleast_2d(np.asarray(self.grid_centers, dtype=float))
        if self.wavelength <= 0:
            raise ValueError("wavelength must be positive")
        if self.power <= 0:
            raise ValueError("transmit power must be positive")
        if abs(abs(self.tx_symbol) - 1.0) > 1e-9:
            raise ValueError("tx symbol must have unit magnitude")
        if self.noise_power < 0 or self.env_scatter_power < 0:
            raise ValueError("noise powers must be non-negative")
        if len(np.unique(self.grid_centers, axis=0)) != len(self.grid_centers):
            raise ValueError("grid centers must be pairwise distinct")
        d_rx_el = np.linalg.norm(self.element_positions - self.rx_position, axis=1)
        if np.any(d_rx_el == 0):
            raise ValueError("rx antenna must not be co-located with an element")

    @property
    def n_elements(self) -> int:
        return self.element_positions.shape[0]

    @property
    def m_grids(self) -> int:
        return self.grid_centers.shape[0]

    @property
    def effective_noise_power(self) -> float:
        return self.noise_power + self.env_scatter_power


@dataclass(eq=False)
class ReflectionTable:
    """Per-state reflection coefficients of the reconfigurable elements.

    ``coefficients`` is either a length-``n_states`` vector (direction
    independent) or an ``(N, M, n_states)`` array giving a coefficient per
    (element, grid, state) triple, as a measured table would.
    """

    n_states: int
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=complex)
        if self.n_states < 2:
            raise ValueError("need at least two element states")
        if self.coefficients.ndim not in (1, 3):
            raise ValueError("coefficients must be (n_states,) or (N, M, n_states)")
        if self.coefficients.shape[-1] != self.n_states:
            raise ValueError("coefficient table does not match n_states")
        if np.any(np.abs(self.coefficients) > 1.0 + 1e-9):
            raise ValueError("reflection coefficients must have magnitude <= 1")

    @classmethod
    def uniform_phases(cls, n_states: int) -> "ReflectionTable":
        """Unit-amplitude states with evenly spaced phases starting at pi/4."""
        phases = np.pi / 4.0 + 2.0 * np.pi * np.arange(n_states) / n_states
        return cls(n_states, np.exp(1j * phases))

    @classmethod
    def from_file(cls, path, n_states: int, n_elements: int | None = None,
                  m_grids: int | None = None) -> "ReflectionTable":
        """Load a coefficient table from delimited text.

        Header ``state,re,im`` gives direction-independent coefficients;
        ``n,m,state,re,im`` gives the full per-(element, grid, state)
        table. Indices in the file are 1-based.
        """
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError(f"empty reflection table: {path}")
        header = [h.strip().lower() for h in rows[0]]
        body = [r for r in rows[1:] if r and any(cell.strip() for cell in r)]
        if header == ["state", "re", "im"]:
            coeffs = np.zeros(n_states, dtype=complex)
            seen = np.zeros(n_states, dtype=bool)
            for r in body:
                i = int(r[0])
                if not 1 <= i <= n_states:
                    raise ValueError(f"state index {i} out of range in {path}")
                coeffs[i - 1] = float(r[1]) + 1j * float(r[2])
                seen[i - 1] = True
            if not seen.all():
                raise ValueError(f"reflection table {path} is missing states")
            return cls(n_states, coeffs)
        if header == ["n", "m", "state", "re", "im"]:
            if n_elements is None or m_grids is None:
                raise ValueError("full-format table needs n_elements and m_grids")
            coeffs = np.zeros((n_elements, m_grids, n_states), dtype=complex)
            for r in body:
                n, m, i = int(r[0]), int(r[1]), int(r[2])
                coeffs[n - 1, m - 1, i - 1] = float(r[3]) + 1j * float(r[4])
            return cls(n_states, coeffs)
        raise ValueError(f"unrecognised reflection-table header {header!r} in {path}")

    def full(self, n_elements: int, m_grids: int) -> np.ndarray:
        """Coefficients broadcast to shape (N, M, n_states)."""
        if self.coefficients.ndim == 1:
            return np.broadcast_to(self.coefficients, (n_elements, m_grids, self.n_states))
        if self.coefficients.shape[:2] != (n_elements, m_grids):
            raise ValueError("coefficient table shape does not match geometry")
        return self.coefficients

    def coeff(self, n: int, m: int, i: int) -> complex:
        """Reflection coefficient of element n towards grid m in state i (1-based)."""
        if not 1 <= i <= self.n_states:
            raise IndexError(f"state index {i} out of range [1, {self.n_states}]")
        if self.coefficients.ndim == 1:
            return complex(self.coefficients[i - 1])
        return complex(self.coefficients[n - 1, m - 1, i - 1])


@dataclass(eq=False)
class ControlMatrix:
    """The K stacked beamformer patterns of one sensing cycle.

    Stored as a (K, N) array of 1-based state indices; ``binary()`` expands
    to the K x (N * n_states) 0/1 matrix whose rows are concatenated
    one-hot blocks.
    """

    states: np.ndarray
    n_states: int

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.int64))
        if self.n_states < 1:
            raise ValueError("n_states must be >= 1")
        if np.any(self.states < 1) or np.any(self.states > self.n_states):
            raise ValueError("control states must lie in [1, n_states]")

    @property
    def k_frames(self) -> int:
        return self.states.shape[0]

    @property
    def n_elements(self) -> int:
        return self.states.shape[1]

    @classmethod
    def default(cls, k_frames: int, n_elements: int, n_states: int) -> "ControlMatrix":
        """The calibration pattern: every element in state 1 in every frame."""
        return cls(np.ones((k_frames, n_elements), dtype=np.int64), n_states)

    @classmethod
    def random(cls, k_frames: int, n_elements: int, n_states: int, rng: Rng) -> "ControlMatrix":
        states = rng.gen.integers(1, n_states + 1, size=(k_frames, n_elements))
        return cls(states, n_states)

    def binary(self) -> np.ndarray:
        k, n = self.states.shape
        out = np.zeros((k, n * self.n_states))
        cols = np.arange(n) * self.n_states + (self.states - 1)
        out[np.arange(k)[:, None], cols] = 1.0
        return out

    def with_block(self, k: int, n: int, state: int) -> "ControlMatrix":
        """Copy with the (k, n) block set to the given state (1-based)."""
        if not 1 <= state <= self.n_states:
            raise ValueError(f"state {state} out of range [1, {self.n_states}]")
        states = self.states.copy()
        states[k - 1, n - 1] = state
        return ControlMatrix(states, self.n_states)


def _path_distances(geom: Geometry):
    """(d_n, d_nm): Tx-to-element, and element-to-Rx via each grid center."""
    d_n = np.linalg.norm(geom.element_positions - geom.tx_position, axis=1)
    d_el_grid = np.linalg.norm(
        geom.element_positions[:, None, :] - geom.grid_centers[None, :, :], axis=2)
    d_grid_rx = np.linalg.norm(geom.grid_centers - geom.rx_position, axis=1)
    return d_n, d_el_grid + d_grid_rx[None, :]


def los_gain(geom: Geometry) -> complex:
    """Free-space line-of-sight gain between the Tx and Rx antennas."""
    d_los = float(np.linalg.norm(geom.tx_position - geom.rx_position))
    if d_los == 0:
        raise ValueError("degenerate geometry: Tx and Rx antennas coincide")
    amp = geom.wavelength / FOUR_PI * np.sqrt(geom.tx_gain * geom.rx_gain) / d_los
    return amp * np.exp(-2j * np.pi * d_los / geom.wavelength)


def projection_entry(geom: Geometry, table: ReflectionTable, m: int, n: int, i: int) -> complex:
    """Gain of the reflection path via element n (state i) and grid m,
    for a unit grid reflection coefficient. Indices are 1-based."""
    if not 1 <= m <= geom.m_grids:
        raise IndexError(f"grid index {m} out of range [1, {geom.m_grids}]")
    if not 1 <= n <= geom.n_elements:
        raise IndexError(f"element index {n} out of range [1, {geom.n_elements}]")
    d_n, d_nm = _path_distances(geom)
    dn = d_n[n - 1]
    dnm = d_nm[n - 1, m - 1]
    if dn <= 0 or dnm <= 0:
        raise ValueError("degenerate geometry: zero-length reflection path")
    r = table.coeff(n, m, i)
    lam = geom.wavelength
    amp = lam ** 2 * np.sqrt(geom.tx_gain * geom.rx_gain) / (FOUR_PI ** 2 * dn * dnm)
    return r * amp * np.exp(-2j * np.pi * (dn + dnm) / lam)


def build_projection_matrix(geom: Geometry, table: ReflectionTable,
                            groups: list[np.ndarray] | None = None) -> np.ndarray:
    """Projection matrix A of shape (N * n_states, M).

    Row block ``(n, i)`` holds the per-grid path gains of element n in
    state i. With ``groups`` (from :func:`group_elements`), rows of grouped
    elements are summed per state, giving the (N_G * n_states, M) matrix of
    the effective elements.
    """
    d_n, d_nm = _path_distances(geom)
    if np.any(d_n <= 0) or np.any(d_nm <= 0):
        raise ValueError("degenerate geometry: zero-length reflection path")
    n_el, m_grids = geom.n_elements, geom.m_grids
    lam = geom.wavelength
    r = table.full(n_el, m_grids)  # (N, M, N_S)
    amp = lam ** 2 * np.sqrt(geom.tx_gain * geom.rx_gain) / (FOUR_PI ** 2 * d_n[:, None] * d_nm)
    gain = amp * np.exp(-2j * np.pi * (d_n[:, None] + d_nm) / lam)  # (N, M)
    a3 = r.transpose(0, 2, 1) * gain[:, None, :]  # (N, N_S, M)
    if groups is not None:
        a3 = np.stack([a3[g].sum(axis=0) for g in groups])
    return a3.reshape(-1, m_grids)


def measurement_matrix(geom: Geometry, a_proj: np.ndarray, control: ControlMatrix) -> np.ndarray:
    """Measurement matrix: sqrt(P) * x * (C - C0) A, shape (K, M).

    C0 is the calibration pattern, so frames equal to it contribute zero
    rows and the line-of-sight term cancels.
    """
    expected_rows = control.n_elements * control.n_states
    if a_proj.shape[0] != expected_rows:
        raise ValueError(
            f"projection matrix has {a_proj.shape[0]} rows, control expects {expected_rows}")
    c0 = ControlMatrix.default(control.k_frames, control.n_elements, control.n_states)
    diff = control.binary() - c0.binary()
    return np.sqrt(geom.power) * geom.tx_symbol * (diff @ a_proj)


def simulate_measurement(gamma: np.ndarray, nu: np.ndarray, noise_power: float,
                         rng: Rng, size: int | None = None) -> np.ndarray:
    """Noisy measurement vector(s): Gamma nu + noise with per-frame variance
    2 * noise_power (calibration differencing doubles the Rx noise)."""
    gamma = np.asarray(gamma)
    nu = np.asarray(nu, dtype=complex)
    if nu.shape[0] != gamma.shape[1]:
        raise ValueError(f"reflection vector length {nu.shape[0]} != grid count {gamma.shape[1]}")
    clean = gamma @ nu
    shape = gamma.shape[0] if size is None else (size, gamma.shape[0])
    noise = sample_complex_gaussian(2.0 * noise_power, rng, size=shape)
    return clean + noise


def group_elements(n_elements: int, group_size: int) -> list[np.ndarray]:
    """Partition N elements into contiguous independently controllable groups.

    Elements of a group share one configuration; their projection rows are
    summed per state (see :func:`build_projection_matrix`). Returns 0-based
    index arrays, one per effective element.
    """
    if group_size < 1 or n_elements % group_size != 0:
        raise ValueError(f"group size {group_size} does not divide {n_elements} elements")
    n_groups = n_elements // group_size
    return [np.arange(g * group_size, (g + 1) * group_size) for g in range(n_groups)]
