"""OFDM forward model: steering vectors, delay vectors, atoms, noise.

The measurement at base station ``j`` is an ``N_R x N`` complex matrix: one
row per antenna element, one column per subcarrier. A single propagation
path with arrival angle ``theta`` and delay ``tau`` contributes the rank-1
atom ``steering(theta) @ delay_vector(tau).T`` scaled by its complex gain.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyScenario
from .geometry import Location, canonicalise_virtual_scatter, doa, toa_nlos

__all__ = [
    "SystemConfig",
    "MeasurementSet",
    "steering",
    "delay_vector",
    "atom",
    "synthesize",
    "add_awgn",
    "qpsk_symbols",
]

SPEED_OF_LIGHT = 3.0e8


def qpsk_symbols(n: int, seed: int) -> np.ndarray:
    """Seeded unit-modulus QPSK pilot sequence of length ``n``."""
    rng = np.random.default_rng(seed)
    phases = rng.integers(0, 4, size=n) * (np.pi / 2.0) + np.pi / 4.0
    return np.exp(1j * phases)


@dataclass
class SystemConfig:
    """Physical, array and waveform constants shared by all operations.

    ``element_spacing`` defaults to half the carrier wavelength; pilots
    default to all-ones (the waveform is known at the receivers, so a
    deterministic pilot keeps examples analytic).
    """

    num_antennas: int = 16
    num_subcarriers: int = 32
    subcarrier_spacing: float = 1.0e4
    carrier_freq: float = 2.0e9
    element_spacing: Optional[float] = None
    speed_of_light: float = SPEED_OF_LIGHT
    bs_positions: Sequence[Location] = field(default_factory=list)
    symbols: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.element_spacing is None:
            self.element_spacing = self.wavelength / 2.0
        if self.symbols is None:
            self.symbols = np.ones(self.num_subcarriers, dtype=complex)
        else:
            self.symbols = np.asarray(self.symbols, dtype=complex)
        self.bs_positions = list(self.bs_positions)
        self.validate()

    @property
    def wavelength(self) -> float:
        return self.speed_of_light / self.carrier_freq

    @property
    def num_bs(self) -> int:
        return len(self.bs_positions)

    def validate(self):
        if self.num_bs < 1:
            raise ValueError("at least one base station position is required")
        if self.num_antennas < 2:
            raise ValueError("num_antennas must be >= 2")
        if self.num_subcarriers < 2:
            raise ValueError("num_subcarriers must be >= 2")
        if self.subcarrier_spacing <= 0 or self.carrier_freq <= 0:
            raise ValueError("subcarrier_spacing and carrier_freq must be positive")
        if self.speed_of_light <= 0:
            raise ValueError("speed_of_light must be positive")
        if not 0 < self.element_spacing <= self.wavelength / 2.0 + 1e-12:
            raise ValueError("element_spacing must lie in (0, wavelength/2] to avoid spatial aliasing")
        if self.symbols.shape != (self.num_subcarriers,):
            raise ValueError("symbols must have length num_subcarriers")
        if not np.allclose(np.abs(self.symbols), 1.0, atol=1e-9):
            raise ValueError("pilot symbols must be unit modulus")

    @classmethod
    def default_4bs(cls, **overrides) -> "SystemConfig":
        """4 cooperating BSs at the corners of a 1 km x 1 km scene."""
        corners = [Location(0.0, 0.0), Location(0.0, 1000.0),
                   Location(1000.0, 0.0), Location(1000.0, 1000.0)]
        overrides.setdefault("bs_positions", corners)
        return cls(**overrides)


@dataclass
class MeasurementSet:
    """Per-BS complex ``N_R x N`` data matrices plus noise metadata."""

    per_bs: list[np.ndarray]
    snr_db: Optional[float] = None
    noise_seed: Optional[int] = None

    def __post_init__(self):
        self.per_bs = [np.asarray(y, dtype=complex) for y in self.per_bs]
        shapes = {y.shape for y in self.per_bs}
        if len(shapes) > 1:
            raise ValueError(f"measurement matrices must share a shape, got {shapes}")

    @property
    def num_bs(self) -> int:
        return len(self.per_bs)

    def copy(self) -> "MeasurementSet":
        return MeasurementSet([y.copy() for y in self.per_bs],
                              snr_db=self.snr_db, noise_seed=self.noise_seed)


def steering(theta: float, cfg: SystemConfig) -> np.ndarray:
    """ULA steering vector: element m carries phase 2*pi/lambda * L * sin(theta) * m."""
    m = np.arange(cfg.num_antennas)
    return np.exp(1j * (2.0 * np.pi / cfg.wavelength) * cfg.element_spacing * np.sin(theta) * m)


def delay_vector(tau: float, cfg: SystemConfig) -> np.ndarray:
    """Frequency-domain delay signature: entry n is s(n) * exp(-i*2*pi*n*df*tau)."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    n = np.arange(cfg.num_subcarriers)
    return cfg.symbols * np.exp(-2j * np.pi * n * cfg.subcarrier_spacing * tau)


def steering_bulk(thetas: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    """Steering vectors for many angles at once, shape (len(thetas), N_R)."""
    m = np.arange(cfg.num_antennas)
    return np.exp(1j * (2.0 * np.pi / cfg.wavelength) * cfg.element_spacing
                  * np.sin(np.asarray(thetas))[:, None] * m[None, :])


def delay_bulk(taus: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    """Delay vectors for many delays at once, shape (len(taus), N)."""
    n = np.arange(cfg.num_subcarriers)
    phase = np.exp(-2j * np.pi * cfg.subcarrier_spacing * np.asarray(taus)[:, None] * n[None, :])
    return cfg.symbols[None, :] * phase


def atom(mobile: Location, scatter: Location, bs_index: int, cfg: SystemConfig) -> np.ndarray:
    """Rank-1 response of one mobile/scatter pair at one BS: a(theta) b(tau)^T.

    The delay runs mobile -> scatter -> BS; the arrival angle depends on the
    scatter alone, so two mobiles equidistant from the same scatter produce
    identical atoms.
    """
    base = cfg.bs_positions[bs_index]
    tau = toa_nlos(mobile, scatter, base, cfg.speed_of_light)
    theta = doa(scatter, base)
    return np.outer(steering(theta, cfg), delay_vector(tau, cfg))


def synthesize(scenario, cfg: SystemConfig) -> MeasurementSet:
    """Noise-free measurements: per BS, the gain-weighted sum of its path atoms.

    Paths without an explicit scatter are collapsed to their virtual scatter
    (the mobile position) on the fly; passing a pre-canonicalised scenario
    gives the same result.
    """
    per_bs = []
    for j, paths in enumerate(scenario.per_bs_paths):
        if len(paths) == 0:
            raise EmptyScenario(f"base station {j} has no propagation paths")
        y = np.zeros((cfg.num_antennas, cfg.num_subcarriers), dtype=complex)
        for path in paths:
            scatter = canonicalise_virtual_scatter(scenario.mobile, path.scatter)
            y += path.gain * atom(scenario.mobile, scatter, j, cfg)
        per_bs.append(y)
    return MeasurementSet(per_bs)


def add_awgn(measurements: MeasurementSet, snr_db: Optional[float], seed: int) -> MeasurementSet:
    """Add circularly-symmetric complex white noise at a per-BS SNR.

    The noise variance at BS j is set so that
    ``10*log10(||Y_j||_F^2 / E||noise||_F^2) = snr_db``; a ``None`` or
    infinite ``snr_db`` is the no-noise sentinel. Deterministic given
    ``seed``.
    """
    if snr_db is None or np.isinf(snr_db):
        out = measurements.copy()
        out.snr_db = None
        out.noise_seed = seed
        return out
    rng = np.random.default_rng(seed)
    noisy = []
    for y in measurements.per_bs:
        signal_power = float(np.sum(np.abs(y) ** 2))
        noise_power = signal_power * 10.0 ** (-snr_db / 10.0)  # expected Frobenius^2
        sigma = np.sqrt(noise_power / y.size / 2.0)  # per real component
        noise = sigma * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
        noisy.append(y + noise)
    return MeasurementSet(noisy, snr_db=snr_db, noise_seed=seed)
