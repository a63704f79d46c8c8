import numpy as np
import pytest

from superloc.geometry import Location
from superloc.signal_model import SystemConfig


@pytest.fixture
def cfg():
    """Default 4-BS corner deployment."""
    return SystemConfig.default_4bs()


@pytest.fixture
def small_cfg():
    """Cheaper system for solver component tests."""
    return SystemConfig.default_4bs(num_antennas=8, num_subcarriers=16)


def time_domain_measurements(scenario, cfg):
    """Independent forward-model oracle.

    Builds each BS's received waveform sample by sample from the
    superposition of delayed, steered copies of the transmitted OFDM block,
    then projects onto the subcarriers with a DFT. Shares no code with the
    closed-form synthesiser beyond the geometry helpers.
    """
    from superloc.geometry import canonicalise_virtual_scatter, doa, toa_nlos

    N = cfg.num_subcarriers
    df = cfg.subcarrier_spacing
    fs = N * df
    t = np.arange(N) / fs
    n = np.arange(N)

    def waveform(ts):
        return np.sum(cfg.symbols[None, :] * np.exp(2j * np.pi * n[None, :] * df * ts[:, None]), axis=1)

    out = []
    for j, paths in enumerate(scenario.per_bs_paths):
        base = cfg.bs_positions[j]
        y = np.zeros((cfg.num_antennas, N), dtype=complex)
        for path in paths:
            scatter = canonicalise_virtual_scatter(scenario.mobile, path.scatter)
            tau = toa_nlos(scenario.mobile, scatter, base, cfg.speed_of_light)
            theta = doa(scatter, base)
            m = np.arange(cfg.num_antennas)
            steer = np.exp(1j * 2 * np.pi / cfg.wavelength * cfg.element_spacing * np.sin(theta) * m)
            y += path.gain * np.outer(steer, waveform(t - tau))
        # DFT per antenna row onto the subcarrier grid
        dft = np.exp(-2j * np.pi * np.outer(n, np.arange(N)) / N)
        out.append(y @ dft.T / N)
    return out
