"""System configuration and the multipath UL/DL channel model.

The UL sounding measurement of one user is stacked sub-carrier-major:
element ``(m, n)`` sits at flat index ``m * N + n`` with ``m`` the
0-based position in the ascending sub-carrier offset list
``floor(-M/2), ..., ceil(M/2) - 1`` and ``n`` the antenna index.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Mapping

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class SystemConfig:
    """Array, OFDM grid and power settings shared by every stage.

    Defaults reproduce the large-scale setup of the sum-SE experiments:
    a 32-antenna ULA serving 16 users with 128 pilot sub-carriers, UL at
    7.25 GHz and the target DL resource block at 7.75 GHz.
    """

    n_antennas: int = 32
    n_users: int = 16
    n_subcarriers: int = 128
    subcarrier_spacing: float = 180e3
    ul_carrier: float = 7.25e9
    dl_carrier: float = 7.75e9
    tx_power: float = 1.0
    noise_var: float = 1e-2
    antenna_spacing: float | None = None
    rician_factor: float = 0.0
    speed_of_light: float = SPEED_OF_LIGHT

    def __post_init__(self):
        for name in ("n_antennas", "n_users", "n_subcarriers"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.subcarrier_spacing <= 0 or self.ul_carrier <= 0:
            raise ValueError("sub-carrier spacing and UL carrier must be positive")
        if self.dl_carrier < self.ul_carrier:
            raise ValueError("DL carrier must not lie below the UL carrier")
        if self.noise_var < 0 or self.tx_power <= 0:
            raise ValueError("noise_var must be >= 0 and tx_power > 0")
        if self.rician_factor < 0:
            raise ValueError("rician_factor must be nonnegative")
        if self.antenna_spacing is None:
            object.__setattr__(
                self, "antenna_spacing", self.speed_of_light / (2.0 * self.ul_carrier)
            )
        if self.bandwidth >= 0.05 * self.ul_carrier:
            warnings.warn(
                "M * subcarrier_spacing is not small against the UL carrier; "
                "the frequency-flat path parameters assumed by the model break down",
                stacklevel=2,
            )

    @property
    def bandwidth(self) -> float:
        return self.n_subcarriers * self.subcarrier_spacing

    @property
    def extrapolation_range(self) -> float:
        """Frequency gap between the DL resource block and the UL carrier."""
        return self.dl_carrier - self.ul_carrier

    @property
    def snr_inv(self) -> float:
        return self.noise_var / self.tx_power

    @property
    def subcarrier_offsets(self) -> np.ndarray:
        """Integer offsets ``floor(-M/2) .. ceil(M/2) - 1`` in ascending order."""
        M = self.n_subcarriers
        start = math.floor(-M / 2)
        return np.arange(start, start + M)

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "SystemConfig":
        """Build from string-or-number values, ignoring unknown keys."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                continue
            if raw is None or (isinstance(raw, str) and raw.strip().lower() in ("", "none")):
                kwargs[key] = None
            elif key in ("n_antennas", "n_users", "n_subcarriers"):
                kwargs[key] = int(float(raw))
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)

    def with_dl_offset(self, f: float) -> "SystemConfig":
        """Copy whose DL carrier sits ``f`` Hz above the UL carrier."""
        return replace(self, dl_carrier=self.ul_carrier + f)


@dataclass(frozen=True)
class PathSet:
    """Per-user multipath parameters.

    ``gains`` are the UL gains unless the set was produced by
    :func:`with_dl_gains`. ``eta`` is the per-path UL/DL gain correlation.
    """

    gains: np.ndarray
    delays: np.ndarray
    angles: np.ndarray
    eta: np.ndarray
    path_power: float

    def __post_init__(self):
        gains = np.atleast_1d(np.asarray(self.gains, dtype=complex))
        delays = np.atleast_1d(np.asarray(self.delays, dtype=float))
        angles = np.atleast_1d(np.asarray(self.angles, dtype=float))
        eta = np.broadcast_to(np.asarray(self.eta, dtype=float), gains.shape).copy()
        if not (gains.shape == delays.shape == angles.shape) or gains.ndim != 1:
            raise ValueError("gains, delays and angles must be 1-D of equal length")
        if np.any(eta < 0) or np.any(eta > 1):
            raise ValueError("eta must lie in [0, 1]")
        for name, arr in (("gains", gains), ("delays", delays), ("angles", angles), ("eta", eta)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_paths(self) -> int:
        return self.gains.size

    def with_gains(self, gains: np.ndarray) -> "PathSet":
        return replace(self, gains=np.asarray(gains, dtype=complex))


@dataclass(frozen=True)
class UlObservation:
    """Stacked ``M*N`` UL sounding measurement and its noise variance."""

    y: np.ndarray
    noise_var: float

    def __post_init__(self):
        y = np.asarray(self.y, dtype=complex).ravel()
        y.setflags(write=False)
        object.__setattr__(self, "y", y)


def flat_index(m: int, n: int, n_antennas: int) -> int:
    """Flat position of sub-carrier slot ``m`` (0-based) and antenna ``n``."""
    return m * n_antennas + n


def signature_rates(cfg: SystemConfig) -> tuple[np.ndarray, np.ndarray]:
    """Phase slopes of the UL signature, flattened to length ``M*N``.

    Returns ``(delay_rate, angle_rate)`` such that
    ``u(tau, theta) = exp(-1j * (delay_rate * tau + angle_rate * sin(theta)))``.
    """
    offsets = cfg.subcarrier_offsets.astype(float)
    freqs = cfg.ul_carrier + offsets * cfg.subcarrier_spacing
    n = np.arange(cfg.n_antennas, dtype=float)
    angle_rate = 2 * np.pi * cfg.antenna_spacing * np.outer(freqs, n) / cfg.speed_of_light
    delay_rate = np.repeat(2 * np.pi * offsets * cfg.subcarrier_spacing, cfg.n_antennas)
    return delay_rate, angle_rate.ravel()


def signature(tau: float, theta: float, cfg: SystemConfig) -> np.ndarray:
    """UL training signature ``u(tau, theta)`` of length ``M*N``."""
    delay_rate, angle_rate = signature_rates(cfg)
    return np.exp(-1j * (delay_rate * tau + angle_rate * np.sin(theta)))


def signatures(taus, thetas, cfg: SystemConfig) -> np.ndarray:
    """Columns ``u(tau_l, theta_l)`` stacked into an ``(M*N, L)`` matrix."""
    delay_rate, angle_rate = signature_rates(cfg)
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    phase = np.outer(delay_rate, taus) + np.outer(angle_rate, np.sin(thetas))
    return np.exp(-1j * phase)


def dl_rates(f: float, cfg: SystemConfig) -> tuple[float, np.ndarray]:
    """Delay phase slope ``2*pi*f`` and per-antenna angle slope at the DL block."""
    wavelength = cfg.speed_of_light / (cfg.ul_carrier + f)
    n = np.arange(cfg.n_antennas, dtype=float)
    return 2 * np.pi * f, 2 * np.pi * cfg.antenna_spacing * n / wavelength


def array_response(theta: float, wavelength: float, cfg: SystemConfig) -> np.ndarray:
    n = np.arange(cfg.n_antennas)
    return np.exp(-2j * np.pi * n * cfg.antenna_spacing / wavelength * np.sin(theta))


def path_power(n_antennas: int, n_paths: int) -> float:
    """Per-path mean power that gives the composite channel unit expected norm."""
    return 1.0 / (n_antennas * n_paths)


def sample_paths(
    cfg: SystemConfig,
    n_paths: int,
    rng: np.random.Generator,
    rician_factor: float | None = None,
    eta=1.0,
) -> PathSet:
    """Draw one user's multipath set.

    Gains are Rician ``CN(sqrt(k s/(k+1)), s/(k+1))`` with ``s`` the
    per-path power; delays are uniform on ``(0, 1/df)`` and angles uniform
    on ``(-pi/2, pi/2)``. Paths come out sorted by descending gain modulus.
    """
    if n_paths < 1:
        raise ValueError("a path set needs at least one path")
    kappa = cfg.rician_factor if rician_factor is None else rician_factor
    s = path_power(cfg.n_antennas, n_paths)
    if np.isinf(kappa):
        gains = np.full(n_paths, np.sqrt(s), dtype=complex)
    else:
        mean = np.sqrt(kappa * s / (kappa + 1))
        scale = np.sqrt(s / (kappa + 1) / 2)
        gains = mean + scale * (rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths))
    delays = rng.uniform(0.0, 1.0 / cfg.subcarrier_spacing, n_paths)
    # uniform() includes the lower endpoint; nudge a zero draw into the open interval
    delays = np.where(delays <= 0.0, np.nextafter(0.0, 1.0), delays)
    angles = rng.uniform(-np.pi / 2, np.pi / 2, n_paths)
    order = np.argsort(-np.abs(gains), kind="stable")
    eta = np.broadcast_to(np.asarray(eta, dtype=float), (n_paths,))
    return PathSet(gains[order], delays[order], angles[order], eta[order], s)


def dl_gains(paths: PathSet, rng: np.random.Generator) -> np.ndarray:
    """First-order Gauss-Markov DL gains ``eta*a_ul + sqrt(1-eta^2)*beta``."""
    eta = paths.eta
    if np.all(eta == 1.0):
        return paths.gains.copy()
    L = paths.n_paths
    beta = np.sqrt(paths.path_power / 2) * (rng.standard_normal(L) + 1j * rng.standard_normal(L))
    return eta * paths.gains + np.sqrt(1.0 - eta**2) * beta


def with_dl_gains(paths: PathSet, rng: np.random.Generator) -> PathSet:
    return paths.with_gains(dl_gains(paths, rng))


def dl_channel(paths: PathSet, f: float | None, cfg: SystemConfig) -> np.ndarray:
    """DL channel ``h(f)`` of length N built from ``paths.gains``.

    ``f`` defaults to ``cfg.extrapolation_range``; the DL wavelength is that
    of the carrier ``ul_carrier + f``.
    """
    if f is None:
        f = cfg.extrapolation_range
    if f < 0:
        raise ValueError("extrapolation range must be nonnegative")
    delay_rate, angle_rate = dl_rates(f, cfg)
    phase = np.outer(angle_rate, np.sin(paths.angles)) + delay_rate * paths.delays
    return np.exp(-1j * phase) @ paths.gains


def ul_channel(paths: PathSet, cfg: SystemConfig) -> np.ndarray:
    """Noiseless UL response on every sub-carrier, shape ``(M, N)``."""
    return (signatures(paths.delays, paths.angles, cfg) @ paths.gains).reshape(
        cfg.n_subcarriers, cfg.n_antennas
    )


def ul_noise_var(paths: PathSet, ul_snr_db: float) -> float:
    """Noise variance that puts the mean per-measurement SNR at ``ul_snr_db``."""
    signal_power = paths.n_paths * paths.path_power
    return signal_power * 10.0 ** (-ul_snr_db / 10.0)


def simulate_ul_observation(
    paths: PathSet, cfg: SystemConfig, ul_snr_db: float, rng: np.random.Generator
) -> UlObservation:
    """Noisy UL sounding ``y = sum_l a_l u(tau_l, theta_l) + w``."""
    clean = signatures(paths.delays, paths.angles, cfg) @ paths.gains
    sigma2 = ul_noise_var(paths, ul_snr_db)
    size = clean.size
    noise = np.sqrt(sigma2 / 2) * (rng.standard_normal(size) + 1j * rng.standard_normal(size))
    return UlObservation(clean + noise, sigma2)


# ----------------------------------------------------------------------------
# key=value configuration files
# ----------------------------------------------------------------------------

CONFIG_SECTIONS = ("channel", "nomp", "rsma", "experiment")


def parse_config_text(text: str) -> dict[str, dict[str, str]]:
    """Parse ``section.key = value`` lines into nested dicts.

    Blank lines and ``#`` comments are skipped. Keys without a recognised
    section prefix land in ``channel``.
    """
    out: dict[str, dict[str, str]] = {s: {} for s in CONFIG_SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        section, _, name = key.partition(".")
        if not name:
            section, name = "channel", section
        if section not in out:
            raise ValueError(f"line {lineno}: unknown section {section!r}")
        out[section][name] = value
    return out


def load_config(path: str | Path) -> dict[str, dict[str, str]]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


DEFAULT_CONFIG_TEXT = """\
# channel: system and channel model
channel.n_antennas = 32
channel.n_users = 16
channel.n_subcarriers = 128
channel.subcarrier_spacing = 180e3
channel.ul_carrier = 7.25e9
channel.dl_carrier = 7.75e9
channel.tx_power = 1.0
channel.noise_var = 1e-2
channel.rician_factor = 0.0
# nomp: 2D-NOMP estimator
nomp.delay_oversampling = 4
nomp.angle_oversampling = 4
nomp.refine_cycles = 3
nomp.stop_mode = known_L
nomp.false_alarm_rate = 1e-2
# rsma: GPI precoder
rsma.alpha = 0.1
rsma.epsilon = 0.1
rsma.max_iter = 500
# experiment: Monte Carlo harness
experiment.n_paths = 4
experiment.ul_snr_db = 10
experiment.eta_sq_low = 0.9
experiment.trials = 100
"""
