"""2D Newtonized orthogonal matching pursuit over the delay-angle continuum.

Each iteration detects one path on an oversampled (delay, sin-angle) grid,
refines it off-grid with Newton steps, cyclically re-refines all detected
paths and finally re-fits every gain by least squares.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Literal

import numpy as np

from .channel import SystemConfig, UlObservation, signature_rates, signatures

log = logging.getLogger(__name__)


class NumericalFault(ArithmeticError):
    """Raised when a derivative or matrix evaluates to a non-finite value."""


@dataclass(frozen=True)
class NompConfig:
    """Estimator knobs.

    ``newton_step_cap`` is a fraction of one grid cell; ``gradient_rate``
    scales the fallback ascent step in grid-normalised coordinates.
    """

    delay_oversampling: int = 4
    angle_oversampling: int = 4
    refine_cycles: int = 3
    newton_steps: int = 1
    newton_step_cap: float = 0.5
    gradient_rate: float = 1.0
    stop_mode: Literal["known_L", "cfar"] = "known_L"
    n_paths: int | None = None
    false_alarm_rate: float = 1e-2
    max_paths: int = 16
    refine_order: Literal["detection", "energy"] = "detection"
    final_cycles: int = 3

    def __post_init__(self):
        if self.delay_oversampling < 1 or self.angle_oversampling < 1:
            raise ValueError("grid oversampling factors must be >= 1")
        if not 0 < self.false_alarm_rate < 1:
            raise ValueError("false_alarm_rate must lie in (0, 1)")
        if self.stop_mode not in ("known_L", "cfar"):
            raise ValueError(f"unknown stop_mode {self.stop_mode!r}")
        if self.stop_mode == "known_L" and (self.n_paths is None or self.n_paths < 1):
            raise ValueError("stop_mode='known_L' needs n_paths >= 1")
        if self.refine_cycles < 0 or self.max_paths < 1:
            raise ValueError("refine_cycles must be >= 0 and max_paths >= 1")

    @property
    def path_limit(self) -> int:
        if self.stop_mode == "known_L":
            return min(self.n_paths, self.max_paths)
        return self.max_paths


@dataclass(frozen=True)
class EstimatedPaths:
    gains: np.ndarray
    delays: np.ndarray
    angles: np.ndarray
    residual_energy: float
    truncated: bool = False
    merged: int = 0
    residual_history: tuple = field(default=(), repr=False)

    @property
    def n_paths(self) -> int:
        return self.gains.size


# ----------------------------------------------------------------------------
# objective and its derivatives
# ----------------------------------------------------------------------------


def residual_objective(y_r, alpha, tau, theta, cfg: SystemConfig) -> float:
    """``2 Re{y_r^H alpha u} - |alpha|^2 ||u||^2``: energy removed by one path."""
    u = signatures(tau, theta, cfg)[:, 0]
    return float(2 * np.real(np.vdot(y_r, alpha * u)) - abs(alpha) ** 2 * np.vdot(u, u).real)


def objective_derivatives(y_r, alpha, tau, theta, cfg: SystemConfig):
    """Value, gradient and Hessian of :func:`residual_objective` in ``(tau, theta)``."""
    a, b = signature_rates(cfg)
    u = np.exp(-1j * (a * tau + b * np.sin(theta)))
    # d/dtau -> -j a ; d/dtheta -> -j b cos(theta)
    dt = -1j * a
    dth = -1j * b * np.cos(theta)
    dthth = dth**2 + 1j * b * np.sin(theta)
    w = np.conj(y_r) * alpha * u
    value = 2 * np.real(w.sum()) - abs(alpha) ** 2 * u.size
    grad = 2 * np.real(np.array([np.sum(w * dt), np.sum(w * dth)]))
    h_tt = 2 * np.real(np.sum(w * dt * dt))
    h_tth = 2 * np.real(np.sum(w * dt * dth))
    h_thth = 2 * np.real(np.sum(w * dthth))
    hess = np.array([[h_tt, h_tth], [h_tth, h_thth]])
    return float(value), grad, hess


def gain_estimate(y_r, tau, theta, cfg: SystemConfig) -> complex:
    """Least-squares gain of a single signature against ``y_r``."""
    u = signatures(tau, theta, cfg)[:, 0]
    return complex(np.vdot(u, y_r) / np.vdot(u, u).real)


# ----------------------------------------------------------------------------
# grid detection
# ----------------------------------------------------------------------------


class _Dictionary:
    """Separable matched filter over the (delay, sin-angle) grid.

    The angle steering depends on the sub-carrier wavelength, so the angle
    transform is applied per sub-carrier before a single delay transform.
    """

    def __init__(self, cfg: SystemConfig, r_delay: int, r_angle: int):
        M, N = cfg.n_subcarriers, cfg.n_antennas
        self.delays = np.arange(r_delay) / (r_delay * cfg.subcarrier_spacing)
        self.sines = -1.0 + 2.0 * np.arange(r_angle) / r_angle
        self.angles = np.arcsin(self.sines)
        a, b = signature_rates(cfg)
        b = b.reshape(M, N)
        a = a.reshape(M, N)[:, 0]
        # conj steering, applied as  Z[m, r] = sum_n Y[m, n] e^{+j b[m,n] s_r}
        self._angle_filter = np.exp(1j * b[:, :, None] * self.sines[None, None, :])
        self._delay_filter = np.exp(1j * np.outer(self.delays, a))
        self.shape = (r_delay, r_angle)
        self.norm = float(M * N)

    def statistic(self, y_r: np.ndarray) -> np.ndarray:
        M, N, _ = self._angle_filter.shape
        Y = y_r.reshape(M, N)
        Z = np.einsum("mn,mnr->mr", Y, self._angle_filter)
        S = self._delay_filter @ Z
        return (S.real**2 + S.imag**2) / self.norm


@lru_cache(maxsize=8)
def _dictionary(cfg: SystemConfig, r_delay: int, r_angle: int) -> _Dictionary:
    return _Dictionary(cfg, r_delay, r_angle)


def grid_for(cfg: SystemConfig, nomp_cfg: NompConfig) -> _Dictionary:
    return _dictionary(
        cfg,
        nomp_cfg.delay_oversampling * cfg.n_subcarriers,
        nomp_cfg.angle_oversampling * cfg.n_antennas,
    )


def detect_on_grid(y_r, cfg: SystemConfig, nomp_cfg: NompConfig | None = None):
    """Grid point maximising ``|u^H y_r|^2 / ||u||^2``.

    Returns ``(tau, theta, statistic)``. Ties resolve to the smallest
    (delay-index, angle-index) pair.
    """
    nomp_cfg = nomp_cfg or NompConfig(n_paths=1)
    grid = grid_for(cfg, nomp_cfg)
    stat = grid.statistic(np.asarray(y_r, dtype=complex))
    idx = int(np.argmax(stat))
    i, j = np.unravel_index(idx, grid.shape)
    return float(grid.delays[i]), float(grid.angles[j]), float(stat.flat[idx])


# ----------------------------------------------------------------------------
# refinement
# ----------------------------------------------------------------------------


def _wrap_delay(tau: float, period: float) -> float:
    return float(np.mod(tau, period))


def _sine_derivatives(y_r, alpha, tau, sine, rates):
    """Value, gradient and Hessian in ``(tau, sin(theta))`` for phase slopes ``rates``.

    The model is smooth in the sine coordinate, including at endfire where
    the ``theta`` derivative vanishes.
    """
    a, b = rates
    u = np.exp(-1j * (a * tau + b * sine))
    dt = -1j * a
    ds = -1j * b
    w = np.conj(y_r) * alpha * u
    value = 2 * np.real(w.sum()) - abs(alpha) ** 2 * u.size
    grad = 2 * np.real(np.array([np.sum(w * dt), np.sum(w * ds)]))
    h_tt = 2 * np.real(np.sum(w * dt * dt))
    h_ts = 2 * np.real(np.sum(w * dt * ds))
    h_ss = 2 * np.real(np.sum(w * ds * ds))
    return float(value), grad, np.array([[h_tt, h_ts], [h_ts, h_ss]])


def _centred_value(y_r, alpha_c, tau, sine, rates) -> float:
    a, b = rates
    u = np.exp(-1j * (a * tau + b * sine))
    return float(2 * np.real(np.vdot(y_r, alpha_c * u)) - abs(alpha_c) ** 2 * u.size)


def _wrap_sine(s: float) -> float:
    # a half-wavelength array is (nearly) periodic in sin(theta) with period 2
    if s > 1.0:
        s -= 2.0
    elif s < -1.0:
        s += 2.0
    return float(np.clip(s, -1.0, 1.0))


def newton_refine(y_r, alpha, tau, theta, cfg: SystemConfig, nomp_cfg: NompConfig | None = None):
    """One safeguarded Newton (or gradient) ascent step on ``(tau, theta)``.

    The step is taken in ``(tau * df, sin(theta))`` and clipped to
    ``newton_step_cap`` grid cells. The gain is held fixed with its phase
    referenced to the aperture centre. A step that fails to increase the
    objective at that fixed gain is halved up to four times before the old
    point is kept. Returns the new ``(tau, theta)``.
    """
    nomp_cfg = nomp_cfg or NompConfig(n_paths=1)
    df = cfg.subcarrier_spacing
    sine = float(np.sin(theta))
    # hold the gain fixed at the aperture centre: with the raw 0..N-1 antenna
    # index a sine step also rotates the mean phase and fights the gain
    a, b = signature_rates(cfg)
    a_bar, b_bar = float(a.mean()), float(b.mean())
    rates = (a - a_bar, b - b_bar)
    alpha_c = alpha * np.exp(-1j * (a_bar * tau + b_bar * sine))
    value, grad, hess = _sine_derivatives(y_r, alpha_c, tau, sine, rates)
    if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(hess))):
        raise NumericalFault("non-finite objective derivatives in Newton refinement")
    scale = np.array([1.0 / df, 1.0])
    g = grad * scale
    H = hess * np.outer(scale, scale)
    MN = cfg.n_subcarriers * cfg.n_antennas
    eig = np.linalg.eigvalsh(H)
    if np.all(eig < -1e-12 * MN * max(abs(alpha) ** 2, 1e-300)):
        step = -np.linalg.solve(H, g)
    else:
        # curvature-normalised ascent using the mean curvature of a lone path
        curv = abs(alpha) ** 2 * MN * np.pi**2 * np.array(
            [4.0 * cfg.n_subcarriers**2 / 12.0, cfg.n_antennas**2 / 12.0]
        )
        step = nomp_cfg.gradient_rate * g / np.maximum(curv, 1e-300)
    cap = nomp_cfg.newton_step_cap * np.array(
        [
            1.0 / (nomp_cfg.delay_oversampling * cfg.n_subcarriers),
            2.0 / (nomp_cfg.angle_oversampling * cfg.n_antennas),
        ]
    )
    step = np.clip(step, -cap, cap)
    # try the aliased step first, then the clamped one, then backtrack
    candidates = [(step, True)] + [(step * 0.5**k, False) for k in range(4)]
    for st, wrap in candidates:
        new_tau = _wrap_delay(tau + st[0] / df, 1.0 / df)
        s_new = sine + st[1]
        s_new = _wrap_sine(s_new) if wrap else float(np.clip(s_new, -1.0, 1.0))
        if _centred_value(y_r, alpha_c, new_tau, s_new, rates) > value:
            return new_tau, float(np.arcsin(s_new))
    return tau, theta


def ls_update(y, taus, thetas, cfg: SystemConfig, gains=None, coherence_tol: float = 1 - 1e-9):
    """Least-squares gains for the detected signatures.

    Near-duplicate columns (normalised coherence above ``coherence_tol``)
    are merged, keeping the path with the larger current gain. Returns
    ``(gains, keep_mask)``; ``gains`` has one entry per kept path.
    """
    y = np.asarray(y.y if isinstance(y, UlObservation) else y, dtype=complex)
    taus = np.asarray(taus, dtype=float)
    thetas = np.asarray(thetas, dtype=float)
    keep = np.ones(taus.size, dtype=bool)
    U = signatures(taus, thetas, cfg)
    if taus.size > 1:
        G = np.abs(U.conj().T @ U) / U.shape[0]
        prio = np.abs(gains) if gains is not None else np.zeros(taus.size)
        for i in range(taus.size):
            for j in range(i + 1, taus.size):
                if keep[i] and keep[j] and G[i, j] > coherence_tol:
                    drop = j if prio[i] >= prio[j] else i
                    keep[drop] = False
                    log.info("merged near-duplicate paths %d and %d", i, j)
    Uk = U[:, keep]
    coef, *_ = np.linalg.lstsq(Uk, y, rcond=None)
    return coef, keep


# ----------------------------------------------------------------------------
# full estimator
# ----------------------------------------------------------------------------


def cfar_threshold(noise_var: float, grid_size: int, false_alarm_rate: float) -> float:
    return noise_var * np.log(grid_size / false_alarm_rate)


def run_nomp(obs: UlObservation, cfg: SystemConfig, nomp_cfg: NompConfig) -> EstimatedPaths:
    """Extract ``(gain, delay, angle)`` triplets from a UL observation."""
    y = obs.y
    if y.size != cfg.n_subcarriers * cfg.n_antennas:
        raise ValueError("observation length does not match M*N")
    grid = grid_for(cfg, nomp_cfg)
    threshold = cfar_threshold(obs.noise_var, grid.shape[0] * grid.shape[1], nomp_cfg.false_alarm_rate)
    energy_floor = 1e-20 * max(np.vdot(y, y).real, 1e-300)

    taus: list[float] = []
    thetas: list[float] = []
    gains = np.zeros(0, dtype=complex)
    residual = y.copy()
    history = [np.vdot(residual, residual).real]
    truncated = False
    merged = 0

    edge = 1.0 - 2.0 / grid.shape[1]

    def descend(partial, t, th, a, steps):
        for _ in range(steps):
            t, th = newton_refine(partial, a, t, th, cfg, nomp_cfg)
            a = gain_estimate(partial, t, th, cfg)
        return t, th, a

    def refine_one(idx, partial):
        t, th, a = descend(partial, taus[idx], thetas[idx], gains[idx], nomp_cfg.newton_steps)
        if abs(np.sin(th)) > edge:
            # sin(theta) = +1 and -1 alias on a half-wavelength array
            th_m = -th
            a_m = gain_estimate(partial, t, th_m, cfg)
            t_m, th_m, a_m = descend(partial, t, th_m, a_m, nomp_cfg.newton_steps + 2)
            if residual_objective(partial, a_m, t_m, th_m, cfg) > residual_objective(partial, a, t, th, cfg):
                t, th, a = t_m, th_m, a_m
        taus[idx], thetas[idx] = t, th
        gains[idx] = a

    def cycle():
        nonlocal residual
        order = range(len(taus))
        if nomp_cfg.refine_order == "energy":
            order = np.argsort(-np.abs(gains), kind="stable")
        for idx in order:
            u = signatures(taus[idx], thetas[idx], cfg)[:, 0]
            partial = residual + gains[idx] * u
            refine_one(idx, partial)
            residual = partial - gains[idx] * signatures(taus[idx], thetas[idx], cfg)[:, 0]

    while True:
        if len(taus) >= nomp_cfg.path_limit:
            if nomp_cfg.stop_mode == "cfar":
                stat = grid.statistic(residual)
                truncated = bool(stat.max() > threshold)
            break
        if np.vdot(residual, residual).real <= energy_floor:
            break
        stat = grid.statistic(residual)
        idx = int(np.argmax(stat))
        if nomp_cfg.stop_mode == "cfar" and stat.flat[idx] <= threshold:
            break
        i, j = np.unravel_index(idx, grid.shape)
        taus.append(float(grid.delays[i]))
        thetas.append(float(grid.angles[j]))
        gains = np.append(gains, gain_estimate(residual, taus[-1], thetas[-1], cfg))
        # single refinement of the new path against the current residual
        refine_one(len(taus) - 1, residual)
        residual = y - signatures(taus, thetas, cfg) @ gains
        for _ in range(nomp_cfg.refine_cycles):
            cycle()
        gains, keep = ls_update(y, taus, thetas, cfg, gains=gains)
        if not keep.all():
            merged += int((~keep).sum())
            taus = [t for t, k in zip(taus, keep) if k]
            thetas = [t for t, k in zip(thetas, keep) if k]
        residual = y - signatures(taus, thetas, cfg) @ gains
        history.append(np.vdot(residual, residual).real)

    for _ in range(nomp_cfg.final_cycles if taus else 0):
        cycle()
        gains, keep = ls_update(y, taus, thetas, cfg, gains=gains)
        if not keep.all():
            merged += int((~keep).sum())
            taus = [t for t, k in zip(taus, keep) if k]
            thetas = [t for t, k in zip(thetas, keep) if k]
        residual = y - signatures(taus, thetas, cfg) @ gains
        history.append(np.vdot(residual, residual).real)

    # joint alias check: endfire paths may have locked onto the mirrored edge
    wide_edge = 1.0 - 4.0 / grid.shape[1]
    edge_paths = [i for i, th in enumerate(thetas) if abs(np.sin(th)) > wide_edge][:3]
    if edge_paths:
        base = (np.vdot(residual, residual).real, list(taus), list(thetas), gains.copy())
        best = base
        for mask in range(1, 2 ** len(edge_paths)):
            taus, thetas = list(base[1]), list(base[2])
            for bit, i in enumerate(edge_paths):
                if mask >> bit & 1:
                    thetas[i] = -thetas[i]
            gains, keep = ls_update(y, taus, thetas, cfg)
            for _ in range(max(nomp_cfg.final_cycles, 1)):
                if not keep.all():
                    break
                residual = y - signatures(taus, thetas, cfg) @ gains
                cycle()
                gains, keep = ls_update(y, taus, thetas, cfg, gains=gains)
            if not keep.all():
                continue
            residual = y - signatures(taus, thetas, cfg) @ gains
            energy = np.vdot(residual, residual).real
            if energy < best[0]:
                best = (energy, list(taus), list(thetas), gains.copy())
        _, taus, thetas, gains = best
        residual = y - signatures(taus, thetas, cfg) @ gains

    order = np.argsort(-np.abs(gains), kind="stable")
    return EstimatedPaths(
        gains=np.asarray(gains)[order],
        delays=np.asarray(taus, dtype=float)[order],
        angles=np.asarray(thetas, dtype=float)[order],
        residual_energy=float(np.vdot(residual, residual).real),
        truncated=truncated,
        merged=merged,
        residual_history=tuple(history),
    )
