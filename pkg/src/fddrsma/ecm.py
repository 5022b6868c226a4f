"""Fisher information, CRLB and the O-FIM based error covariance estimate.

Parameters are flattened per path as ``(theta, tau, Re alpha, Im alpha)``.
Inversions run on the diagonally equilibrated matrix because the delay
coordinate is many orders of magnitude larger than the others in SI units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .channel import PathSet, SystemConfig, UlObservation, dl_rates, signature_rates
from .nomp import EstimatedPaths, NumericalFault

COND_LIMIT = 1e12


class IllConditionedFisher(np.linalg.LinAlgError):
    """The Fisher matrix is singular; ``path`` names the least identifiable block."""

    def __init__(self, message: str, path: int, cond: float):
        super().__init__(message)
        self.path = path
        self.cond = cond


@dataclass(frozen=True)
class ParamVector:
    """Flat real parameter vector of length ``4L``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.size % 4 or v.size == 0:
            raise ValueError("parameter vector length must be a positive multiple of 4")
        if not np.all(np.isfinite(v)):
            raise ValueError("parameter vector has non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_paths(self) -> int:
        return self.values.size // 4

    @property
    def blocks(self) -> np.ndarray:
        return self.values.reshape(-1, 4)

    @property
    def angles(self) -> np.ndarray:
        return self.blocks[:, 0]

    @property
    def delays(self) -> np.ndarray:
        return self.blocks[:, 1]

    @property
    def gains(self) -> np.ndarray:
        return self.blocks[:, 2] + 1j * self.blocks[:, 3]

    @classmethod
    def from_paths(cls, paths: PathSet | EstimatedPaths) -> "ParamVector":
        g = np.asarray(paths.gains)
        return cls(np.column_stack([paths.angles, paths.delays, g.real, g.imag]).ravel())


@dataclass(frozen=True)
class EcmEstimate:
    """Diagonal ECM estimate together with the un-masked sandwich matrix."""

    phi_hat: np.ndarray
    crlb_full: np.ndarray
    trace_mse: float
    used_fallback: bool = False


# ----------------------------------------------------------------------------
# model derivatives
# ----------------------------------------------------------------------------


def ul_model(psi: ParamVector, cfg: SystemConfig) -> np.ndarray:
    a, b = signature_rates(cfg)
    U = np.exp(-1j * (np.outer(a, psi.delays) + np.outer(b, np.sin(psi.angles))))
    return U @ psi.gains


def ul_derivatives(psi: ParamVector, cfg: SystemConfig):
    """First and second partials of the noiseless UL model.

    Returns ``(D1, D2)`` with ``D1[:, i]`` the partial w.r.t. ``psi_i``
    and ``D2[l]`` the ``(MN, 4, 4)`` within-path second partials of path
    ``l`` (cross-path second partials vanish).
    """
    a, b = signature_rates(cfg)
    L = psi.n_paths
    MN = a.size
    D1 = np.empty((MN, 4 * L), dtype=complex)
    D2 = np.zeros((L, MN, 4, 4), dtype=complex)
    for l, (theta, tau, alpha) in enumerate(zip(psi.angles, psi.delays, psi.gains)):
        u = np.exp(-1j * (a * tau + b * np.sin(theta)))
        c_th = -1j * b * np.cos(theta)
        c_t = -1j * a
        D1[:, 4 * l + 0] = alpha * c_th * u
        D1[:, 4 * l + 1] = alpha * c_t * u
        D1[:, 4 * l + 2] = u
        D1[:, 4 * l + 3] = 1j * u
        d2 = D2[l]
        d2[:, 0, 0] = alpha * (c_th**2 + 1j * b * np.sin(theta)) * u
        d2[:, 0, 1] = d2[:, 1, 0] = alpha * c_th * c_t * u
        d2[:, 1, 1] = alpha * c_t**2 * u
        d2[:, 0, 2] = d2[:, 2, 0] = c_th * u
        d2[:, 0, 3] = d2[:, 3, 0] = 1j * c_th * u
        d2[:, 1, 2] = d2[:, 2, 1] = c_t * u
        d2[:, 1, 3] = d2[:, 3, 1] = 1j * c_t * u
    return D1, D2


def dl_jacobian(psi: ParamVector, f: float, cfg: SystemConfig) -> np.ndarray:
    """``J = d h^T(f) / d psi`` of shape ``(4L, N)`` at the UL gains."""
    delay_rate, angle_rate = dl_rates(f, cfg)
    L = psi.n_paths
    J = np.empty((4 * L, cfg.n_antennas), dtype=complex)
    for l, (theta, tau, alpha) in enumerate(zip(psi.angles, psi.delays, psi.gains)):
        v = np.exp(-1j * (angle_rate * np.sin(theta) + delay_rate * tau))
        J[4 * l + 0] = alpha * (-1j * angle_rate * np.cos(theta)) * v
        J[4 * l + 1] = alpha * (-1j * delay_rate) * v
        J[4 * l + 2] = v
        J[4 * l + 3] = 1j * v
    return J


# ----------------------------------------------------------------------------
# information matrices
# ----------------------------------------------------------------------------


def fim(psi: ParamVector, noise_var: float, cfg: SystemConfig) -> np.ndarray:
    """Expected Fisher information of the Gaussian UL model."""
    D1, _ = ul_derivatives(psi, cfg)
    I = (2.0 / noise_var) * np.real(D1.conj().T @ D1)
    return 0.5 * (I + I.T)


def ofim(psi: ParamVector, obs: UlObservation, cfg: SystemConfig) -> np.ndarray:
    """Observed Fisher information (negative log-likelihood Hessian) at ``psi``."""
    y = np.asarray(obs.y)
    if y.size != cfg.n_subcarriers * cfg.n_antennas:
        raise ValueError("observation length does not match M*N")
    D1, D2 = ul_derivatives(psi, cfg)
    r = y - D1[:, 2::4] @ psi.gains  # the Re-alpha partials are the signatures
    I = np.real(D1.conj().T @ D1)
    for l in range(psi.n_paths):
        s = slice(4 * l, 4 * l + 4)
        I[s, s] -= np.real(np.einsum("i,ijk->jk", r.conj(), D2[l]))
    I *= 2.0 / obs.noise_var
    if not np.all(np.isfinite(I)):
        raise NumericalFault("non-finite entries in the observed Fisher information")
    return 0.5 * (I + I.T)


def _equilibrate(I: np.ndarray):
    d = np.sqrt(np.abs(np.diag(I)))
    d[d == 0] = 1.0
    return I / np.outer(d, d), d


def _weakest_path(Is: np.ndarray) -> int:
    w, V = np.linalg.eigh(Is)
    v = np.abs(V[:, 0]).reshape(-1, 4).sum(axis=1)
    return int(np.argmax(v))


def fisher_inverse(I: np.ndarray, require_pd: bool = True):
    """Inverse of a Fisher matrix via a Cholesky solve on the equilibrated matrix.

    A jitter of ``1e-12 * tr/dim`` is retried on failure. Raises
    :class:`IllConditionedFisher` when the equilibrated condition number
    exceeds ``COND_LIMIT`` or the matrix stays indefinite and
    ``require_pd`` is set. Returns ``(inverse, is_pd)``.
    """
    Is, d = _equilibrate(I)
    n = Is.shape[0]
    cond = np.linalg.cond(Is)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        path = _weakest_path(Is)
        raise IllConditionedFisher(
            f"Fisher matrix is ill-conditioned (cond={cond:.3g}); path block {path} "
            "is not identifiable",
            path,
            cond,
        )
    eye = np.eye(n)
    for jitter in (0.0, 1e-12 * np.trace(Is) / n):
        try:
            c = sla.cho_factor(Is + jitter * eye, lower=True)
        except np.linalg.LinAlgError:
            continue
        return sla.cho_solve(c, eye) / np.outer(d, d), True
    if require_pd:
        raise IllConditionedFisher(
            "Fisher matrix is not positive definite", _weakest_path(Is), cond
        )
    return np.linalg.solve(Is, eye) / np.outer(d, d), False


def sandwich(J: np.ndarray, I_inv: np.ndarray) -> np.ndarray:
    """``J^H I^{-1} J`` symmetrised to exact Hermitian."""
    C = J.conj().T @ I_inv @ J
    return 0.5 * (C + C.conj().T)


def crlb(psi: ParamVector, noise_var: float, f: float, cfg: SystemConfig) -> np.ndarray:
    """CRLB of the reconstructed DL channel, ``J^H I(psi)^{-1} J``."""
    I_inv, _ = fisher_inverse(fim(psi, noise_var, cfg))
    return sandwich(dl_jacobian(psi, f, cfg), I_inv)


def ecm_estimate(psi_hat: ParamVector, obs: UlObservation, f: float, cfg: SystemConfig) -> EcmEstimate:
    """Diagonal ECM from the O-FIM sandwich evaluated at the estimate.

    When the O-FIM is not positive definite (the estimate sits off a local
    maximum of the likelihood) the expected FIM at ``psi_hat`` stands in.
    """
    fallback = False
    try:
        I_inv, _ = fisher_inverse(ofim(psi_hat, obs, cfg))
    except IllConditionedFisher:
        I_inv, _ = fisher_inverse(fim(psi_hat, obs.noise_var, cfg))
        fallback = True
    C = sandwich(dl_jacobian(psi_hat, f, cfg), I_inv)
    diag = np.clip(np.real(np.diag(C)), 0.0, None)
    phi = np.diag(diag).astype(complex)
    return EcmEstimate(phi_hat=phi, crlb_full=C, trace_mse=float(diag.sum()), used_fallback=fallback)


def ecm_calibrate(base: EcmEstimate, eta, innovation_power: float = 1.0) -> EcmEstimate:
    """Blend the reciprocal-gain ECM with the gain-innovation term.

    ``Phi = mean(eta^2) * C + mean(1 - eta^2) * innovation_power * I``.

    Parameters
    ----------
    base : EcmEstimate
        Estimate computed under reciprocal gains.
    eta : array_like
        Per-path gain correlations in ``[0, 1]``.
    innovation_power : float
        Per-antenna power of the redrawn gain component. The default of 1
        treats it as a full-power channel entry; ``L * path_power`` (that is
        ``1/N`` under unit-norm channels) is the variance the Gauss-Markov
        model actually produces.
    """
    eta = np.asarray(eta, dtype=float).ravel()
    if eta.size == 0 or np.any(eta < 0) or np.any(eta > 1):
        raise ValueError("eta entries must lie in [0, 1]")
    if not innovation_power >= 0:
        raise ValueError("innovation_power must be nonnegative")
    w_keep = float(np.mean(eta**2))
    w_new = float(np.mean(1.0 - eta**2)) * innovation_power
    N = base.phi_hat.shape[0]
    if w_new == 0.0:
        phi = w_keep * base.phi_hat
    elif w_keep == 0.0:
        phi = w_new * np.eye(N, dtype=complex)
    else:
        phi = w_keep * base.phi_hat + w_new * np.eye(N)
    return EcmEstimate(
        phi_hat=phi,
        crlb_full=base.crlb_full,
        trace_mse=float(np.real(np.trace(phi))),
        used_fallback=base.used_fallback,
    )
