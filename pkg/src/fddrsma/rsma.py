"""1-layer RSMA precoding by generalized power iteration.

All SINR quadratic forms are block diagonal with ``K+1`` blocks of size
``N`` (block 0 is the common precoder, block ``k`` user ``k``'s private
precoder), so the solver works on per-block ``N x N`` matrices and only
materialises the dense ``N(K+1)`` matrices on request.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.special import logsumexp

LOG2E = 1.0 / np.log(2.0)


class PrecoderStack:
    """Stacked precoder ``[f_c; f_1; ...; f_K]``."""

    __slots__ = ("vector", "n_antennas", "n_users")

    def __init__(self, vector, n_antennas: int):
        v = np.asarray(vector, dtype=complex).ravel()
        if v.size % n_antennas:
            raise ValueError("stack length must be a multiple of n_antennas")
        self.vector = v
        self.n_antennas = n_antennas
        self.n_users = v.size // n_antennas - 1

    @classmethod
    def from_parts(cls, common, private) -> "PrecoderStack":
        private = np.atleast_2d(np.asarray(private, dtype=complex))
        common = np.asarray(common, dtype=complex).ravel()
        return cls(np.concatenate([common, private.ravel()]), common.size)

    @property
    def blocks(self) -> np.ndarray:
        return self.vector.reshape(self.n_users + 1, self.n_antennas)

    @property
    def common(self) -> np.ndarray:
        return self.blocks[0]

    @property
    def private(self) -> np.ndarray:
        """``(K, N)`` private precoders, one per row."""
        return self.blocks[1:]

    def normalized(self) -> "PrecoderStack":
        return PrecoderStack(self.vector / np.linalg.norm(self.vector), self.n_antennas)

    def __repr__(self):
        return f"PrecoderStack(N={self.n_antennas}, K={self.n_users}, |f|={np.linalg.norm(self.vector):.3g})"


def _as_blocks(f, n_antennas: int) -> np.ndarray:
    if isinstance(f, PrecoderStack):
        return f.blocks
    v = np.asarray(f, dtype=complex).ravel()
    return v.reshape(-1, n_antennas)


@dataclass(frozen=True)
class QuadraticSet:
    """Per-user SINR quadratic forms built from channel estimates and ECMs.

    ``gram[k] = h_k h_k^H + Phi_k``; the dense matrices returned by
    :meth:`common_num` and friends follow the block layout described in
    the module docstring.
    """

    channels: np.ndarray  # (K, N)
    ecms: np.ndarray  # (K, N, N)
    snr_inv: float

    @property
    def n_users(self) -> int:
        return self.channels.shape[0]

    @property
    def n_antennas(self) -> int:
        return self.channels.shape[1]

    @property
    def size(self) -> int:
        """Length ``N(K+1)`` of the stacked precoder."""
        return self.n_antennas * (self.n_users + 1)

    @property
    def gram(self) -> np.ndarray:
        h = self.channels
        return np.einsum("ki,kj->kij", h, h.conj()) + self.ecms

    # dense views -----------------------------------------------------------

    def _dense(self, blocks) -> np.ndarray:
        N, K = self.n_antennas, self.n_users
        return sla.block_diag(*blocks) + self.snr_inv * np.eye(N * (K + 1))

    def common_num(self, k: int) -> np.ndarray:
        G = self.gram[k]
        return self._dense([G] * (self.n_users + 1))

    def common_den(self, k: int) -> np.ndarray:
        G = self.gram[k]
        return self._dense([self.ecms[k]] + [G] * self.n_users)

    def private_num(self, k: int) -> np.ndarray:
        G = self.gram[k]
        return self._dense([np.zeros_like(G)] + [G] * self.n_users)

    def private_den(self, k: int) -> np.ndarray:
        G = self.gram[k]
        blocks = [np.zeros_like(G)] + [G] * self.n_users
        blocks[1 + k] = self.ecms[k]
        return self._dense(blocks)

    # quadratic forms -------------------------------------------------------

    def forms(self, f) -> dict[str, np.ndarray]:
        """All ``f^H X f`` values, each of shape ``(K,)``."""
        F = _as_blocks(f, self.n_antennas)
        K = self.n_users
        hf = F.conj() @ self.channels.T  # hf[b, k] = f_b^H h_k
        sig = np.abs(hf) ** 2  # |h_k^H f_b|^2
        err = np.real(np.einsum("bi,kij,bj->kb", F.conj(), self.ecms, F))  # f_b^H Phi_k f_b
        q = sig.T + err  # q[k, b] = f_b^H G_k f_b
        reg = self.snr_inv * np.vdot(F, F).real
        total = q.sum(axis=1)
        priv_total = q[:, 1:].sum(axis=1)
        idx = np.arange(K)
        return {
            "common_num": total + reg,
            "common_den": total - sig[0] + reg,
            "private_num": priv_total + reg,
            "private_den": priv_total - sig[1 + idx, idx] + reg,
            "q": q,
        }


def build_quadratics(channels, ecms, snr_inv: float) -> QuadraticSet:
    """Assemble the SINR quadratic forms for estimated channels and ECMs."""
    H = np.atleast_2d(np.asarray(channels, dtype=complex))
    K, N = H.shape
    if ecms is None:
        P = np.zeros((K, N, N), dtype=complex)
    else:
        P = np.asarray(ecms, dtype=complex)
        if P.shape != (K, N, N):
            raise ValueError(f"ECM stack must have shape {(K, N, N)}, got {P.shape}")
        if not np.allclose(P, np.conj(np.swapaxes(P, 1, 2)), atol=1e-12, rtol=1e-10):
            raise ValueError("ECM estimates must be Hermitian")
    if snr_inv <= 0:
        raise ValueError("snr_inv must be positive")
    return QuadraticSet(H, P, float(snr_inv))


def lse_min(values, alpha: float) -> float:
    """Smooth minimum ``-alpha * log(mean(exp(-x / alpha)))``."""
    x = np.asarray(values, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("lse_min of an empty sequence")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return float(-alpha * (logsumexp(-x / alpha) - np.log(x.size)))


def _log2_quotients(f, Q: QuadraticSet):
    qf = Q.forms(f)
    common = np.log2(qf["common_num"]) - np.log2(qf["common_den"])
    private = np.log2(qf["private_num"]) - np.log2(qf["private_den"])
    return common, private, qf


def objective(f, Q: QuadraticSet, alpha: float, common: bool = True) -> float:
    """Smoothed sum-SE surrogate: ``g(common log-quotients) + sum private``.

    With ``common=False`` only the private terms enter (SDMA).
    """
    F = _as_blocks(f, Q.n_antennas)
    if not np.any(F):
        raise ValueError("objective undefined at the zero precoder")
    c, p, _ = _log2_quotients(F, Q)
    val = float(p.sum())
    if common:
        val += lse_min(c, alpha)
    return val


def exact_objective(f, Q: QuadraticSet, common: bool = True) -> float:
    """Sum-SE lower bound with the exact min over the common rates."""
    c, p, _ = _log2_quotients(f, Q)
    return float(p.sum() + (c.min() if common else 0.0))


def softmax_weights(common_log2: np.ndarray, alpha: float) -> np.ndarray:
    z = -np.asarray(common_log2, dtype=float) / alpha
    w = np.exp(z - logsumexp(z))
    if not np.all(np.isfinite(w)):
        bad = int(np.flatnonzero(~np.isfinite(w))[0])
        raise FloatingPointError(f"non-finite softmax weight for user {bad}")
    return w


def _kkt_blocks(F: np.ndarray, Q: QuadraticSet, alpha: float, common: bool = True):
    """Per-block ``M_A``, ``M_B`` with ``A_KKT = lambda M_A``, ``B_KKT = M_B``.

    Also returns ``log2 lambda`` (the objective). Shapes ``(K+1, N, N)``.
    """
    K, N = Q.n_users, Q.n_antennas
    c, p, qf = _log2_quotients(F, Q)
    cA_p = 1.0 / qf["private_num"]
    cB_p = 1.0 / qf["private_den"]
    if common:
        w = softmax_weights(c, alpha)
        cA_c = w / qf["common_num"]
        cB_c = w / qf["common_den"]
    else:
        cA_c = cB_c = np.zeros(K)
    G = Q.gram
    Phi = Q.ecms
    s = Q.snr_inv
    eye = np.eye(N)
    MA = np.empty((K + 1, N, N), dtype=complex)
    MB = np.empty((K + 1, N, N), dtype=complex)
    MA[0] = np.einsum("k,kij->ij", cA_c, G) + s * (cA_p.sum() + cA_c.sum()) * eye
    MB[0] = np.einsum("k,kij->ij", cB_c, Phi) + s * (cB_p.sum() + cB_c.sum()) * eye
    shared_A = np.einsum("k,kij->ij", cA_p + cA_c, G) + s * (cA_p.sum() + cA_c.sum()) * eye
    shared_B = np.einsum("k,kij->ij", cB_p + cB_c, G) + s * (cB_p.sum() + cB_c.sum()) * eye
    for b in range(1, K + 1):
        k = b - 1
        MA[b] = shared_A
        # user k's own private stream sees only its ECM in the denominator
        MB[b] = shared_B - cB_p[k] * (G[k] - Phi[k])
    log2_lambda = float(p.sum() + (lse_min(c, alpha) if common else 0.0))
    return MA, MB, log2_lambda


def kkt_matrices(f, Q: QuadraticSet, alpha: float, common: bool = True):
    """Dense ``(A_KKT, B_KKT, lambda)`` of the first-order condition.

    ``A_KKT f = lambda B_KKT f`` holds exactly at stationary points of
    :func:`objective`; ``lambda`` equals ``2 ** objective(f)``.
    """
    F = _as_blocks(f, Q.n_antennas)
    MA, MB, log2_lam = _kkt_blocks(F, Q, alpha, common)
    lam = 2.0**log2_lam
    return lam * sla.block_diag(*MA), sla.block_diag(*MB), lam


def kkt_residual(f, Q: QuadraticSet, alpha: float, common: bool = True) -> float:
    """``|| B^{-1} A f / lambda - f ||`` for unit-norm ``f``."""
    F = _as_blocks(f, Q.n_antennas)
    F = F / np.linalg.norm(F)
    MA, MB, _ = _kkt_blocks(F, Q, alpha, common)
    out = np.stack([np.linalg.solve(MB[b], MA[b] @ F[b]) for b in range(F.shape[0])])
    if not common:
        out[0] = 0.0
    return float(np.linalg.norm(out - F))


def objective_gradient(f, Q: QuadraticSet, alpha: float, common: bool = True) -> np.ndarray:
    """Wirtinger gradient ``d objective / d f^*`` assembled from the KKT blocks."""
    F = _as_blocks(f, Q.n_antennas)
    MA, MB, _ = _kkt_blocks(F, Q, alpha, common)
    g = np.stack([(MA[b] - MB[b]) @ F[b] for b in range(F.shape[0])]) * LOG2E
    if not common:
        g[0] = 0.0
    return g.ravel()


@dataclass(frozen=True)
class GpiResult:
    precoder: PrecoderStack
    iterations: int
    converged: bool
    alpha: float
    objective: float


def default_init(channels, common: bool = True) -> PrecoderStack:
    """Common block along the dominant eigenvector of ``sum_k h_k h_k^H``, privates MRT."""
    H = np.atleast_2d(np.asarray(channels, dtype=complex))
    K, N = H.shape
    priv = H / np.maximum(np.linalg.norm(H, axis=1, keepdims=True), 1e-300)
    if common:
        _, V = np.linalg.eigh(H.T @ H.conj())
        fc = V[:, -1]
    else:
        fc = np.zeros(N, dtype=complex)
    return PrecoderStack.from_parts(fc, priv).normalized()


def _gpi_direction(F, Q: QuadraticSet, a: float, common: bool):
    """Unit-norm fixed-point image ``B_KKT^{-1} A_KKT f / ||.||`` and the smoothed objective."""
    MA, MB, log2_lam = _kkt_blocks(F, Q, a, common)
    out = np.empty_like(F)
    for b in range(F.shape[0]):
        if b == 0 and not common:
            out[0] = 0.0
            continue
        try:
            cf = sla.cho_factor(MB[b], lower=True, check_finite=True)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"B_KKT block {b} is not positive definite") from exc
        out[b] = sla.cho_solve(cf, MA[b] @ F[b])
    return out / np.linalg.norm(out), log2_lam


def gpi_solve(
    Q: QuadraticSet,
    alpha: float = 0.1,
    epsilon: float = 0.1,
    max_iter: int = 500,
    init: PrecoderStack | np.ndarray | None = None,
    common: bool = True,
    adapt_alpha: bool = True,
    line_search: bool = True,
) -> GpiResult:
    """Normalised fixed-point iteration ``f <- B_KKT^{-1} A_KKT f / ||.||``.

    Stops when the fixed-point update moves ``f`` by less than ``epsilon``.
    ``B^{-1} A f - f`` is a positive-definite preconditioning of the
    objective gradient, so with ``line_search`` the step toward the
    fixed-point image is halved until the smoothed objective does not
    decrease. Fixed points are unchanged; the plain iteration
    (``line_search=False``) can cycle when the common-rate minimiser
    keeps switching users.

    When ``adapt_alpha`` is set and the iteration has not settled after
    ``max_iter // 2`` steps, ``alpha`` is doubled once. ``common=False``
    pins the common block to zero and drops the smoothed-min term, giving
    the SDMA variant. The reported objective uses the exact minimum.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    N = Q.n_antennas
    if init is None:
        init = default_init(Q.channels, common)
    F = _as_blocks(init, N).copy()
    if not common:
        F[0] = 0.0
    F /= np.linalg.norm(F)
    converged = False
    it = 0
    a = alpha
    for it in range(1, max_iter + 1):
        if adapt_alpha and common and it == max_iter // 2 + 1:
            a *= 2.0
        target, value = _gpi_direction(F, Q, a, common)
        # the eigenvector is defined up to phase; compare in a common phase
        target *= np.exp(-1j * np.angle(np.vdot(F.ravel(), target.ravel())))
        step = np.linalg.norm(target - F)
        if step < epsilon:
            F = target
            converged = True
            break
        new = target
        if line_search:
            mu = 1.0
            while mu > 1e-4:
                cand = F + mu * (target - F)
                cand /= np.linalg.norm(cand)
                if objective(cand, Q, a, common) >= value:
                    new = cand
                    break
                mu *= 0.5
            else:
                new = F  # no ascent along the fixed-point direction
        if new is F:
            converged = False
            break
        F = new
    pre = PrecoderStack(F.ravel(), N)
    return GpiResult(pre, it, converged, a, exact_objective(pre, Q, common))


def rsma_gpi_solve(
    Q: QuadraticSet,
    alpha: float = 0.1,
    epsilon: float = 0.1,
    max_iter: int = 500,
    common_seed: float = 0.1,
) -> GpiResult:
    """RSMA GPI from two starts, keeping the higher exact objective.

    The second start is the SDMA solution with a small common precoder
    along the dominant eigenvector of ``sum_k h_k h_k^H`` (relative
    amplitude ``common_seed``). Rate splitting contains SDMA as the
    zero-common-power special case, so this start protects the design
    against settling below the SDMA optimum.
    """
    first = gpi_solve(Q, alpha, epsilon, max_iter)
    sdma = gpi_solve(Q, alpha, epsilon, max_iter, common=False)
    F = _as_blocks(sdma.precoder, Q.n_antennas).copy()
    F[0] = common_seed * _as_blocks(default_init(Q.channels), Q.n_antennas)[0]
    second = gpi_solve(Q, alpha, epsilon, max_iter, init=F.ravel())
    best = second if second.objective > first.objective else first
    return GpiResult(
        best.precoder,
        first.iterations + sdma.iterations + second.iterations,
        best.converged,
        best.alpha,
        best.objective,
    )


def sdma_gpi_solve(Q: QuadraticSet, alpha: float = 0.1, epsilon: float = 0.1, max_iter: int = 500, init=None) -> GpiResult:
    """GPI restricted to private streams (common precoder pinned to zero)."""
    return gpi_solve(Q, alpha, epsilon, max_iter, init, common=False)


def baseline_mrt(channels) -> PrecoderStack:
    """MRT privates ``f_k = h_k`` at equal power ``1/K`` each, no common stream."""
    H = np.atleast_2d(np.asarray(channels, dtype=complex))
    K, N = H.shape
    priv = H / np.linalg.norm(H, axis=1, keepdims=True) / np.sqrt(K)
    return PrecoderStack.from_parts(np.zeros(N), priv)


def baseline_rzf(channels, snr_inv: float) -> PrecoderStack:
    """RZF privates ``(H H^H + snr_inv I)^{-1} h_k``, jointly unit power."""
    H = np.atleast_2d(np.asarray(channels, dtype=complex))
    K, N = H.shape
    Hc = H.T  # N x K, columns are channels
    R = Hc @ Hc.conj().T + snr_inv * np.eye(N)
    W = np.linalg.solve(R, Hc)
    W /= np.linalg.norm(W)
    return PrecoderStack.from_parts(np.zeros(N), W.T)
