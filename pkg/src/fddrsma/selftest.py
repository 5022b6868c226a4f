"""Finite-difference oracles and the named invariant checks behind ``selftest``.

Each check returns a :class:`CheckResult` with the largest observed error
and the tolerance it was held to. The finite-difference helpers are public
so that the test-suite can reuse them on larger instance sets.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ecm, rsma
from .channel import PathSet, SystemConfig, UlObservation, dl_channel, sample_paths, signature, simulate_ul_observation
from .evaluation import se_lower_bound
from .nomp import NompConfig, run_nomp


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    seconds: float = 0.0


# ----------------------------------------------------------------------------
# finite-difference oracles
# ----------------------------------------------------------------------------


def neg_log_likelihood(psi: ecm.ParamVector, obs: UlObservation, cfg: SystemConfig) -> float:
    """Gaussian negative log-likelihood up to a constant, ``||y - ybar||^2 / sigma^2``."""
    r = obs.y - ecm.ul_model(psi, cfg)
    return float(np.vdot(r, r).real / obs.noise_var)


def fd_hessian(fun: Callable[[np.ndarray], float], x: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """Central second differences of a scalar function with per-coordinate steps."""
    n = x.size
    H = np.empty((n, n))
    f0 = fun(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = steps[i]
        H[i, i] = (fun(x + ei) - 2 * f0 + fun(x - ei)) / steps[i] ** 2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = steps[j]
            v = fun(x + ei + ej) - fun(x + ei - ej) - fun(x - ei + ej) + fun(x - ei - ej)
            H[i, j] = H[j, i] = v / (4 * steps[i] * steps[j])
    return H


def fisher_steps(psi: ecm.ParamVector, noise_var: float, cfg: SystemConfig, scale: float = 1e-3) -> np.ndarray:
    """Steps of ``scale`` standard deviations per coordinate (from the FIM diagonal)."""
    d = np.diag(ecm.fim(psi, noise_var, cfg))
    return scale / np.sqrt(np.maximum(d, 1e-300))


def fd_ofim(psi: ecm.ParamVector, obs: UlObservation, cfg: SystemConfig) -> np.ndarray:
    """Finite-difference Hessian of :func:`neg_log_likelihood` at ``psi``.

    One Richardson step over halved steps removes the leading ``h^2``
    truncation term, which otherwise dominates near closely spaced paths.
    """
    steps = fisher_steps(psi, obs.noise_var, cfg)

    def fun(v):
        return neg_log_likelihood(ecm.ParamVector(v), obs, cfg)

    coarse = fd_hessian(fun, psi.values, steps)
    fine = fd_hessian(fun, psi.values, 0.5 * steps)
    return (4.0 * fine - coarse) / 3.0


def fd_dl_jacobian(psi: ecm.ParamVector, f: float, cfg: SystemConfig, step: float = 1e-6) -> np.ndarray:
    """Central-difference ``d h(f) / d psi`` with relative steps, shape ``(4L, N)``."""
    cfg_f = cfg.with_dl_offset(f)

    def h(v):
        p = ecm.ParamVector(v)
        paths = PathSet(p.gains, p.delays, p.angles, 1.0, 1.0)
        return dl_channel(paths, f, cfg_f)

    v = psi.values
    J = np.empty((v.size, cfg.n_antennas), dtype=complex)
    typical = np.where(np.arange(v.size) % 4 == 1, 1.0 / cfg.subcarrier_spacing, 1.0)
    for i in range(v.size):
        s = step * max(abs(v[i]), typical[i] * 1e-2)
        e = np.zeros(v.size)
        e[i] = s
        J[i] = (h(v + e) - h(v - e)) / (2 * s)
    return J


def fd_wirtinger_gradient(fun: Callable[[np.ndarray], float], f: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """``d fun / d conj(f)`` of a real function by central differences."""
    f = np.asarray(f, dtype=complex)
    g = np.empty(f.size, dtype=complex)
    for i in range(f.size):
        e = np.zeros(f.size, dtype=complex)
        e[i] = step
        gx = (fun(f + e) - fun(f - e)) / (2 * step)
        gy = (fun(f + 1j * e) - fun(f - 1j * e)) / (2 * step)
        g[i] = 0.5 * (gx + 1j * gy)
    return g


def projected_gradient_norm(f: np.ndarray, grad: np.ndarray) -> float:
    """Norm of the gradient component orthogonal to ``f`` (scale direction removed)."""
    f = np.asarray(f, dtype=complex).ravel()
    u = f / np.linalg.norm(f)
    return float(np.linalg.norm(grad - u * np.vdot(u, grad)))


def random_instance(rng, n_antennas=8, n_subcarriers=16, n_paths=2, ul_snr_db=10.0, spacing=1e6):
    """A small UL observation with its true parameters."""
    cfg = SystemConfig(
        n_antennas=n_antennas, n_users=1, n_subcarriers=n_subcarriers, subcarrier_spacing=spacing,
        ul_carrier=7.15e9, dl_carrier=7.15e9,
    )
    paths = sample_paths(cfg, n_paths, rng)
    obs = simulate_ul_observation(paths, cfg, ul_snr_db, rng)
    return cfg, paths, obs


def random_quadratics(rng, n_antennas=8, n_users=4, snr_inv=1e-2, ecm_scale=0.05):
    H = (rng.standard_normal((n_users, n_antennas)) + 1j * rng.standard_normal((n_users, n_antennas))) / np.sqrt(
        2 * n_antennas
    )
    Phi = np.stack([np.diag(ecm_scale / n_antennas * rng.uniform(0.5, 1.5, n_antennas)) for _ in range(n_users)])
    return H, Phi, rsma.build_quadratics(H, Phi, snr_inv)


# ----------------------------------------------------------------------------
# named checks
# ----------------------------------------------------------------------------


def _rel(a, b) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def check_signature_modulus(rng):
    cfg = SystemConfig(n_antennas=8, n_users=1, n_subcarriers=16)
    err = 0.0
    for _ in range(10):
        u = signature(rng.uniform(0, 1 / cfg.subcarrier_spacing), rng.uniform(-1.5, 1.5), cfg)
        err = max(err, float(np.max(np.abs(np.abs(u) - 1.0))), abs(np.vdot(u, u).real - u.size) / u.size)
    return err, 1e-12


def make_jacobian_check(jacobian=ecm.dl_jacobian):
    def check_dl_jacobian(rng):
        err = 0.0
        for _ in range(5):
            cfg, paths, _ = random_instance(rng)
            psi = ecm.ParamVector.from_paths(paths)
            f = rng.uniform(0, 600e6)
            err = max(err, _rel(jacobian(psi, f, cfg.with_dl_offset(f)), fd_dl_jacobian(psi, f, cfg)))
        return err, 1e-5

    return check_dl_jacobian


def check_ul_derivatives(rng):
    err = 0.0
    for _ in range(5):
        cfg, paths, _ = random_instance(rng)
        psi = ecm.ParamVector.from_paths(paths)
        D1, _ = ecm.ul_derivatives(psi, cfg)
        v = psi.values
        fd = np.empty_like(D1)
        for i in range(v.size):
            s = 1e-6 * (1.0 / cfg.subcarrier_spacing if i % 4 == 1 else 1.0)
            e = np.zeros(v.size)
            e[i] = s
            fd[:, i] = (ecm.ul_model(ecm.ParamVector(v + e), cfg) - ecm.ul_model(ecm.ParamVector(v - e), cfg)) / (2 * s)
        err = max(err, _rel(D1, fd))
    return err, 1e-5


def check_ofim_hessian(rng):
    err = 0.0
    for _ in range(3):
        cfg, paths, obs = random_instance(rng)
        psi = ecm.ParamVector.from_paths(paths)
        I = ecm.ofim(psi, obs, cfg)
        Hf = fd_ofim(psi, obs, cfg)
        d = np.sqrt(np.abs(np.diag(I)))
        err = max(err, float(np.max(np.abs(I - Hf) / np.outer(d, d))))
    return err, 1e-4


def check_fisher_symmetry_psd(rng):
    err = 0.0
    for _ in range(5):
        cfg, paths, obs = random_instance(rng)
        psi = ecm.ParamVector.from_paths(paths)
        F = ecm.fim(psi, obs.noise_var, cfg)
        C = ecm.crlb(psi, obs.noise_var, 300e6, cfg.with_dl_offset(300e6))
        sym = float(np.max(np.abs(F - F.T)) / np.max(np.abs(F)))
        neg = max(0.0, -float(np.linalg.eigvalsh(ecm._equilibrate(F)[0]).min()))
        herm = float(np.max(np.abs(C - C.conj().T)) / max(np.max(np.abs(C)), 1e-300))
        negc = max(0.0, -float(np.linalg.eigvalsh(C).min()) / max(np.max(np.abs(C)), 1e-300))
        err = max(err, sym, neg, herm, negc)
    return err, 1e-10


def check_noise_scaling(rng):
    cfg, paths, obs = random_instance(rng)
    psi = ecm.ParamVector.from_paths(paths)
    f = 200e6
    cf = cfg.with_dl_offset(f)
    C1 = ecm.crlb(psi, obs.noise_var, f, cf)
    C3 = ecm.crlb(psi, 3 * obs.noise_var, f, cf)
    obs3 = UlObservation(obs.y, 3 * obs.noise_var)
    E1 = ecm.ecm_estimate(psi, obs, f, cf).phi_hat
    E3 = ecm.ecm_estimate(psi, obs3, f, cf).phi_hat
    return max(_rel(C3, 3 * C1), _rel(E3, 3 * E1)), 1e-9


def check_ecm_structure(rng):
    err = 0.0
    for _ in range(5):
        cfg, paths, obs = random_instance(rng)
        est = run_nomp(obs, cfg, NompConfig(n_paths=paths.n_paths))
        e = ecm.ecm_estimate(ecm.ParamVector.from_paths(est), obs, 100e6, cfg.with_dl_offset(100e6))
        off = e.phi_hat - np.diag(np.diag(e.phi_hat))
        err = max(err, float(np.max(np.abs(off))), max(0.0, -float(np.diag(e.phi_hat).real.min())))
        err = max(err, float(np.max(np.abs(np.diag(e.phi_hat).imag))))
    return err, 0.0


def check_ecm_calibration(rng):
    cfg, paths, obs = random_instance(rng)
    psi = ecm.ParamVector.from_paths(paths)
    base = ecm.ecm_estimate(psi, obs, 100e6, cfg.with_dl_offset(100e6))
    one = ecm.ecm_calibrate(base, np.ones(paths.n_paths)).phi_hat
    zero = ecm.ecm_calibrate(base, np.zeros(paths.n_paths)).phi_hat
    mixed = ecm.ecm_calibrate(base, np.sqrt([0.9, 0.7])).phi_hat
    direct = 0.8 * base.phi_hat + 0.2 * np.eye(cfg.n_antennas)
    err = max(
        float(np.max(np.abs(one - base.phi_hat))),
        float(np.max(np.abs(zero - np.eye(cfg.n_antennas)))),
        _rel(mixed, direct),
    )
    return err, 1e-12


def check_quadratics(rng):
    err = 0.0
    for _ in range(3):
        H, Phi, Q = random_quadratics(rng)
        K, N = H.shape
        for k in range(K):
            mats = [Q.common_num(k), Q.common_den(k), Q.private_num(k), Q.private_den(k)]
            for A in mats:
                err = max(err, float(np.max(np.abs(A - A.conj().T))))
                err = max(err, max(0.0, Q.snr_inv - float(np.linalg.eigvalsh(A).min()) - 1e-12))
            D = mats[0] - mats[1]
            ref = np.zeros_like(D)
            ref[:N, :N] = np.outer(H[k], H[k].conj())
            err = max(err, float(np.max(np.abs(D - ref))))
    return err, 1e-12


def check_scale_invariance(rng):
    err = 0.0
    H, Phi, Q = random_quadratics(rng)
    for _ in range(5):
        f = rng.standard_normal(Q.size) + 1j * rng.standard_normal(Q.size)
        v = rsma.objective(f, Q, 0.1)
        for c in (0.5, 2.0, 10.0):
            err = max(err, abs(rsma.objective(c * f, Q, 0.1) - v))
    return err, 1e-10


def check_lse_bound(rng):
    worst = 0.0
    for _ in range(200):
        K = int(rng.integers(1, 12))
        x = rng.normal(0, 3, K)
        a = float(10 ** rng.uniform(-3, 1))
        gap = rsma.lse_min(x, a) - x.min()
        # violation below 0 or above alpha log K
        worst = max(worst, -gap, gap - a * np.log(K))
    return max(worst, 0.0), 1e-12


def check_lambda_identity(rng):
    err = 0.0
    H, Phi, Q = random_quadratics(rng)
    for _ in range(10):
        f = rng.standard_normal(Q.size) + 1j * rng.standard_normal(Q.size)
        _, _, lam = rsma.kkt_matrices(f, Q, 0.1)
        err = max(err, abs(lam / 2 ** rsma.objective(f, Q, 0.1) - 1.0))
    return err, 1e-9


def check_kkt_gradient(rng):
    err = 0.0
    H, Phi, Q = random_quadratics(rng, n_antennas=4, n_users=3)
    for _ in range(3):
        f = rng.standard_normal(Q.size) + 1j * rng.standard_normal(Q.size)
        g = rsma.objective_gradient(f, Q, 0.3)
        fd = fd_wirtinger_gradient(lambda v: rsma.objective(v, Q, 0.3), f)
        err = max(err, _rel(g, fd))
    return err, 1e-6


def check_nomp_residual(rng):
    worst = 0.0
    for _ in range(5):
        cfg, paths, obs = random_instance(rng, n_paths=3)
        est = run_nomp(obs, cfg, NompConfig(n_paths=3))
        h = np.asarray(est.residual_history)
        worst = max(worst, float(np.max(np.diff(h) / h[0])) if h.size > 1 else 0.0)
    return max(worst, 0.0), 1e-12


def check_jensen(rng):
    """Monte Carlo mean rate under Gaussian errors is not below the closed-form bound."""
    N, K = 8, 4
    H, Phi, Q = random_quadratics(rng, N, K, ecm_scale=0.2)
    s = 1e-2
    f = rsma.gpi_solve(Q).precoder
    rc_lb, rk_lb = se_lower_bound(f, H, Phi, s)
    draws = 2000
    rc = np.zeros(K)
    rk = np.zeros(K)
    L = np.sqrt(np.stack([np.diag(p).real for p in Phi]))
    for _ in range(draws):
        E = L * (rng.standard_normal((K, N)) + 1j * rng.standard_normal((K, N))) / np.sqrt(2)
        c, p = se_lower_bound(f, H + E, None, s)
        rc += c
        rk += p
    rc /= draws
    rk /= draws
    violation = max(float(np.max(rc_lb - rc)), float(np.max(rk_lb - rk)))
    return max(violation, 0.0), 1e-3


def default_checks(jacobian=ecm.dl_jacobian) -> list[tuple[str, Callable]]:
    return [
        ("signature_unit_modulus", check_signature_modulus),
        ("dl_jacobian_vs_fd", make_jacobian_check(jacobian)),
        ("ul_derivatives_vs_fd", check_ul_derivatives),
        ("ofim_vs_fd_hessian", check_ofim_hessian),
        ("fisher_symmetric_psd", check_fisher_symmetry_psd),
        ("crlb_noise_scaling", check_noise_scaling),
        ("ecm_diagonal_nonnegative", check_ecm_structure),
        ("ecm_calibration_cases", check_ecm_calibration),
        ("quadratics_hermitian_structure", check_quadratics),
        ("objective_scale_invariance", check_scale_invariance),
        ("lse_min_bound", check_lse_bound),
        ("lambda_equals_2_pow_objective", check_lambda_identity),
        ("kkt_gradient_vs_fd", check_kkt_gradient),
        ("nomp_residual_monotone", check_nomp_residual),
        ("jensen_lower_bound", check_jensen),
    ]


def run_selftest(seed: int = 0, jacobian=ecm.dl_jacobian, checks=None) -> list[CheckResult]:
    """Run every named check; each gets its own child generator of ``seed``."""
    checks = checks or default_checks(jacobian)
    children = np.random.SeedSequence(seed).spawn(len(checks))
    out = []
    for (name, fn), ss in zip(checks, children):
        t0 = time.perf_counter()
        try:
            err, tol = fn(np.random.default_rng(ss))
            passed = bool(np.isfinite(err) and err <= tol)
        except Exception:  # a crashing check is a failing check
            err, tol, passed = float("inf"), float("nan"), False
        out.append(CheckResult(name, passed, float(err), float(tol), time.perf_counter() - t0))
    return out


def format_report(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  status  max_error    tolerance  seconds"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.name:<{width}}  {status:<6}  {r.max_error:<10.3e}  {r.tolerance:<9.1e}  {r.seconds:.2f}")
    n_pass = sum(r.passed for r in results)
    lines.append(f"{n_pass}/{len(results)} checks passed")
    return "\n".join(lines)
