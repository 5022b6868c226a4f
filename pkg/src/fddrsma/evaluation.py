"""Spectral-efficiency metrics, the per-trial pipeline and Monte Carlo sweeps."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import ecm as ecm_mod
from .channel import (
    PathSet,
    SystemConfig,
    dl_channel,
    sample_paths,
    simulate_ul_observation,
    with_dl_gains,
)
from .nomp import NompConfig, run_nomp
from .rsma import (
    _as_blocks,
    baseline_mrt,
    baseline_rzf,
    build_quadratics,
    gpi_solve,
    rsma_gpi_solve,
)

log = logging.getLogger(__name__)

METHODS = ("proposed", "proposed_no_ecm", "sdma_gpi", "mrt", "rzf", "perfect_csit_ref")


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage


# ----------------------------------------------------------------------------
# spectral efficiency
# ----------------------------------------------------------------------------


def _sinr_terms(f, channels, ecms, snr_inv):
    H = np.atleast_2d(np.asarray(channels, dtype=complex))
    K, N = H.shape
    F = _as_blocks(f, N)
    if ecms is None:
        ecms = np.zeros((K, N, N))
    sig = np.abs(F.conj() @ H.T) ** 2  # sig[b, k] = |h_k^H f_b|^2
    err = np.real(np.einsum("bi,kij,bj->kb", F.conj(), ecms, F))  # f_b^H Phi_k f_b
    priv_sig = sig[1:]  # (K streams, K users)
    idx = np.arange(K)
    own = priv_sig[idx, idx]
    err_total = err.sum(axis=1)
    priv_interf = priv_sig.sum(axis=0) - own + err[:, 1:].sum(axis=1) + snr_inv
    common_interf = priv_sig.sum(axis=0) + err_total + snr_inv
    return sig[0], common_interf, own, priv_interf


def se_lower_bound(f, channels, ecms, snr_inv: float):
    """Per-user common and private SE lower bounds with the error as Gaussian noise.

    ``f`` is used at its actual power, so noise enters as ``snr_inv`` rather
    than ``snr_inv * ||f||^2``; every designed precoder has unit norm.
    Returns ``(R_c(k), R_k)`` arrays of length K.
    """
    sc, ic, sp, ip = _sinr_terms(f, channels, ecms, snr_inv)
    return np.log2(1.0 + sc / ic), np.log2(1.0 + sp / ip)


def se_genie(f, channels, snr_inv: float) -> float:
    """Instantaneous sum SE on the true channels (common rate = min over users)."""
    rc, rk = se_lower_bound(f, channels, None, snr_inv)
    return float(rc.min() + rk.sum())


# ----------------------------------------------------------------------------
# scenario and per-trial pipeline
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    """Everything about one Monte Carlo point beyond the system config.

    ``eta_sq_low`` draws ``eta^2 ~ Unif(eta_sq_low, 1)`` per path; 1.0 gives
    perfectly reciprocal gains. ``f`` overrides the DL extrapolation range.
    """

    n_paths: int = 4
    ul_snr_db: float = 10.0
    snr_db: float = 20.0
    eta_sq_low: float = 1.0
    f: float | None = None
    alpha: float = 0.1
    epsilon: float = 0.1
    max_iter: int = 500
    methods: tuple = METHODS
    sdma_uses_ecm: bool = True
    assumed_eta_sq_low: float | None = None
    innovation: str = "path_power"

    def __post_init__(self):
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")
        if not self.methods:
            raise ValueError("at least one method is required")
        if not 0.0 <= self.eta_sq_low <= 1.0:
            raise ValueError("eta_sq_low must lie in [0, 1]")
        if self.innovation not in ("path_power", "unit"):
            raise ValueError("innovation must be 'path_power' or 'unit'")


@dataclass
class UserEstimate:
    paths: PathSet
    h_true: np.ndarray
    h_hat: np.ndarray
    phi_hat: np.ndarray
    ofim_trace: float
    crlb_trace: float
    fallback: bool


@dataclass
class TrialResult:
    seed: tuple
    mse: float
    crlb_trace: float
    ecm_trace: float
    ofim_trace: float
    se: dict = field(default_factory=dict)
    se_lb_common: float = float("nan")
    se_lb_private_sum: float = float("nan")
    iterations: int = 0
    ofim_fallbacks: int = 0


def trial_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(index,)))


def _draw_users(cfg, scenario, rng):
    users = []
    for _ in range(cfg.n_users):
        L = scenario.n_paths
        eta = np.sqrt(rng.uniform(scenario.eta_sq_low, 1.0, L)) if scenario.eta_sq_low < 1 else 1.0
        paths = sample_paths(cfg, L, rng, eta=eta)
        obs = simulate_ul_observation(paths, cfg, scenario.ul_snr_db, rng)
        dl_paths = with_dl_gains(paths, rng)
        users.append((paths, obs, dl_paths))
    return users


def _nomp_cfg_for(nomp_cfg: NompConfig | None, scenario: Scenario) -> NompConfig:
    if nomp_cfg is None:
        return NompConfig(n_paths=scenario.n_paths)
    if nomp_cfg.stop_mode == "known_L":
        return replace(nomp_cfg, n_paths=scenario.n_paths)
    return nomp_cfg


def estimate_user(
    paths, obs, dl_paths, cfg, nomp_cfg, fs: Sequence[float], assumed_eta=None, innovation="path_power"
):
    """Reconstruct one user's DL channel and ECM at every extrapolation range in ``fs``.

    ``innovation`` selects the power of the redrawn gain term in the ECM:
    ``"path_power"`` uses the per-entry variance ``L * path_power`` implied by
    the channel normalization, ``"unit"`` uses 1.
    """
    try:
        est = run_nomp(obs, cfg, nomp_cfg)
    except Exception as exc:  # annotate and propagate
        raise StageError("nomp", exc) from exc
    eta = paths.eta if assumed_eta is None else np.asarray(assumed_eta)
    # the estimator knows the gain correlation only as a per-user scalar
    eta_scale = float(np.mean(eta))
    psi_hat = ecm_mod.ParamVector.from_paths(est)
    psi_true = ecm_mod.ParamVector.from_paths(paths)
    out = []
    for f in fs:
        cfg_f = cfg.with_dl_offset(f)
        h = dl_channel(dl_paths, f, cfg_f)
        est_dl = PathSet(eta_scale * est.gains, est.delays, est.angles, 1.0, paths.path_power)
        h_hat = dl_channel(est_dl, f, cfg_f)
        try:
            base = ecm_mod.ecm_estimate(psi_hat, obs, f, cfg_f)
            power = paths.n_paths * paths.path_power if innovation == "path_power" else 1.0
            phi = ecm_mod.ecm_calibrate(base, eta, innovation_power=power)
        except Exception as exc:
            raise StageError("ecm", exc) from exc
        try:
            crlb_tr = float(np.real(np.trace(ecm_mod.crlb(psi_true, obs.noise_var, f, cfg_f))))
        except ecm_mod.IllConditionedFisher:
            crlb_tr = float("nan")
        out.append(UserEstimate(paths, h, h_hat, phi.phi_hat, base.trace_mse, crlb_tr, base.used_fallback))
    return out


def _estimate(user, cfg, ncfg, fs, scenario: Scenario):
    paths, obs, dl_paths = user
    assumed = None
    if scenario.assumed_eta_sq_low is not None:
        # mismatched side information: the mean of the assumed eta^2 law on every path
        assumed = np.full(paths.n_paths, np.sqrt(0.5 * (scenario.assumed_eta_sq_low + 1.0)))
    return estimate_user(paths, obs, dl_paths, cfg, ncfg, fs, assumed, scenario.innovation)


def design_precoders(H_hat, Phi, H_true, snr_inv, scenario: Scenario) -> dict:
    """Precoders for every method in ``scenario.methods``."""
    out = {}
    iters = 0
    kw = dict(alpha=scenario.alpha, epsilon=scenario.epsilon, max_iter=scenario.max_iter)
    try:
        if "proposed" in scenario.methods or "sdma_gpi" in scenario.methods:
            Q = build_quadratics(H_hat, Phi, snr_inv)
        if "proposed" in scenario.methods:
            res = rsma_gpi_solve(Q, **kw)
            out["proposed"] = res.precoder
            iters = res.iterations
        if "proposed_no_ecm" in scenario.methods:
            out["proposed_no_ecm"] = rsma_gpi_solve(build_quadratics(H_hat, None, snr_inv), **kw).precoder
        if "sdma_gpi" in scenario.methods:
            Qs = Q if scenario.sdma_uses_ecm else build_quadratics(H_hat, None, snr_inv)
            out["sdma_gpi"] = gpi_solve(Qs, common=False, **kw).precoder
        if "mrt" in scenario.methods:
            out["mrt"] = baseline_mrt(H_hat)
        if "rzf" in scenario.methods:
            out["rzf"] = baseline_rzf(H_hat, snr_inv)
        if "perfect_csit_ref" in scenario.methods:
            out["perfect_csit_ref"] = rsma_gpi_solve(build_quadratics(H_true, None, snr_inv), **kw).precoder
    except Exception as exc:
        raise StageError("precoding", exc) from exc
    return out, iters


def _assemble(users: list[UserEstimate], snr_db: float, scenario: Scenario, seed) -> TrialResult:
    H = np.stack([u.h_true for u in users])
    H_hat = np.stack([u.h_hat for u in users])
    Phi = np.stack([u.phi_hat for u in users])
    mse = float(np.mean(np.sum(np.abs(H - H_hat) ** 2, axis=1)))
    result = TrialResult(
        seed=seed,
        mse=mse,
        crlb_trace=float(np.mean([u.crlb_trace for u in users])),
        ecm_trace=float(np.mean([np.real(np.trace(u.phi_hat)) for u in users])),
        ofim_trace=float(np.mean([u.ofim_trace for u in users])),
        ofim_fallbacks=sum(u.fallback for u in users),
    )
    snr_inv = 10.0 ** (-snr_db / 10.0)
    precoders, iters = design_precoders(H_hat, Phi, H, snr_inv, scenario)
    result.iterations = iters
    for name, pre in precoders.items():
        result.se[name] = se_genie(pre, H, snr_inv)
    if "proposed" in precoders:
        rc, rk = se_lower_bound(precoders["proposed"], H_hat, Phi, snr_inv)
        result.se_lb_common = float(rc.min())
        result.se_lb_private_sum = float(rk.sum())
    return result


def run_trial(cfg: SystemConfig, nomp_cfg: NompConfig | None, scenario: Scenario, seed) -> TrialResult:
    """One end-to-end trial: channels, UL training, 2D-NOMP, ECM, precoding, metrics.

    ``seed`` is either an int or a ``(master_seed, index)`` pair.
    """
    master, index = seed if isinstance(seed, tuple) else (seed, 0)
    rng = trial_rng(master, index)
    ncfg = _nomp_cfg_for(nomp_cfg, scenario)
    f = cfg.extrapolation_range if scenario.f is None else scenario.f
    users = [
        _estimate(u, cfg, ncfg, [f], scenario)[0] for u in _draw_users(cfg, scenario, rng)
    ]
    return _assemble(users, scenario.snr_db, scenario, (master, index))


def run_mse_trial(cfg, nomp_cfg, scenario: Scenario, seed, fs: Sequence[float]) -> list[TrialResult]:
    """Channel-reconstruction metrics only, one result per extrapolation range."""
    master, index = seed if isinstance(seed, tuple) else (seed, 0)
    rng = trial_rng(master, index)
    ncfg = _nomp_cfg_for(nomp_cfg, scenario)
    per_user = [_estimate(u, cfg, ncfg, fs, scenario) for u in _draw_users(cfg, scenario, rng)]
    out = []
    for i in range(len(fs)):
        users = [u[i] for u in per_user]
        H = np.stack([u.h_true for u in users])
        H_hat = np.stack([u.h_hat for u in users])
        out.append(
            TrialResult(
                seed=(master, index),
                mse=float(np.mean(np.sum(np.abs(H - H_hat) ** 2, axis=1))),
                crlb_trace=float(np.mean([u.crlb_trace for u in users])),
                ecm_trace=float(np.mean([np.real(np.trace(u.phi_hat)) for u in users])),
                ofim_trace=float(np.mean([u.ofim_trace for u in users])),
                ofim_fallbacks=sum(u.fallback for u in users),
            )
        )
    return out


def run_snr_trial(cfg, nomp_cfg, scenario: Scenario, seed, snrs_db: Sequence[float]) -> list[TrialResult]:
    """Shares one channel draw and reconstruction across several DL SNR points."""
    master, index = seed if isinstance(seed, tuple) else (seed, 0)
    rng = trial_rng(master, index)
    ncfg = _nomp_cfg_for(nomp_cfg, scenario)
    f = cfg.extrapolation_range if scenario.f is None else scenario.f
    users = [_estimate(u, cfg, ncfg, [f], scenario)[0] for u in _draw_users(cfg, scenario, rng)]
    return [_assemble(users, s, scenario, (master, index)) for s in snrs_db]


# ----------------------------------------------------------------------------
# experiments
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    """A sweep over one axis: ``snr_db``, ``f`` (Hz) or ``n_paths``."""

    axis: str
    values: tuple
    trials: int
    master_seed: int = 0
    scenario: Scenario = field(default_factory=Scenario)
    cfg: SystemConfig = field(default_factory=SystemConfig)
    nomp: NompConfig | None = None
    workers: int = 1
    name: str = "experiment"

    def __post_init__(self):
        if self.axis not in ("snr_db", "f", "n_paths"):
            raise ValueError(f"unknown sweep axis {self.axis!r}")
        if len(self.values) == 0:
            raise ValueError("sweep needs at least one value")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


def _trial_job(args):
    spec, index = args
    seed = (spec.master_seed, index)
    sc = spec.scenario
    if spec.axis == "f":
        return run_mse_trial(spec.cfg, spec.nomp, sc, seed, list(spec.values))
    if spec.axis == "snr_db":
        return run_snr_trial(spec.cfg, spec.nomp, sc, seed, list(spec.values))
    return [run_trial(spec.cfg, spec.nomp, replace(sc, n_paths=int(L)), seed) for L in spec.values]


def run_trials(spec: ExperimentSpec) -> list[list[TrialResult]]:
    """All trial results, indexed ``[trial][sweep point]``, in trial order."""
    jobs = [(spec, i) for i in range(spec.trials)]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            return list(pool.map(_trial_job, jobs))
    return [_trial_job(j) for j in jobs]


def _mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    if x.size == 0:
        return float("nan"), float("nan")
    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return float(x.mean()), se


def aggregate(spec: ExperimentSpec, results: list[list[TrialResult]]) -> list[dict]:
    """Rows of ``(value, method, metric_mean, metric_stderr, ...)``."""
    rows = []
    for j, value in enumerate(spec.values):
        point = [r[j] for r in results]
        if spec.axis == "f":
            for method, attr in (("monte_carlo", "mse"), ("crlb", "crlb_trace"), ("ecm", "ofim_trace")):
                vals = [getattr(t, attr) for t in point]
                m, s = _mean_se(vals)
                med = float(np.nanmedian(vals))
                rows.append(
                    {
                        "value": value,
                        "method": method,
                        "mse_mean": m,
                        "mse_stderr": s,
                        "mse_median": med,
                        "mse_db": 10 * math.log10(m) if m > 0 else float("nan"),
                    }
                )
            continue
        ref = [t.se.get("perfect_csit_ref", float("nan")) for t in point]
        ref_mean = float(np.nanmean(ref)) if np.any(np.isfinite(ref)) else float("nan")
        for method in spec.scenario.methods:
            vals = [t.se[method] for t in point]
            m, s = _mean_se(vals)
            row = {"value": value, "method": method, "se_mean": m, "se_stderr": s}
            row["pct_of_perfect"] = 100.0 * m / ref_mean if ref_mean > 0 else float("nan")
            rows.append(row)
    return rows


def run_experiment(spec: ExperimentSpec) -> list[dict]:
    """Run every trial of ``spec`` and return the aggregated table."""
    return aggregate(spec, run_trials(spec))
