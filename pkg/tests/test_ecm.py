import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fddrsma import ecm, selftest
from fddrsma.channel import PathSet, SystemConfig, UlObservation, array_response, dl_channel
from fddrsma.nomp import NompConfig, run_nomp


def instance(rng, **kw):
    return selftest.random_instance(rng, **kw)


# ----------------------------------------------------------------------------
# DL Jacobian
# ----------------------------------------------------------------------------


def test_gain_rows_are_the_dl_steering(rng):
    cfg, paths, _ = instance(rng)
    psi = ecm.ParamVector.from_paths(paths)
    f = 250e6
    J = ecm.dl_jacobian(psi, f, cfg)
    lam = cfg.speed_of_light / (cfg.ul_carrier + f)
    for l in range(psi.n_paths):
        ref = array_response(psi.angles[l], lam, cfg) * np.exp(-2j * math.pi * f * psi.delays[l])
        np.testing.assert_allclose(J[4 * l + 2], ref, atol=1e-12)
        np.testing.assert_allclose(J[4 * l + 3], 1j * ref, atol=1e-12)


def test_delay_rows_vanish_at_zero_offset(rng):
    cfg, paths, _ = instance(rng)
    J = ecm.dl_jacobian(ecm.ParamVector.from_paths(paths), 0.0, cfg)
    assert np.all(J[1::4] == 0)


def test_jacobian_vs_finite_differences(rng):
    worst = 0.0
    for _ in range(50):
        cfg, paths, _ = instance(rng)
        psi = ecm.ParamVector.from_paths(paths)
        f = rng.uniform(0, 600e6)
        J = ecm.dl_jacobian(psi, f, cfg.with_dl_offset(f))
        fd = selftest.fd_dl_jacobian(psi, f, cfg)
        worst = max(worst, float(np.max(np.abs(J - fd)) / np.max(np.abs(J))))
    assert worst < 1e-5


# ----------------------------------------------------------------------------
# FIM and O-FIM
# ----------------------------------------------------------------------------


def test_ofim_equals_fim_at_zero_residual(rng):
    cfg, paths, obs = instance(rng)
    psi = ecm.ParamVector.from_paths(paths)
    clean = UlObservation(ecm.ul_model(psi, cfg), obs.noise_var)
    np.testing.assert_allclose(ecm.ofim(psi, clean, cfg), ecm.fim(psi, obs.noise_var, cfg), rtol=1e-12, atol=0)


def test_fim_gain_block_closed_form():
    cfg = SystemConfig(n_antennas=8, n_users=1, n_subcarriers=16, subcarrier_spacing=1e6,
                       ul_carrier=7.15e9, dl_carrier=7.15e9)
    psi = ecm.ParamVector([0.0, 0.0, 0.7, 0.0])
    F = ecm.fim(psi, 0.5, cfg)
    np.testing.assert_allclose(F[2:, 2:], (2 / 0.5) * 128 * np.eye(2), rtol=1e-12)


def test_ofim_symmetric_and_fim_psd(rng):
    for _ in range(100):
        cfg, paths, obs = instance(rng)
        psi = ecm.ParamVector.from_paths(paths)
        F = ecm.fim(psi, obs.noise_var, cfg)
        Fs, _ = ecm._equilibrate(F)
        assert np.linalg.eigvalsh(Fs).min() >= -1e-10 * np.trace(Fs)
        I = ecm.ofim(psi, obs, cfg)
        assert np.max(np.abs(I - I.T)) <= 1e-12 * np.max(np.abs(I))


def test_ofim_rejects_wrong_length(rng):
    cfg, paths, _ = instance(rng)
    with pytest.raises(ValueError):
        ecm.ofim(ecm.ParamVector.from_paths(paths), UlObservation(np.zeros(5), 1.0), cfg)


def test_param_vector_validation():
    with pytest.raises(ValueError):
        ecm.ParamVector([1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        ecm.ParamVector([np.nan, 0, 0, 0])


# ----------------------------------------------------------------------------
# CRLB
# ----------------------------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.floats(0.01, 100))
def test_crlb_and_ecm_scale_with_noise(seed, c):
    rng = np.random.default_rng(seed)
    cfg, paths, obs = instance(rng)
    psi = ecm.ParamVector.from_paths(paths)
    f = 200e6
    cf = cfg.with_dl_offset(f)
    np.testing.assert_allclose(ecm.crlb(psi, c * obs.noise_var, f, cf), c * ecm.crlb(psi, obs.noise_var, f, cf),
                               rtol=1e-9, atol=0)
    e1 = ecm.ecm_estimate(psi, obs, f, cf).phi_hat
    ec = ecm.ecm_estimate(psi, UlObservation(obs.y, c * obs.noise_var), f, cf).phi_hat
    np.testing.assert_allclose(ec, c * e1, rtol=1e-9, atol=0)


def test_crlb_hermitian_psd(rng):
    for _ in range(20):
        cfg, paths, obs = instance(rng)
        C = ecm.crlb(ecm.ParamVector.from_paths(paths), obs.noise_var, 300e6, cfg.with_dl_offset(300e6))
        np.testing.assert_array_equal(C, C.conj().T)
        assert np.linalg.eigvalsh(C).min() >= -1e-10 * np.trace(C).real


def test_crlb_grows_with_extrapolation(rng):
    cfg, paths, obs = instance(rng, n_paths=3)
    psi = ecm.ParamVector.from_paths(paths)
    t0 = np.trace(ecm.crlb(psi, obs.noise_var, 0.0, cfg)).real
    t300 = np.trace(ecm.crlb(psi, obs.noise_var, 300e6, cfg.with_dl_offset(300e6))).real
    assert t0 <= t300


def test_gain_only_crlb_closed_form(rng):
    cfg, paths, obs = instance(rng, n_paths=1)
    psi = ecm.ParamVector.from_paths(paths)
    sigma2 = obs.noise_var
    keep = [2, 3]
    I = ecm.fim(psi, sigma2, cfg)[np.ix_(keep, keep)]
    J = ecm.dl_jacobian(psi, 0.0, cfg)[keep]
    C = ecm.sandwich(J, np.linalg.inv(I))
    MN = cfg.n_antennas * cfg.n_subcarriers
    assert np.trace(C).real == pytest.approx(cfg.n_antennas * sigma2 / MN, rel=1e-10)


def test_fisher_inverse_reports_unidentifiable_path(rng):
    cfg, paths, obs = instance(rng)
    v = ecm.ParamVector.from_paths(paths).values.copy()
    v[4:6] = v[0:2]  # two paths at the same delay and angle
    with pytest.raises(ecm.IllConditionedFisher) as err:
        ecm.fisher_inverse(ecm.fim(ecm.ParamVector(v), obs.noise_var, cfg))
    assert err.value.path in (0, 1)


# ----------------------------------------------------------------------------
# ECM estimate and calibration
# ----------------------------------------------------------------------------


def test_ecm_estimate_is_masked_sandwich(rng):
    cfg, paths, obs = instance(rng)
    psi = ecm.ParamVector.from_paths(paths)
    clean = UlObservation(ecm.ul_model(psi, cfg), obs.noise_var)
    est = ecm.ecm_estimate(psi, clean, 100e6, cfg.with_dl_offset(100e6))
    ref = ecm.crlb(psi, obs.noise_var, 100e6, cfg.with_dl_offset(100e6))
    off = est.phi_hat - np.diag(np.diag(est.phi_hat))
    assert np.all(off == 0)
    np.testing.assert_allclose(np.diag(est.phi_hat).real, np.diag(ref).real, rtol=1e-9)
    assert est.trace_mse == pytest.approx(np.trace(ref).real, rel=1e-9)


def test_ecm_falls_back_on_indefinite_ofim(rng):
    cfg, paths, obs = instance(rng, n_paths=1)
    psi = ecm.ParamVector.from_paths(paths)
    # one delay resolution cell off the peak the likelihood curves upward
    v = psi.values.copy()
    v[1] += 1.0 / (cfg.n_subcarriers * cfg.subcarrier_spacing)
    est = ecm.ecm_estimate(ecm.ParamVector(v), obs, 0.0, cfg)
    assert est.used_fallback
    assert np.all(np.diag(est.phi_hat).real >= 0)


def test_ecm_trace_tracks_realised_error(rng):
    ratios = []
    for _ in range(200):
        cfg, paths, obs = instance(rng, n_paths=2, ul_snr_db=10.0, spacing=100e6 / 16)
        est = run_nomp(obs, cfg, NompConfig(n_paths=2))
        f = 300e6
        cf = cfg.with_dl_offset(f)
        e = ecm.ecm_estimate(ecm.ParamVector.from_paths(est), obs, f, cf)
        h = dl_channel(paths, f, cf)
        h_hat = dl_channel(PathSet(est.gains, est.delays, est.angles, 1.0, 1.0), f, cf)
        ratios.append(10 * math.log10(np.linalg.norm(h - h_hat) ** 2 / e.trace_mse))
    assert abs(np.median(ratios)) <= 3.0


def test_calibration_coefficients(rng):
    cfg, paths, obs = instance(rng)
    base = ecm.ecm_estimate(ecm.ParamVector.from_paths(paths), obs, 100e6, cfg.with_dl_offset(100e6))
    out = ecm.ecm_calibrate(base, np.sqrt([0.9, 0.7]))
    np.testing.assert_allclose(out.phi_hat, 0.8 * base.phi_hat + 0.2 * np.eye(8), rtol=1e-14, atol=1e-15)
    assert out.trace_mse == pytest.approx(0.8 * base.trace_mse + 0.2 * 8)
    scaled = ecm.ecm_calibrate(base, np.sqrt([0.9, 0.7]), innovation_power=1 / 8)
    np.testing.assert_allclose(scaled.phi_hat, 0.8 * base.phi_hat + 0.2 / 8 * np.eye(8), rtol=1e-14, atol=1e-15)


def test_calibration_degenerate_cases(rng):
    cfg, paths, obs = instance(rng)
    base = ecm.ecm_estimate(ecm.ParamVector.from_paths(paths), obs, 100e6, cfg.with_dl_offset(100e6))
    np.testing.assert_array_equal(ecm.ecm_calibrate(base, [1.0, 1.0]).phi_hat, base.phi_hat)
    np.testing.assert_array_equal(ecm.ecm_calibrate(base, [0.0, 0.0]).phi_hat, np.eye(8))


@given(eta=st.lists(st.floats(0, 1), min_size=1, max_size=6), power=st.floats(0, 10))
def test_calibration_stays_diagonal_nonnegative(eta, power):
    base = ecm.EcmEstimate(np.diag([0.1, 0.0, 2.0]).astype(complex), np.eye(3), 2.1)
    phi = ecm.ecm_calibrate(base, eta, innovation_power=power).phi_hat
    assert np.all(phi - np.diag(np.diag(phi)) == 0)
    assert np.all(np.diag(phi).real >= 0)


def test_calibration_validation():
    base = ecm.EcmEstimate(np.eye(2, dtype=complex), np.eye(2), 2.0)
    for bad in ([], [1.2], [-0.1]):
        with pytest.raises(ValueError):
            ecm.ecm_calibrate(base, bad)
    with pytest.raises(ValueError):
        ecm.ecm_calibrate(base, [0.5], innovation_power=-1)
