import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from activeirs.channel import ReflectionParams, sample_channel
from activeirs.errors import AccuracyError, ContractError
from activeirs.montecarlo import (
    RateReport,
    ergodic_rate_mc,
    instantaneous_rate,
    per_draw_rates,
    rate_via_stieltjes_integral,
)

from conftest import identity_config, random_config, random_phi, random_psd


def direct_rate_no_dynamic_noise(real, Q, phi, s2, n_r):
    G = real.H1 @ phi.matrix @ real.H2
    B = G @ Q @ G.conj().T
    sign, logdet = np.linalg.slogdet(np.eye(n_r) + B / s2)
    return logdet / n_r


def test_zero_reflection_gives_zero(rng):
    cfg = random_config(rng, 3, 3, 4)
    real = sample_channel(cfg, 1, 0)
    zero = ReflectionParams.uniform(4, 0.0)
    assert instantaneous_rate(real, np.eye(3), zero, cfg) == 0.0
    rep = ergodic_rate_mc(cfg, np.eye(3), zero, n_trials=50, seed=2)
    assert rep.value == 0.0 and rep.stderr == 0.0
    assert rate_via_stieltjes_integral(real, np.eye(3), zero, cfg) == 0.0


def test_scalar_case():
    cfg = identity_config(1, 1, 1, sigma_d2=0.0, sigma_s2=0.7)
    real = sample_channel(cfg, 3, 9)
    a, q = 1.3, 0.8
    phi = ReflectionParams([a], [0.4])
    expected = math.log(1 + abs(real.H1[0, 0]) ** 2 * a ** 2 * abs(real.H2[0, 0]) ** 2
                        * q / 0.7)
    assert instantaneous_rate(real, np.array([[q]]), phi, cfg) == pytest.approx(
        expected, rel=1e-13)


def test_second_code_path_without_dynamic_noise(rng):
    cfg = random_config(rng, 4, 3, 5, sigma_d2=0.0)
    phi = random_phi(rng, 5)
    Q = random_psd(rng, 4)
    for k in range(5):
        real = sample_channel(cfg, 8, k)
        assert instantaneous_rate(real, Q, phi, cfg) == pytest.approx(
            direct_rate_no_dynamic_noise(real, Q, phi, cfg.sigma_s2, 3), rel=1e-10)


def test_rejects_bad_trials(rng):
    cfg = random_config(rng, 2, 2, 2)
    with pytest.raises(ContractError):
        ergodic_rate_mc(cfg, np.eye(2), ReflectionParams.identity(2), n_trials=1)


def test_report_units():
    rep = RateReport.from_nats(1.0, 0.1, n_trials=10, seed=3)
    assert rep.value == pytest.approx(1.0 / math.log(2), rel=1e-12)
    assert rep.stderr_nats == pytest.approx(0.1, rel=1e-12)
    assert rep.stderr >= 0


def test_doubling_static_noise_lowers_every_draw(rng):
    cfg = random_config(rng, 3, 3, 4)
    phi = random_phi(rng, 4)
    Q = np.eye(3)
    r1 = per_draw_rates(cfg, Q, phi, 100, seed=4)
    r2 = per_draw_rates(cfg.replace(sigma_s2=2 * cfg.sigma_s2), Q, phi, 100, seed=4)
    assert np.all(r2 < r1)


def test_thread_count_does_not_change_result(rng):
    cfg = random_config(rng, 3, 3, 4)
    phi = random_phi(rng, 4)
    reports = [ergodic_rate_mc(cfg, np.eye(3), phi, n_trials=700, seed=5, threads=t)
               for t in (1, 2, 3)]
    for r in reports[1:]:
        assert r == reports[0]


def test_batched_rates_match_single_draws(rng):
    cfg = random_config(rng, 2, 3, 4)
    phi = random_phi(rng, 4)
    Q = random_psd(rng, 2)
    batched = per_draw_rates(cfg, Q, phi, 7, seed=6)
    single = [instantaneous_rate(sample_channel(cfg, 6, k), Q, phi, cfg) for k in range(7)]
    np.testing.assert_allclose(batched, single, rtol=1e-12)


def test_stieltjes_integral_matches_logdet(rng):
    cfg = random_config(rng, 4, 4, 4)
    phi = random_phi(rng, 4)
    Q = random_psd(rng, 4)
    real = sample_channel(cfg, 12, 0)
    assert rate_via_stieltjes_integral(real, Q, phi, cfg) == pytest.approx(
        instantaneous_rate(real, Q, phi, cfg), abs=1e-6)


def test_stieltjes_integral_without_dynamic_noise(rng):
    cfg = random_config(rng, 3, 3, 4, sigma_d2=0.0)
    phi = random_phi(rng, 4)
    real = sample_channel(cfg, 13, 0)
    # with B2 = 0 the integrand is 1/t - m_B1(-t)
    G = real.H1 @ phi.matrix @ real.H2
    lam = np.linalg.eigvalsh(G @ G.conj().T)
    t_max = 1e6 * cfg.sigma_s2
    s = np.linspace(np.log(cfg.sigma_s2), np.log(t_max), 4096)
    t = np.exp(s)
    integrand = 1.0 / t - np.mean(1.0 / (t[:, None] + lam[None, :]), axis=1)
    manual = np.trapezoid(integrand * t, s) + np.mean(lam) / t_max
    got = rate_via_stieltjes_integral(real, np.eye(3), phi, cfg)
    assert got == pytest.approx(manual, abs=1e-8)


def test_stieltjes_tail_guard(rng):
    cfg = random_config(rng, 3, 3, 3)
    real = sample_channel(cfg, 1, 0)
    with pytest.raises(AccuracyError):
        rate_via_stieltjes_integral(real, 50 * np.eye(3), ReflectionParams.uniform(3, 5.0),
                                    cfg, t_max=cfg.sigma_s2 * 1.5, tol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), c=st.floats(1.0, 8.0))
def test_rate_invariants(seed, c):
    rng = np.random.default_rng(seed)
    cfg = random_config(rng)
    phi = random_phi(rng, cfg.n_l, low=0.0, high=2.0)
    Q = random_psd(rng, cfg.n_t)
    real = sample_channel(cfg, seed, 0)
    r = instantaneous_rate(real, Q, phi, cfg)
    assert r >= -1e-12
    assert instantaneous_rate(real, c * Q, phi, cfg) >= r - 1e-12
    assert instantaneous_rate(real, Q, phi, cfg.replace(sigma_s2=c * cfg.sigma_s2)) <= r + 1e-12
