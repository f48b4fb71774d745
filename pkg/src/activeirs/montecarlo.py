"""Monte-Carlo estimate of the normalized ergodic rate.

Each draw ``k`` uses its own counter-based random stream keyed by
``(seed, k)``; per-draw rates are stored by index and reduced in index order,
so results are bit-identical for any number of worker threads.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .channel import draw_gaussians
from .errors import AccuracyError, ContractError
from .linalg import as_hermitian, hermitize, logdet_plus_identity

__all__ = [
    "RateReport",
    "instantaneous_rate",
    "ergodic_rate_mc",
    "per_draw_rates",
    "rate_via_stieltjes_integral",
]

LN2 = math.log(2.0)
_BATCH = 256


@dataclass(frozen=True)
class RateReport:
    """A rate value in bits/s/Hz per receive antenna with its provenance.

    ``value`` and ``stderr`` are in bits; ``value_nats`` keeps the natural-log
    value the computation was carried out in.
    """
    value: float
    value_nats: float
    stderr: float
    n_trials: int
    seed: int
    meta: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_nats(cls, value_nats, stderr_nats=0.0, n_trials=0, seed=0, meta=None):
        return cls(value=value_nats / LN2, value_nats=value_nats,
                   stderr=stderr_nats / LN2, n_trials=n_trials, seed=seed,
                   meta=dict(meta or {}))

    @property
    def stderr_nats(self):
        return self.stderr * LN2


def _check_noise(cfg):
    if not cfg.sigma_s2 > 0:
        raise ContractError("sigma_s2 must be positive")


def _gram_pair(H1, H2, Q, d, sigma_d2):
    """``(B1, B2)`` for a stack of channels; `d` is the diagonal of Phi."""
    G = H1 * d[..., None, :]                      # H1 Phi
    B2 = sigma_d2 * (G @ np.conj(np.swapaxes(G, -1, -2)))
    S = G @ H2
    B1 = S @ Q @ np.conj(np.swapaxes(S, -1, -2)) + B2
    return hermitize(B1), hermitize(B2)


def instantaneous_rate(real, Q, phi, cfg):
    """Rate of one channel realization, in nats per receive antenna.

    ``(1/n_r) [ln det(I + B1/s2) - ln det(I + B2/s2)]`` with
    ``B1 = H1 Phi H2 Q H2^H Phi^H H1^H + sd2 H1 Phi Phi^H H1^H`` and
    ``B2 = sd2 H1 Phi Phi^H H1^H``.
    """
    _check_noise(cfg)
    Q = as_hermitian(Q, "Q")
    B1, B2 = _gram_pair(real.H1, real.H2, Q, phi.diagonal, cfg.sigma_d2)
    s2 = cfg.sigma_s2
    return (logdet_plus_identity(B1 / s2) - logdet_plus_identity(B2 / s2)) / cfg.n_r


def _rates_for_indices(cfg, Q, d, seed, indices):
    sR1, sT1, sR2, sT2 = cfg.sqrt_factors
    X = [draw_gaussians(cfg.n_t, cfg.n_r, cfg.n_l, seed, k) for k in indices]
    X1 = np.stack([x[0] for x in X])
    X2 = np.stack([x[1] for x in X])
    H1 = sR1 @ X1 @ sT1
    H2 = sR2 @ X2 @ sT2
    B1, B2 = _gram_pair(H1, H2, Q, d, cfg.sigma_d2)
    s2 = cfg.sigma_s2
    return (logdet_plus_identity(B1 / s2) - logdet_plus_identity(B2 / s2)) / cfg.n_r


def per_draw_rates(cfg, Q, phi, n_trials, seed, threads=1):
    """Per-draw instantaneous rates (nats), indexed by draw number."""
    _check_noise(cfg)
    Q = as_hermitian(Q, "Q")
    d = phi.diagonal
    chunks = [range(s, min(s + _BATCH, n_trials)) for s in range(0, n_trials, _BATCH)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _rates_for_indices(cfg, Q, d, seed, c), chunks))
    else:
        parts = [_rates_for_indices(cfg, Q, d, seed, c) for c in chunks]
    return np.concatenate(parts) if parts else np.zeros(0)


def ergodic_rate_mc(cfg, Q, phi, n_trials=5000, seed=0, threads=1):
    """Monte-Carlo estimate of the normalized ergodic rate.

    Returns
    -------
    RateReport
        Sample mean and standard error over `n_trials` independent draws.
    """
    if n_trials < 2:
        raise ContractError("n_trials must be at least 2")
    rates = per_draw_rates(cfg, Q, phi, n_trials, seed, threads)
    mean = float(np.mean(rates))
    se = float(np.std(rates, ddof=1) / math.sqrt(n_trials))
    return RateReport.from_nats(mean, se, n_trials=n_trials, seed=seed,
                                meta={"estimator": "monte-carlo"})


def rate_via_stieltjes_integral(real, Q, phi, cfg, n_nodes=4096, t_max=None, tol=1e-6):
    """Rate of one realization recovered from resolvent traces.

    Integrates ``m_B2(-t) - m_B1(-t)`` over ``t`` in ``[s2, t_max]`` with
    the trapezoidal rule on a logarithmic grid, and adds the first-order
    tail ``(1/n_r) Tr(B1 - B2) / t_max``.  Validation use only.

    Raises
    ------
    AccuracyError
        If the neglected second-order tail term exceeds `tol`.
    """
    _check_noise(cfg)
    s2 = cfg.sigma_s2
    t_max = 1e6 * s2 if t_max is None else float(t_max)
    Q = as_hermitian(Q, "Q")
    B1, B2 = _gram_pair(real.H1, real.H2, Q, phi.diagonal, cfg.sigma_d2)
    lam = np.clip(np.linalg.eigvalsh(B1), 0.0, None)
    mu = np.clip(np.linalg.eigvalsh(B2), 0.0, None)
    s = np.linspace(math.log(s2), math.log(t_max), int(n_nodes))
    t = np.exp(s)
    m1 = np.mean(1.0 / (t[:, None] + lam[None, :]), axis=1)
    m2 = np.mean(1.0 / (t[:, None] + mu[None, :]), axis=1)
    body = np.trapezoid((m2 - m1) * t, s)
    excess = float(np.mean(lam) - np.mean(mu))
    tail = excess / t_max
    # ln(1 + x) = x - x^2/2 + ...; the dropped part is bounded by x^2 / 2 per mode
    bound = float(np.mean(lam ** 2)) / (2.0 * t_max ** 2)
    if bound > tol:
        raise AccuracyError(f"tail remainder bound {bound:.3e} exceeds tolerance {tol:.1e}")
    return float(body + tail)
