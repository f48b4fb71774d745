"""Deterministic approximation of the normalized ergodic rate.

Two coupled fixed-point systems are solved at the real resolvent argument
``z = -sigma_s2``:

* the four-unknown system ``(delta1..delta4)`` describing the signal plus
  dynamic-noise Gram matrix ``B1``;
* the two-unknown system ``(alpha1, alpha2)`` describing the dynamic-noise
  Gram matrix ``B2``.

The approximated rate is ``r_bar = r_bar_1 - r_bar_2`` where each part is a
sum of log-determinants evaluated at the fixed point.  Everything is in nats.
"""

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .channel import effective_correlations
from .errors import ContractError, ConvergenceError
from .linalg import hermitian_sqrt, hermitize, logdet_plus_identity

__all__ = [
    "DeltaSolution",
    "AlphaSolution",
    "DaRate",
    "DEFAULT_TOL",
    "DEFAULT_MAX_ITER",
    "solve_delta",
    "solve_alpha",
    "da_rate",
    "passive_da_rate",
]

DEFAULT_TOL = 1e-12
DEFAULT_MAX_ITER = 10_000
_MIN_DAMPING = 0.125
_STALL_STEPS = 10
_MAX_RISES = 4
_POLISH_AFTER = 200


@dataclass(frozen=True)
class DeltaSolution:
    delta1: float
    delta2: float
    delta3: float
    delta4: float
    z: float
    residual: float
    iterations: int

    @property
    def values(self):
        return np.array([self.delta1, self.delta2, self.delta3, self.delta4])


@dataclass(frozen=True)
class AlphaSolution:
    alpha1: float
    alpha2: float
    z: float
    residual: float
    iterations: int

    @property
    def values(self):
        return np.array([self.alpha1, self.alpha2])


@dataclass(frozen=True)
class DaRate:
    """Deterministic rate approximation and the fixed points behind it (nats)."""
    r_bar: float
    r_bar_1: float
    r_bar_2: float
    delta: DeltaSolution
    alpha: AlphaSolution
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def r_bar_bits(self):
        return self.r_bar / np.log(2.0)


def _defect(x, fx):
    # absolute below one, relative above
    return float(np.max(np.abs(fx - x) / np.maximum(1.0, np.abs(x))))


def _picard(F, x0, tol, max_iter, what):
    """Damped Picard iteration ``x <- (1 - w) x + w F(x)``.

    The damping factor starts at one and is halved (down to 1/8) whenever
    the residual has not improved for ten consecutive steps, or has risen
    in at least four of the last ten (a period-two oscillation).  A run
    still short of `tol` after 200 steps gets one hybrid Powell polish and
    then continues from the polished point.
    """
    x = np.array(x0, dtype=float)
    omega = 1.0
    best = np.inf
    prev = np.inf
    stall = 0
    rises = deque(maxlen=_STALL_STEPS)
    for it in range(max_iter + 1):
        fx = F(x)
        res = _defect(x, fx)
        if not np.isfinite(res):
            raise ConvergenceError(f"{what}: iteration diverged", x, res, it)
        if res <= tol:
            return x, res, it
        if it == _POLISH_AFTER:
            polished = _polish(F, x)
            if polished is not None:
                x, prev, best = polished, np.inf, np.inf
                continue
        rises.append(res > prev)
        prev = res
        if res < best:
            best = res
            stall = 0
        else:
            stall += 1
        if omega > _MIN_DAMPING and (stall >= _STALL_STEPS or sum(rises) >= _MAX_RISES):
            omega = max(0.5 * omega, _MIN_DAMPING)
            stall = 0
            rises.clear()
        x = (1.0 - omega) * x + omega * fx
    raise ConvergenceError(
        f"{what}: no convergence after {max_iter} iterations (residual {res:.3e})",
        x, res, max_iter)


def _polish(F, x):
    """One hybrid Powell solve of ``F(x) = x`` from a slow Picard iterate.

    Solved in log variables, ``ln F(e^y) = y``, which evens out unknowns of
    very different magnitude and keeps them positive.  Returns ``None`` when
    not applicable (a zero unknown) or not finite; the caller still accepts
    the point only through the usual defect test.
    """
    if np.any(x <= 0):
        return None
    with np.errstate(all="ignore"):
        try:
            sol = scipy.optimize.root(lambda y: np.log(F(np.exp(y))) - y, np.log(x),
                                      method="hybr", options={"xtol": 1e-15})
        except (ValueError, np.linalg.LinAlgError, ArithmeticError):
            return None
        y = np.exp(sol.x)
    if not np.all(np.isfinite(y)):
        return None
    return y


def _check_z(z):
    if not z < 0:
        raise ContractError(f"resolvent argument must be negative, got {z}")


def _check_positive(x, res, it, what):
    if np.any(x < 0):
        raise ConvergenceError(f"{what}: converged to a negative solution {x}", x, res, it)


class _DeltaSystem:
    """Fixed-point map of the four-unknown system with precomputed spectra."""

    def __init__(self, cfg, T1t, T2t, z):
        self.cfg = cfg
        self.z = float(z)
        self.r = np.clip(np.linalg.eigvalsh(cfg.R1), 0.0, None)
        self.tau = np.clip(np.linalg.eigvalsh(hermitize(T2t)), 0.0, None)
        self.T1t = hermitize(T1t)
        s = hermitian_sqrt(self.T1t)
        self.R2t = hermitize(s @ cfg.R2 @ s)
        self.eye = np.eye(cfg.n_l)

    def kernel(self, d1, d3):
        cfg = self.cfg
        return (self.eye + cfg.sigma_d2 * cfg.c1 * d1 * self.T1t
                + cfg.c1 * d1 * d3 * self.R2t)

    def __call__(self, x):
        cfg = self.cfg
        d1, d2, d3, d4 = x
        gain = d2 * d3 + cfg.sigma_d2 * d4
        f1 = np.sum(self.r / (-self.z + gain * self.r)) / cfg.n_r
        # one factorization serves both delta2 and delta4
        fac = scipy.linalg.cho_factor(self.kernel(d1, d3))
        f2 = np.trace(scipy.linalg.cho_solve(fac, self.R2t)).real / cfg.n_l
        f4 = np.trace(scipy.linalg.cho_solve(fac, self.T1t)).real / cfg.n_l
        f3 = np.sum(self.tau / (1.0 + cfg.c1 * cfg.c2 * d1 * d2 * self.tau)) / cfg.n_t
        return np.array([f1, f2, f3, f4])


def solve_delta(cfg, T1t, T2t, z, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, x0=None):
    """Solve the four-unknown fixed-point system at a real ``z < 0``.

    ``delta1 = (1/n_r) Tr R1 (-z I + (delta2 delta3 + sd2 delta4) R1)^-1``,
    ``delta2 = (1/n_l) Tr R2~ K^-1``, ``delta4 = (1/n_l) Tr T1~ K^-1`` with
    ``K = I + sd2 c1 delta1 T1~ + c1 delta1 delta3 R2~`` and
    ``R2~ = T1~^1/2 R2 T1~^1/2``, and
    ``delta3 = (1/n_t) Tr T2~ (I + c1 c2 delta1 delta2 T2~)^-1``.

    The iteration starts from ``-1/z`` in every unknown unless `x0` is given.
    `tol` bounds ``max_i |F_i(x) - x_i| / max(1, |x_i|)``.
    """
    return _solve_system(_DeltaSystem(cfg, T1t, T2t, z), tol, max_iter, x0)


def _solve_system(system, tol, max_iter, x0):
    z = system.z
    _check_z(z)
    start = np.full(4, -1.0 / z) if x0 is None else np.asarray(x0, dtype=float)
    x, res, it = _picard(system, start, tol, max_iter, "solve_delta")
    _check_positive(x, res, it, "solve_delta")
    return DeltaSolution(*(float(v) for v in x), z=z, residual=res, iterations=it)


def solve_alpha(cfg, T1t, z, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, x0=None):
    """Solve the two-unknown fixed-point system for the dynamic-noise term.

    ``alpha1 = (1/n_r) Tr R1 (-z I + sd2 alpha2 R1)^-1`` and
    ``alpha2 = (1/n_l) Tr T1~ (I + c1 sd2 alpha1 T1~)^-1``.
    """
    _check_z(z)
    r = np.clip(np.linalg.eigvalsh(cfg.R1), 0.0, None)
    t = np.clip(np.linalg.eigvalsh(hermitize(T1t)), 0.0, None)
    sd2, c1 = cfg.sigma_d2, cfg.c1

    def F(x):
        a1, a2 = x
        return np.array([
            np.sum(r / (-z + sd2 * a2 * r)) / cfg.n_r,
            np.sum(t / (1.0 + c1 * sd2 * a1 * t)) / cfg.n_l,
        ])

    start = np.full(2, -1.0 / z) if x0 is None else np.asarray(x0, dtype=float)
    x, res, it = _picard(F, start, tol, max_iter, "solve_alpha")
    _check_positive(x, res, it, "solve_alpha")
    return AlphaSolution(float(x[0]), float(x[1]), z=float(z), residual=res, iterations=it)


def _rate_terms(cfg, system, dsol, asol):
    s2, sd2, c1, c2 = cfg.sigma_s2, cfg.sigma_d2, cfg.c1, cfg.c2
    d1, d2, d3, d4 = dsol.values
    a1, a2 = asol.values
    r, tau = system.r, system.tau
    t1 = np.clip(np.linalg.eigvalsh(system.T1t), 0.0, None)
    r1 = (np.sum(np.log1p((d2 * d3 + sd2 * d4) / s2 * r))
          + np.sum(np.log1p(c1 * c2 * d1 * d2 * tau))
          + logdet_plus_identity(system.kernel(d1, d3) - system.eye)) / cfg.n_r
    r1 -= 2.0 * d1 * d2 * d3 + sd2 * d1 * d4
    r2 = (np.sum(np.log1p(sd2 * a2 / s2 * r))
          + np.sum(np.log1p(c1 * sd2 * a1 * t1))) / cfg.n_r
    r2 -= sd2 * a1 * a2
    return float(r1), float(r2)


def da_rate(cfg, Q, phi, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, warm=None):
    """Deterministic approximation of the normalized ergodic rate (nats).

    Parameters
    ----------
    cfg : SystemConfig
    Q : np.ndarray
        Transmit covariance, ``n_t x n_t`` Hermitian PSD.
    phi : ReflectionParams
    warm : DaRate, optional
        Previous solution whose fixed points seed the iterations.

    Returns
    -------
    DaRate
        With ``r_bar = r_bar_1 - r_bar_2`` and both fixed-point solutions.
    """
    T1t, T2t = effective_correlations(cfg, Q, phi)
    z = -cfg.sigma_s2
    system = _DeltaSystem(cfg, T1t, T2t, z)
    dsol = _solve_system(system, tol, max_iter, None if warm is None else warm.delta.values)
    asol = solve_alpha(cfg, T1t, z, tol, max_iter,
                       x0=None if warm is None else warm.alpha.values)
    r1, r2 = _rate_terms(cfg, system, dsol, asol)
    return DaRate(r_bar=r1 - r2, r_bar_1=r1, r_bar_2=r2, delta=dsol, alpha=asol,
                  meta={"delta_iterations": dsol.iterations,
                        "alpha_iterations": asol.iterations})


def passive_da_rate(cfg, Q, theta_only, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Rate approximation of the passive surface (unit amplitudes, no dynamic noise).

    A separate reduced three-unknown solver working entirely on eigenvalues;
    it serves as an oracle for ``da_rate`` with ``sigma_d2 = 0`` and
    ``A = I``.  ``cfg.sigma_d2`` is ignored.
    """
    if not np.allclose(theta_only.amplitudes, 1.0, rtol=0, atol=1e-12):
        raise ContractError("passive_da_rate needs unit amplitudes")
    if theta_only.n != cfg.n_l:
        raise ContractError(f"phi must have {cfg.n_l} elements")
    s2, c1, c2 = cfg.sigma_s2, cfg.c1, cfg.c2
    # with unitary Phi, T1~^1/2 R2 T1~^1/2 is similar to T1^1/2 Phi R2 Phi^H T1^1/2
    e = np.exp(1j * theta_only.phases)
    sT1 = cfg.sqrt_factors[1]
    rho = np.linalg.eigvalsh(hermitize(sT1 @ (e[:, None] * cfg.R2 * np.conj(e)[None, :]) @ sT1))
    sT2 = cfg.sqrt_factors[3]
    tau = np.linalg.eigvalsh(hermitize(sT2 @ np.asarray(Q) @ sT2))
    r = np.linalg.eigvalsh(cfg.R1)
    rho, tau, r = (np.clip(v, 0.0, None) for v in (rho, tau, r))

    def F(x):
        d1, d2, d3 = x
        return np.array([
            np.sum(r / (s2 + d2 * d3 * r)) / cfg.n_r,
            np.sum(rho / (1.0 + c1 * d1 * d3 * rho)) / cfg.n_l,
            np.sum(tau / (1.0 + c1 * c2 * d1 * d2 * tau)) / cfg.n_t,
        ])

    x, res, it = _picard(F, np.full(3, 1.0 / s2), tol, max_iter, "passive_da_rate")
    d1, d2, d3 = x
    r1 = (np.sum(np.log1p(d2 * d3 / s2 * r)) + np.sum(np.log1p(c1 * c2 * d1 * d2 * tau))
          + np.sum(np.log1p(c1 * d1 * d3 * rho))) / cfg.n_r - 2.0 * d1 * d2 * d3
    dsol = DeltaSolution(float(d1), float(d2), float(d3), 0.0, z=-s2, residual=res,
                         iterations=it)
    asol = AlphaSolution(float(np.sum(r) / (cfg.n_r * s2)), float(np.sum(
        np.linalg.eigvalsh(cfg.T1)) / cfg.n_l), z=-s2, residual=0.0, iterations=0)
    return DaRate(r_bar=float(r1), r_bar_1=float(r1), r_bar_2=0.0, delta=dsol, alpha=asol,
                  meta={"delta_iterations": it, "passive": True})
