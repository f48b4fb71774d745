"""Alternating optimization of the transmit covariance and the IRS reflection.

Each outer iteration

1. solves the fixed points at the current ``(Q, Phi)``;
2. water-fills ``Q`` over the eigenmodes of ``T2``;
3. takes one projected-gradient step on the phases and amplitudes of the
   surface, with the step chosen by a grid search over ``[0, U]``.

Stops when the relative change of the approximated rate drops below
``stop_delta``.  The amplification budget couples the two blocks through
``Tr(Q T2)``; a block update that would lower the rate once the surface is
made feasible again is backtracked or dropped, so iterates stay feasible and
the rate never decreases.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .channel import ReflectionParams
from .deterministic import DEFAULT_MAX_ITER, DEFAULT_TOL, da_rate
from .errors import ContractError, DegenerateError, InfeasibleBudgetError
from .linalg import as_hermitian, eig_hermitian, hermitize, logdet_plus_identity

__all__ = [
    "GradientContext",
    "AoRecord",
    "AoTrace",
    "GradientCertificationError",
    "amplification_power",
    "amplitude_weights",
    "water_levels",
    "water_fill",
    "gradient_context",
    "objective_i2",
    "gradient_theta",
    "gradient_amplitude",
    "certify_gradients",
    "project_feasible",
    "project_amplitudes",
    "line_search",
    "initial_point",
    "ao_optimize",
    "TRACE_COLUMNS",
]

log = logging.getLogger(__name__)

AMPLITUDE_FLOOR = 1e-8
_BUDGET_RTOL = 1e-12
TRACE_COLUMNS = ("iter", "r_bar_nats", "trQ", "c2_power", "gamma",
                 "grad_theta_norm", "grad_a_norm")


class GradientCertificationError(RuntimeError):
    """Analytic and finite-difference gradients disagree."""


def _kappa(cfg, Q):
    """Received power per IRS element scale, ``Tr(Q T2) / n_t``."""
    return float(np.real(np.trace(np.asarray(Q) @ cfg.T2))) / cfg.n_t


def amplification_power(cfg, Q, phi):
    """Power drawn by the amplifiers net of the power the surface receives (W).

    ``(Tr(Q T2)/n_t) Tr(R2 (Phi Phi^H - I)) + sd2 Tr(Phi Phi^H)``; negative
    when the surface attenuates.
    """
    a2 = phi.amplitudes ** 2
    r2_diag = np.real(np.diag(cfg.R2))
    return _kappa(cfg, Q) * float(np.sum(r2_diag * (a2 - 1.0))) + cfg.sigma_d2 * float(np.sum(a2))


def amplitude_weights(cfg, Q):
    """Weights ``w`` and bound ``b`` such that the budget reads ``sum w a^2 <= b``."""
    kappa = _kappa(cfg, Q)
    r2_diag = np.real(np.diag(cfg.R2))
    w = kappa * r2_diag + cfg.sigma_d2
    b = cfg.P_A + kappa * float(np.sum(r2_diag))
    return w, b


def water_levels(gains, budget):
    """Classic water-filling over parallel channels.

    Parameters
    ----------
    gains : array_like
        Nonnegative channel gains; zero gains never receive power.
    budget : float
        Total power.

    Returns
    -------
    (powers, mu) : (np.ndarray, float)
        ``powers = (mu - 1/gains)^+`` summing to `budget`, and the water
        level `mu`.
    """
    gains = np.asarray(gains, dtype=float)
    powers = np.zeros_like(gains)
    active = gains > 0
    if budget <= 0 or not np.any(active):
        return powers, 0.0
    floors = 1.0 / gains[active]
    order = np.argsort(floors)
    fs = floors[order]
    csum = np.cumsum(fs)
    m = fs.size
    for k in range(1, fs.size + 1):
        mu = (budget + csum[k - 1]) / k
        if k == fs.size or mu <= fs[k]:
            m = k
            break
    mu = (budget + csum[m - 1]) / m
    p = np.maximum(mu - floors, 0.0)
    powers[active] = p
    return powers, float(mu)


def water_fill(T2, gain, P_T, n_t):
    """Optimal transmit covariance for ``max ln det(I + gain Q T2)``, ``Tr Q <= n_t P_T``.

    The eigenvectors are those of `T2`; eigenvalues come from
    :func:`water_levels` on ``gain * eig(T2)``.
    """
    if not gain > 0:
        raise ContractError(f"water-filling gain must be positive, got {gain}")
    if P_T < 0:
        raise ContractError("P_T must be nonnegative")
    lam, U = eig_hermitian(T2)
    top = np.max(np.abs(lam))
    if top == 0:
        raise DegenerateError("T2 = 0: no information-bearing transmit modes")
    lam = np.where(lam > 1e-12 * top, lam, 0.0)
    p, _ = water_levels(gain * lam, n_t * P_T)
    return hermitize((U * p) @ U.conj().T)


@dataclass(frozen=True, eq=False)
class GradientContext:
    """Frozen quantities of the reflection sub-problem.

    ``F1 = c1 d1 sd2 I + c1 d1 d3 R2`` and ``F2 = c1 sd2 a1 T1`` are fixed
    during a reflection step; ``M = Phi^H T1 Phi`` belongs to `phi`.
    """
    F1: np.ndarray
    F2: np.ndarray
    M: np.ndarray
    phi: ReflectionParams
    T1: np.ndarray
    n_r: int


def gradient_context(cfg, phi, delta, alpha):
    c1, sd2 = cfg.c1, cfg.sigma_d2
    F1 = c1 * delta.delta1 * (sd2 * np.eye(cfg.n_l) + delta.delta3 * cfg.R2)
    F2 = c1 * sd2 * alpha.alpha1 * cfg.T1
    d = phi.diagonal
    M = hermitize(np.conj(d)[:, None] * cfg.T1 * d[None, :])
    return GradientContext(F1=hermitize(F1), F2=hermitize(F2), M=M, phi=phi,
                           T1=cfg.T1, n_r=cfg.n_r)


def objective_i2(cfg, phi, ctx):
    """Reflection-dependent part of the rate approximation with frozen fixed points.

    ``(1/n_r) (-ln det(I + F2 A^2) + ln det(I + F1 M))``, evaluated through
    the Hermitian forms ``A F2 A`` and ``L F1 L^H`` with ``L = T1^1/2 Phi``
    (same determinants by ``det(I + XY) = det(I + YX)``).
    """
    a = phi.amplitudes
    d = phi.diagonal
    sT1 = cfg.sqrt_factors[1]
    L = sT1 * d[None, :]
    first = logdet_plus_identity(a[:, None] * ctx.F2 * a[None, :])
    second = logdet_plus_identity(L @ ctx.F1 @ L.conj().T)
    return (second - first) / ctx.n_r


def _g_inverse(ctx):
    n = ctx.M.shape[0]
    return np.linalg.inv(np.eye(n) + ctx.F1 @ ctx.M)


def gradient_theta(ctx):
    """Phase gradient ``(2/n_r) Im diag((I + F1 M)^-1)``."""
    return 2.0 / ctx.n_r * np.imag(np.diag(_g_inverse(ctx)))


def gradient_amplitude(ctx):
    """Amplitude gradient of :func:`objective_i2`.

    With every amplitude above ``AMPLITUDE_FLOOR`` this is
    ``(2/n_r) Re diag((A + F2 A^3)^-1 - (A + A F1 M)^-1)``.  Otherwise the
    product-rule form without ``A^-1`` factors is used:
    ``(2/n_r) [-a_k ((I + F2 A^2)^-1 F2)_kk + Re(G F1 A K)_kk]`` with
    ``K = Theta^H T1 Theta`` and ``G = (I + F1 M)^-1``.
    """
    a = ctx.phi.amplitudes
    n = a.size
    eye = np.eye(n)
    if np.min(a, initial=np.inf) >= AMPLITUDE_FLOOR:
        A = np.diag(a)
        A3 = np.diag(a ** 3)
        first = np.linalg.inv(A + ctx.F2 @ A3)
        second = np.linalg.inv(A + A @ ctx.F1 @ ctx.M)
        return 2.0 / ctx.n_r * np.real(np.diag(first - second))
    A2 = np.diag(a ** 2)
    left = np.linalg.solve(eye + ctx.F2 @ A2, ctx.F2)
    e = np.exp(1j * ctx.phi.phases)
    K = np.conj(e)[:, None] * ctx.T1 * e[None, :]
    right = _g_inverse(ctx) @ ctx.F1 @ (a[:, None] * K)
    return 2.0 / ctx.n_r * (-a * np.real(np.diag(left)) + np.real(np.diag(right)))


def _fd_gradients(cfg, ctx, h=1e-4):
    # fourth-order central stencil
    phi = ctx.phi
    a0, th0 = np.array(phi.amplitudes), np.array(phi.phases)

    def f(a, th):
        return objective_i2(cfg, ReflectionParams(a, th), ctx)

    coeffs = ((-2, 1.0), (-1, -8.0), (1, 8.0), (2, -1.0))
    g_th = np.zeros_like(th0)
    g_a = np.zeros_like(a0)
    for k in range(a0.size):
        e = np.zeros_like(a0)
        e[k] = 1.0
        g_th[k] = sum(c * f(a0, th0 + s * h * e) for s, c in coeffs) / (12 * h)
        # one-sided amplitudes cannot go negative; shift the stencil if needed
        ha = min(h, a0[k] / 2.0) if a0[k] > 0 else h
        if a0[k] >= 2 * ha:
            g_a[k] = sum(c * f(a0 + s * ha * e, th0) for s, c in coeffs) / (12 * ha)
        else:
            fp = [f(a0 + j * h * e, th0) for j in range(3)]
            g_a[k] = (-3 * fp[0] + 4 * fp[1] - fp[2]) / (2 * h)
    return g_th, g_a


def certify_gradients(cfg, ctx, rtol=1e-6, atol=1e-9):
    """Compare the analytic gradients with finite differences of the objective.

    Raises
    ------
    GradientCertificationError
        Naming the first component that disagrees beyond
        ``max(rtol * |g|, atol)``.

    Returns
    -------
    float
        Largest scaled mismatch found (below one when certified).
    """
    fd_th, fd_a = _fd_gradients(cfg, ctx)
    worst = 0.0
    for name, g, fd in (("theta", gradient_theta(ctx), fd_th),
                        ("amplitude", gradient_amplitude(ctx), fd_a)):
        tol = np.maximum(rtol * np.maximum(np.abs(g), np.abs(fd)), atol)
        ratio = np.abs(g - fd) / tol
        k = int(np.argmax(ratio))
        worst = max(worst, float(ratio[k]))
        if ratio[k] > 1.0:
            raise GradientCertificationError(
                f"{name} gradient component {k}: analytic {g[k]:.12e} "
                f"vs finite difference {fd[k]:.12e}")
    return worst


def project_feasible(phi, cfg, Q, fixed_amplitudes=False):
    """Euclidean projection of ``(Theta, A)`` onto the feasible set.

    Phases are wrapped into ``[0, 2 pi)``.  Amplitudes go to the closest
    point of ``{a >= 0 : sum_i w_i a_i^2 <= b}`` where
    ``w_i = kappa [R2]_ii + sd2``, ``b = P_A + kappa Tr R2`` and
    ``kappa = Tr(Q T2)/n_t``: negative entries are zeroed and, if the budget
    is still violated, ``a_i / (1 + lam w_i)`` with ``lam`` found by
    bisection.
    """
    if fixed_amplitudes:
        return ReflectionParams(phi.amplitudes, phi.phases)
    w, b = amplitude_weights(cfg, Q)
    if b <= 0 and cfg.sigma_d2 > 0:
        raise InfeasibleBudgetError(
            f"amplification budget bound b = {b:.3e} leaves only A = 0 feasible")
    return ReflectionParams(project_amplitudes(phi.amplitudes, w, b), phi.phases)


def project_amplitudes(a, w, b):
    """Closest point to `a` in ``{x >= 0 : sum_i w_i x_i^2 <= b}``.

    Negative entries are zeroed; if the budget is still violated the result
    is ``a_i / (1 + lam w_i)`` with ``lam > 0`` the root of the budget
    equation, found by bisection.
    """
    w = np.asarray(w, dtype=float)
    a = np.maximum(np.asarray(a, dtype=float), 0.0)
    used = float(np.sum(w * a * a))
    # rounding slack keeps the projection idempotent
    if used <= b * (1.0 + _BUDGET_RTOL):
        return a
    if b <= 0:
        return np.where(w > 0, 0.0, a)

    def excess(lam):
        return float(np.sum(w * (a / (1.0 + lam * w)) ** 2)) - b

    hi = 1.0
    while excess(hi) > 0:
        hi *= 2.0
    lam = scipy.optimize.bisect(excess, 0.0, hi, xtol=1e-14, rtol=1e-14, maxiter=500)
    a_new = a / (1.0 + lam * w)
    # absorb the bisection slack so the budget holds exactly
    used = float(np.sum(w * a_new * a_new))
    if used > b:
        a_new *= np.sqrt(b / used)
    return a_new


def line_search(phi, grad, cfg, Q, ctx, U=1.0, budget=20, fixed_amplitudes=False):
    """Best step on the grid ``{0} U {U, U/2, ..., U/2^budget}``.

    Parameters
    ----------
    grad : (np.ndarray, np.ndarray)
        Phase and amplitude gradients.

    Returns
    -------
    (gamma, phi_next)
        The maximizing step and the projected point it leads to.  Ties keep
        the smaller step, so a zero gradient returns `phi` unchanged.
    """
    if not U > 0:
        raise ContractError("line search upper bound U must be positive")
    g_th, g_a = grad
    if fixed_amplitudes:
        g_a = np.zeros_like(g_a)
    best_gamma = 0.0
    best_phi = project_feasible(phi, cfg, Q, fixed_amplitudes)
    best_val = objective_i2(cfg, best_phi, ctx)
    for k in range(budget, -1, -1):
        gamma = U / 2.0 ** k
        # negative amplitudes project to zero
        cand = project_feasible(
            ReflectionParams(np.maximum(phi.amplitudes + gamma * g_a, 0.0),
                             phi.phases + gamma * g_th),
            cfg, Q, fixed_amplitudes)
        val = objective_i2(cfg, cand, ctx)
        if val > best_val:
            best_val, best_gamma, best_phi = val, gamma, cand
    return best_gamma, best_phi


def initial_point(cfg, passive=False):
    """Deterministic start: ``Q = P_T I``, zero phases, uniform amplitudes
    spending the whole amplification budget."""
    Q = cfg.P_T * np.eye(cfg.n_t, dtype=complex)
    if passive:
        return Q, ReflectionParams.identity(cfg.n_l)
    w, b = amplitude_weights(cfg, Q)
    total = float(np.sum(w))
    if total > 0 and b > 0:
        eta = np.sqrt(b / total)
    else:
        eta = 1.0
    phi = project_feasible(ReflectionParams.uniform(cfg.n_l, eta), cfg, Q)
    return Q, phi


@dataclass
class AoRecord:
    iter: int
    r_bar_nats: float
    trQ: float
    c2_power: float
    gamma: float
    grad_theta_norm: float
    grad_a_norm: float
    q_step: float = 1.0

    def as_row(self):
        return tuple(getattr(self, c) for c in TRACE_COLUMNS)


@dataclass
class AoTrace:
    records: list = field(default_factory=list)
    status: str = "running"
    certification: float = float("nan")

    @property
    def r_bar(self):
        return np.array([r.r_bar_nats for r in self.records])

    @property
    def iterations(self):
        return len(self.records)

    def to_csv(self, path):
        import csv
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(TRACE_COLUMNS)
            for r in self.records:
                wr.writerow([repr(v) if isinstance(v, float) else v for v in r.as_row()])


def _record(t, cfg, sol, Q, phi, gamma, g_th, g_a, beta):
    return AoRecord(
        iter=t, r_bar_nats=float(sol.r_bar), trQ=float(np.real(np.trace(Q))),
        c2_power=float(amplification_power(cfg, Q, phi)), gamma=float(gamma),
        grad_theta_norm=float("nan") if g_th is None else float(np.linalg.norm(g_th)),
        grad_a_norm=float("nan") if g_a is None else float(np.linalg.norm(g_a)),
        q_step=float(beta))


def _transmit_step(cfg, Q, phi, sol, budget, passive, tol, max_iter):
    """Water-filling update of ``Q`` that keeps the surface feasible.

    The amplification budget depends on ``Tr(Q T2)``, so the water-filled
    covariance is evaluated with the amplitudes re-projected.  If that
    lowers the rate, the move ``Q + beta (Q_wf - Q)`` is backtracked with
    ``beta`` halved up to `budget` times; ``beta = 0`` keeps ``Q``.
    """
    gain = cfg.c1 * cfg.c2 * sol.delta.delta1 * sol.delta.delta2
    if not gain > 0 or cfg.P_T == 0:
        return 0.0, Q, phi, sol
    Q_wf = water_fill(cfg.T2, gain, cfg.P_T, cfg.n_t)
    for k in range(budget + 1):
        beta = 0.5 ** k
        Q_try = Q_wf if k == 0 else hermitize(Q + beta * (Q_wf - Q))
        phi_try = project_feasible(phi, cfg, Q_try, fixed_amplitudes=passive)
        cand = da_rate(cfg, Q_try, phi_try, tol, max_iter, warm=sol)
        if cand.r_bar >= sol.r_bar:
            return beta, Q_try, phi_try, cand
    return 0.0, Q, phi, sol


def ao_optimize(cfg, init_Q=None, init_phi=None, stop_delta=1e-6, max_outer=500,
                U=1.0, budget=20, passive=False, certify=True,
                tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Alternating maximization of the approximated rate.

    Parameters
    ----------
    cfg : SystemConfig
    init_Q, init_phi : optional
        Starting point; defaults to :func:`initial_point`.  Infeasible starts
        are projected.
    stop_delta : float
        Relative-change threshold of the rate between outer iterations.
    passive : bool
        Keep unit amplitudes and skip the amplification budget (passive
        surface); only the transmit covariance and the phases move.
    certify : bool
        Check both analytic gradients against finite differences on the
        first iteration.

    Returns
    -------
    (Q, phi, trace) : (np.ndarray, ReflectionParams, AoTrace)
    """
    Q0, phi0 = initial_point(cfg, passive)
    Q = Q0 if init_Q is None else as_hermitian(init_Q, "init_Q")
    if np.real(np.trace(Q)) > cfg.n_t * cfg.P_T * (1 + 1e-9):
        Q = Q * (cfg.n_t * cfg.P_T / np.real(np.trace(Q)))
    phi = phi0 if init_phi is None else init_phi
    if passive:
        phi = ReflectionParams.identity(cfg.n_l).with_phases(phi.phases)
    else:
        phi = project_feasible(phi, cfg, Q)

    trace = AoTrace()
    sol = da_rate(cfg, Q, phi, tol, max_iter)
    for t in range(max_outer):
        beta, Q_next, phi_q, sol_q = _transmit_step(cfg, Q, phi, sol, budget, passive,
                                                    tol, max_iter)
        # reflection step with the fixed points frozen at (Q_next, phi_q)
        ctx = gradient_context(cfg, phi_q, sol_q.delta, sol_q.alpha)
        g_th = gradient_theta(ctx)
        g_a = np.zeros(cfg.n_l) if passive else gradient_amplitude(ctx)
        if certify and t == 0:
            trace.certification = certify_gradients(cfg, ctx)
        gamma, phi_next = line_search(phi_q, (g_th, g_a), cfg, Q_next, ctx, U, budget,
                                      fixed_amplitudes=passive)
        new = sol_q
        if gamma > 0:
            cand = da_rate(cfg, Q_next, phi_next, tol, max_iter, warm=sol_q)
            if cand.r_bar >= sol_q.r_bar:
                new = cand
            else:
                gamma, phi_next = 0.0, phi_q
        else:
            phi_next = phi_q
        trace.records.append(_record(t, cfg, sol, Q, phi, gamma, g_th, g_a, beta))
        change = abs(new.r_bar - sol.r_bar)
        Q, phi, sol = Q_next, phi_next, new
        if change <= stop_delta * abs(sol.r_bar):
            trace.status = "converged"
            break
    else:
        trace.status = "max_outer"
    trace.records.append(_record(len(trace.records), cfg, sol, Q, phi, 0.0, None, None, 0.0))
    log.debug("ao_optimize: %s after %d iterations, r_bar=%.6g nats",
              trace.status, len(trace.records), sol.r_bar)
    return Q, phi, trace
