"""Statistical channel description and Kronecker-model channel sampling.

The two-hop link BS -> IRS -> user is described by four spatial correlation
matrices: ``R1`` (user side) and ``T1`` (IRS side) for the IRS-user hop,
``R2`` (IRS side) and ``T2`` (BS side) for the BS-IRS hop.  Path losses are
absorbed into ``R1`` and ``R2``.
"""

from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import AccuracyError, ContractError
from .linalg import as_hermitian, hermitian_sqrt, hermitize

__all__ = [
    "CorrelationSpec",
    "ReflectionParams",
    "SystemConfig",
    "ChannelRealization",
    "correlation_matrix",
    "apply_path_loss",
    "db_to_linear",
    "sample_channel",
    "draw_generator",
    "effective_correlations",
    "build_config",
    "DEFAULT_CORRELATIONS",
]

TWO_PI = 2.0 * np.pi


def db_to_linear(value_db):
    """Convert a power ratio (or a dBW value) to linear scale."""
    return 10.0 ** (np.asarray(value_db, dtype=float) / 10.0)


@dataclass(frozen=True)
class CorrelationSpec:
    """Parameters of the Gaussian angular-spread correlation model.

    Parameters
    ----------
    eta_deg : float
        Mean angle of arrival/departure, in degrees.
    delta_deg : float
        Root-mean-square angle spread, in degrees. Must be positive.
    spacing : float
        Element spacing in wavelengths.
    n : int
        Matrix dimension.
    """
    eta_deg: float
    delta_deg: float
    spacing: float
    n: int

    def __post_init__(self):
        if not self.delta_deg > 0:
            raise ContractError("delta_deg must be positive")
        if int(self.n) != self.n or self.n < 1:
            raise ContractError("n must be a positive integer")


def _lag_integrands(phi, spec, lags):
    # rows: lags, cols: quadrature nodes
    weight = np.exp(-(phi - spec.eta_deg) ** 2 / (2.0 * spec.delta_deg ** 2))
    weight /= np.sqrt(TWO_PI * spec.delta_deg ** 2)
    phase = TWO_PI * spec.spacing * np.outer(lags, np.sin(np.pi * phi / 180.0))
    return weight * np.exp(1j * phase)


def correlation_matrix(spec, rtol=1e-10, start_nodes=2048, max_nodes=2 ** 22):
    """Correlation matrix ``C(eta, delta, d_s)`` of the angular-spread model.

    Entry ``(m, n)`` is

    .. math::
       \\int_{-180}^{180} \\frac{d\\phi}{\\sqrt{2\\pi\\delta^2}}
       e^{2\\pi j d_s (m-n) \\sin(\\pi\\phi/180) - (\\phi-\\eta)^2 / (2\\delta^2)}

    evaluated with the composite trapezoidal rule.  The number of intervals
    starts at `start_nodes` and is doubled (reusing previous nodes) until two
    successive estimates differ by less than `rtol` in every entry.  No
    renormalization is applied, so the diagonal can sit slightly below one
    when the Gaussian is truncated by the integration window.

    Raises
    ------
    AccuracyError
        If `max_nodes` intervals are reached without convergence.
    """
    lags = np.arange(spec.n)
    a, b = -180.0, 180.0
    n_int = int(start_nodes)
    h = (b - a) / n_int
    phi = np.linspace(a, b, n_int + 1)
    f = _lag_integrands(phi, spec, lags)
    # trapezoid sum without the h factor
    acc = f[:, 1:-1].sum(axis=1) + 0.5 * (f[:, 0] + f[:, -1])
    estimate = h * acc
    while True:
        if 2 * n_int > max_nodes:
            raise AccuracyError(
                f"correlation quadrature did not converge with {n_int} intervals")
        mid = a + h * (np.arange(n_int) + 0.5)
        acc = acc + _lag_integrands(mid, spec, lags).sum(axis=1)
        n_int *= 2
        h *= 0.5
        refined = h * acc
        change = np.max(np.abs(refined - estimate))
        estimate = refined
        if change < rtol:
            break
    # column = lags m - 0, row = conj (negative lags)
    return scipy.linalg.toeplitz(estimate)


def apply_path_loss(R, loss_db):
    """Absorb a path loss given in dB into a correlation matrix."""
    return float(db_to_linear(loss_db)) * np.asarray(R)


@dataclass(frozen=True, eq=False)
class ReflectionParams:
    """Amplitudes and phases of the IRS elements.

    The reflection matrix is ``Phi = diag(a_i exp(j theta_i))``.  Phases are
    wrapped into ``[0, 2 pi)`` on construction.
    """
    amplitudes: np.ndarray
    phases: np.ndarray

    def __post_init__(self):
        a = np.array(self.amplitudes, dtype=float).reshape(-1)
        th = np.array(self.phases, dtype=float).reshape(-1)
        if a.shape != th.shape:
            raise ContractError("amplitudes and phases must have equal length")
        if np.any(a < 0) or not np.all(np.isfinite(a)) or not np.all(np.isfinite(th)):
            raise ContractError("amplitudes must be finite and nonnegative")
        th = np.mod(th, TWO_PI)
        # np.mod can round up to exactly 2 pi for tiny negative inputs
        th[th >= TWO_PI] = 0.0
        a.flags.writeable = False
        th.flags.writeable = False
        object.__setattr__(self, "amplitudes", a)
        object.__setattr__(self, "phases", th)

    @classmethod
    def identity(cls, n):
        return cls(np.ones(n), np.zeros(n))

    @classmethod
    def uniform(cls, n, amplitude, phases=None):
        return cls(np.full(n, float(amplitude)),
                   np.zeros(n) if phases is None else phases)

    @property
    def n(self):
        return self.amplitudes.size

    @property
    def diagonal(self):
        """Complex diagonal of ``Phi``."""
        return self.amplitudes * np.exp(1j * self.phases)

    @property
    def matrix(self):
        return np.diag(self.diagonal)

    def with_amplitudes(self, amplitudes):
        return ReflectionParams(amplitudes, self.phases)

    def with_phases(self, phases):
        return ReflectionParams(self.amplitudes, phases)


@dataclass(frozen=True, eq=False)
class SystemConfig:
    """Dimensions, correlation matrices, noise powers and power budgets.

    ``R1`` and ``R2`` already carry the path losses of the IRS-user and
    BS-IRS hops.  Powers are in watts.  ``P_T`` is the per-antenna transmit
    budget (``Tr Q <= n_t P_T``) and ``P_A`` the IRS amplification budget.
    """
    n_t: int
    n_r: int
    n_l: int
    R1: np.ndarray
    T1: np.ndarray
    R2: np.ndarray
    T2: np.ndarray
    sigma_d2: float
    sigma_s2: float
    P_T: float = 1.0
    P_A: float = 0.0
    label: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        for name in ("n_t", "n_r", "n_l"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ContractError(f"{name} must be a positive integer")
        expected = {"R1": self.n_r, "T1": self.n_l, "R2": self.n_l, "T2": self.n_t}
        for name, n in expected.items():
            M = as_hermitian(getattr(self, name), name)
            if M.shape != (n, n):
                raise ContractError(f"{name} must be {n}x{n}, got {M.shape}")
            M = M.copy()
            M.flags.writeable = False
            object.__setattr__(self, name, M)
        if self.sigma_d2 < 0:
            raise ContractError("sigma_d2 must be nonnegative")
        if not self.sigma_s2 > 0:
            raise ContractError("sigma_s2 must be positive")
        if self.P_T < 0 or self.P_A < 0:
            raise ContractError("power budgets must be nonnegative")

    @property
    def c1(self):
        """Ratio ``n_r / n_l``."""
        return self.n_r / self.n_l

    @property
    def c2(self):
        """Ratio ``n_l / n_t``."""
        return self.n_l / self.n_t

    @cached_property
    def sqrt_factors(self):
        """Hermitian square roots ``(R1^1/2, T1^1/2, R2^1/2, T2^1/2)``."""
        return tuple(hermitian_sqrt(M) for M in (self.R1, self.T1, self.R2, self.T2))

    def replace(self, **changes):
        from dataclasses import replace
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class ChannelRealization:
    """One draw of the two hop channels and the Gaussian matrices behind it."""
    H1: np.ndarray
    H2: np.ndarray
    X1: np.ndarray
    X2: np.ndarray
    seed: int = 0
    draw_index: int = 0


def draw_generator(seed, draw_index):
    """Independent counter-based generator for one Monte-Carlo draw.

    The stream depends only on ``(seed, draw_index)``, so draws can be
    produced in any order or in parallel with identical results.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(draw_index),))
    return np.random.Generator(np.random.Philox(ss))


def _cn(rng, shape, var):
    z = rng.standard_normal(shape + (2,))
    return (z[..., 0] + 1j * z[..., 1]) * np.sqrt(var / 2.0)


def draw_gaussians(n_t, n_r, n_l, seed, draw_index):
    """The pair ``(X1, X2)`` with ``CN(0, 1/n_l)`` and ``CN(0, 1/n_t)`` entries."""
    rng = draw_generator(seed, draw_index)
    X1 = _cn(rng, (n_r, n_l), 1.0 / n_l)
    X2 = _cn(rng, (n_l, n_t), 1.0 / n_t)
    return X1, X2


def sample_channel(cfg, rng_seed, draw_index):
    """Kronecker-model realization ``H1 = R1^1/2 X1 T1^1/2``, ``H2 = R2^1/2 X2 T2^1/2``."""
    sR1, sT1, sR2, sT2 = cfg.sqrt_factors
    X1, X2 = draw_gaussians(cfg.n_t, cfg.n_r, cfg.n_l, rng_seed, draw_index)
    return ChannelRealization(H1=sR1 @ X1 @ sT1, H2=sR2 @ X2 @ sT2, X1=X1, X2=X2,
                              seed=int(rng_seed), draw_index=int(draw_index))


def effective_correlations(cfg, Q, phi):
    """Effective correlations ``T1~ = Phi^H T1 Phi`` and ``T2~ = Q^1/2 T2 Q^1/2``."""
    Q = as_hermitian(Q, "Q")
    if Q.shape != (cfg.n_t, cfg.n_t):
        raise ContractError(f"Q must be {cfg.n_t}x{cfg.n_t}, got {Q.shape}")
    if phi.n != cfg.n_l:
        raise ContractError(f"phi must have {cfg.n_l} elements, got {phi.n}")
    d = phi.diagonal
    T1t = hermitize(np.conj(d)[:, None] * cfg.T1 * d[None, :])
    sQ = hermitian_sqrt(Q)
    T2t = hermitize(sQ @ cfg.T2 @ sQ)
    return T1t, T2t


# (eta_deg, delta_deg, spacing) used for the reference scenarios
DEFAULT_CORRELATIONS = {
    "R1": (60.0, 30.0, 1.0),
    "T1": (0.0, 30.0, 1.0),
    "R2": (0.0, 30.0, 1.0),
    "T2": (10.0, 5.0, 1.0),
}


@lru_cache(maxsize=64)
def _cached_correlation(eta_deg, delta_deg, spacing, n):
    C = correlation_matrix(CorrelationSpec(eta_deg, delta_deg, spacing, n))
    C.flags.writeable = False
    return C


def build_config(n_t, n_r, n_l, sigma_d2, sigma_s2, P_T=1.0, P_A=0.0,
                 correlations=None, loss_db=(-25.0, -25.0), label=None):
    """Assemble a :class:`SystemConfig` from angular-spread parameters.

    Parameters
    ----------
    correlations : dict, optional
        Maps ``"R1"``, ``"T1"``, ``"R2"``, ``"T2"`` to ``(eta_deg,
        delta_deg, spacing)`` triples, or to the string ``"identity"``.
        Missing keys fall back to :data:`DEFAULT_CORRELATIONS`.
    loss_db : (float, float)
        Path losses ``(L1, L2)`` in dB of the IRS-user and BS-IRS hops.
        They are absorbed into ``R1`` and ``R2``.
    """
    spec = dict(DEFAULT_CORRELATIONS)
    spec.update(correlations or {})
    dims = {"R1": n_r, "T1": n_l, "R2": n_l, "T2": n_t}
    mats = {}
    for name, n in dims.items():
        s = spec[name]
        if isinstance(s, str):
            if s != "identity":
                raise ContractError(f"unknown correlation model {s!r} for {name}")
            mats[name] = np.eye(n, dtype=complex)
        else:
            eta, delta, spacing = (float(v) for v in s)
            mats[name] = np.array(_cached_correlation(eta, delta, spacing, int(n)))
    L1, L2 = loss_db
    mats["R1"] = apply_path_loss(mats["R1"], L1)
    mats["R2"] = apply_path_loss(mats["R2"], L2)
    return SystemConfig(n_t=n_t, n_r=n_r, n_l=n_l, sigma_d2=float(sigma_d2),
                        sigma_s2=float(sigma_s2), P_T=float(P_T), P_A=float(P_A),
                        label=label, **mats)
