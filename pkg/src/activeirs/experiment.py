"""Manifest-driven sweeps, active/passive comparison and CSV output.

A manifest is a JSON document validated against ``manifest.schema.json``
before anything is computed.  Noise powers may be given in dBW or in watts;
they are converted to watts once, at parse time.  CSV output contains only
deterministic quantities, so reruns with the same manifest and seed are
byte-identical; wall times go to the plain-text run ledger instead.
"""

import csv
import hashlib
import json
import logging
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources

import jsonschema
import numpy as np
import scipy

from .channel import DEFAULT_CORRELATIONS, ReflectionParams, build_config, db_to_linear
from .deterministic import da_rate
from .errors import ContractError, ConvergenceError
from .montecarlo import LN2, ergodic_rate_mc
from .optimizer import ao_optimize, initial_point

log = logging.getLogger(__name__)

__all__ = [
    "ManifestError",
    "SweepAxis",
    "Manifest",
    "ResultRow",
    "CompareRow",
    "load_schema",
    "parse_manifest",
    "load_manifest",
    "evaluate_point",
    "run_manifest",
    "compare_active_passive",
    "emit_csv",
    "write_rows",
    "write_run_ledger",
]

KINDS = ("accuracy_sweep", "noise_sweep", "power_split", "single_point")
GAP_FLOOR = 1e-12

RESULT_COLUMNS = ("sweep_value", "r_bar_bits", "r_bar_baseline_bits", "mc_mean_bits",
                  "mc_stderr_bits", "rel_gap", "opt_iterations", "status",
                  "config_hash", "seed")
COMPARE_COLUMNS = ("sweep_value", "active_opt_bits", "active_base_bits",
                   "passive_opt_bits", "passive_base_bits", "gap_bits",
                   "active_mc_bits", "passive_mc_bits", "active_iterations",
                   "passive_iterations", "status", "config_hash", "seed")

OPTIMIZER_DEFAULTS = {"stop_delta": 1e-6, "U": 1.0, "budget": 20, "max_outer": 500,
                      "restarts": 0}


class ManifestError(ContractError):
    """The manifest does not match the schema or is semantically inconsistent."""


def load_schema():
    text = resources.files(__package__).joinpath("manifest.schema.json").read_text("utf-8")
    return json.loads(text)


@dataclass(frozen=True)
class SweepAxis:
    name: str
    values: tuple


@dataclass(frozen=True)
class Manifest:
    """Parsed experiment description; all powers in watts."""
    kind: str
    n_t: int
    n_r: int
    n_l: int
    correlations: tuple          # ((name, spec), ...) with spec a triple or "identity"
    loss_db: tuple
    sigma_d2: float
    sigma_s2: float
    P_T: float = 1.0
    P_A: float = 0.0
    total_power: float = None
    amplitude: float = 1.0
    sweep: SweepAxis = None
    mc_trials: int = None
    seed: int = 0
    optimizer: dict = None
    output: str = None

    def to_dict(self):
        """Explicit JSON form; ``parse_manifest(m.to_dict()) == m``."""
        corr = {}
        for name, spec in self.correlations:
            corr[name] = spec if isinstance(spec, str) else dict(
                zip(("eta_deg", "delta_deg", "spacing"), spec))
        return {
            "kind": self.kind,
            "system": {
                "n_t": self.n_t, "n_r": self.n_r, "n_l": self.n_l,
                "correlations": corr,
                "loss_db": list(self.loss_db),
                "sigma_d2_w": self.sigma_d2,
                "sigma_s2_w": self.sigma_s2,
                "P_T": self.P_T, "P_A": self.P_A,
                "total_power": self.total_power,
            },
            "reflection": {"amplitude": self.amplitude},
            "sweep": None if self.sweep is None else {
                "axis": self.sweep.name, "values": list(self.sweep.values)},
            "mc": None if self.mc_trials is None else {
                "trials": self.mc_trials, "seed": self.seed},
            "optimizer": None if self.optimizer is None else dict(self.optimizer),
            "output": self.output,
        }

    def with_seed(self, seed):
        return replace(self, seed=int(seed))

    def points(self):
        """Sweep coordinates; a single ``None`` for a single-point run."""
        return (None,) if self.sweep is None else self.sweep.values


def _noise(system, key, default):
    if f"{key}_w" in system:
        return float(system[f"{key}_w"])
    if f"{key}_dbw" in system:
        return db_to_linear(system[f"{key}_dbw"])
    return default


def parse_manifest(data):
    """Validate a manifest dictionary and convert it to a :class:`Manifest`.

    Raises
    ------
    ManifestError
        On any schema violation or inconsistent combination of fields.
    """
    try:
        jsonschema.validate(data, load_schema())
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ManifestError(f"manifest invalid at {path}: {exc.message}") from None
    kind = data["kind"]
    system = data["system"]
    corr = dict(DEFAULT_CORRELATIONS)
    for name, spec in system.get("correlations", {}).items():
        corr[name] = spec if isinstance(spec, str) else (
            float(spec["eta_deg"]), float(spec["delta_deg"]), float(spec["spacing"]))
    sweep = data.get("sweep")
    axis = None if sweep is None else SweepAxis(sweep["axis"],
                                                tuple(float(v) for v in sweep["values"]))
    mc = data.get("mc")
    opt = data.get("optimizer")
    if opt is not None:
        opt = {**OPTIMIZER_DEFAULTS, **opt}
    m = Manifest(
        kind=kind,
        n_t=int(system["n_t"]), n_r=int(system["n_r"]), n_l=int(system["n_l"]),
        correlations=tuple((k, corr[k]) for k in ("R1", "T1", "R2", "T2")),
        loss_db=tuple(float(v) for v in system.get("loss_db", (-25.0, -25.0))),
        sigma_d2=_noise(system, "sigma_d2", 0.0),
        sigma_s2=_noise(system, "sigma_s2", 1.0),
        P_T=float(system.get("P_T", 1.0)),
        P_A=float(system.get("P_A", 0.0)),
        total_power=None if system.get("total_power") is None else float(system["total_power"]),
        amplitude=float(data.get("reflection", {}).get("amplitude", 1.0)),
        sweep=axis,
        mc_trials=None if mc is None else int(mc["trials"]),
        seed=0 if mc is None else int(mc.get("seed", 0)),
        optimizer=opt,
        output=data.get("output"),
    )
    _check_semantics(m)
    return m


def _check_semantics(m):
    if m.kind == "single_point":
        if m.sweep is not None:
            raise ManifestError("single_point manifests take no sweep")
    elif m.sweep is None:
        raise ManifestError(f"{m.kind} requires a sweep")
    if m.kind == "accuracy_sweep" and m.mc_trials is None:
        raise ManifestError("accuracy_sweep requires mc settings")
    if m.kind in ("noise_sweep", "power_split") and m.optimizer is None:
        raise ManifestError(f"{m.kind} requires optimizer settings")
    if m.kind == "power_split":
        if m.sweep.name != "P_A" or m.total_power is None:
            raise ManifestError("power_split sweeps P_A and needs total_power")
        if any(v > m.total_power or v < 0 for v in m.sweep.values):
            raise ManifestError("P_A values must lie in [0, total_power]")


def load_manifest(path):
    """Read and parse a manifest file.  JSON syntax errors become
    :class:`ManifestError`; unreadable files raise ``OSError``."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from None
    return parse_manifest(data)


def point_parameters(m, value):
    """Resolve the physical parameters of one sweep point (watts)."""
    p = {"sigma_d2": m.sigma_d2, "sigma_s2": m.sigma_s2, "P_T": m.P_T, "P_A": m.P_A}
    if value is None:
        return p
    axis = m.sweep.name
    if axis == "snr_db":
        p["sigma_s2"] = p["P_T"] / 10.0 ** (value / 10.0)
    elif axis == "sigma_d2_dbw":
        p["sigma_d2"] = db_to_linear(value)
    elif axis == "sigma_s2_dbw":
        p["sigma_s2"] = db_to_linear(value)
    elif axis == "P_A":
        p["P_A"] = value
        if m.total_power is not None:
            p["P_T"] = m.total_power - value
    elif axis == "P_T":
        p["P_T"] = value
    return p


def config_hash(m, value):
    """Short digest of everything that determines one result row."""
    payload = {"n": [m.n_t, m.n_r, m.n_l], "corr": [list(c) if not isinstance(c, str) else c
                                                    for _, c in m.correlations],
               "loss_db": list(m.loss_db), "amplitude": m.amplitude,
               "point": point_parameters(m, value), "mc": m.mc_trials, "seed": m.seed,
               "optimizer": m.optimizer, "kind": m.kind}
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def system_for(m, value, passive=False):
    p = point_parameters(m, value)
    if passive:
        # the passive surface has no amplifier: no dynamic noise, whole budget at the BS
        total = m.total_power if m.total_power is not None else p["P_T"]
        p.update(sigma_d2=0.0, P_A=0.0, P_T=total)
    return build_config(m.n_t, m.n_r, m.n_l, p["sigma_d2"], p["sigma_s2"], p["P_T"], p["P_A"],
                        correlations=dict(m.correlations), loss_db=m.loss_db)


@dataclass
class ResultRow:
    sweep_value: float
    r_bar_bits: float
    r_bar_baseline_bits: float = None
    mc_mean_bits: float = None
    mc_stderr_bits: float = None
    rel_gap: float = None
    opt_iterations: int = None
    status: str = "ok"
    config_hash: str = ""
    seed: int = 0
    wall_time: float = field(default=0.0, compare=False)
    iterations: dict = field(default_factory=dict, compare=False)
    trace: object = field(default=None, compare=False, repr=False)

    def as_row(self):
        return tuple(getattr(self, c) for c in RESULT_COLUMNS)


@dataclass
class CompareRow:
    sweep_value: float
    active_opt_bits: float
    active_base_bits: float
    passive_opt_bits: float
    passive_base_bits: float
    gap_bits: float
    active_mc_bits: float = None
    passive_mc_bits: float = None
    active_iterations: int = None
    passive_iterations: int = None
    status: str = "ok"
    config_hash: str = ""
    seed: int = 0
    wall_time: float = field(default=0.0, compare=False)
    iterations: dict = field(default_factory=dict, compare=False)

    def as_row(self):
        return tuple(getattr(self, c) for c in COMPARE_COLUMNS)


def _optimize(cfg, opt, seed, passive=False):
    """Run the alternating optimizer from the deterministic start plus
    `restarts` seeded random-phase starts; keep the best."""
    kw = {k: opt[k] for k in ("stop_delta", "U", "budget", "max_outer")}
    Q, phi, trace = ao_optimize(cfg, passive=passive, **kw)
    best = (trace.r_bar[-1], Q, phi, trace)
    for r in range(int(opt.get("restarts", 0))):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, r)))
        Q0, phi0 = initial_point(cfg, passive)
        phi0 = phi0.with_phases(rng.uniform(0.0, 2.0 * np.pi, cfg.n_l))
        Qr, phir, tr = ao_optimize(cfg, init_Q=Q0, init_phi=phi0, passive=passive,
                                   certify=False, **kw)
        if tr.r_bar[-1] > best[0]:
            best = (tr.r_bar[-1], Qr, phir, tr)
    return best[1], best[2], best[3]


def _fixed_point(cfg, amplitude, passive=False):
    Q = cfg.P_T * np.eye(cfg.n_t, dtype=complex)
    if passive:
        return Q, ReflectionParams.identity(cfg.n_l)
    return Q, ReflectionParams.uniform(cfg.n_l, amplitude)


def evaluate_point(m, value, threads=1):
    """Compute one :class:`ResultRow`.

    The headline ``r_bar_bits`` is the optimized rate when optimizer settings
    are present, otherwise the rate at ``Q = P_T I`` and ``Phi = a I``.
    Monte-Carlo, when requested, is evaluated at the same point so that
    ``rel_gap`` measures the accuracy of the approximation there.
    """
    t0 = time.perf_counter()
    row = ResultRow(sweep_value=value, r_bar_bits=None, config_hash=config_hash(m, value),
                    seed=m.seed)
    cfg = system_for(m, value)
    if m.optimizer is None:
        Q, phi = _fixed_point(cfg, m.amplitude)
        sol = da_rate(cfg, Q, phi)
        row.r_bar_bits = sol.r_bar / LN2
    else:
        Qb, phib = initial_point(cfg)
        base = da_rate(cfg, Qb, phib)
        row.r_bar_baseline_bits = base.r_bar / LN2
        Q, phi, trace = _optimize(cfg, m.optimizer, m.seed)
        sol = da_rate(cfg, Q, phi)
        row.r_bar_bits = sol.r_bar / LN2
        row.opt_iterations = trace.iterations
        row.trace = trace
        row.iterations["optimizer_status"] = trace.status
    row.iterations.update(sol.meta)
    if m.mc_trials is not None:
        rep = ergodic_rate_mc(cfg, Q, phi, m.mc_trials, m.seed, threads)
        row.mc_mean_bits = rep.value
        row.mc_stderr_bits = rep.stderr
        row.rel_gap = abs(row.r_bar_bits - rep.value) / max(rep.value, GAP_FLOOR)
    row.wall_time = time.perf_counter() - t0
    return row


def _guarded(fn, m, value, make_failed):
    try:
        return fn(m, value)
    except (ConvergenceError, ContractError, np.linalg.LinAlgError) as exc:
        log.warning("sweep point %r failed: %s", value, exc)
        return make_failed(value, f"error: {type(exc).__name__}: {exc}")


def _map_points(fn, m, threads, make_failed):
    values = list(m.points())
    if threads > 1 and len(values) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda v: _guarded(fn, m, v, make_failed), values))
    return [_guarded(fn, m, v, make_failed) for v in values]


def run_manifest(m, threads=1, strict=False):
    """Evaluate every sweep point of a manifest, in sweep order.

    Solver failures are recorded in the row's ``status`` instead of aborting
    the sweep, unless `strict` is true (single-point semantics), in which
    case the exception propagates.
    """
    if strict:
        return [evaluate_point(m, v) for v in m.points()]

    def failed(value, status):
        return ResultRow(sweep_value=value, r_bar_bits=None, status=status,
                         config_hash=config_hash(m, value), seed=m.seed)

    return _map_points(lambda mm, v: evaluate_point(mm, v), m, threads, failed)


def compare_active_passive(m, threads=1):
    """Paired active and passive rates over the sweep.

    The passive reference uses unit amplitudes, no dynamic noise and the
    whole power budget at the transmitter (``total_power`` if given, else
    ``P_T``).  Both sides share the Monte-Carlo seed.
    """
    opt = m.optimizer or dict(OPTIMIZER_DEFAULTS)

    def passive_side(value):
        cfg = system_for(m, value, passive=True)
        Qb, phib = _fixed_point(cfg, 1.0, passive=True)
        base = da_rate(cfg, Qb, phib)
        Q, phi, trace = _optimize(cfg, opt, m.seed, passive=True)
        sol = da_rate(cfg, Q, phi)
        mc = None
        if m.mc_trials is not None:
            mc = ergodic_rate_mc(cfg, Q, phi, m.mc_trials, m.seed).value
        return base.r_bar / LN2, sol.r_bar / LN2, mc, trace.iterations

    # the passive side does not depend on P_A when the total budget is fixed
    shared = None
    if m.sweep is not None and m.sweep.name == "P_A" and m.total_power is not None:
        shared = passive_side(None)

    def point(mm, value):
        t0 = time.perf_counter()
        cfg = system_for(mm, value)
        Qb, phib = initial_point(cfg)
        base = da_rate(cfg, Qb, phib)
        Q, phi, trace = _optimize(cfg, opt, mm.seed)
        sol = da_rate(cfg, Q, phi)
        p_base, p_opt, p_mc, p_it = shared if shared is not None else passive_side(value)
        row = CompareRow(sweep_value=value, active_opt_bits=sol.r_bar / LN2,
                         active_base_bits=base.r_bar / LN2, passive_opt_bits=p_opt,
                         passive_base_bits=p_base, gap_bits=sol.r_bar / LN2 - p_opt,
                         passive_mc_bits=p_mc, active_iterations=trace.iterations,
                         passive_iterations=p_it, config_hash=config_hash(mm, value),
                         seed=mm.seed)
        if mm.mc_trials is not None:
            row.active_mc_bits = ergodic_rate_mc(cfg, Q, phi, mm.mc_trials, mm.seed).value
        row.iterations.update(sol.meta)
        row.wall_time = time.perf_counter() - t0
        return row

    def failed(value, status):
        nan = float("nan")
        return CompareRow(sweep_value=value, active_opt_bits=nan, active_base_bits=nan,
                          passive_opt_bits=nan, passive_base_bits=nan, gap_bits=nan,
                          status=status, config_hash=config_hash(m, value), seed=m.seed)

    return _map_points(point, m, threads, failed)


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def emit_csv(rows, path):
    """Write result rows as UTF-8 CSV with LF line endings.

    Floats use the shortest round-trip representation; missing values are
    empty cells.  The header is :data:`RESULT_COLUMNS` or
    :data:`COMPARE_COLUMNS` depending on the row type.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        write_rows(rows, fh)


def write_rows(rows, fh):
    """Write result rows to an open text stream (see :func:`emit_csv`)."""
    rows = list(rows)
    if not rows:
        raise ContractError("refusing to write an empty result table")
    columns = COMPARE_COLUMNS if isinstance(rows[0], CompareRow) else RESULT_COLUMNS
    wr = csv.writer(fh, lineterminator="\n")
    wr.writerow(columns)
    for r in rows:
        wr.writerow([_cell(v) for v in r.as_row()])


def read_csv(path):
    """Read a CSV written by :func:`emit_csv` back as a list of dicts."""
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_run_ledger(path, m, rows, command):
    """Plain-text provenance record: versions, manifest digest, per-row
    iteration counts and wall times."""
    from . import __version__
    digest = hashlib.sha256(json.dumps(m.to_dict(), sort_keys=True).encode()).hexdigest()
    lines = [
        f"command: {command}",
        f"activeirs: {__version__}",
        f"python: {platform.python_version()}",
        f"numpy: {np.__version__}",
        f"scipy: {scipy.__version__}",
        f"manifest_sha256: {digest}",
        f"kind: {m.kind}",
        f"seed: {m.seed}",
    ]
    for r in rows:
        its = " ".join(f"{k}={v}" for k, v in sorted(r.iterations.items()))
        lines.append(f"row value={_cell(r.sweep_value) or '-'} hash={r.config_hash} "
                     f"status={r.status} wall_time_s={r.wall_time:.3f} {its}".rstrip())
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
