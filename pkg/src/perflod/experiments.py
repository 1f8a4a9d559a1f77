"""Experiment runners: convergence, localization decay, Poincare studies.

Each runner consumes an ExperimentConfig, produces one ExperimentRecord
per parameter tuple, and a human-readable summary string.  Records
serialize to CSV with a fixed column set; reruns with the same config are
byte-identical (wall time is therefore reported in the summary only, the
CSV column stays empty).
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import fem, interp, lod, mesh, poincare
from .errors import ConfigurationError, NumericalError, PerflodError
from .geometry import GeometryKind, GeometrySpec

CSV_HEADER = (
    "command,geometry,eta,H,h,k,interp,h1_error,h1_rel,l2_error,l2_rel,"
    "value,method,s_max,r_max,wall_ms,status"
)

COMMANDS = ("convergence", "decay", "poincare", "solve")


def parse_dyadic(value, name="value"):
    """Accept 2^-p / 2**-p strings, decimal strings, or floats; must be dyadic."""
    if isinstance(value, str):
        text = value.strip().replace("**", "^")
        if "^" in text:
            base, _, exp = text.partition("^")
            if base.strip() != "2":
                raise ConfigurationError(f"{name}: only base-2 sizes supported, got {value!r}")
            try:
                return float(2.0 ** int(exp))
            except ValueError as exc:
                raise ConfigurationError(f"{name}: bad exponent in {value!r}") from exc
        try:
            value = float(text)
        except ValueError as exc:
            raise ConfigurationError(f"{name}: cannot parse {value!r}") from exc
    value = float(value)
    frac = Fraction(value).limit_denominator(1 << 62)
    if frac <= 0 or frac.numerator != 1 or frac.denominator & (frac.denominator - 1):
        raise ConfigurationError(f"{name} must be a (negative) power of two, got {value}")
    return value


def step_forcing(points):
    """Unit load on the upper half plane x2 >= 1/2, zero below."""
    return (points[:, 1] >= 0.5).astype(float)


@dataclass
class ExperimentConfig:
    command: str
    geometry_kind: GeometryKind = GeometryKind.PERIODIC_SQUARES
    eta_list: list = field(default_factory=list)   # [None] for unperforated
    fixed_period: float = 1.0 / 16.0
    h_fine: float = 2.0**-7
    H_list: list = field(default_factory=lambda: [2.0**-2, 2.0**-3, 2.0**-4, 2.0**-5])
    k_policy: str = "log"                          # "log" or "fixed"
    k_fixed: int = 2
    k_list: list = field(default_factory=lambda: [1, 2, 3, 4, 5, 6])
    interp_kind: str = "projective"
    forcing: str = "step"                          # "step" or "constant"
    output: str | None = None
    seed: int = 0
    solver_tol: float = 1e-10
    xstar_side: str = "right"
    partition_size: float | None = None
    cache_dir: str | None = None

    def geometry(self, eta):
        return GeometrySpec(kind=self.geometry_kind, eta=eta, fixed_period=self.fixed_period)

    def layers_for(self, H):
        if self.k_policy == "fixed":
            return self.k_fixed
        return int(math.ceil(math.log2(1.0 / H))) + 1


def config_from_dict(data, command=None):
    """Build a config from parsed JSON, validating field by field."""
    data = dict(data)
    cmd = data.pop("command", command)
    if cmd is None:
        raise ConfigurationError("no command given")
    if command is not None and cmd != command:
        raise ConfigurationError(f"config command {cmd!r} does not match subcommand {command!r}")
    if cmd not in COMMANDS:
        raise ConfigurationError(f"unknown command {cmd!r}")

    cfg = ExperimentConfig(command=cmd)
    if "geometry" in data:
        geo = data.pop("geometry")
        if isinstance(geo, str):
            geo = {"kind": geo}
        try:
            cfg.geometry_kind = GeometryKind(geo.get("kind", "periodic_squares"))
        except ValueError as exc:
            raise ConfigurationError(f"unknown geometry kind {geo.get('kind')!r}") from exc
        if "eta" in geo and geo["eta"] is not None:
            cfg.eta_list = [parse_dyadic(geo["eta"], "eta")]
        if "fixed_period" in geo:
            cfg.fixed_period = parse_dyadic(geo["fixed_period"], "fixed_period")
    if "eta_list" in data:
        cfg.eta_list = [parse_dyadic(v, "eta") for v in data.pop("eta_list")]
    if "h_fine" in data:
        cfg.h_fine = parse_dyadic(data.pop("h_fine"), "h_fine")
    if "H_list" in data:
        cfg.H_list = [parse_dyadic(v, "H") for v in data.pop("H_list")]
    if "k_policy" in data:
        policy = data.pop("k_policy")
        if isinstance(policy, int):
            cfg.k_policy, cfg.k_fixed = "fixed", policy
        elif policy in ("log", "fixed"):
            cfg.k_policy = policy
        else:
            raise ConfigurationError(f"bad k_policy {policy!r}")
    if "k_fixed" in data:
        cfg.k_fixed = int(data.pop("k_fixed"))
    if "k_list" in data:
        cfg.k_list = [int(v) for v in data.pop("k_list")]
    if "interp" in data:
        kind = data.pop("interp")
        if kind not in ("projective", "clement"):
            raise ConfigurationError(f"unknown interpolation kind {kind!r}")
        cfg.interp_kind = kind
    if "forcing" in data:
        forcing = data.pop("forcing")
        if forcing not in ("step", "constant"):
            raise ConfigurationError(f"unknown forcing {forcing!r}")
        cfg.forcing = forcing
    for key in ("output", "seed", "solver_tol", "xstar_side", "cache_dir"):
        if key in data:
            setattr(cfg, key, data.pop(key))
    if "partition_size" in data:
        val = data.pop("partition_size")
        cfg.partition_size = None if val in (None, "auto") else parse_dyadic(val, "partition_size")
    if cfg.geometry_kind is GeometryKind.UNPERFORATED and not cfg.eta_list:
        cfg.eta_list = [None]
    if not cfg.eta_list and cmd != "poincare":
        raise ConfigurationError("no eta given")
    if data:
        raise ConfigurationError(f"unknown config keys: {sorted(data)}")
    return cfg


@dataclass
class ExperimentRecord:
    """One CSV row; unused columns stay None and serialize empty."""

    command: str
    geometry: str
    eta: float | None = None
    H: float | None = None
    h: float | None = None
    k: int | None = None
    interp: str | None = None
    h1_error: float | None = None
    h1_rel: float | None = None
    l2_error: float | None = None
    l2_rel: float | None = None
    value: float | None = None
    method: str | None = None
    s_max: int | None = None
    r_max: int | None = None
    wall_ms: float | None = None
    status: str = "ok"

    def to_csv_row(self):
        def num(v):
            return "" if v is None else f"{v:.12e}"

        def size(v):
            return "" if v is None else f"{v:.10g}"

        cells = [
            self.command,
            self.geometry,
            size(self.eta),
            size(self.H),
            size(self.h),
            "" if self.k is None else str(self.k),
            self.interp or "",
            num(self.h1_error),
            num(self.h1_rel),
            num(self.l2_error),
            num(self.l2_rel),
            num(self.value),
            self.method or "",
            "" if self.s_max is None else str(self.s_max),
            "" if self.r_max is None else str(self.r_max),
            "",  # wall time varies run to run; kept out of the deterministic CSV
            self.status,
        ]
        return ",".join(cells)


def write_csv(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [CSV_HEADER] + [r.to_csv_row() for r in records]
    path.write_text("\n".join(lines) + "\n")


def _forcing_fn(cfg):
    return step_forcing if cfg.forcing == "step" else 1.0


def _reference_key(cfg, eta):
    payload = json.dumps(
        [cfg.geometry_kind.value, eta, cfg.fixed_period, cfg.h_fine, cfg.forcing, cfg.solver_tol],
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:24]


def _fine_problem(cfg, eta):
    """Fine mesh, operators, load and reference solution (disk-cached)."""
    spec = cfg.geometry(eta)
    pm = mesh.perforate(mesh.build_structured_mesh(round(1.0 / cfg.h_fine)), spec)
    A = fem.assemble_stiffness(pm)
    M = fem.assemble_mass(pm)
    b = fem.assemble_load(pm, _forcing_fn(cfg))

    u_ref = None
    cache_file = None
    if cfg.cache_dir:
        cache_file = Path(cfg.cache_dir) / f"ref_{_reference_key(cfg, eta)}.npy"
        if cache_file.exists():
            u_ref = np.load(cache_file)
            if u_ref.shape != b.shape:
                u_ref = None
    if u_ref is None:
        u_ref = fem.solve_spd(A, b, tol=cfg.solver_tol)
        if cache_file is not None:
            cache_file.parent.mkdir(parents=True, exist_ok=True)
            np.save(cache_file, u_ref)
    return pm, A, M, b, u_ref


def _build_interp(cfg, pm, cs):
    if cfg.interp_kind == "projective":
        return interp.build_projective_interp(pm, cs)
    return interp.build_clement_interp(pm, cs)


def _error_record(cfg, eta, H, k, A, M, u_ref, u_ms, wall_ms):
    diff = u_ms - u_ref
    h1 = fem.h1_seminorm(A, diff)
    l2 = fem.l2_norm(M, diff)
    h1_ref = fem.h1_seminorm(A, u_ref)
    l2_ref = fem.l2_norm(M, u_ref)
    return ExperimentRecord(
        command=cfg.command,
        geometry=cfg.geometry_kind.value,
        eta=eta,
        H=H,
        h=cfg.h_fine,
        k=k,
        interp=cfg.interp_kind,
        h1_error=h1,
        h1_rel=h1 / h1_ref if h1_ref > 0 else None,
        l2_error=l2,
        l2_rel=l2 / l2_ref if l2_ref > 0 else None,
        wall_ms=wall_ms,
    )


def observed_order(h1_errors_by_H):
    """Mean log2 error ratio over successive H halvings (H sorted descending)."""
    pairs = sorted(h1_errors_by_H.items(), key=lambda kv: -kv[0])
    rates = []
    for (H0, e0), (H1, e1) in zip(pairs[:-1], pairs[1:]):
        if abs(H0 / H1 - 2.0) > 1e-9 or e0 <= 0 or e1 <= 0:
            continue
        rates.append(math.log2(e0 / e1))
    return float(np.mean(rates)) if rates else float("nan")


def run_convergence(cfg):
    """Sweep (eta, H), multiscale-solve at k layers per policy, record errors."""
    records = []
    summary = []
    for eta in cfg.eta_list:
        pm, A, M, b, u_ref = _fine_problem(cfg, eta)
        errors = {}
        for H in cfg.H_list:
            k = cfg.layers_for(H)
            start = time.perf_counter()
            try:
                cs = interp.build_coarse_space(pm, H)
                op = _build_interp(cfg, pm, cs)
                basis = lod.build_corrector_basis(pm, cs, op, A, k)
                sol = lod.multiscale_solve(pm, cs, basis, A, b)
                wall = 1e3 * (time.perf_counter() - start)
                rec = _error_record(cfg, eta, H, k, A, M, u_ref, sol.fine, wall)
                errors[H] = rec.h1_error
            except PerflodError as exc:
                rec = ExperimentRecord(
                    command=cfg.command, geometry=cfg.geometry_kind.value,
                    eta=eta, H=H, h=cfg.h_fine, k=k, interp=cfg.interp_kind,
                    status=f"error:{type(exc).__name__}",
                )
            records.append(rec)
        p_hat = observed_order(errors)
        summary.append(
            f"eta={eta} interp={cfg.interp_kind}: observed H1 order p_hat={p_hat:.3f}"
        )
    return records, "\n".join(summary)


def fit_loglinear(ks, errors):
    """Least-squares fit of log e(k) = a + b k; returns (slope b, R^2)."""
    ks = np.asarray(ks, dtype=float)
    logs = np.log(np.asarray(errors, dtype=float))
    coeffs = np.polyfit(ks, logs, 1)
    fitted = np.polyval(coeffs, ks)
    ss_res = float(((logs - fitted) ** 2).sum())
    ss_tot = float(((logs - logs.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coeffs[0]), r2


PLATEAU_FACTOR = 1.5  # e(k) this far above the untruncated error counts as pre-plateau


def run_decay(cfg):
    """Fix (eta, H), grow the truncation layer, record errors and the decay fit."""
    if len(cfg.eta_list) != 1 or len(cfg.H_list) != 1:
        raise ConfigurationError("decay study wants exactly one eta and one H")
    eta = cfg.eta_list[0]
    H = cfg.H_list[0]
    pm, A, M, b, u_ref = _fine_problem(cfg, eta)
    cs = interp.build_coarse_space(pm, H)
    op = _build_interp(cfg, pm, cs)

    ideal = lod.ideal_corrector_basis(pm, cs, op, A)
    sol_ideal = lod.multiscale_solve(pm, cs, ideal, A, b)
    e_ideal = fem.h1_seminorm(A, sol_ideal.fine - u_ref)

    records = []
    errors = {}
    pou = lod.partition_weights(pm, cs)
    for k in cfg.k_list:
        start = time.perf_counter()
        try:
            basis = lod.build_corrector_basis(pm, cs, op, A, k, pou=pou)
            sol = lod.multiscale_solve(pm, cs, basis, A, b)
            wall = 1e3 * (time.perf_counter() - start)
            rec = _error_record(cfg, eta, H, k, A, M, u_ref, sol.fine, wall)
            errors[k] = rec.h1_error
        except PerflodError as exc:
            rec = ExperimentRecord(
                command=cfg.command, geometry=cfg.geometry_kind.value,
                eta=eta, H=H, h=cfg.h_fine, k=k, interp=cfg.interp_kind,
                status=f"error:{type(exc).__name__}",
            )
        records.append(rec)

    pre = {k: e for k, e in errors.items() if e >= PLATEAU_FACTOR * max(e_ideal, 1e-300)}
    if len(pre) >= 2:
        slope, r2 = fit_loglinear(list(pre), list(pre.values()))
        fit_line = f"pre-plateau fit: slope={slope:.4f} R2={r2:.4f} over k={sorted(pre)}"
    else:
        fit_line = "pre-plateau fit: not enough points above the plateau"
    summary = (
        f"eta={eta} H={H} interp={cfg.interp_kind}: plateau (untruncated) error="
        f"{e_ideal:.6e}\n{fit_line}"
    )
    return records, summary


def run_poincare(cfg):
    """Per eta: one representative square patch, all bounds plus the oracle."""
    if cfg.geometry_kind not in (
        GeometryKind.FILAMENT, GeometryKind.PERIODIC_SQUARES, GeometryKind.UNPERFORATED,
    ):
        raise ConfigurationError(f"poincare study unsupported for {cfg.geometry_kind.value}")
    side = cfg.H_list[0] if cfg.H_list else 1.0
    etas = cfg.eta_list or [None]
    records = []
    oracle_values = {}
    shape_values = {}
    for eta in etas:
        spec = cfg.geometry(eta)
        pm = mesh.perforate(mesh.build_structured_mesh(round(1.0 / cfg.h_fine)), spec)
        patch = poincare.square_patch(pm, (0.0, 0.0), side)
        graph = poincare.build_partition_graph(
            patch, side=cfg.xstar_side, partition_size=cfg.partition_size
        )
        estimates = [
            poincare.rayleigh_oracle(patch),
            poincare.telescoped_bound(graph),
            poincare.shape_regular_bound(graph),
            poincare.path_multiplicity_bound(graph),
        ]
        for est in estimates:
            records.append(
                ExperimentRecord(
                    command=cfg.command,
                    geometry=cfg.geometry_kind.value,
                    eta=eta,
                    H=side,
                    h=cfg.h_fine,
                    value=est.value,
                    method=est.method,
                    s_max=est.s_max,
                    r_max=est.r_max,
                )
            )
        oracle_values[eta] = estimates[0].value
        shape_values[eta] = estimates[2].value

    lines = [f"patch side={side}, X*={cfg.xstar_side}"]
    if cfg.geometry_kind is GeometryKind.PERIODIC_SQUARES and len(oracle_values) > 1:
        vals = list(oracle_values.values())
        lines.append(f"oracle max/min ratio across eta: {max(vals) / min(vals):.3f}")
    if cfg.geometry_kind is GeometryKind.FILAMENT and len(oracle_values) > 1:
        es = sorted(e for e in oracle_values if e is not None)
        slope, r2 = fit_loglinear(
            [math.log2(1.0 / e) for e in es], [oracle_values[e] for e in es]
        )
        lines.append(f"oracle growth vs log2(1/eta): slope={slope:.3f} R2={r2:.3f}")
    return records, "\n".join(lines)


def run_solve(cfg):
    """One fine reference plus one multiscale solve; errors for both spaces."""
    eta = cfg.eta_list[0]
    H = cfg.H_list[0]
    k = cfg.layers_for(H)
    pm, A, M, b, u_ref = _fine_problem(cfg, eta)
    cs = interp.build_coarse_space(pm, H)
    op = _build_interp(cfg, pm, cs)
    basis = lod.build_corrector_basis(pm, cs, op, A, k)
    start = time.perf_counter()
    sol = lod.multiscale_solve(pm, cs, basis, A, b)
    wall = 1e3 * (time.perf_counter() - start)
    rec = _error_record(cfg, eta, H, k, A, M, u_ref, sol.fine, wall)
    summary = (
        f"eta={eta} H={H} k={k}: H1 error {rec.h1_error:.6e} "
        f"(relative {rec.h1_rel:.6e}), L2 error {rec.l2_error:.6e}"
    )
    return [rec], summary


RUNNERS = {
    "convergence": run_convergence,
    "decay": run_decay,
    "poincare": run_poincare,
    "solve": run_solve,
}


def run(cfg):
    records, summary = RUNNERS[cfg.command](cfg)
    if cfg.output:
        write_csv(records, cfg.output)
    return records, summary
