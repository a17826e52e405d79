"""Command line front end: config parsing, runs, sweeps and decay fits.

Config grammar (one statement per line)::

    # comment            ; comment
    [section]
    key = value          # trailing comment after whitespace

Sections and keys are fixed (see :data:`SCHEMA`); unknown sections or keys,
malformed values and out-of-domain values are rejected with the key name and
line number.  Only ``[params]`` is mandatory.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import logging
import math
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .params import ParameterError, PhysicalParams, check_coefficient_condition, derive_params


NOISE_FLOOR = 1e-12
BELOW_NOISE = "below noise floor"


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        full = f"{prefix}: {message}" if prefix else message
        if key is not None and key not in message:
            full = f"{full} (key {key!r})"
        super().__init__(full)
        self.key = key
        self.line = line


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int(text: str) -> int:
    return int(text.strip())


def _float(text: str) -> float:
    v = float(text.strip())
    if not math.isfinite(v):
        raise ValueError(f"expected a finite number, got {text!r}")
    return v


def _str(text: str) -> str:
    return text.strip()


def _opt_str(text: str):
    t = text.strip()
    return None if t in ("", "none") else t


# section -> key -> (parser, default); None default in [params] means required
SCHEMA: dict[str, dict[str, tuple]] = {
    "params": {
        "gamma": (_float, None),
        "reynolds": (_float, None),
        "weissenberg": (_float, None),
        "n_param": (_float, None),
        "r_param": (_float, None),
    },
    "grid": {
        "n1": (_int, 16),
        "n2": (_int, 16),
        "length1": (_float, 1.0),
        "length2": (_float, 1.0),
        "n_modes": (_int, 20),
        "n_r": (_int, 24),
        "n_theta": (_int, 48),
    },
    "scenario": {
        "initial": (_str, "perturbation"),
        "epsilon": (_float, 1e-2),
        "initial_file": (_opt_str, None),
        "u0": (_str, "zero"),
        "u0_amplitude": (_float, 0.0),
        "u0_mode": (_int, 1),
        "sigma_mode": (_str, "corotational"),
        "dt": (_float, 1e-2),
        "t_end": (_float, 1.0),
        "scheme": (_str, "splitting"),
        "splitting": (_str, "lie"),
        "picard_max": (_int, 20),
        "transport": (_str, "central"),
        "advection": (_bool, True),
        "stress_coupling": (_bool, True),
        "smooth_passes": (_int, 0),
        "clip_negative": (_bool, False),
    },
    "run": {
        "seed": (_int, 0),
        "sample_every": (_int, 1),
    },
    "tolerances": {
        "picard_tol": (_float, 1e-12),
        "cfl": (_float, 1.0),
    },
    "output": {
        "ledger": (_str, "ledger.csv"),
        "dump_h": (_opt_str, None),
        "dump_velocity": (_opt_str, None),
        "checkpoint": (_opt_str, None),
        "basis_cache": (_opt_str, None),
    },
    "theory": {
        "c_product": (_float, 1.0),
        "k1": (_float, 1.0),
        "k2": (_float, 1.0),
        "k3": (_float, 1.0),
    },
}

_INT_DOMAINS = {
    ("grid", "n1"): 3, ("grid", "n2"): 3, ("grid", "n_modes"): 1, ("grid", "n_r"): 2,
    ("grid", "n_theta"): 4, ("scenario", "u0_mode"): 1, ("scenario", "picard_max"): 1,
    ("scenario", "smooth_passes"): 0, ("run", "sample_every"): 1, ("run", "seed"): 0,
}
_POSITIVE = {
    ("grid", "length1"), ("grid", "length2"), ("scenario", "dt"), ("tolerances", "picard_tol"),
    ("tolerances", "cfl"), ("theory", "c_product"), ("theory", "k1"), ("theory", "k2"), ("theory", "k3"),
}
_NONNEG = {("scenario", "epsilon"), ("scenario", "t_end"), ("scenario", "u0_amplitude")}


@dataclass
class RunConfig:
    params: PhysicalParams
    values: dict = field(default_factory=dict)  # (section, key) -> value
    lines: dict = field(default_factory=dict)  # (section, key) -> line number
    path: str | None = None

    def get(self, section: str, key: str):
        return self.values[(section, key)]

    def section(self, name: str) -> dict:
        return {k: self.values[(name, k)] for k in SCHEMA[name]}

    def scenario(self):
        from .coupled_solver import Scenario

        s = self.section("scenario")
        s.update(seed=self.get("run", "seed"), picard_tol=self.get("tolerances", "picard_tol"),
                 cfl=self.get("tolerances", "cfl"))
        return Scenario(**s)

    def with_value(self, section: str, key: str, text: str) -> "RunConfig":
        """Copy with one entry overridden from its text form (validated)."""
        lines = "\n".join(self.echo().splitlines())
        return parse_config_text(lines, path=self.path, overrides={(section, key): text})

    def echo(self) -> str:
        """Canonical text of the full config, defaults included."""
        out = []
        for sec, keys in SCHEMA.items():
            out.append(f"[{sec}]")
            for key in keys:
                if sec == "params":
                    v = getattr(self.params, key)
                else:
                    v = self.values[(sec, key)]
                out.append(f"{key} = {_render(v)}")
            out.append("")
        return "\n".join(out)


def _render(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_TRAILING_COMMENT = re.compile(r"\s+[#;].*$")


def parse_config_text(text: str, path=None, overrides: dict | None = None) -> RunConfig:
    raw: dict[tuple[str, str], tuple[str, int]] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = _TRAILING_COMMENT.sub("", line).strip()
        if not s or s[0] in "#;":
            continue
        if s.startswith("["):
            if not s.endswith("]"):
                raise ConfigError(f"malformed section header {s!r}", line=lineno, path=path)
            section = s[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(
                    f"unknown section [{section}] (known: {', '.join(SCHEMA)})", line=lineno, path=path
                )
            continue
        if "=" not in s:
            raise ConfigError(f"expected 'key = value', got {s!r}", line=lineno, path=path)
        key, value = (p.strip() for p in s.split("=", 1))
        if section is None:
            raise ConfigError(f"key {key!r} outside any section", key=key, line=lineno, path=path)
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]", key=key, line=lineno, path=path)
        if (section, key) in raw:
            raise ConfigError(
                f"duplicate key {key!r} (first on line {raw[(section, key)][1]})", key=key, line=lineno, path=path
            )
        raw[(section, key)] = (value, lineno)
    for k, v in (overrides or {}).items():
        if k[0] not in SCHEMA or k[1] not in SCHEMA[k[0]]:
            raise ConfigError(f"unknown key {k[0]}.{k[1]}", key=k[1])
        raw[k] = (v, raw.get(k, (None, None))[1])

    values, lines = {}, {}
    for sec, keys in SCHEMA.items():
        for key, (conv, default) in keys.items():
            if (sec, key) in raw:
                text_v, lineno = raw[(sec, key)]
                try:
                    v = conv(text_v)
                except ValueError as exc:
                    raise ConfigError(f"{key}: {exc}", key=key, line=lineno, path=path) from None
                lines[(sec, key)] = lineno
            elif sec == "params":
                raise ConfigError(f"missing required key {key!r} in [params]", key=key, path=path)
            else:
                v = default
            _check_domain(sec, key, v, lines.get((sec, key)), path)
            values[(sec, key)] = v
    try:
        params = PhysicalParams(**{k: values[("params", k)] for k in SCHEMA["params"]})
    except ParameterError as exc:
        line = lines.get(("params", exc.field))
        raise ConfigError(str(exc), key=exc.field, line=line, path=path) from None
    cfg = RunConfig(params, values, lines, None if path is None else str(path))
    try:
        cfg.scenario().validate()
    except ValueError as exc:
        key = str(exc).split()[0]
        raise ConfigError(str(exc), key=key, line=lines.get(("scenario", key)), path=path) from None
    if values[("grid", "n_theta")] % 2:
        raise ConfigError("n_theta must be even", key="n_theta", line=lines.get(("grid", "n_theta")), path=path)
    return cfg


def _check_domain(sec, key, v, line, path):
    bad = None
    if (sec, key) in _INT_DOMAINS and v < _INT_DOMAINS[(sec, key)]:
        bad = f"must be >= {_INT_DOMAINS[(sec, key)]}"
    elif (sec, key) in _POSITIVE and not v > 0:
        bad = "must be > 0"
    elif (sec, key) in _NONNEG and v < 0:
        bad = "must be >= 0"
    if bad:
        raise ConfigError(f"{key} {bad}, got {v}", key=key, line=line, path=path)


def parse_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(), path=p)


# ---- decay fit -----------------------------------------------------------------

@dataclass(frozen=True)
class DecayFit:
    status: str  # "ok" or BELOW_NOISE
    rate: float = math.nan
    intercept: float = math.nan
    residual: float = math.nan
    n_points: int = 0


def fit_decay(t, y, skip_fraction: float = 0.2, t_max: float | None = None,
              noise_floor: float = NOISE_FLOOR) -> DecayFit:
    """Least-squares fit of ``log y = b - rate * t`` after the first ``skip_fraction`` of the samples.

    Returns a ``below noise floor`` sentinel when the windowed signal is not
    resolvable (any value at or below ``noise_floor``).
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.shape != y.shape or t.ndim != 1:
        raise ValueError("t and y must be 1-d arrays of equal length")
    if not 0.0 <= skip_fraction < 1.0:
        raise ValueError("skip_fraction must be in [0, 1)")
    start = int(math.floor(skip_fraction * t.size))
    mask = np.zeros(t.size, dtype=bool)
    mask[start:] = True
    if t_max is not None:
        mask &= t <= t_max
    tw, yw = t[mask], y[mask]
    if tw.size < 2 or np.any(~np.isfinite(yw)) or np.any(yw <= noise_floor):
        return DecayFit(BELOW_NOISE, n_points=int(tw.size))
    a = np.vstack([np.ones_like(tw), -tw]).T
    coef, *_ = np.linalg.lstsq(a, np.log(yw), rcond=None)
    resid = np.log(yw) - a @ coef
    return DecayFit("ok", float(coef[1]), float(coef[0]), float(np.sqrt(np.mean(resid**2))), int(tw.size))


# ---- commands --------------------------------------------------------------------

def build_discretization(cfg: RunConfig):
    from .coupled_solver import Discretization

    g = cfg.section("grid")
    return Discretization.build(
        cfg.params, g["n1"], g["n2"], g["n_modes"], g["n_r"], g["n_theta"], g["length1"], g["length2"],
        cache_dir=cfg.get("output", "basis_cache"),
    )


def _resolve(base: Path, p: str | None) -> Path | None:
    if p is None:
        return None
    q = Path(p)
    return q if q.is_absolute() else base / q


def execute(cfg: RunConfig, out_dir: Path, ledger_name: str | None = None) -> dict:
    """Run one configuration; the ledger is written even if the run fails."""
    from . import io as fio
    from .coupled_solver import run
    from .diagnostics import write_ledger_csv

    out_dir.mkdir(parents=True, exist_ok=True)
    disc = build_discretization(cfg)
    sc = cfg.scenario()
    records = []
    result = {"status": "ok", "error": ""}
    state = None
    try:
        state, _ = run(disc, sc, cfg.get("run", "sample_every"), callback=lambda s, r: records.append(r))
    except Exception as exc:  # recorded, not swallowed silently
        result.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    ledger = out_dir / (ledger_name or cfg.get("output", "ledger"))
    write_ledger_csv(records, ledger)
    result["ledger"] = str(ledger)
    result["records"] = records
    if state is not None:
        if (p := _resolve(out_dir, cfg.get("output", "dump_h"))) is not None:
            if p.suffix == ".csv":
                fio.write_h_field_csv(p, state.h, disc.qgrid)
            else:
                fio.write_h_field(p, state.h, disc.qgrid.delta)
        if (p := _resolve(out_dir, cfg.get("output", "dump_velocity"))) is not None:
            w = state.u.nodal
            if p.suffix == ".csv":
                fio.write_velocity_csv(p, disc.flow, w)
            else:
                fio.write_velocity(p, disc.flow, w)
        if (p := _resolve(out_dir, cfg.get("output", "checkpoint"))) is not None:
            fio.save_checkpoint(p, disc, state)
    return result


def cmd_check_params(cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    d = derive_params(cfg.params)
    rep = check_coefficient_condition(d, cfg.get("theory", "c_product"))
    for name in ("alpha1", "alpha2", "alpha3", "alpha4", "delta", "a_eq"):
        print(f"{name} = {getattr(d, name)!r}", file=out)
    print(f"coefficient_margin = {rep.margin!r}", file=out)
    print(f"coefficient_condition = {'satisfied' if rep.satisfied else 'violated'}", file=out)
    return 0


def cmd_run(cfg: RunConfig, out_dir: Path, out=None) -> int:
    out = out or sys.stdout
    res = execute(cfg, out_dir)
    recs = res["records"]
    if recs:
        last = recs[-1]
        print(f"t = {last.t!r}  |u| = {last.u_l2:.6e}  |psi| = {last.psi_l2m:.6e}  "
              f"mass_dev = {last.mass_dev_max:.3e}  margin = {last.energy_margin:.6e}", file=out)
    print(f"ledger: {res['ledger']}", file=out)
    if res["status"] != "ok":
        print(f"run failed: {res['error']}", file=sys.stderr)
        return 1
    return 0


def parse_axis(spec: str) -> tuple[str, str, list[str]]:
    """``section.key=v1,v2,...`` -> (section, key, values)."""
    if "=" not in spec or "." not in spec.split("=", 1)[0]:
        raise ConfigError(f"sweep axis must look like section.key=v1,v2; got {spec!r}")
    lhs, rhs = spec.split("=", 1)
    sec, key = lhs.strip().split(".", 1)
    if sec not in SCHEMA or key not in SCHEMA[sec]:
        raise ConfigError(f"unknown sweep key {lhs!r}", key=key)
    vals = [v.strip() for v in rhs.split(",") if v.strip()]
    if not vals:
        raise ConfigError(f"sweep axis {lhs!r} has no values", key=key)
    return sec, key, vals


SUMMARY_COLUMNS = ("index", "axes", "status", "coefficient_margin", "final_t", "final_u_l2",
                   "final_psi_l2m", "min_energy_margin", "psi_decay_rate", "ledger", "error")


def cmd_sweep(cfg: RunConfig, axes: list[str], out_dir: Path, out=None) -> int:
    out = out or sys.stdout
    parsed = [parse_axis(a) for a in axes]
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for idx, combo in enumerate(itertools.product(*[p[2] for p in parsed])):
        label = ";".join(f"{s}.{k}={v}" for (s, k, _), v in zip(parsed, combo))
        row = dict.fromkeys(SUMMARY_COLUMNS, "")
        row.update(index=idx, axes=label)
        try:
            point = cfg
            for (s, k, _), v in zip(parsed, combo):
                point = point.with_value(s, k, v)
            margin = check_coefficient_condition(derive_params(point.params), point.get("theory", "c_product")).margin
            row["coefficient_margin"] = repr(margin)
            res = execute(point, out_dir, ledger_name=f"point_{idx:03d}.csv")
            recs = res["records"]
            row.update(status=res["status"], error=res["error"], ledger=Path(res["ledger"]).name)
            if recs:
                row.update(final_t=repr(recs[-1].t), final_u_l2=repr(recs[-1].u_l2),
                           final_psi_l2m=repr(recs[-1].psi_l2m),
                           min_energy_margin=repr(min(r.energy_margin for r in recs)))
                fit = fit_decay([r.t for r in recs], [r.psi_l2m for r in recs])
                row["psi_decay_rate"] = repr(fit.rate) if fit.status == "ok" else fit.status
        except Exception as exc:
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
        print(f"[{idx}] {label}: {row['status']}", file=out)
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(f"summary: {out_dir / 'summary.csv'} ({len(rows)} points)", file=out)
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def cmd_fit_decay(ledger: Path, column: str = "psi_l2m", skip_fraction: float = 0.2,
                  t_max: float | None = None, out=None) -> int:
    out = out or sys.stdout
    from .diagnostics import CSV_COLUMNS, read_ledger_csv

    if column not in CSV_COLUMNS:
        raise ConfigError(f"unknown ledger column {column!r}")
    recs = read_ledger_csv(ledger)
    fit = fit_decay([r.t for r in recs], [getattr(r, column) for r in recs], skip_fraction, t_max)
    if fit.status != "ok":
        print(f"{column}: {fit.status}", file=out)
    else:
        print(f"{column}: rate = {fit.rate!r}  fit_residual = {fit.residual!r}  points = {fit.n_points}", file=out)
    return 0


def cmd_dump_basis(cfg: RunConfig, out_dir: Path, out=None) -> int:
    out = out or sys.stdout
    from .flow_domain import build_stokes, stokes_eigenbasis, FlowGrid

    g = cfg.section("grid")
    flow = FlowGrid(g["n1"], g["n2"], g["length1"], g["length2"])
    basis = stokes_eigenbasis(build_stokes(flow), g["n_modes"], cache_dir=out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "eigenvalues.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "lambda"])
        for i, lam in enumerate(basis.eigenvalues, start=1):
            w.writerow([i, repr(float(lam))])
    print(f"grid key {flow.key()}: lambda_1 = {basis.eigenvalues[0]!r}, {basis.n} modes -> {out_dir}", file=out)
    return 0


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fene2d", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress and basis caching")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="integrate one scenario and write the diagnostics ledger")
    p.add_argument("config")
    p.add_argument("-o", "--out-dir", default=".")
    p.add_argument("--echo", action="store_true", help="print the fully defaulted config first")

    p = sub.add_parser("sweep", help="Cartesian sweep over config keys")
    p.add_argument("config")
    p.add_argument("--axis", action="append", required=True, metavar="SECTION.KEY=V1,V2,...")
    p.add_argument("-o", "--out-dir", default="sweep")

    p = sub.add_parser("fit-decay", help="fit an exponential rate to a ledger column")
    p.add_argument("ledger")
    p.add_argument("--column", default="psi_l2m")
    p.add_argument("--skip", type=float, default=0.2, help="leading fraction of samples to drop")
    p.add_argument("--t-max", type=float, default=None)

    p = sub.add_parser("dump-basis", help="compute and cache the Stokes eigenbasis")
    p.add_argument("config")
    p.add_argument("-o", "--out-dir", default="basis")

    p = sub.add_parser("check-params", help="print derived constants and the coefficient margin")
    p.add_argument("config")
    p.add_argument("--echo", action="store_true")
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "fit-decay":
            return cmd_fit_decay(Path(args.ledger), args.column, args.skip, args.t_max)
        cfg = parse_config(args.config)
        if getattr(args, "echo", False):
            print(cfg.echo())
        if args.command == "run":
            return cmd_run(cfg, Path(args.out_dir))
        if args.command == "sweep":
            return cmd_sweep(cfg, args.axis, Path(args.out_dir))
        if args.command == "dump-basis":
            return cmd_dump_basis(cfg, Path(args.out_dir))
        return cmd_check_params(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
