"""Command-line entry point: ``polymer {constants,simulate,ensemble,trend,verify,oracle}``.

Run parameters come from a flat ``key = value`` file (``#`` starts a comment)
and ``--set key=value`` overrides; command-line values beat file values beat
defaults. Every run writes ``manifest.json`` (resolved configuration, where
each value came from, tool version) before any result file.

Exit codes: 0 success, 1 failed acceptance check or runtime failure,
2 configuration error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import math
import os
import sys
from importlib import metadata
from pathlib import Path

from . import ensemble as ens
from .integrator import PathAborted, PathState, SimConfig, gamma_plus_diagnostic, run_path, simulate
from .kernels import Kernel, KernelError
from .lemmalab import DEFAULT_BETAS, LabDomainError, verify_all
from .occupation import DriftQuerySpec
from .scaling import DomainError, compute_constants

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


# key -> (parser, default)
SCHEMA = {
    "kernel": (str, "durrett_rogers"),
    "beta": (float, 0.5),
    "c": (float, 0.0),
    "l": (float, 1.0),
    "t_end": (float, 100.0),
    "dt_base": (float, 0.1),
    "dt_safety": (float, 0.1),
    "bin_width": (float, 0.1),
    "query_mode": (str, "coarsened"),
    "opening_tolerance": (float, 0.1),
    "near_radius": (float, 0.5),
    "seed": (int, 0),
    "path_id": (int, 0),
    "noise_on": (_bool, True),
    "level_step": (float, 1.0),
    "tmin_fraction": (float, 0.125),
    "n_paths": (int, 100),
    "horizons": (_floats, (100.0, 1000.0)),
    "workers": (int, 0),
}

KERNELS = {
    "durrett_rogers": lambda p: Kernel.durrett_rogers(p["beta"]),
    "nonneg_power": lambda p: Kernel.nonneg_power(p["beta"]),
    "zero": lambda p: Kernel.zero(),
    "constant": lambda p: Kernel.constant(p["c"]),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        out[key] = value
    return out


def resolve(file_values: dict[str, str], overrides: dict[str, str]) -> tuple[dict, dict]:
    """Merge defaults < file < overrides; returns (values, sources)."""
    values, sources = {}, {}
    for key, (parse, default) in SCHEMA.items():
        values[key], sources[key] = default, "default"
        for layer, name in ((file_values, "file"), (overrides, "cli")):
            if key in layer:
                try:
                    values[key] = parse(layer[key])
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key}: {layer[key]!r} ({exc})") from exc
                sources[key] = name
    for key in overrides:
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
    return values, sources


def build_sim_config(p: dict) -> SimConfig:
    if p["kernel"] not in KERNELS:
        raise ConfigError(f"unknown kernel {p['kernel']!r}; choose from {sorted(KERNELS)}")
    try:
        kernel = KERNELS[p["kernel"]](p)
        spec = DriftQuerySpec(p["query_mode"], p["opening_tolerance"], p["near_radius"])
        return SimConfig(
            kernel=kernel, t_end=p["t_end"], dt_base=p["dt_base"], dt_safety=p["dt_safety"],
            bin_width=p["bin_width"], drift_spec=spec, seed=p["seed"], path_id=p["path_id"],
            noise_on=p["noise_on"], level_step=p["level_step"], tmin_fraction=p["tmin_fraction"],
        )
    except (KernelError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:  # pragma: no cover
        return "unknown"


def _dump(obj) -> str:
    return json.dumps(ens._finite(obj), indent=2, sort_keys=True) + "\n"


def _write(out: Path, name: str, text: str) -> None:
    (out / name).write_text(text, encoding="utf-8")


def _workers(arg, values) -> int | None:
    if arg is not None:
        return arg
    if os.environ.get("POLYMER_WORKERS"):
        return ens.default_workers()
    return values["workers"] or None


# -- commands -----------------------------------------------------------------------


def cmd_constants(args) -> int:
    try:
        c = compute_constants(args.beta, args.l)
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for key in ("beta", "l", "alpha", "c0", "xmax"):
        print(f"{key:12s} {getattr(c, key)!r}")
    print(f"{'drift_floor':12s} {c.drift_floor!r}")
    print(f"{'residual':12s} {c.residual!r}")
    return EXIT_OK


def cmd_simulate(args, values, out: Path) -> int:
    cfg = build_sim_config(values)
    state = None
    if args.resume:
        state, saved = PathState.load(args.resume)
        if saved != cfg:
            raise ConfigError("checkpoint was written with a different configuration")
    try:
        state, records = run_path(cfg, state)
    except PathAborted as exc:
        state = exc.state
        _write_path_outputs(out, cfg, state)
        raise
    _write_path_outputs(out, cfg, state)
    if args.checkpoint:
        state.save(args.checkpoint, cfg)
    return EXIT_OK


def _write_path_outputs(out: Path, cfg: SimConfig, state: PathState) -> None:
    alpha = cfg.alpha
    rows = [(t, x, g, x / t**alpha) for t, x, g in state.records]
    _write(out, "trajectory.csv", ens._csv(["t", "x", "G", "x_over_t_alpha"], rows))
    tab = state.hitting_table(alpha)
    rows = zip(tab["level"].tolist(), tab["T"].tolist(), [int(v) for v in tab["A_event"]], tab["G"].tolist(), tab["ratio"].tolist())
    _write(out, "hittings.csv", ens._csv(["level", "T", "A_event", "G_at_T", "ratio"], rows))
    summary = {
        "t": state.t,
        "x": state.x,
        "G": state.G,
        "rescaled": state.x / state.t**alpha if state.t > 0 else math.nan,
        "max_so_far": state.max_so_far,
        "min_so_far": state.min_so_far,
        "steps": state.step_index,
        "aborted": state.aborted,
        "gamma_plus": gamma_plus_diagnostic(state, cfg) if state.snap_t and not state.aborted else None,
    }
    _write(out, "summary.json", _dump(summary))


def _write_ensemble(out: Path, s: ens.EnsembleSummary) -> dict | None:
    out.mkdir(parents=True, exist_ok=True)
    _write(out, "summary.json", s.to_json())
    _write(out, "per_path.csv", s.per_path_csv())
    _write(out, "histogram.csv", s.histogram_csv())
    _write(out, "ratio_histogram.csv", s.ratio_histogram_csv())
    consts = ens.floor_constants(s.config)
    if consts is None:
        return None
    rep = ens.lemma4_report(s, consts)
    _write(out, "lemma4.json", _dump(rep))
    return rep


def cmd_ensemble(args, values, out: Path) -> int:
    cfg = build_sim_config(values)
    s = ens.run_ensemble(cfg, values["n_paths"], _workers(args.workers, values))
    _write_ensemble(out, s)
    return EXIT_OK


def cmd_trend(args, values, out: Path) -> int:
    horizons = sorted(values["horizons"])
    if len(horizons) < 2:
        raise ConfigError("trend needs at least two horizons")
    summaries, lemma4 = [], []
    for T in horizons:
        cfg = build_sim_config({**values, "t_end": T})
        s = ens.run_ensemble(cfg, values["n_paths"], _workers(args.workers, values))
        summaries.append(s)
        lemma4.append(_write_ensemble(out / f"t_end_{T!r}", s))
    try:
        report = ens.scaling_trend(summaries)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _write(out, "trend.csv", report.to_csv())
    _write(out, "trend.json", _dump({"trend": report.to_dict(), "lemma4": lemma4}))
    return EXIT_OK


def cmd_verify(args, values, out: Path) -> int:
    try:
        grid = _floats(args.beta_grid) if args.beta_grid is not None else DEFAULT_BETAS
    except ValueError as exc:
        raise ConfigError(f"bad --beta-grid: {exc}") from exc
    kw = {}
    if args.quick:
        kw = dict(lemma2_instances=10**3, lemma7_trials=10**4, exp_trials=10**4, sequence_terms=10**6)
    try:
        report = verify_all(grid, seed=values["seed"], **kw)
    except LabDomainError as exc:
        raise ConfigError(str(exc)) from exc
    _write(out, "report.json", report.to_json())
    _write(out, "report.txt", report.to_text())
    sys.stdout.write(report.to_text())
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_oracle(args, values, out: Path) -> int:
    if args.kind == "bm":
        n = args.n or 10**4
        cfg = SimConfig(Kernel.zero(), t_end=1.0, dt_base=0.01, seed=values["seed"])
        s = ens.run_ensemble(cfg, n, _workers(args.workers, values))
        x = s.column("terminal_x")
        mean, var = float(x.mean()), float(x.var(ddof=1))
        checks = {"mean_within_0.04": abs(mean) <= 0.04, "variance_in_[0.95,1.05]": 0.95 <= var <= 1.05}
        result = {"kind": "bm", "n_paths": n, "seed": values["seed"], "mean": mean, "variance": var,
                  "sign_balance": s.sign_balance, "checks": checks, "passed": all(checks.values())}
    else:
        dt = values["dt_base"]
        cfg = SimConfig(Kernel.constant(1.0), t_end=2.0, dt_base=dt, noise_on=False, seed=values["seed"])
        state = simulate(cfg)
        T1 = state.hittings().get(1.0, math.nan)
        checks = {"x2_within_2dt": abs(state.x - 2.0) <= 2.0 * dt, "T1_within_dt_of_sqrt2": abs(T1 - math.sqrt(2.0)) <= dt}
        result = {"kind": "ramp", "dt_base": dt, "x_at_2": state.x, "T1": T1, "checks": checks, "passed": all(checks.values())}
    _write(out, "oracle.json", _dump(result))
    print(_dump(result), end="")
    return EXIT_OK if result["passed"] else EXIT_FAIL


# -- plumbing -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="polymer", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("constants", help="print alpha, c0, x_max and the drift floor")
    c.add_argument("--beta", type=float, required=True)
    c.add_argument("--l", type=float, default=1.0)

    def common(sp):
        sp.add_argument("--config", help="flat key = value file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int, help="master seed (same as --set seed=...)")
        sp.add_argument("--out", default="out", help="output directory (default: out)")
        sp.add_argument("--workers", type=int, help="worker processes (env POLYMER_WORKERS)")
        return sp

    s = common(sub.add_parser("simulate", help="run one path"))
    s.add_argument("--checkpoint", help="write the final state here (.npz)")
    s.add_argument("--resume", help="continue from a checkpoint")
    common(sub.add_parser("ensemble", help="run many paths and pool diagnostics"))
    common(sub.add_parser("trend", help="ensembles over several horizons"))
    v = common(sub.add_parser("verify", help="numerical certification of the lemmas"))
    v.add_argument("--beta-grid", help="comma-separated betas (default 0.1,0.25,0.5,0.75,0.9)")
    v.add_argument("--quick", action="store_true", help="smaller sample sizes")
    o = common(sub.add_parser("oracle", help="closed-form integrator oracles"))
    o.add_argument("--kind", choices=("bm", "ramp"), default="bm")
    o.add_argument("--n", type=int, help="paths for the bm oracle (default 10000)")
    return p


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        out[k] = v
    if args.seed is not None:
        out["seed"] = str(args.seed)
    return out


COMMANDS = {
    "simulate": cmd_simulate,
    "ensemble": cmd_ensemble,
    "trend": cmd_trend,
    "verify": cmd_verify,
    "oracle": cmd_oracle,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "constants":
        return cmd_constants(args)
    try:
        file_values = {}
        if args.config:
            try:
                text = Path(args.config).read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from exc
            file_values = parse_config_text(text, args.config)
        values, sources = resolve(file_values, _overrides(args))
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers must be positive")
        if values["seed"] < 0 or values["seed"] >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if args.command in ("simulate", "ensemble"):
            build_sim_config(values)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for stale in ("FAILED",):
        (out / stale).unlink(missing_ok=True)
    manifest = {
        "command": args.command,
        "config_path": args.config,
        "overrides": _overrides(args),
        "output_dir": str(out),
        "master_seed": values["seed"],
        "resolved": {k: {"value": list(v) if isinstance(v, tuple) else v, "source": sources[k]} for k, v in values.items()},
        "version": _version(),
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    _write(out, "manifest.json", _dump(manifest))
    try:
        return COMMANDS[args.command](args, values, out)
    except ConfigError as exc:
        _write(out, "FAILED", f"config error: {exc}\n")
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # partial outputs stay, flagged
        _write(out, "FAILED", f"{type(exc).__name__}: {exc}\n")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
