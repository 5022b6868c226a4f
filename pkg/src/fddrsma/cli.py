"""Command-line front end: sweeps to CSV (plus SVG figures) and the self-test."""

from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
import tempfile
from pathlib import Path


from .channel import DEFAULT_CONFIG_TEXT, SystemConfig, load_config, parse_config_text
from .evaluation import METHODS, ExperimentSpec, Scenario, run_experiment
from .nomp import NompConfig
from .selftest import format_report, run_selftest
from .svgplot import line_chart

DEFAULT_VALUES = {
    "mse-sweep": "0,100e6,200e6,300e6,400e6,500e6,600e6",
    "sumse-sweep": "-10,0,10,20,30,40",
    "paths-sweep": "1,4,7,10",
}

# per-command overrides applied on top of the defaults and below --config
PRESETS = {
    "mse-sweep": (
        "channel.n_users = 1\nchannel.ul_carrier = 7.15e9\nchannel.dl_carrier = 7.15e9\n"
        "experiment.eta_sq_low = 1.0\nexperiment.n_paths = 3\n"
    ),
    "sumse-sweep": "",
    "paths-sweep": "experiment.snr_db = 20\nexperiment.eta_sq_low = 1.0\n",
}

CSV_COLUMNS = {
    "f": ["value", "method", "mse_mean", "mse_stderr", "mse_median", "mse_db"],
    "other": ["value", "method", "se_mean", "se_stderr", "pct_of_perfect"],
}


class CliError(Exception):
    pass


# ----------------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------------


def merged_sections(command: str, config_path: str | None) -> dict[str, dict[str, str]]:
    """Defaults, then the command preset, then the user file."""
    sections = parse_config_text(DEFAULT_CONFIG_TEXT)
    layers = [parse_config_text(PRESETS.get(command, ""))]
    if config_path:
        try:
            layers.append(load_config(config_path))
        except OSError as exc:
            raise CliError(f"cannot read config {config_path}: {exc.strerror or exc}") from exc
    for layer in layers:
        for name, items in layer.items():
            sections[name].update(items)
    return sections


def _num(sec, key, default, kind=float):
    raw = sec.get(key)
    if raw is None:
        return default
    return kind(float(raw)) if kind is int else kind(raw)


def build_spec(command: str, sections, args) -> ExperimentSpec:
    ch, nm, rs, ex = (sections[k] for k in ("channel", "nomp", "rsma", "experiment"))
    cfg = SystemConfig.from_mapping(ch)
    n_paths = _num(ex, "n_paths", 4, int)
    nomp = NompConfig(
        delay_oversampling=_num(nm, "delay_oversampling", 4, int),
        angle_oversampling=_num(nm, "angle_oversampling", 4, int),
        refine_cycles=_num(nm, "refine_cycles", 3, int),
        newton_steps=_num(nm, "newton_steps", 1, int),
        final_cycles=_num(nm, "final_cycles", 3, int),
        stop_mode=nm.get("stop_mode", "known_L"),
        n_paths=n_paths,
        false_alarm_rate=_num(nm, "false_alarm_rate", 1e-2),
        max_paths=_num(nm, "max_paths", 16, int),
    )
    methods = tuple(m.strip() for m in (args.methods or ex.get("methods", ",".join(METHODS))).split(",") if m.strip())
    if not methods:
        raise CliError("--methods must name at least one method")
    unknown = sorted(set(methods) - set(METHODS))
    if unknown:
        raise CliError(f"unknown methods {unknown}; choose from {', '.join(METHODS)}")
    if command == "paths-sweep" and "perfect_csit_ref" not in methods:
        methods = methods + ("perfect_csit_ref",)
    scenario = Scenario(
        n_paths=n_paths,
        ul_snr_db=_num(ex, "ul_snr_db", 10.0),
        snr_db=_num(ex, "snr_db", 20.0),
        eta_sq_low=_num(ex, "eta_sq_low", 1.0),
        alpha=_num(rs, "alpha", 0.1),
        epsilon=_num(rs, "epsilon", 0.1),
        max_iter=_num(rs, "max_iter", 500, int),
        methods=methods,
        innovation=ex.get("innovation", "path_power"),
    )
    raw_values = args.values if args.values is not None else ex.get("values", DEFAULT_VALUES[command])
    try:
        values = tuple(float(v) for v in raw_values.split(",") if v.strip())
    except ValueError as exc:
        raise CliError(f"cannot parse sweep values {raw_values!r}") from exc
    if not values:
        raise CliError("the sweep needs at least one value")
    axis = {"mse-sweep": "f", "sumse-sweep": "snr_db", "paths-sweep": "n_paths"}[command]
    if axis == "n_paths":
        values = tuple(int(v) for v in values)
    trials = args.trials if args.trials is not None else _num(ex, "trials", 100, int)
    seed = args.seed if args.seed is not None else _num(ex, "master_seed", 0, int)
    if trials < 1:
        raise CliError("--trials must be >= 1")
    return ExperimentSpec(
        axis=axis,
        values=values,
        trials=trials,
        master_seed=seed,
        scenario=scenario,
        cfg=cfg,
        nomp=nomp,
        workers=args.workers,
        name=command,
    )


# ----------------------------------------------------------------------------
# output
# ----------------------------------------------------------------------------


def atomic_write(path: Path, text: str) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror or exc}") from exc
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise CliError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _cell(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else format(v, ".10g")
    return str(v)


def render_csv(command: str, spec: ExperimentSpec, rows: list[dict], sections) -> str:
    buf = io.StringIO()
    buf.write(f"# fddrsma {command}\n")
    buf.write(f"# seed = {spec.master_seed}\n")
    buf.write(f"# trials = {spec.trials}\n")
    buf.write(f"# axis = {spec.axis}\n")
    for name in ("channel", "nomp", "rsma", "experiment"):
        for key, value in sorted(sections[name].items()):
            buf.write(f"# {name}.{key} = {value}\n")
    cols = CSV_COLUMNS["f" if spec.axis == "f" else "other"]
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in rows:
        writer.writerow([_cell(row[c]) for c in cols])
    return buf.getvalue()


def render_svg(command: str, spec: ExperimentSpec, rows: list[dict]) -> str:
    methods = list(dict.fromkeys(r["method"] for r in rows))
    series = []
    for m in methods:
        pts = [r for r in rows if r["method"] == m]
        if spec.axis == "f":
            series.append((m, [r["value"] / 1e6 for r in pts], [r["mse_db"] for r in pts]))
        elif spec.axis == "snr_db":
            series.append((m, [r["value"] for r in pts], [r["se_mean"] for r in pts]))
        else:
            series.append((m, [r["value"] for r in pts], [r["pct_of_perfect"] for r in pts]))
    if spec.axis == "f":
        return line_chart(series, "Channel reconstruction MSE", "DL offset f (MHz)", "MSE (dB)")
    if spec.axis == "snr_db":
        return line_chart(series, "Ergodic sum SE", "SNR P/sigma^2 (dB)", "sum SE (bit/s/Hz)")
    return line_chart(series, "Sum SE relative to perfect CSIT", "number of paths L", "percent of perfect CSIT")


def run_sweep(command: str, args) -> int:
    sections = merged_sections(command, args.config)
    spec = build_spec(command, sections, args)
    rows = run_experiment(spec)
    stem = command.replace("-", "_")
    out_dir = Path(args.out_dir)
    csv_path = out_dir / f"{stem}.csv"
    atomic_write(csv_path, render_csv(command, spec, rows, sections))
    print(f"wrote {csv_path}")
    if args.svg:
        svg_path = out_dir / f"{stem}.svg"
        atomic_write(svg_path, render_svg(command, spec, rows))
        print(f"wrote {svg_path}")
    return 0


def run_selftest_cmd(args) -> int:
    results = run_selftest(seed=args.seed if args.seed is not None else 0)
    print(format_report(results))
    return 0 if all(r.passed for r in results) else 1


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fddrsma", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("mse-sweep", "DL reconstruction MSE, CRLB and ECM trace versus extrapolation range"),
        ("sumse-sweep", "ergodic sum SE per method versus transmit SNR"),
        ("paths-sweep", "sum SE relative to perfect CSIT versus number of paths"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value file overriding the defaults")
        p.add_argument("--seed", type=_u64, help="master seed (default 0)")
        p.add_argument("--trials", type=int, help="Monte Carlo trials per sweep point")
        p.add_argument("--out-dir", default=".", help="directory for the CSV and SVG outputs")
        p.add_argument("--methods", help="comma list from: " + ", ".join(METHODS))
        p.add_argument("--values", help="comma list of sweep values (Hz, dB or path counts)")
        p.add_argument("--workers", type=int, default=1, help="worker processes")
        p.add_argument("--svg", dest="svg", action="store_true", default=True, help="also write an SVG figure")
        p.add_argument("--no-svg", dest="svg", action="store_false")
    p = sub.add_parser("selftest", help="finite-difference oracles and invariant checks")
    p.add_argument("--seed", type=_u64)
    p.add_argument("--config", help="accepted for interface symmetry; unused")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "selftest":
            return run_selftest_cmd(args)
        return run_sweep(args.command, args)
    except CliError as exc:
        parser.exit(2, f"fddrsma: error: {exc}\n")
    except ValueError as exc:
        parser.exit(2, f"fddrsma: error: {exc}\n")


if __name__ == "__main__":
    sys.exit(main())
