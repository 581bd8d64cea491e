"""Command-line front end: ``zipf-lppl {zipf,fit,scan,synth}``.

Exit codes: 0 ok, 2 input error, 3 numerical failure, 4 statistical warning
escalated by ``--strict``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import warnings
from pathlib import Path

from . import __version__
from .calibration import (
    JLS, ZIPF, FitConfig, FitWindow, fit_nested, fit_window, load_config,
)
from .errors import DomainError, FitError, InputError, RankDeficiencyError
from .inference import (
    pooled_wilks, scan_windows, wilks_statistic, write_scan_csv, write_summary_csv,
)
from .lppl_core import params_to_dict
from .market_data import (
    build_factor_series, index_price, load_factor_csv, load_index, load_panel, write_factor_csv,
    write_panel_csv,
)

log = logging.getLogger("zipflppl")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_STRICT = 0, 2, 3, 4
CONFIG_ENV = "ZIPF_LPPL_CONFIG"


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command, config, inputs, seed, args):
    """Run manifest: everything that determines the outputs, nothing that does not."""
    manifest = {
        "command": command,
        "config": config,
        "inputs": {Path(p).name: _digest(p) for p in inputs},
        "seed": seed,
        "args": args,
        "version": __version__,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _resolve_day(value, dates, offset=0):
    """Accept a trading-day index or an ISO date present in ``dates``."""
    if value is None:
        return None
    try:
        return int(value)
    except ValueError:
        pass
    if value in dates:
        return dates.index(value) + offset
    raise InputError(f"{value!r} is neither a day index nor a known date")


def _resolve_config(args) -> FitConfig:
    path = args.config or os.environ.get(CONFIG_ENV)
    config = load_config(path) if path else FitConfig()
    return config.with_overrides(seed=args.seed, keep_best=args.keep_best)


def cmd_zipf(args):
    panel = load_panel(args.panel)
    t1 = _resolve_day(args.t1, panel.dates) if args.t1 is not None else 1
    t2 = _resolve_day(args.t2, panel.dates) if args.t2 is not None else panel.n_days - 1
    if args.index:
        index = load_index(args.index, panel.dates)
    else:
        index = index_price(panel, base_cap=args.base_cap, base_value=args.base_value, base_day=max(t1 - 1, 0))
    series = build_factor_series(panel, index, t1, t2)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_factor_csv(series, out)
    inputs = [args.panel] + ([args.index] if args.index else [])
    write_manifest(out.with_name(out.name + ".manifest.json"), "zipf", None, inputs, None,
                   {"t1": t1, "t2": t2, "base_cap": args.base_cap, "base_value": args.base_value})
    log.info("wrote %s (%d days)", out, len(series))
    return EXIT_OK


def _load_window_series(args):
    series = load_factor_csv(args.factor)
    dates = list(series.dates)
    t1 = _resolve_day(args.t1, dates, series.t1)
    t2 = _resolve_day(args.t2, dates, series.t1)
    return series, t1, t2


def cmd_fit(args):
    from .plotting import plot_fit, write_plot_data

    config = _resolve_config(args)
    series, t1, t2 = _load_window_series(args)
    window = FitWindow.from_series(series, t1, t2, min_window=config.min_window)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    problems = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if args.model == "both":
            jls, zipf = fit_nested(window, config)
            ensembles = {JLS: jls, ZIPF: zipf}
        else:
            ensembles = {args.model: fit_window(window, config, args.model)}
        for model, ens in ensembles.items():
            _write_json(out / f"fits_{model}.json", ens.to_records())
            if ens.n_distinct < config.keep_best:
                problems.append(f"{model}: only {ens.n_distinct} distinct fits among {len(ens)} kept")
            if not all(r.converged for r in ens.results):
                problems.append(f"{model}: non-converged fits kept")
        _write_json(out / "best_params.json",
                    {m: dict(params_to_dict(e.best.nl, e.best.lin), rss=e.best.rss) for m, e in ensembles.items()})
        if args.model == "both":
            single = wilks_statistic(jls.best.residuals, zipf.best.residuals)
            pooled = pooled_wilks(jls, zipf)
            _write_json(out / "wilks.json", {"single": single.to_dict(), "pooled": pooled.to_dict()})
            log.info("single-fit Wilks W=%.4g p=%.4g; pooled W=%.4g p=%.4g",
                     single.W, single.p_value, pooled.W, pooled.p_value)
    problems += [str(w.message) for w in caught]
    write_plot_data(out / "plot_data.csv", window.series, ensembles)
    if not args.no_plot:
        plot_fit(out / "fit.svg", window.series, ensembles, title=f"window [{t1}, {t2}]")
    write_manifest(out / "manifest.json", "fit", config.to_dict(), [args.factor], config.seed,
                   {"t1": window.t1, "t2": window.t2, "model": args.model, "plot": not args.no_plot})
    return _finish_warnings(problems, args.strict)


def cmd_scan(args):
    from .plotting import plot_scan

    config = _resolve_config(args)
    series, t1, t2 = _load_window_series(args)
    t1 = series.t1 if t1 is None else t1
    t2 = series.t2 - (args.n_t2 - 1) * args.step if t2 is None else t2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = scan_windows(series, t1, t2, args.n_t1, args.n_t2, args.step, config, jobs=args.jobs)
    write_scan_csv(result, out / "scan_fits.csv")
    write_summary_csv(result, out / "scan_summary.csv", qualified_only=args.qualified_only)
    if not args.no_plot:
        plot_scan(out / "scan.svg", result)
    write_manifest(out / "manifest.json", "scan", config.to_dict(), [args.factor], config.seed,
                   {"t1": t1, "t2": t2, "n_t1": args.n_t1, "n_t2": args.n_t2, "step": args.step,
                    "qualified_only": args.qualified_only, "plot": not args.no_plot})
    problems = [f"window {w}: {err}" for w, err in result.failures]
    short = [w for w, e in result.ensembles.items()
             if min(e[JLS].n_distinct, e[ZIPF].n_distinct) < config.keep_best]
    if short:
        problems.append(f"{len(short)} windows have fewer than {config.keep_best} distinct fits")
    log.info("%d windows, %d/%d fits (jls/zipf), %d failures", len(result.windows),
             result.n_fits(JLS), result.n_fits(ZIPF), len(result.failures))
    return _finish_warnings(problems, args.strict)


def cmd_synth(args):
    from .synth import SynthSpec, generate_panel, generate_series

    try:
        spec = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{args.spec}: invalid JSON ({exc})") from None
    if not isinstance(spec, dict) or not ({"series", "panel"} & spec.keys()):
        raise InputError("synthetic spec needs a 'series' and/or 'panel' section")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if "series" in spec:
        try:
            sspec = SynthSpec.from_dict(spec["series"])
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"invalid series spec: {exc}") from None
        write_factor_csv(generate_series(sspec), out / "factor.csv")
        _write_json(out / "truth.json", sspec.to_dict())
    if "panel" in spec:
        p = dict(spec["panel"])
        try:
            panel = generate_panel(
                int(p.pop("n_firms")), int(p.pop("t0")), int(p.pop("t2")),
                float(p.pop("tail_exponent", 1.5)), int(p.pop("seed", 0)),
                suspensions=[tuple(x) for x in p.pop("suspensions", [])],
                delistings=[tuple(x) for x in p.pop("delistings", [])],
                listings=[tuple(x) for x in p.pop("listings", [])],
                **p,
            )
        except (KeyError, TypeError) as exc:
            raise InputError(f"invalid panel spec: {exc}") from None
        write_panel_csv(panel, out / "panel.csv")
    write_manifest(out / "manifest.json", "synth", None, [args.spec], None, {})
    return EXIT_OK


def _finish_warnings(problems, strict):
    for p in problems:
        log.warning("%s", p)
    if problems and strict:
        return EXIT_STRICT
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="zipf-lppl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("zipf", help="build the integrated Zipf factor from a constituent panel")
    p.add_argument("panel", help="constituent CSV (date,firm,cap,status)")
    p.add_argument("--t1", help="first window day (index or ISO date); default 1")
    p.add_argument("--t2", help="last window day; default last panel day")
    p.add_argument("--index", help="index CSV (date,close) instead of computing it from the panel")
    p.add_argument("--base-cap", type=float, help="base capitalization (default: total on t1-1)")
    p.add_argument("--base-value", type=float, default=100.0)
    p.add_argument("--out", required=True, help="output factor CSV")
    p.set_defaults(func=cmd_zipf)

    def fit_options(p):
        p.add_argument("factor", help="factor CSV (t,date,ln_p,ln_pe,zeta)")
        p.add_argument("--t1")
        p.add_argument("--t2")
        p.add_argument("--config", help=f"config file (default ${CONFIG_ENV})")
        p.add_argument("--seed", type=int)
        p.add_argument("--keep-best", type=int)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--strict", action="store_true", help="exit 4 on statistical warnings")
        p.add_argument("--no-plot", action="store_true", help="skip the SVG figure")

    p = sub.add_parser("fit", help="calibrate one window with JLS, Zipf-augmented, or both models")
    fit_options(p)
    p.add_argument("--model", choices=[JLS, ZIPF, "both"], default="both")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("scan", help="fit a grid of windows and aggregate tc and gamma")
    fit_options(p)
    p.add_argument("--n-t1", type=int, default=15)
    p.add_argument("--n-t2", type=int, default=15)
    p.add_argument("--step", type=int, default=3)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--qualified-only", action="store_true",
                   help="aggregate only fits passing every bubble condition")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("synth", help="generate synthetic factor series and/or panels")
    p.add_argument("spec", help="JSON spec with 'series' and/or 'panel' sections")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FitError, RankDeficiencyError, DomainError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
