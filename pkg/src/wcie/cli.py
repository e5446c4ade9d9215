"""Command-line entry point: ``wcie simulate`` and ``wcie fit``.

Exit codes: 0 success, 2 invalid input or configuration, 3 convergence
failure, 4 file-system error.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from .config import ConfigError, load_config, pipeline_settings, simulation_config
from .data import DataError, LongitudinalDataset
from .exposure import MissingExposureError
from .inference import BootstrapError
from .mixed import CollinearityError, ConvergenceError
from .outputs import fit_summary, write_json, write_manifest, write_study_summary, write_trajectory_csv
from .parallel import default_workers, replicate_rng
from .pipeline import run_two_stage
from .plots import study_svg, trajectory_svg
from .simulator import STUDY_STREAM, generate_cohort, load_scenario_table, nhs_settings, run_replication_study, scenario
from .trajectory import MissingHistoryError

log = logging.getLogger("wcie")

EXIT_OK, EXIT_INVALID, EXIT_CONVERGENCE, EXIT_IO = 0, 2, 3, 4


class _ArgError(ValueError):
    pass


def _knot_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = text.split("..")
        lo, hi = int(lo), int(hi)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo..hi, got {text!r}") from None
    if lo < 0 or lo > hi:
        raise argparse.ArgumentTypeError(f"invalid knot range {text!r}")
    return lo, hi


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="YAML configuration file")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--threads", type=int, default=None, help="worker processes (default: available cores)")
    p.add_argument("--bootstrap", type=int, metavar="M", help="bootstrap replicates; 0 disables inference")
    p.add_argument("--knots-exposure", type=int, metavar="K", help="interior knots of the exposure spline")
    w = p.add_mutually_exclusive_group()
    w.add_argument("--knots-weights", type=int, metavar="K", help="interior knots of the weight spline")
    w.add_argument("--knots-weights-aic", type=_knot_range, metavar="LO..HI", help="select the weight knot count by AIC")
    p.add_argument("--weights", choices=["natural-cubic", "piecewise"], help="weight function basis")
    p.add_argument("--intervals", type=int, help="number of intervals for piecewise-constant weights")
    p.add_argument("--grid-step", type=float, help="grid spacing in years (default 1)")
    p.add_argument("--window", type=float, metavar="S", help="exposure window length in years (default 24)")
    p.add_argument("--level", type=float, help="confidence level (default 0.95)")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wcie", description="Trajectories of association between exposure history and a longitudinal outcome.")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="simulate cohorts and, with several replicates, a bias/coverage study")
    sim.add_argument("scenario", help="A, B, C, or a CSV weight table (t,gamma_I[,gamma_S])")
    sim.add_argument("--replicates", type=int, default=1, metavar="R")
    sim.add_argument("--n", type=int, help="subjects per cohort")
    sim.add_argument("--preset", help="design preset: main, spacing4, missing20, error18")
    sim.add_argument("--no-cohort-files", action="store_true", help="with R > 1, skip per-replicate data files")
    _common(sim)

    fit = sub.add_parser("fit", help="fit the two-stage model to exposure and outcome files")
    fit.add_argument("exposure", type=Path, help="long-format exposure CSV (times <= 0)")
    fit.add_argument("outcome", type=Path, help="long-format outcome CSV (times >= 0)")
    _common(fit)
    return parser


def _settings(args, doc, defaults):
    if args.intervals is not None and args.knots_weights is not None:
        raise _ArgError("--intervals and --knots-weights are exclusive")
    kind = args.weights
    knots = args.knots_weights
    if args.intervals is not None:
        if kind not in (None, "piecewise"):
            raise _ArgError("--intervals requires --weights piecewise")
        kind, knots = "piecewise", args.intervals
    threads = args.threads if args.threads is not None else int(doc.get("threads", default_workers()))
    if threads < 1:
        raise _ArgError("--threads must be >= 1")
    return pipeline_settings(
        doc,
        defaults,
        seed=args.seed,
        bootstrap=args.bootstrap,
        exposure_knots=args.knots_exposure,
        weight_knots=knots,
        weight_knots_aic=args.knots_weights_aic,
        weight_kind=kind,
        grid_step=args.grid_step,
        window=args.window,
        level=args.level,
        workers=threads,
    )


def _prepare_out(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    probe = path / ".wcie-write-test"
    probe.write_text("")
    probe.unlink()
    return path


def _settings_dict(settings) -> dict:
    d = asdict(settings)
    d.pop("workers")
    return d


def cmd_fit(args) -> int:
    doc = load_config(args.config)
    settings = _settings(args, doc, None)
    out = _prepare_out(args.out)
    exposure = LongitudinalDataset.from_csv(args.exposure, "exposure")
    outcome = LongitudinalDataset.from_csv(args.outcome, "outcome")
    for name in settings.exposure_covariates:
        if name not in exposure.covariates:
            raise DataError(f"{args.exposure}: covariate column {name!r} not found")
    for name in settings.outcome_covariates:
        if name not in outcome.covariates:
            raise DataError(f"{args.outcome}: covariate column {name!r} not found")
    log.info("read %d exposure records (%d subjects), %d outcome records (%d subjects)",
             len(exposure), len(exposure.subjects), len(outcome), len(outcome.subjects))
    if settings.bootstrap == 0:
        log.warning("bootstrap disabled: trajectory.csv carries point estimates only")
    result = run_two_stage(exposure, outcome, settings, strict=True)
    for stage, secs in result.timings.items():
        log.info("%s: %.2f s", stage, secs)
    files = [out / "trajectory.csv", out / "fit_summary.json", out / "trajectory.svg"]
    write_trajectory_csv(result.trajectory, files[0])
    write_json(fit_summary(result), files[1])
    files[2].write_text(trajectory_svg(result.trajectory), encoding="utf-8")
    write_manifest(out / "manifest.json", "fit", settings.seed, _settings_dict(settings),
                   inputs=[args.exposure, args.outcome], outputs=files, extra={"threads": settings.workers})
    print(f"overall mean association: level {result.trajectory.overall_mean_I:.6g}, slope {result.trajectory.overall_mean_S:.6g}")
    return EXIT_OK


def _write_cohort(directory: Path, exposure, outcome, truth) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    files = [directory / n for n in ("exposure.csv", "outcome.csv", "truth.csv", "truth_trajectory.csv")]
    exposure.to_csv(files[0])
    outcome.to_csv(files[1])
    truth.to_csv(files[2])
    truth.trajectory_to_csv(files[3])
    return files


def cmd_simulate(args) -> int:
    if args.replicates < 1:
        raise _ArgError("--replicates must be >= 1")
    doc = load_config(args.config)
    settings = _settings(args, doc, nhs_settings())
    sim_doc = dict(doc.get("simulation") or {})
    if args.preset is not None:
        sim_doc["preset"] = args.preset
    config = simulation_config({**doc, "simulation": sim_doc}, n_subjects=args.n)
    if Path(args.scenario).suffix.lower() == ".csv":
        scen = load_scenario_table(args.scenario, "custom", config.window)
    else:
        scen = scenario(args.scenario)
    if settings.window != config.window:
        raise _ArgError(f"estimator window {settings.window:g} differs from the simulated window {config.window:g}")
    out = _prepare_out(args.out)
    files: list[Path] = []
    t0 = time.perf_counter()
    if args.replicates == 1:
        files += _write_cohort(out, *generate_cohort(config, scen, settings.seed))
    else:
        summary = run_replication_study(config, scen, args.replicates, settings, settings.seed, settings.workers)
        log.info("replication study: %d ok, %d failed, %.1f s", summary.n_ok, summary.n_failed, time.perf_counter() - t0)
        if not args.no_cohort_files:
            width = len(str(args.replicates - 1))
            for r in range(args.replicates):
                seed_r = int(replicate_rng(settings.seed, STUDY_STREAM, r).integers(2**63))
                files += _write_cohort(out / f"replicate_{r:0{width}d}", *generate_cohort(config, scen, seed_r))
        files += [out / "summary.csv", out / "study.svg"]
        write_study_summary(summary, files[-2])
        files[-1].write_text(study_svg(summary, settings.level), encoding="utf-8")
        if summary.failures:
            (out / "failures.txt").write_text("\n".join(summary.failures) + "\n", encoding="utf-8")
        for w in ("I", "S"):
            log.info("gamma_%s: max |bias| %.3g, coverage %.3f..%.3f", w, abs(summary.bias(w)).max(),
                     summary.coverage(w).min(), summary.coverage(w).max())
    write_manifest(out / "manifest.json", "simulate", settings.seed, _settings_dict(settings), outputs=files,
                   extra={"scenario": scen.id, "replicates": args.replicates, "simulation": config.to_dict(), "threads": settings.workers})
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.INFO if args.verbose == 0 else logging.DEBUG
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    handler = cmd_fit if args.command == "fit" else cmd_simulate
    try:
        return handler(args)
    except (ConvergenceError, BootstrapError) as exc:
        log.error("%s", exc)
        return EXIT_CONVERGENCE
    except (DataError, ConfigError, _ArgError, MissingHistoryError, MissingExposureError, CollinearityError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
