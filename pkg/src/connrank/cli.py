"""Command-line front end.

Subcommands: synth, infer, reliability, sweep, sort, localize. Every command
writes its outputs plus ``run_metadata.json`` under ``--out-dir`` and exits
nonzero iff any error was reported.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .graphs import ConnectomeCache
from .matching import EXACT_MAX_N, GaConfig, sort_scans, subject_subsample_sweep
from .model import (
    ConnrankError,
    PipelineConfig,
    atomic_write_text,
    is_labeled,
    load_manifest,
    true_pairing,
    validate_dataset,
)
from .pipeline import build_connectomes, load_dataset, load_mask, resolve_parcellation
from .reliability import distance_matrix, edgewise_rank_sums, permutation_null, rank_matrix, rank_sum
from .synth import CohortSpec, generate_cohort, single_edge_latents, write_cohort

log = logging.getLogger("connrank")

DEFAULT_SEED = 0


class ManifestError(ConnrankError):
    pass


class Run:
    """Per-invocation bookkeeping: errors, outputs and the metadata file."""

    def __init__(self, args):
        self.args = args
        self.errors = []
        self.outputs = []
        self.extra = {}
        os.makedirs(args.out_dir, exist_ok=True)

    def out(self, name: str) -> str:
        path = os.path.join(self.args.out_dir, name)
        self.outputs.append(name)
        return path

    def error(self, msg: str) -> None:
        log.error(msg)
        self.errors.append(msg)

    def finish(self, config=None) -> int:
        meta = {
            "command": self.args.command,
            "version": __version__,
            "manifest": getattr(self.args, "manifest", None),
            "seed": self.args.seed,
            "config": None if config is None else config.to_dict(),
            "config_hash": None if config is None else config.config_hash(),
            "outputs": self.outputs,
            "errors": self.errors,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            **self.extra,
        }
        atomic_write_text(os.path.join(self.args.out_dir, "run_metadata.json"), json.dumps(meta, indent=2) + "\n")
        if self.errors:
            log.error("%d error(s) reported", len(self.errors))
            return 1
        return 0


def _write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def _load_config(args) -> PipelineConfig:
    if not args.config:
        return PipelineConfig()
    with open(args.config) as fh:
        return PipelineConfig.from_dict(json.load(fh))


def _load_scans(args, need_labels: bool):
    if not args.manifest:
        raise ManifestError("--manifest is required")
    scans = load_manifest(args.manifest)
    problems = validate_dataset(scans)
    if problems:
        raise ManifestError("invalid manifest: " + "; ".join(problems))
    if need_labels and not is_labeled(scans):
        raise ManifestError("this command needs subject_id and session for every scan")
    return scans


def _connectomes(args, scans, config, run: Run, series=None, parc=None):
    if series is None:
        series, parc = load_dataset(scans, config, jobs=args.jobs)
        scans = [dataclasses.replace(s, n_timepoints=ts.n_timepoints) for s, ts in zip(scans, series)]
        config.check_scans(scans)
    cache = ConnectomeCache(os.path.join(args.out_dir, "cache"))
    stats = {}
    graphs = build_connectomes(scans, series, parc, config, cache=cache, jobs=args.jobs, stats=stats)
    run.extra["cache"] = stats
    log.info("connectomes: %d from cache, %d computed", stats["hits"], stats["computed"])
    return graphs


def cmd_synth(args) -> int:
    run = Run(args)
    spec = CohortSpec(n_subjects=args.n_subjects, n_rois=args.n_rois, n_timepoints=args.n_timepoints,
                      tr_seconds=args.tr, subject_signal=args.subject_signal,
                      session_noise=args.session_noise, seed=args.seed)
    latents = None
    if args.single_edge:
        i, j = (int(x) for x in args.single_edge.split(","))
        latents = single_edge_latents(spec, (i, j))
    scans, series, _ = generate_cohort(spec, latents)
    if args.unlabeled:
        scans = [dataclasses.replace(s, subject_id=None, session_index=None) for s in scans]
    manifest = write_cohort(args.out_dir, scans, series)
    run.outputs.append(os.path.relpath(manifest, args.out_dir))
    run.extra["cohort"] = dataclasses.asdict(spec)
    log.info("wrote %d scans to %s", len(scans), manifest)
    return run.finish()


def cmd_infer(args) -> int:
    run = Run(args)
    config = _load_config(args)
    scans = _load_scans(args, need_labels=False)
    series, parc = load_dataset(scans, config, jobs=args.jobs)
    cache = ConnectomeCache(os.path.join(args.out_dir, "cache"))
    key = config.config_hash()
    stats = {"hits": 0, "computed": 0}
    for scan, ts in zip(scans, series):
        try:
            build_connectomes([scan], [ts], parc, config, cache=cache, stats=stats)
        except (ConnrankError, ValueError) as exc:
            run.error(str(exc))
    run.extra["cache"] = stats
    run.outputs.append(os.path.join("cache", key))
    log.info("%d connectomes cached (%d hits, %d computed)", stats["hits"] + stats["computed"],
             stats["hits"], stats["computed"])
    return run.finish(config)


def cmd_reliability(args) -> int:
    run = Run(args)
    config = _load_config(args)
    scans = _load_scans(args, need_labels=True)
    graphs = _connectomes(args, scans, config, run)
    d = distance_matrix(graphs, config.distance_metric, [s.scan_id for s in scans])
    r = rank_matrix(d)
    pairing = true_pairing(scans)
    res = permutation_null(r, pairing, args.permutations, args.seed)
    report = {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "metric": config.distance_metric,
        "scan_ids": [s.scan_id for s in scans],
        **res.to_dict(),
    }
    _write_json(run.out("reliability.json"), report)
    if args.svg:
        from .plots import heatmaps

        heatmaps(d.values, r.ranks, run.out("matrices.svg"))
    log.info("rank sum %d over %d scans, p = %.4g", res.rank_sum, res.n_scans, res.p_value)
    return run.finish(config)


def _parse_grid(text: str) -> list:
    return [float(x) for x in text.split(",") if x.strip()]


def cmd_sweep(args) -> int:
    run = Run(args)
    config = _load_config(args)
    scans = _load_scans(args, need_labels=True)
    pairing = true_pairing(scans)
    series, parc = load_dataset(scans, config, jobs=args.jobs)
    grid = _parse_grid(args.grid)
    if not grid:
        raise ValueError("empty grid")
    rows, xs, ys = [], [], []
    for value in grid:
        try:
            n_points = ""
            if args.axis == "time":
                cfg = config.replace(window_seconds=60.0 * value)
                n_points = min(min(ts.n_timepoints, int(np.floor(cfg.window_seconds / ts.tr_seconds + 1e-9)))
                               for ts in series)
                p = parc
            elif args.axis == "threshold":
                cfg = config.replace(threshold=None if value == 0 else value)
                p = parc
            else:
                n_rois = int(value)
                if n_rois != value:
                    raise ValueError(f"ROI count must be an integer, got {value}")
                cfg = config.replace(parcellation_source="uniform", n_rois_target=n_rois)
                p = resolve_parcellation(cfg, load_mask(cfg), series[0].n_rows)
            graphs = build_connectomes(scans, series, p, cfg, jobs=args.jobs)
            res = rank_sum(rank_matrix(distance_matrix(graphs, cfg.distance_metric)), pairing)
        except (ConnrankError, ValueError) as exc:
            run.error(f"{args.axis} = {value:g}: {exc}")
            continue
        rows.append([args.axis, f"{value:g}", res.rank_sum, graphs[0].n_rois, n_points, cfg.config_hash()])
        xs.append(value)
        ys.append(res.rank_sum)
    _write_csv(run.out(f"sweep_{args.axis}.csv"),
               ["axis", "value", "rank_sum", "n_rois", "n_datapoints", "config_hash"], rows)
    if args.svg and xs:
        from .plots import sweep_curve

        label = {"time": "acquisition time (min)", "threshold": "percentile threshold",
                 "rois": "number of ROIs"}[args.axis]
        sweep_curve(xs, ys, label, run.out(f"sweep_{args.axis}.svg"), floor=len(scans))
    return run.finish(config)


def _ga_config(args) -> GaConfig:
    return GaConfig(population_size=args.population, generations_max=args.generations,
                    mutation_rate=args.mutation_rate, elitism_count=args.elitism, seed=args.seed,
                    stall_generations=args.stall)


def cmd_sort(args) -> int:
    run = Run(args)
    config = _load_config(args)
    scans = _load_scans(args, need_labels=False)
    labeled = is_labeled(scans)
    ga_cfg = _ga_config(args)

    if args.time_grid:
        if not labeled:
            raise ManifestError("--time-grid needs a labeled manifest")
        series, parc = load_dataset(scans, config, jobs=args.jobs)
        grid = _parse_grid(args.time_grid)
        n_subjects = len(scans) // 2
        n_values = [int(x) for x in _parse_grid(args.subsample)] if args.subsample else [n_subjects]
        sweep = subject_subsample_sweep(series, scans, parc, config, n_values, grid,
                                        repeats=args.repeats, seed=args.seed, ga_config=ga_cfg)
        name = os.path.splitext(os.path.basename(args.manifest))[0]
        rows = []
        for entry in sweep:
            for rep, t in enumerate(entry["times"]):
                rows.append([name, config.parcellation_source, parc.n_cells, entry["N"], rep,
                             "" if t is None else f"{t:g}", t is not None])
        _write_csv(run.out("sort_sweep.csv"),
                   ["dataset", "parcellation", "n_rois", "N", "repeat", "min_time_minutes", "perfect"], rows)
        _write_json(run.out("sort_summary.json"),
                    {"dataset": name, "n_rois": parc.n_cells, "time_grid_minutes": grid,
                     "median_min_time_minutes": {str(e["N"]): e["median"] for e in sweep}})
        return run.finish(config)

    graphs = _connectomes(args, scans, config, run)
    r = rank_matrix(distance_matrix(graphs, config.distance_metric))
    res = sort_scans(r, ga_cfg, certify=not args.no_certify)
    ids = [s.scan_id for s in scans]
    report = {
        "config_hash": config.config_hash(),
        "seed": args.seed,
        "n_scans": len(scans),
        "fitness": res["fitness"],
        "ga_fitness": res["ga_fitness"],
        "generations": res["generations"],
        "pairs": [[ids[a], ids[b]] for a, b in res["pairing"].pairs()],
        "partner": res["pairing"].partner.tolist(),
    }
    if len(scans) <= EXACT_MAX_N and not args.no_certify:
        report["exact_fitness"] = res["exact_fitness"]
        report["exact_optimum_certified"] = res["exact_optimum_certified"]
    if labeled:
        report["perfect"] = res["pairing"] == true_pairing(scans)
    _write_json(run.out("sort.json"), report)
    log.info("best fitness %d (minimum possible %d)", res["fitness"], len(scans))
    return run.finish(config)


def cmd_localize(args) -> int:
    run = Run(args)
    config = _load_config(args)
    if config.threshold:
        run.error("localization needs unthresholded connectomes: thresholding zero-inflates "
                  "per-edge distances; remove 'threshold' from the config")
        return run.finish(config)
    scans = _load_scans(args, need_labels=True)
    graphs = _connectomes(args, scans, config, run)
    loc = edgewise_rank_sums(graphs, true_pairing(scans), percentile=args.percentile)
    order = np.lexsort((loc.edges[:, 1], loc.edges[:, 0], loc.edge_rank_sums))
    _write_csv(run.out("edges.csv"), ["roi_i", "roi_j", "edge_rank_sum"],
               [[int(loc.edges[k, 0]) + 1, int(loc.edges[k, 1]) + 1, int(loc.edge_rank_sums[k])] for k in order])
    roi_order = np.lexsort((np.arange(loc.n_rois), -loc.roi_scores))
    _write_csv(run.out("rois.csv"), ["roi", "score"], [[int(i) + 1, int(loc.roi_scores[i])] for i in roi_order])
    run.extra["low_edge_threshold"] = loc.low_edge_threshold
    return run.finish(config)


COMMANDS = {
    "synth": cmd_synth,
    "infer": cmd_infer,
    "reliability": cmd_reliability,
    "sweep": cmd_sweep,
    "sort": cmd_sort,
    "localize": cmd_localize,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", help="dataset manifest (JSON)")
    common.add_argument("--config", help="pipeline config (JSON)")
    common.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"random seed (default {DEFAULT_SEED})")
    common.add_argument("--out-dir", default="connrank-out", help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="connrank", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic test-retest cohort")
    p.add_argument("--n-subjects", type=int, default=20)
    p.add_argument("--n-rois", type=int, default=64)
    p.add_argument("--n-timepoints", type=int, default=300)
    p.add_argument("--tr", type=float, default=2.0)
    p.add_argument("--subject-signal", type=float, default=1.0)
    p.add_argument("--session-noise", type=float, default=0.05)
    p.add_argument("--single-edge", help="'i,j': only this edge (0-based) differs between subjects")
    p.add_argument("--unlabeled", action="store_true", help="omit subject/session labels from the manifest")

    sub.add_parser("infer", parents=[common], help="compute and cache connectomes")

    p = sub.add_parser("reliability", parents=[common], help="rank sum with permutation p-value")
    p.add_argument("--permutations", "-B", type=int, default=1000)
    p.add_argument("--svg", action="store_true", help="also write distance/rank heatmaps")

    p = sub.add_parser("sweep", parents=[common], help="rank sum across a parameter grid")
    p.add_argument("--axis", choices=("time", "rois", "threshold"), required=True)
    p.add_argument("--grid", required=True, help="comma-separated values (minutes, ROI counts or percentiles)")
    p.add_argument("--svg", action="store_true")

    p = sub.add_parser("sort", parents=[common], help="unsupervised test-retest pairing")
    p.add_argument("--population", type=int, default=200)
    p.add_argument("--generations", type=int, default=500)
    p.add_argument("--mutation-rate", type=float, default=0.2)
    p.add_argument("--elitism", type=int, default=4)
    p.add_argument("--stall", type=int, default=50)
    p.add_argument("--no-certify", action="store_true", help="skip the exact optimum check")
    p.add_argument("--time-grid", help="comma-separated minutes: report minimal time to a perfect sort")
    p.add_argument("--subsample", help="comma-separated subject counts for the subset sweep")
    p.add_argument("--repeats", type=int, default=20)

    p = sub.add_parser("localize", parents=[common], help="edge-wise rank sums and ROI scores")
    p.add_argument("--percentile", type=float, default=5.0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConnrankError, ValueError, OSError) as exc:
        log.error("%s", exc)
        os.makedirs(args.out_dir, exist_ok=True)
        run = Run(args)
        run.errors.append(str(exc))
        run.finish()
        return 1


if __name__ == "__main__":
    sys.exit(main())
