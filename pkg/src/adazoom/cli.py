"""Command-line entry point.

Exit codes: 0 on success, 1 on a configuration or usage error, 2 on a runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path
from typing import Callable, Sequence

from .config import ConfigError, RunConfig, load_config, write_config
from .detector import (DetectorConfig, captured_mass, collaborative_round, ct_weights, detections_from_jsonl,
                       detections_to_jsonl, full_pipeline)
from .geometry import Region, uniform_partition
from .metrics import build_eval_report, emit_report, EvalReport
from .plotting import plot_cost_vs_k, plot_pr_curves, plot_recall_vs_k, plot_training
from .scene import emit_scene_json, load_scene_dir, synth_suite
from .training import (CheckpointError, TrainedPolicy, evaluate_policy_reward, init_policy, load_checkpoint, save_checkpoint,
                       train)

log = logging.getLogger("adazoom")

# named uniform-partition variants: lists of (rows, cols) tilings
BASELINE_VARIANTS = {
    "1x1": [(1, 1)],
    "2x2": [(2, 2)],
    "3x3": [(3, 3)],
    "multi-scale": [(1, 1), (2, 2), (3, 3)],
    "multi-ratio": [(2, 3), (2, 2), (3, 2)],
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _dims(text: str) -> tuple[int, int]:
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ROWSxCOLS, got {text!r}") from None
    if rows < 1 or cols < 1:
        raise argparse.ArgumentTypeError("grid dimensions must be positive")
    return rows, cols


def _tilings(text: str) -> list[tuple[int, int]]:
    if text in BASELINE_VARIANTS:
        return BASELINE_VARIANTS[text]
    return [_dims(part) for part in text.split(",")]


def _nonneg(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=_positive, default=1, help="scene-level worker processes")
    common.add_argument("--state-grid", type=_dims, help="policy state grid, e.g. 32x32")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="adazoom", description="Adaptive zoom-region policy experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-scenes", parents=[common], help="write a synthetic scene suite")
    p.add_argument("--n", type=_positive, help="number of scenes")
    p.add_argument("--clusters", type=_dims, metavar="LOxHI", help="cluster-count range, e.g. 2x4")

    p = sub.add_parser("train", parents=[common], help="train a zoom policy")
    p.add_argument("--scenes", help="directory of scene JSON files")
    p.add_argument("--iterations", type=_nonneg)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=_positive)

    p = sub.add_parser("infer", parents=[common], help="greedy regions and detections")
    p.add_argument("--scenes")
    p.add_argument("--checkpoint")
    p.add_argument("--k", type=_nonneg, help="regions per scene")
    p.add_argument("--detector", help="detector JSON written by the ct command")

    p = sub.add_parser("baseline", parents=[common], help="uniform-partition regions and detections")
    p.add_argument("--scenes")
    p.add_argument("--grid", type=_tilings, default=None,
                   help="ROWSxCOLS, a comma-separated union, or one of " + ", ".join(BASELINE_VARIANTS))
    p.add_argument("--overlap", type=float, default=50.0, help="tile overlap in pixels")
    p.add_argument("--detector")

    p = sub.add_parser("eval", parents=[common], help="compare runs written by infer / baseline")
    p.add_argument("--scenes")
    p.add_argument("--runs", nargs="+", required=True, help="run directories")
    p.add_argument("--k-max", type=_nonneg, help="largest K for recall and cost curves")

    p = sub.add_parser("ct", parents=[common], help="collaborative training rounds")
    p.add_argument("--scenes")
    p.add_argument("--checkpoint")
    p.add_argument("--rounds", type=_positive, default=1)
    p.add_argument("--k", type=_nonneg)
    p.add_argument("--policy-iters", type=_nonneg)

    p = sub.add_parser("report", parents=[common], help="re-emit tables and figures from an eval directory")
    p.add_argument("--results", required=True, help="directory written by eval")
    return parser


def effective_config(args) -> RunConfig:
    """Defaults, then the config file, then flags."""
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.state_grid is not None:
        over["grid"] = args.state_grid
    for name in ("out", "scenes", "checkpoint"):
        if getattr(args, name, None) is not None:
            over[name] = getattr(args, name)
    if getattr(args, "k", None) is not None:
        over["k"] = args.k
    if args.command == "train":
        tr = {key: getattr(args, key) for key in ("iterations", "lr", "batch_size") if getattr(args, key) is not None}
        if tr:
            over["train"] = _replace(cfg.train, tr)
    if args.command == "ct":
        ct = {"k": args.k} if args.k is not None else {}
        if args.policy_iters is not None:
            ct["policy_iters"] = args.policy_iters
        if ct:
            over["ct"] = _replace(cfg.ct, ct)
    if args.command == "gen-scenes":
        suite = {}
        if args.n is not None:
            suite["n_scenes"] = args.n
        if args.clusters is not None:
            suite["clusters"] = args.clusters
        if suite:
            over["suite"] = replace(cfg.suite, **suite)
    return _replace(cfg, over)


def _replace(obj, changes: dict):
    try:
        return replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _require(cfg: RunConfig, *names: str) -> None:
    for name in names:
        if getattr(cfg, name) is None:
            raise ConfigError(f"--{name} is required (or set paths.{name} in the config)")
    if "scenes" in names and not Path(cfg.scenes).is_dir():
        raise ConfigError(f"scenes directory {cfg.scenes} does not exist")
    if "checkpoint" in names and not Path(cfg.checkpoint).is_file():
        raise ConfigError(f"checkpoint {cfg.checkpoint} does not exist")


def _out_dir(cfg: RunConfig) -> Path:
    if cfg.out is None:
        raise ConfigError("--out is required")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scenes(cfg: RunConfig):
    scenes = load_scene_dir(cfg.scenes)
    if not scenes:
        raise ConfigError(f"no scene files in {cfg.scenes}")
    return scenes


def _pmap(fn: Callable, items: Sequence, jobs: int) -> list:
    """Ordered map; results never depend on ``jobs``."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def _region_row(r: Region) -> list:
    return [r.x, r.y, r.w, r.h, r.scale_index, r.ratio_index]


def _write_run(out: Path, scenes, regions, detections) -> None:
    doc = {"scenes": [{"scene_id": s.source_id, "regions": [_region_row(r) for r in regs]}
                      for s, regs in zip(scenes, regions)]}
    (out / "regions.json").write_text(json.dumps(doc) + "\n")
    with (out / "detections.jsonl").open("w") as fh:
        for scene, dets in zip(scenes, detections):
            fh.write(detections_to_jsonl(scene.source_id, dets))


def _read_regions(run: Path) -> dict[str, list[Region]]:
    doc = json.loads((run / "regions.json").read_text())
    return {entry["scene_id"]: [Region(float(x), float(y), float(w), float(h), int(si), int(ri))
                                for x, y, w, h, si, ri in entry["regions"]]
            for entry in doc["scenes"]}


def _detector(cfg: RunConfig, path: str | None) -> RunConfig:
    if path is None:
        return cfg
    try:
        doc = json.loads(Path(path).read_text())
        doc.pop("seed", None)
        det = DetectorConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()})
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigError(f"detector file {path}: {exc}") from None
    return replace(cfg, detector=det)


# per-scene workers must be top-level so process pools can pickle them

def _infer_one(task):
    scene, policy, k, det = task
    regions = policy.regions(scene, k)
    return regions, full_pipeline(scene, regions, policy.zoom, det)


def _baseline_one(task):
    scene, tilings, overlap, zoom, det = task
    regions = [r for rows, cols in tilings for r in uniform_partition(scene.image_dims, rows, cols, overlap)]
    return regions, full_pipeline(scene, regions, zoom, det)


def cmd_gen_scenes(cfg: RunConfig, args) -> None:
    out = _out_dir(cfg)
    scenes = synth_suite(cfg.suite.n_scenes, cfg.scene_seed, cfg.suite.clusters, cfg.suite.scene)
    for scene in scenes:
        emit_scene_json(scene, out / f"{scene.source_id}.json")
    write_config(cfg, out)
    print(f"wrote {len(scenes)} scenes to {out}")


def cmd_train(cfg: RunConfig, args) -> None:
    _require(cfg, "scenes")
    scenes = _scenes(cfg)
    out = _out_dir(cfg)
    run = cfg.seeded()
    start = init_policy(run.grid, run.reward, run.train.n_hidden, run.train.seed)
    before = evaluate_policy_reward(start, scenes, run.train.T)
    policy, report = train(scenes, run.train, init=start)
    after = evaluate_policy_reward(policy, scenes, run.train.T)
    save_checkpoint(policy, out / "checkpoint.json")
    report.write_csv(out / "train_report.csv")
    plot_training(report.mean_return, out / "training_curve.png")
    summary = {"untrained_return": before, "trained_return": after, "iterations": run.train.iterations}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    write_config(cfg, out)
    print(f"greedy return {before['mean']:.4f} -> {after['mean']:.4f}; checkpoint {out / 'checkpoint.json'}")


def _policy(cfg: RunConfig) -> TrainedPolicy:
    try:
        return load_checkpoint(cfg.checkpoint, grid_dims=cfg.grid, zoom=cfg.zoom)
    except CheckpointError as exc:
        raise ConfigError(str(exc)) from None


def cmd_infer(cfg: RunConfig, args) -> None:
    cfg = _detector(cfg, args.detector)
    _require(cfg, "scenes", "checkpoint")
    scenes = _scenes(cfg)
    out = _out_dir(cfg)
    run = cfg.seeded()
    policy = _policy(run)
    results = _pmap(_infer_one, [(s, policy, run.k, run.detector) for s in scenes], args.jobs)
    _write_run(out, scenes, [r for r, _ in results], [d for _, d in results])
    write_config(cfg, out)
    print(f"inferred {len(scenes)} scenes with K={run.k}")


def cmd_baseline(cfg: RunConfig, args) -> None:
    cfg = _detector(cfg, args.detector)
    _require(cfg, "scenes")
    scenes = _scenes(cfg)
    out = _out_dir(cfg)
    run = cfg.seeded()
    tilings = args.grid or BASELINE_VARIANTS["2x2"]
    if args.overlap < 0:
        raise ConfigError("--overlap must be >= 0")
    try:
        results = _pmap(_baseline_one, [(s, tilings, args.overlap, run.zoom, run.detector) for s in scenes],
                        args.jobs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    _write_run(out, scenes, [r for r, _ in results], [d for _, d in results])
    (out / "baseline.json").write_text(json.dumps({"tilings": [list(t) for t in tilings],
                                                   "overlap": args.overlap}) + "\n")
    write_config(cfg, out)
    print(f"baseline {'+'.join(f'{r}x{c}' for r, c in tilings)} on {len(scenes)} scenes")


def _emit_comparison(reports: Sequence[EvalReport], out: Path) -> None:
    lines = ["name,AP,AP50,AP75,cost"]
    for rep in reports:
        cost = rep.cost[-1][1] if rep.cost else 0.0
        vals = [rep.ap, rep.ap50, rep.ap75]
        cells = ["" if v is None else f"{100 * v:.4f}" for v in vals]
        lines.append(",".join([rep.name, *cells, f"{cost:.6f}"]))
    (out / "comparison.csv").write_text("\n".join(lines) + "\n")
    plot_recall_vs_k(reports, out / "recall_vs_k.png")
    plot_cost_vs_k(reports, out / "cost_vs_k.png")
    for rep in reports:
        if rep.pr_curves:
            plot_pr_curves(rep, out / rep.name / "pr_curves.png")


def cmd_eval(cfg: RunConfig, args) -> None:
    _require(cfg, "scenes")
    scenes = _scenes(cfg)
    out = _out_dir(cfg)
    reports = []
    names = [Path(run).name for run in args.runs]
    if len(set(names)) != len(names):
        raise ConfigError("run directories must have distinct names")
    for run, name in zip(args.runs, names):
        run = Path(run)
        if not (run / "regions.json").is_file():
            raise ConfigError(f"{run} has no regions.json")
        by_scene = _read_regions(run)
        dets = detections_from_jsonl((run / "detections.jsonl").read_text())
        missing = [s.source_id for s in scenes if s.source_id not in by_scene]
        if missing:
            raise RuntimeError(f"{run}: no regions for scene {missing[0]}")
        regions = [by_scene[s.source_id] for s in scenes]
        report = build_eval_report(name, scenes, regions, dets, cfg.zoom, args.k_max, cfg.rho)
        emit_report(report, out / name)
        reports.append(report)
    _emit_comparison(reports, out)
    (out / "runs.json").write_text(json.dumps(names) + "\n")
    write_config(cfg, out)
    for rep in reports:
        print(f"{rep.name}: AP {100 * (rep.ap or 0):.2f}  cost {rep.cost[-1][1] if rep.cost else 0:.3f}")


def cmd_ct(cfg: RunConfig, args) -> None:
    _require(cfg, "scenes", "checkpoint")
    scenes = _scenes(cfg)
    out = _out_dir(cfg)
    run = cfg.seeded()
    policy = _policy(run)
    det = run.detector
    rounds = []
    for n in range(args.rounds):
        ct_cfg = replace(run.ct, seed=run.ct.seed + n)
        weights = ct_weights(policy, det, scenes, ct_cfg.k)
        before = captured_mass(policy, scenes, weights, ct_cfg.k)
        policy, det = collaborative_round(policy, det, scenes, ct_cfg)
        after = captured_mass(policy, scenes, weights, ct_cfg.k)
        rounds.append({"round": n, "captured_before": before, "captured_after": after,
                       "skill_offsets": list(det.skill_offsets)})
        log.info("round %d: captured (1-c) mass %.4f -> %.4f", n, before, after)
    save_checkpoint(policy, out / "checkpoint.json")
    det_doc = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(det).items() if k != "seed"}
    (out / "detector.json").write_text(json.dumps(det_doc, indent=1, sort_keys=True) + "\n")
    (out / "ct_summary.json").write_text(json.dumps({"rounds": rounds}, indent=1, sort_keys=True) + "\n")
    write_config(cfg, out)
    for r in rounds:
        print(f"round {r['round']}: captured mass {r['captured_before']:.4f} -> {r['captured_after']:.4f}")


def cmd_report(cfg: RunConfig, args) -> None:
    results = Path(args.results)
    if not results.is_dir():
        raise ConfigError(f"results directory {results} does not exist")
    out = Path(cfg.out) if cfg.out else results
    out.mkdir(parents=True, exist_ok=True)
    order = results / "runs.json"
    if order.is_file():
        files = [results / name / "report.json" for name in json.loads(order.read_text())]
        files = [f for f in files if f.is_file()]
    else:
        files = sorted(results.glob("*/report.json"))
    if not files:
        raise RuntimeError(f"no */report.json under {results}")
    reports = []
    for path in files:
        report = EvalReport.from_dict(json.loads(path.read_text()))
        emit_report(report, out / report.name)
        reports.append(report)
    _emit_comparison(reports, out)
    if out != results:
        (out / "runs.json").write_text(json.dumps([r.name for r in reports]) + "\n")
    print(f"re-emitted {len(reports)} reports to {out}")


COMMANDS = {
    "gen-scenes": cmd_gen_scenes,
    "train": cmd_train,
    "infer": cmd_infer,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "ct": cmd_ct,
    "report": cmd_report,
}


def run_command(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_command())
