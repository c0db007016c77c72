"""
Command-line entry point.

    groundseg synth       synthetic scan/label pairs
    groundseg preprocess  scans -> pillar tensors + pillar labels
    groundseg train       pillar tensors -> checkpoint + JSONL log
    groundseg infer       scan + checkpoint -> per-point predictions
    groundseg eval        predictions vs labels -> metric report
    groundseg bench       per-stage runtime report
    groundseg complexity  per-layer parameter / MAC table

Exit codes: 0 ok, 2 usage, 3 data error, 4 configuration-hash conflict.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from .blob import read_blob, write_blob
from .config import RunConfig
from .errors import ConfigHashConflict, GroundSegError, InvalidParam
from .lidar_io import (PointCloud, generate_scene, random_scene_spec, read_labels, read_scan,
                       write_labels, write_scan)
from .metrics import accumulate, fmt_score, scores
from .pillars import PillarBatch, PillarLabels, label_pillars, pillarize

log = logging.getLogger("groundseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONFLICT = 0, 2, 3, 4
PILLAR_MAGIC = b"GSPL"


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _config(args) -> RunConfig:
    overrides = {}
    for name in ("seed", "budget", "undersample", "batch_size", "steps", "epochs", "threshold", "k"):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    if getattr(args, "no_normals", False):
        overrides["use_normals"] = False
    if getattr(args, "corrected_normal_sign", False):
        overrides["corrected_normal_sign"] = True
    return RunConfig.load(getattr(args, "config", None), **overrides)


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _scan_pairs(root: Path) -> list[tuple[Path, Optional[Path]]]:
    """(scan, label-or-None) pairs from a KITTI sequence dir, a flat dir or a file."""
    if root.is_file():
        scans = [root]
    elif (root / "velodyne").is_dir():
        scans = sorted((root / "velodyne").glob("*.bin"))
    else:
        scans = sorted(root.glob("*.bin"))
    pairs = []
    for s in scans:
        cand = [s.with_suffix(".label"), s.parent.parent / "labels" / (s.stem + ".label")]
        pairs.append((s, next((c for c in cand if c.exists()), None)))
    return pairs


def load_cloud(scan: Path, label: Optional[Path]) -> PointCloud:
    cloud = read_scan(scan)
    if label is not None:
        if cloud.dropped:
            raise GroundSegError(f"{scan}: labels cannot be aligned after dropping "
                                 f"{cloud.dropped} non-finite points")
        cloud = read_labels(label, cloud)
    return cloud


def preprocess_cloud(cloud: PointCloud, cfg: RunConfig, seed: int):
    """undersample -> normals -> pillarize -> pillar labels."""
    from .geometry import estimate_normals
    from .sampling import undersample, undersample_uniform

    if cfg.undersample == "controlled":
        cloud = undersample(cloud, cfg.budget, cfg.section_interval, seed, cfg.grid.x_range[1])
    elif cfg.undersample == "uniform":
        cloud = undersample_uniform(cloud, cfg.budget, seed)
    normals = estimate_normals(cloud, cfg.k, cfg.corrected_normal_sign).normals if cfg.use_normals else None
    grid = pillarize(cloud, normals, cfg.grid, seed, with_normals=cfg.use_normals)
    labels = label_pillars(grid, cloud.labels, cfg.ground_classes, cfg.pillar_ground_threshold) \
        if cloud.labels is not None else None
    return cloud, grid, labels


def save_pillars(path: Path, batch: PillarBatch, labels: Optional[PillarLabels], cfg: RunConfig,
                 seed: int, source: str = "") -> None:
    arrays = {"features": batch.features.astype("<f4"), "counts": batch.counts.astype("<i4"),
              "coords": batch.coords.astype("<i4")}
    if labels is not None:
        arrays["labels"] = labels.labels.astype("u1")
        arrays["ground_fraction"] = labels.ground_fraction.astype("<f4")
    meta = {"grid": list(cfg.grid.shape), "features": batch.features.shape[-1], "seed": seed,
            "config_hash": cfg.hash, "preprocess_hash": cfg.preprocess_hash, "source": source}
    write_blob(path, PILLAR_MAGIC, arrays, meta)


def load_pillars(path: Path) -> tuple[PillarBatch, Optional[PillarLabels], dict]:
    a, meta = read_blob(path, PILLAR_MAGIC)
    P = len(a["counts"])
    batch = PillarBatch(a["features"].astype(np.float32), a["counts"].astype(np.int64),
                        a["coords"].astype(np.int64), np.zeros(P, np.int64), 1)
    labels = PillarLabels(a["labels"], a["ground_fraction"].astype(np.float64)) if "labels" in a else None
    return batch, labels, meta


def _check_hash(kind: str, found: str, expected: str, force: bool) -> None:
    if found != expected:
        msg = f"{kind} was produced with preprocessing config {found}, current config is {expected}"
        if not force:
            raise ConfigHashConflict(msg + " (use --force to override)")
        log.warning(msg)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _synth_one(job):
    out, i, seed, flat = job
    rng = np.random.default_rng([seed, i])
    spec = random_scene_spec(rng, tilted=False if flat else None)
    cloud = generate_scene(spec, int(rng.integers(2 ** 31)))
    write_scan(out / "velodyne" / f"{i:06d}.bin", cloud)
    write_labels(out / "labels" / f"{i:06d}.label", cloud.labels)
    return len(cloud)


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    (out / "velodyne").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    jobs = [(out, i, cfg.seed, args.flat) for i in range(args.scenes)]
    sizes = _map(_synth_one, jobs, args.jobs)
    files = {}
    for sub in ("velodyne", "labels"):
        for p in sorted((out / sub).iterdir()):
            files[f"{sub}/{p.name}"] = hashlib.sha256(p.read_bytes()).hexdigest()
    manifest = {"scenes": args.scenes, "seed": cfg.seed, "config_hash": cfg.hash, "files": files}
    _atomic_text(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    print(f"wrote {args.scenes} scenes ({sum(sizes)} points) to {out}")
    return EXIT_OK


def _map(fn, jobs, n_jobs: int):
    if n_jobs and n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def _preprocess_one(job):
    scan, label, out, cfg_dict, seed = job
    cfg = RunConfig.from_dict(cfg_dict)
    cloud = load_cloud(scan, label)
    _, grid, labels = preprocess_cloud(cloud, cfg, seed)
    path = out / (scan.stem + ".pillars")
    save_pillars(path, grid.to_batch(), labels, cfg, seed, str(scan))
    return path.name, len(grid.coords)


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs = _scan_pairs(Path(args.scans))
    if not pairs:
        raise GroundSegError(f"no scans under {args.scans}")
    jobs = [(s, l, out, cfg.to_dict(), cfg.seed + i) for i, (s, l) in enumerate(pairs)]
    for name, n in _map(_preprocess_one, jobs, args.jobs):
        print(f"{name}: {n} pillars")
    return EXIT_OK


def _load_dataset(root: Path, cfg: RunConfig, force: bool):
    data = []
    for p in sorted(root.glob("*.pillars")):
        batch, labels, meta = load_pillars(p)
        _check_hash(str(p), meta["preprocess_hash"], cfg.preprocess_hash, force)
        if labels is None:
            raise GroundSegError(f"{p} has no pillar labels")
        data.append((batch, labels))
    return data


def cmd_train(args) -> int:
    from .model import save_checkpoint, train

    cfg = _config(args)
    data = _load_dataset(Path(args.data), cfg, args.force)
    val = _load_dataset(Path(args.val), cfg, args.force) if args.val else None
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".jsonl")
    lines = []

    def on_record(rec):
        rec = {**rec, "config_hash": cfg.hash}
        lines.append(json.dumps(rec))
        print(json.dumps(rec), flush=True)

    res = train(data, cfg, steps=cfg.steps or None, validation=val, on_record=on_record)
    res.model.load_state_dict(res.best_state)
    save_checkpoint(args.out, res.model, cfg, {"best_miou": res.best_miou, "steps": len(res.losses)})
    _atomic_text(log_path, "\n".join(lines) + "\n")
    print(f"checkpoint {args.out} (best pillar IoU {fmt_score(res.best_miou)})")
    return EXIT_OK


def write_predictions(path: Path, labels: np.ndarray, prob: np.ndarray, cfg: RunConfig) -> None:
    rows = [f"# groundseg predictions config_hash={cfg.hash} preprocess_hash={cfg.preprocess_hash} "
            f"points={len(labels)}"]
    for i, (l, p) in enumerate(zip(labels, prob)):
        rows.append(f"{i} {int(l)} {'nan' if np.isnan(p) else format(p, '.6f')}")
    _atomic_text(path, "\n".join(rows) + "\n")


def read_predictions(path: Path) -> tuple[np.ndarray, dict]:
    meta = {}
    labels = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                meta.update(kv.split("=", 1) for kv in line[1:].split() if "=" in kv)
                continue
            if line.strip():
                labels.append(int(line.split()[1]))
    return np.asarray(labels, np.int8), meta


def cmd_infer(args) -> int:
    from .model import infer, load_checkpoint

    model, cfg, _ = load_checkpoint(args.checkpoint)
    if args.threshold is not None:
        cfg = cfg.replace(threshold=args.threshold)
    cloud = read_scan(args.scan)
    res = infer(cloud, model, cfg)
    write_predictions(Path(args.out), res.point_labels, res.point_prob, cfg)
    n_ground = int((res.point_labels == 1).sum())
    unscored = int((res.point_labels < 0).sum())
    timing = " ".join(f"{k}={v * 1e3:.1f}ms" for k, v in res.timings.items())
    print(f"{len(cloud)} points, {n_ground} ground, {unscored} unscored | {timing}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    pred, pmeta = read_predictions(Path(args.pred))
    if args.config and pmeta.get("preprocess_hash"):
        _check_hash(args.pred, pmeta["preprocess_hash"], cfg.preprocess_hash, args.force)
    truth_path = Path(args.truth)
    if truth_path.suffix == ".label":
        raw = np.fromfile(truth_path, dtype="<u4")
        if len(raw) != len(pred):
            raise GroundSegError(f"{len(raw)} labels vs {len(pred)} predictions")
        sem = raw & 0xFFFF
        truth = np.isin(sem, cfg.ground_classes).astype(np.int8)
        truth[pred < 0] = -1
    else:
        truth, tmeta = read_predictions(truth_path)
        if "preprocess_hash" in tmeta and "preprocess_hash" in pmeta:
            _check_hash(str(truth_path), tmeta["preprocess_hash"], pmeta["preprocess_hash"], args.force)
        if len(truth) != len(pred):
            raise GroundSegError(f"{len(truth)} labels vs {len(pred)} predictions")
    excluded = int(((pred < 0) | (truth < 0)).sum())
    report = {"point": _score_block(accumulate(pred, truth)), "excluded_points": excluded,
              "config_hash": pmeta.get("config_hash", "")}
    if args.scan and truth_path.suffix == ".label":
        cloud = read_scan(args.scan)
        grid = pillarize(cloud, None, cfg.grid, with_normals=False)
        sem_lab = label_pillars(grid, sem, cfg.ground_classes, cfg.pillar_ground_threshold).labels
        pred_pts = pred.copy()
        pred_pts[pred_pts < 0] = 0
        pred_lab = label_pillars(grid, np.where(pred_pts == 1, 1, 0), (1,), 0.5).labels
        report["pillar"] = _score_block(accumulate(pred_lab, sem_lab))
    _emit_report(report, args.json)
    return EXIT_OK


def _score_block(c) -> dict:
    return {"tp": c.tp, "tn": c.tn, "fp": c.fp, "fn": c.fn, **scores(c).as_dict()}


def _emit_report(report: dict, as_json: bool) -> None:
    print(json.dumps(report, sort_keys=True))
    if as_json:
        return
    print(f"{'level':<8}{'accuracy':>10}{'ground-IoU (mIoU)':>20}{'F1':>10}")
    for level in ("point", "pillar"):
        if level in report:
            b = report[level]
            print(f"{level:<8}{fmt_score(b['accuracy']):>10}{fmt_score(b['ground_iou']):>20}{fmt_score(b['f1']):>10}")
    print(f"excluded (out-of-range) points: {report['excluded_points']}")


def cmd_bench(args) -> int:
    import torch

    from .metrics import bench
    from .model import GSECNet, ModelConfig, Pipeline, load_checkpoint

    if args.checkpoint:
        model, cfg, _ = load_checkpoint(args.checkpoint)
    else:
        cfg = _config(args)
        torch.manual_seed(cfg.seed)
        model = GSECNet(ModelConfig.from_run(cfg)).eval()
    if args.scans:
        frames = [load_cloud(s, None) for s, _ in _scan_pairs(Path(args.scans))]
    else:
        rng = np.random.default_rng(cfg.seed)
        frames = [generate_scene(random_scene_spec(rng), i) for i in range(args.frames)]
    report = bench(Pipeline(model, cfg).stages(), frames, args.warmup, args.reps, config_hash=cfg.hash)
    print(report.table())
    if args.json_out:
        _atomic_text(Path(args.json_out), json.dumps(report.as_dict(), indent=1))
    return EXIT_OK


def cmd_complexity(args) -> int:
    from .model import ModelConfig
    from .neuralnet.complexity import count_complexity

    cfg = _config(args)
    report = count_complexity(ModelConfig.from_run(cfg), cfg.max_points)
    if args.json:
        print(json.dumps({"params": report.params, "macs": report.macs,
                          "encoder_macs": report.total("encoder", "macs"),
                          "unet_macs": report.total("unet", "macs"),
                          "layers": [vars(l) for l in report.layers]}))
    else:
        print(report.table())
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="groundseg", description="Pillar-based LiDAR ground segmentation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML/JSON run configuration; flags override it")
        sp.add_argument("--seed", type=int)
        return sp

    sp = common(sub.add_parser("synth", help="generate synthetic scan/label pairs"))
    sp.add_argument("--scenes", type=int, default=8)
    sp.add_argument("--out", required=True)
    sp.add_argument("--flat", action="store_true", help="flat ground only")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(fn=cmd_synth)

    sp = common(sub.add_parser("preprocess", help="scans -> pillar tensors"))
    sp.add_argument("--scans", required=True, help="sequence dir, dir of .bin files, or one .bin")
    sp.add_argument("--out", required=True)
    sp.add_argument("--undersample", choices=["controlled", "uniform", "none"])
    sp.add_argument("--budget", type=int)
    sp.add_argument("--k", type=int)
    sp.add_argument("--no-normals", action="store_true")
    sp.add_argument("--corrected-normal-sign", action="store_true")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(fn=cmd_preprocess)

    sp = common(sub.add_parser("train", help="train on preprocessed pillar tensors"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--val")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--log", help="JSONL training log (default: next to checkpoint)")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--no-normals", action="store_true")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("infer", help="per-point ground labels for one scan")
    sp.add_argument("--scan", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--threshold", type=float)
    sp.set_defaults(fn=cmd_infer)

    sp = common(sub.add_parser("eval", help="score predictions against labels"))
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True, help="SemanticKITTI .label or a prediction file")
    sp.add_argument("--scan", help="scan file; enables pillar-level scores for .label truth")
    sp.add_argument("--json", action="store_true", help="machine-readable output only")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(fn=cmd_eval)

    sp = common(sub.add_parser("bench", help="per-stage runtime"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--scans")
    sp.add_argument("--frames", type=int, default=4, help="synthetic frames when --scans is absent")
    sp.add_argument("--warmup", type=int, default=1)
    sp.add_argument("--reps", type=int, default=3)
    sp.add_argument("--json-out")
    sp.set_defaults(fn=cmd_bench)

    sp = common(sub.add_parser("complexity", help="parameter / MAC table"))
    sp.add_argument("--no-normals", action="store_true")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(fn=cmd_complexity)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigHashConflict as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFLICT
    except InvalidParam as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GroundSegError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
