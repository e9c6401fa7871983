"""Command-line entry points.

Every command prints machine-readable JSON on stdout and logs to stderr.
Exit codes: 0 success, 1 check failed, 2 usage error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .clues import FilterConfig, FrameBundle, generate_clue_cloud
from .enhance import EnhanceConfig, finite_diff_check
from .errors import FormatError, InvalidInputError
from .formats import (
    IGNORE_LABEL,
    decode_depth_raster,
    decode_occupancy_mask,
    decode_semantic_raster,
    decode_voxel_labels,
    default_palette,
    encode_occupancy_mask,
    encode_voxel_labels,
    export_ply,
    parse_calibration,
    parse_poses,
)
from .geometry import compose, invert_pose
from .semi import (
    FrameInput,
    FrameStore,
    SplitManifest,
    accumulate_confusion,
    clue_predictor,
    compute_metrics,
    desk_predictor_factory,
    desk_trainer,
    sample_split,
    self_train,
    stub_trainer,
)
from .voxel import GridConfig, occupancy_of, voxelize

log = logging.getLogger("occlues")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3
CONFIG_VERSION = 1
GRAD_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    data_root: Path
    output_dir: Path
    grid: GridConfig
    filter: FilterConfig | None
    enhance: EnhanceConfig | None = None
    seed: int = 0
    stride: int = 1
    window: int = 1  # frames accumulated per target when --frames is not given

    @classmethod
    def load(cls, path: Path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config {path} is not valid JSON: {e}") from None
        if raw.get("version") != CONFIG_VERSION:
            raise UsageError(f"unsupported config version {raw.get('version')!r}, expected {CONFIG_VERSION}")
        base = path.parent
        filt = raw.get("filter", FilterConfig().to_dict())
        try:
            cfg = cls(
                data_root=base / raw.get("data_root", "."),
                output_dir=base / raw.get("output_dir", "out"),
                grid=GridConfig.from_dict(raw["grid"]) if "grid" in raw else GridConfig.semantic_kitti(),
                filter=None if filt is None else FilterConfig.from_dict(filt),
                enhance=EnhanceConfig.from_dict(raw["enhance"]) if raw.get("enhance") else None,
                seed=int(raw.get("seed", 0)),
                stride=int(raw.get("stride", 1)),
                window=int(raw.get("window", 1)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise UsageError(f"invalid config {path}: {e}") from None
        if not cfg.data_root.is_dir():
            raise DataError(f"data root does not exist: {cfg.data_root}")
        if cfg.stride < 1 or cfg.window < 1:
            raise UsageError("stride and window must be positive")
        return cfg


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _parse_frames(text: str) -> list[int]:
    """``"3-7"`` (inclusive), ``"1,4,5"`` or a mix of both."""
    out: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part:
                a, b = part.split("-", 1)
                out.extend(range(int(a), int(b) + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise UsageError(f"bad frame range {text!r}") from None
    if not out:
        raise UsageError(f"frame range {text!r} is empty")
    return out


# -- split -------------------------------------------------------------------------

def cmd_split(args) -> int:
    if not 0.0 < args.fraction <= 1.0:
        raise UsageError(f"--fraction must lie in (0, 1], got {args.fraction}")
    try:
        ids = [line.strip() for line in Path(args.ids).read_text().splitlines() if line.strip()]
    except FileNotFoundError:
        raise DataError(f"id file not found: {args.ids}") from None
    if not ids:
        raise DataError(f"id file {args.ids} is empty")
    manifest = sample_split(ids, args.fraction, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(manifest.to_json())
    _emit({"out": str(out), "labeled": len(manifest.labeled), "unlabeled": len(manifest.unlabeled)})
    return EXIT_OK


# -- gen-clues ---------------------------------------------------------------------

def _read(path: Path, what: str) -> bytes:
    try:
        return path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing {what}: {path}") from None


def load_frames(cfg: RunConfig, indices: Sequence[int]) -> tuple[list[FrameBundle], list]:
    """Frame bundles plus each frame's ego-to-world pose."""
    root = cfg.data_root
    calib = parse_calibration(_read(root / "calib.txt", "calibration").decode())
    cam_to_world = parse_poses(_read(root / "poses.txt", "pose file").decode())
    ego_from_cam = invert_pose(calib.cam_to_ego)
    frames, poses = [], []
    for i in indices:
        fid = f"{i:06d}"
        if not 0 <= i < len(cam_to_world):
            raise DataError(f"frame {fid} has no pose")
        depth = decode_depth_raster(_read(root / "depth" / f"{fid}.dpt", f"depth for frame {fid}"))
        sem = decode_semantic_raster(_read(root / "semantics" / f"{fid}.seg", f"semantics for frame {fid}"))
        pose = compose(cam_to_world[i], ego_from_cam)
        try:
            frames.append(FrameBundle(depth, sem, calib.camera(), pose))
        except InvalidInputError as e:
            raise DataError(f"frame {fid}: {e}") from None
        poses.append(pose)
    return frames, poses


def cmd_gen_clues(args) -> int:
    cfg = RunConfig.load(args.config)
    target = int(args.target)
    indices = _parse_frames(args.frames) if args.frames else list(range(target - cfg.window + 1, target + 1))
    if any(i < 0 for i in indices):
        raise UsageError("frame indices must be non-negative")
    frames, _ = load_frames(cfg, indices)
    _, (target_pose,) = load_frames(cfg, [target])
    cloud = generate_clue_cloud(frames, target_pose, cfg.filter, cfg.stride)
    grid = voxelize(cloud, cfg.grid)
    out = Path(args.out) if args.out else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{target:06d}"
    files = [(out / f"{stem}.label", "label", encode_voxel_labels(grid)),
             (out / f"{stem}.occ", "occupancy", encode_occupancy_mask(occupancy_of(grid)))]
    if args.ply:
        files.append((out / f"{stem}.ply", "ply", export_ply(cloud, default_palette(cloud.classes))))
    for path, kind, blob in files:
        path.write_bytes(blob)
        _emit({"kind": kind, "path": str(path), "bytes": len(blob)})
    log.info("clues for frame %s from %d frames: %d points, %d occupied voxels",
             stem, len(frames), len(cloud), int(np.count_nonzero(grid.labels)))
    return EXIT_OK


# -- eval --------------------------------------------------------------------------

def cmd_eval(args) -> int:
    grid = RunConfig.load(args.config).grid if args.config else GridConfig.semantic_kitti()
    gt_dir, pred_dir = Path(args.gt), Path(args.pred)
    for d in (gt_dir, pred_dir):
        if not d.is_dir():
            raise DataError(f"not a directory: {d}")
    names = sorted(p.name for p in gt_dir.glob("*.label"))
    if not names:
        raise DataError(f"no .label files in {gt_dir}")
    cm = None
    for name in names:
        try:
            gt = decode_voxel_labels(_read(gt_dir / name, "ground truth"), grid, IGNORE_LABEL)
            pred = decode_voxel_labels(_read(pred_dir / name, "prediction"), grid)
            if args.ignore:
                stem = name[:-len(".label")]
                mask = decode_occupancy_mask(_read(Path(args.ignore) / f"{stem}.invalid", "ignore mask"), grid.dims)
                gt = gt.with_mask(mask if gt.ignore_mask is None else (mask | gt.ignore_mask))
        except (FormatError, InvalidInputError) as e:
            raise DataError(f"{name}: {e}") from None
        cm = accumulate_confusion(pred, gt, cm)
    report = compute_metrics(cm).to_dict()
    report["frames"] = len(names)
    _emit(report)
    return EXIT_OK


# -- enhance-check -----------------------------------------------------------------

def _corrupt(dfeats, dparams):
    arrays = [t.copy() for t in dparams.tensors()]
    arrays[-2][0, 0] += 1.0  # last output projection weight
    return dfeats, type(dparams).from_tensors(arrays)


def cmd_enhance_check(args) -> int:
    try:
        config = EnhanceConfig(dims=tuple(args.dims), d=args.d, heads=len(args.dilations), kernel=args.kernel,
                               dilations=tuple(args.dilations), layers=args.layers, feat_dim=args.feat_dim,
                               embed_dim=args.embed_dim, num_classes=args.classes)
        report = finite_diff_check(config, args.seed, grad_hook=_corrupt if args.corrupt else None)
    except InvalidInputError as e:
        raise UsageError(str(e)) from None
    passed = report.max_rel_error < GRAD_TOLERANCE
    _emit({"max_rel_error": report.max_rel_error, "max_abs_error": report.max_abs_error,
           "location": report.location, "checked": report.checked, "passed": passed,
           "tolerance": GRAD_TOLERANCE})
    return EXIT_OK if passed else EXIT_CHECK


# -- selftrain ---------------------------------------------------------------------

def load_store(cfg: RunConfig, ids: Sequence[str]) -> FrameStore:
    """Clue grids from ``clues/``, ground truth from ``labels/`` (where present),
    features from ``feats/<id>.npy`` (optional)."""
    root = cfg.data_root
    inputs, labels = {}, {}
    for fid in ids:
        try:
            clues = decode_voxel_labels(_read(root / "clues" / f"{fid}.label", f"clues for frame {fid}"),
                                        cfg.grid, IGNORE_LABEL)
            feats_path = root / "feats" / f"{fid}.npy"
            feats = np.load(feats_path) if feats_path.is_file() else None
            inputs[fid] = FrameInput(fid, clues, feats)
            label_path = root / "labels" / f"{fid}.label"
            if label_path.is_file():
                labels[fid] = decode_voxel_labels(label_path.read_bytes(), cfg.grid, IGNORE_LABEL)
        except (FormatError, InvalidInputError) as e:
            raise DataError(f"frame {fid}: {e}") from None
    return FrameStore(inputs, labels)


def cmd_selftrain(args) -> int:
    cfg = RunConfig.load(args.config)
    try:
        manifest = SplitManifest.from_json(Path(args.manifest).read_text())
    except FileNotFoundError:
        raise DataError(f"manifest not found: {args.manifest}") from None
    except (json.JSONDecodeError, InvalidInputError) as e:
        raise DataError(f"bad manifest {args.manifest}: {e}") from None
    heldout = []
    if args.heldout:
        heldout = [x.strip() for x in Path(args.heldout).read_text().splitlines() if x.strip()]
    ids = sorted(set(manifest.labeled) | set(manifest.unlabeled) | set(heldout))
    store = load_store(cfg, ids)
    if args.trainer == "desk":
        feat_dims = {inp.feats.shape[1] for inp in store.inputs.values() if inp.feats is not None}
        feat_dim = feat_dims.pop() if len(feat_dims) == 1 else 1
        trainer = desk_trainer(cfg.grid, feat_dim, steps=args.steps, seed=cfg.seed)
        factory = desk_predictor_factory
    else:
        trainer, factory = stub_trainer, (lambda model: clue_predictor(cfg.grid))
    report = self_train(manifest, store, cfg.grid, trainer, factory, cfg.output_dir, heldout)
    text = report.to_json()
    out = Path(args.out) if args.out else cfg.output_dir / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if report.status == "ok" else EXIT_DATA


# -- synth -------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synthetic import Noise, SyntheticScene, small_scene, write_dataset

    scene = small_scene() if args.small else SyntheticScene()
    noise = Noise(args.depth_noise, args.outliers, args.flips) if (args.depth_noise or args.outliers or args.flips) \
        else None
    path = write_dataset(scene, Path(args.out), noise, args.seed)
    _emit({"config": str(path), "frames": scene.num_frames, "target": scene.num_frames - 1})
    return EXIT_OK


# -- entry point -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 already; keep the message on stderr
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="occlues", description="3D clue generation, enhancement checks and self-training.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("split", help="sample a labeled/unlabeled split")
    s.add_argument("--ids", required=True, help="text file, one frame id per line")
    s.add_argument("--fraction", type=float, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="manifest JSON to write")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("gen-clues", help="build the clue grid of a target frame")
    s.add_argument("--config", required=True)
    s.add_argument("--target", required=True, type=int, help="target frame index")
    s.add_argument("--frames", help="frame indices, e.g. '0-7' or '3,5,7' (default: the config window)")
    s.add_argument("--out", help="output directory (default: config output_dir)")
    s.add_argument("--ply", action="store_true", help="also export the filtered clue cloud as PLY")
    s.set_defaults(func=cmd_gen_clues)

    s = sub.add_parser("eval", help="score predicted label grids against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--ignore", help="directory of <id>.invalid bit masks")
    s.add_argument("--config", help="run config providing the grid (default: SemanticKITTI grid)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("enhance-check", help="finite-difference check of the enhance module's gradients")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dims", type=int, nargs=3, default=[4, 4, 2])
    s.add_argument("--d", type=int, default=8)
    s.add_argument("--kernel", type=int, default=3)
    s.add_argument("--dilations", type=int, nargs="+", default=[1, 2], help="one per head")
    s.add_argument("--layers", type=int, default=2)
    s.add_argument("--feat-dim", type=int, default=6)
    s.add_argument("--embed-dim", type=int, default=4)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_enhance_check)

    s = sub.add_parser("selftrain", help="run the three-step self-training loop")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--trainer", choices=["stub", "desk"], default="stub")
    s.add_argument("--steps", type=int, default=100, help="optimiser steps for the desk trainer")
    s.add_argument("--heldout", help="text file of held-out frame ids to score")
    s.add_argument("--out", help="report path (default: <output_dir>/report.json)")
    s.set_defaults(func=cmd_selftrain)

    s = sub.add_parser("synth", help="write a synthetic dataset for trying the pipeline")
    s.add_argument("--out", required=True)
    s.add_argument("--small", action="store_true", help="low-resolution scene")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--depth-noise", type=float, default=0.0)
    s.add_argument("--outliers", type=float, default=0.0)
    s.add_argument("--flips", type=float, default=0.0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # --help or a parse error; return the code instead of exiting
        return int(e.code or 0)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except UsageError as e:
        log.error("%s", e)
        return EXIT_USAGE
    except (DataError, FormatError) as e:
        log.error("%s", e)
        return EXIT_DATA
    except InvalidInputError as e:
        log.error("%s", e)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
