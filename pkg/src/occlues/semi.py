"""Semi-supervised bookkeeping: split sampling, metrics, pseudo-labelling and
the three-step self-training loop.

Frame ids are strings throughout. A *predictor* maps a :class:`FrameInput` to
either a :class:`LabelGrid` or a ``(C + 1, H, W, Z)`` score volume; a
*trainer* maps training samples to an opaque model, and a predictor factory
turns that model into a predictor.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .clues import worker_count
from .enhance import (
    AdamState,
    EnhanceConfig,
    EnhanceParams,
    adam_step,
    enhance_backward,
    enhance_forward,
    init_params,
    mse_loss,
)
from .errors import InvalidInputError
from .formats import IGNORE_LABEL, decode_voxel_labels, encode_voxel_labels
from .voxel import GridConfig, LabelGrid

log = logging.getLogger(__name__)

GROUND_TRUTH = "ground-truth"
PSEUDO = "pseudo"


# -- splits ---------------------------------------------------------------------

@dataclass(frozen=True)
class PseudoEntry:
    id: str
    path: str


@dataclass(frozen=True)
class SplitManifest:
    labeled: tuple[str, ...]
    unlabeled: tuple[str, ...]
    seed: int
    fraction: float
    pseudo: tuple[PseudoEntry, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "labeled", tuple(str(i) for i in self.labeled))
        object.__setattr__(self, "unlabeled", tuple(str(i) for i in self.unlabeled))
        object.__setattr__(self, "pseudo", tuple(
            p if isinstance(p, PseudoEntry) else PseudoEntry(str(p["id"]), str(p["path"])) for p in self.pseudo))
        for name in ("labeled", "unlabeled"):
            ids = getattr(self, name)
            if len(set(ids)) != len(ids):
                raise InvalidInputError(f"duplicate ids in {name} list")
        both = set(self.labeled) & set(self.unlabeled)
        if both:
            raise InvalidInputError(f"ids both labeled and unlabeled: {sorted(both)[:5]}")
        pseudo_ids = [p.id for p in self.pseudo]
        if len(set(pseudo_ids)) != len(pseudo_ids):
            raise InvalidInputError("duplicate pseudo-label entries")
        stray = set(pseudo_ids) - set(self.unlabeled)
        if stray:
            raise InvalidInputError(f"pseudo-labelled ids not in the unlabeled set: {sorted(stray)[:5]}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "fraction": self.fraction,
            "labeled": list(self.labeled),
            "unlabeled": list(self.unlabeled),
            "pseudo": [{"id": p.id, "path": p.path} for p in self.pseudo],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitManifest":
        try:
            return cls(d["labeled"], d["unlabeled"], int(d["seed"]), float(d["fraction"]), d.get("pseudo", ()))
        except (KeyError, TypeError) as e:
            raise InvalidInputError(f"malformed manifest: {e}") from None

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        return cls.from_dict(json.loads(text))


def labeled_count(n: int, fraction: float) -> int:
    """round(fraction * n) with halves rounded up (Python's round() would go to even)."""
    return int(math.floor(fraction * n + 0.5))


def sample_split(all_ids: Sequence, fraction: float, seed: int) -> SplitManifest:
    """Uniformly sample ``round(fraction * N)`` labeled ids; both lists keep input order."""
    ids = [str(i) for i in all_ids]
    if not ids:
        raise InvalidInputError("cannot split an empty id list")
    if not (0.0 < fraction <= 1.0):
        raise InvalidInputError(f"fraction must lie in (0, 1], got {fraction}")
    if len(set(ids)) != len(ids):
        raise InvalidInputError("frame ids must be unique")
    n = labeled_count(len(ids), fraction)
    chosen = np.zeros(len(ids), dtype=bool)
    chosen[np.random.default_rng(seed).choice(len(ids), size=n, replace=False)] = True
    return SplitManifest(
        tuple(i for i, c in zip(ids, chosen) if c),
        tuple(i for i, c in zip(ids, chosen) if not c),
        int(seed), float(fraction),
    )


# -- metrics ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    counts: np.ndarray  # (C + 1, C + 1), rows ground truth, columns prediction
    ignored: int = 0

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0] - 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.counts.shape != other.counts.shape:
            raise InvalidInputError("confusion matrices cover different label spaces")
        return ConfusionMatrix(self.counts + other.counts, self.ignored + other.ignored)

    def equals(self, other: "ConfusionMatrix") -> bool:
        return self.ignored == other.ignored and np.array_equal(self.counts, other.counts)


def accumulate_confusion(pred: LabelGrid, gt: LabelGrid, cm: ConfusionMatrix | None = None) -> ConfusionMatrix:
    """Add one grid pair; voxels under the ground truth's ignore mask are only counted as ignored."""
    if pred.labels.shape != gt.labels.shape:
        raise InvalidInputError(f"prediction {pred.labels.shape} and ground truth {gt.labels.shape} differ in size")
    c = max(pred.config.num_classes, gt.config.num_classes)
    cm = cm if cm is not None else ConfusionMatrix.zeros(c)
    n = cm.num_classes + 1
    if c >= n:
        raise InvalidInputError(f"labels up to {c} do not fit a {n}x{n} confusion matrix")
    g = gt.labels.reshape(-1).astype(np.int64)
    p = pred.labels.reshape(-1).astype(np.int64)
    ignored = 0
    if gt.ignore_mask is not None:
        keep = ~gt.ignore_mask.reshape(-1)
        ignored = int(keep.size - keep.sum())
        g, p = g[keep], p[keep]
    add = np.bincount(g * n + p, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(cm.counts + add, cm.ignored + ignored)


def _pct(num, den) -> float | None:
    return None if den == 0 else 100.0 * num / den


@dataclass(frozen=True)
class MetricsReport:
    """All values in percent; None marks an undefined ratio (empty denominator)."""

    class_iou: dict[int, float | None]
    miou: float | None
    iou: float | None
    precision: float | None
    recall: float | None

    def to_dict(self) -> dict:
        return {
            "class_iou": {str(c): v for c, v in self.class_iou.items()},
            "miou": self.miou,
            "iou": self.iou,
            "precision": self.precision,
            "recall": self.recall,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls({int(c): v for c, v in d["class_iou"].items()}, d["miou"], d["iou"], d["precision"], d["recall"])


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    m = cm.counts
    class_iou: dict[int, float | None] = {}
    present = []
    for c in range(1, m.shape[0]):
        tp = int(m[c, c])
        fp = int(m[:, c].sum()) - tp
        fn = int(m[c, :].sum()) - tp
        class_iou[c] = _pct(tp, tp + fp + fn)
        if m[c, :].sum() > 0:
            present.append(c)
    miou = sum(class_iou[c] for c in present) / len(present) if present else None
    tp = int(m[1:, 1:].sum())
    fp = int(m[0, 1:].sum())
    fn = int(m[1:, 0].sum())
    return MetricsReport(class_iou, miou, _pct(tp, tp + fp + fn), _pct(tp, tp + fp), _pct(tp, tp + fn))


def evaluate(preds: Sequence[LabelGrid], gts: Sequence[LabelGrid]) -> MetricsReport:
    """Metrics of a whole set: one confusion matrix accumulated over all pairs."""
    cm = None
    for p, g in zip(preds, gts, strict=True):
        cm = accumulate_confusion(p, g, cm)
    if cm is None:
        raise InvalidInputError("nothing to evaluate")
    return compute_metrics(cm)


# -- predictors -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FrameInput:
    frame_id: str
    clues: LabelGrid | None = None
    feats: np.ndarray | None = None  # (H * W * Z, feat_dim) backbone features

    def without_clues(self) -> "FrameInput":
        return replace(self, clues=None)


Predictor = Callable[[FrameInput], Any]


def clues_as_pseudo_labels(clues: LabelGrid) -> LabelGrid:
    """Clue grid taken verbatim as labels; masked (unknown) voxels become empty."""
    labels = clues.labels
    if clues.ignore_mask is not None:
        labels = np.where(clues.ignore_mask, 0, labels)
    return LabelGrid(clues.config, labels)


def dilate_labels(grid: LabelGrid, iterations: int = 1) -> LabelGrid:
    """Fill each empty voxel with the most frequent class among its 26 neighbours
    (ties to the smaller id). Occupied voxels are left alone."""
    labels = np.asarray(grid.labels, dtype=np.int64)
    c = grid.config.num_classes
    for _ in range(iterations):
        padded = np.pad(labels, 1)
        votes = np.zeros((c + 1,) + labels.shape, dtype=np.int64)
        H, W, Z = labels.shape
        for dx in range(3):
            for dy in range(3):
                for dz in range(3):
                    if dx == dy == dz == 1:
                        continue
                    shifted = padded[dx:dx + H, dy:dy + W, dz:dz + Z]
                    for k in range(1, c + 1):
                        votes[k] += shifted == k
        best = np.argmax(votes[1:], axis=0) + 1  # first maximum is the smallest id
        has_vote = votes[1:].max(axis=0) > 0
        labels = np.where((labels == 0) & has_vote, best, labels)
    return LabelGrid(grid.config, labels)


def clue_predictor(grid: GridConfig) -> Predictor:
    """The clue baseline: predicts the frame's clues, or nothing when there are none."""
    def predict(inp: FrameInput) -> LabelGrid:
        return clues_as_pseudo_labels(inp.clues) if inp.clues is not None else LabelGrid.empty(grid)
    return predict


def dilation_predictor(grid: GridConfig, iterations: int = 1) -> Predictor:
    """A stub that hallucinates occluded space by growing the clues."""
    base = clue_predictor(grid)
    return lambda inp: dilate_labels(base(inp), iterations)


def to_label_grid(output, grid: GridConfig, min_score: float | None = None) -> LabelGrid:
    """Predictor output to labels: argmax over classes (ties to the smaller id).

    With ``min_score`` set, voxels whose best score falls below it are masked.
    """
    if isinstance(output, LabelGrid):
        if output.labels.shape != grid.dims:
            raise InvalidInputError(f"predicted grid {output.labels.shape} != configured {grid.dims}")
        return LabelGrid(grid, output.labels, output.ignore_mask)
    scores = np.asarray(output, dtype=np.float64)
    want = (grid.num_classes + 1,) + grid.dims
    if scores.shape != want:
        raise InvalidInputError(f"score volume {scores.shape} != expected {want}")
    labels = np.argmax(scores, axis=0)
    mask = None
    if min_score is not None:
        mask = scores.max(axis=0) < min_score
    return LabelGrid(grid, labels, mask)


# -- pseudo labels ----------------------------------------------------------------

@dataclass(frozen=True)
class PseudoLabelReport:
    written: tuple[str, ...]
    failures: tuple[tuple[str, str], ...]  # (frame id, message)


def _input_for(inputs, fid: str) -> FrameInput:
    return inputs(fid) if callable(inputs) else inputs[fid]


def generate_pseudo_labels(predictor: Predictor, frame_ids: Sequence[str], inputs, grid: GridConfig,
                           out_dir: Path, manifest: SplitManifest, min_score: float | None = None,
                           workers: int | None = None) -> tuple[SplitManifest, PseudoLabelReport]:
    """Predict every frame (in parallel), then write ``<out_dir>/<id>.label`` files and
    manifest entries in frame-id order. A failing frame is logged and skipped.

    ``inputs`` is a mapping or a callable from frame id to :class:`FrameInput`.
    Manifest paths are the file names relative to ``out_dir``.
    """
    out_dir = Path(out_dir)
    order = sorted(str(f) for f in frame_ids)

    def run(fid: str):
        try:
            return fid, to_label_grid(predictor(_input_for(inputs, fid)), grid, min_score), None
        except Exception as e:  # surfaced per frame in the report
            return fid, None, f"{type(e).__name__}: {e}"

    n = workers or worker_count()
    if n > 1 and len(order) > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(run, order))
    else:
        results = [run(f) for f in order]

    out_dir.mkdir(parents=True, exist_ok=True)
    entries = {p.id: p for p in manifest.pseudo}
    written, failures = [], []
    for fid, labels, err in results:
        if err is not None:
            log.warning("pseudo-labelling frame %s failed: %s", fid, err)
            failures.append((fid, err))
            continue
        name = f"{fid}.label"
        (out_dir / name).write_bytes(encode_voxel_labels(labels, IGNORE_LABEL if labels.ignore_mask is not None else None))
        entries[fid] = PseudoEntry(fid, name)
        written.append(fid)
    pseudo = tuple(entries[k] for k in sorted(entries))
    return replace(manifest, pseudo=pseudo), PseudoLabelReport(tuple(written), tuple(failures))


@dataclass(frozen=True)
class RosterEntry:
    frame_id: str
    source: str  # GROUND_TRUTH or PSEUDO
    path: str | None = None  # pseudo-label file


def merge_datasets(manifest: SplitManifest, base_dir: Path | None = None) -> list[RosterEntry]:
    """Labeled frames first (manifest order), then pseudo-labelled frames by id."""
    roster = [RosterEntry(i, GROUND_TRUTH) for i in manifest.labeled]
    for p in sorted(manifest.pseudo, key=lambda p: p.id):
        path = Path(base_dir) / p.path if base_dir is not None else Path(p.path)
        if not path.is_file():
            raise InvalidInputError(f"pseudo-label file for frame {p.id} is missing: {path}")
        roster.append(RosterEntry(p.id, PSEUDO, str(path)))
    ids = [r.frame_id for r in roster]
    if len(set(ids)) != len(ids):
        raise InvalidInputError("a frame appears twice in the training roster")
    return roster


# -- self-training ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TrainingSample:
    frame_id: str
    inputs: FrameInput
    target: LabelGrid
    source: str


Trainer = Callable[[Sequence[TrainingSample]], Any]
PredictorFactory = Callable[[Any], Predictor]


@dataclass(frozen=True, eq=False)
class FrameStore:
    """In-memory frame access: model inputs for every frame, labels where known."""

    inputs: Mapping[str, FrameInput]
    labels: Mapping[str, LabelGrid] = field(default_factory=dict)

    def input(self, fid: str) -> FrameInput:
        if fid not in self.inputs:
            raise InvalidInputError(f"no inputs for frame {fid}")
        return self.inputs[fid]

    def label(self, fid: str) -> LabelGrid:
        if fid not in self.labels:
            raise InvalidInputError(f"no ground-truth labels for frame {fid}")
        return self.labels[fid]


@dataclass(frozen=True)
class StepReport:
    name: str
    frames: int
    metrics: MetricsReport | None = None
    failures: tuple[tuple[str, str], ...] = ()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "frames": self.frames,
            "metrics": None if self.metrics is None else self.metrics.to_dict(),
            "failures": [list(f) for f in self.failures],
        }


@dataclass(frozen=True)
class RunReport:
    status: str  # "ok" or "failed"
    steps: tuple[StepReport, ...]
    manifest: SplitManifest
    supervised_only: bool
    failed_step: str | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "steps": [s.to_dict() for s in self.steps],
            "manifest": self.manifest.to_dict(),
            "supervised_only": self.supervised_only,
            "failed_step": self.failed_step,
            "error": self.error,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _evaluate_predictor(predictor: Predictor, ids: Sequence[str], store: FrameStore, grid: GridConfig,
                        strip_clues: bool) -> MetricsReport | None:
    if not ids:
        return None
    preds, gts = [], []
    for fid in ids:
        inp = store.input(fid)
        preds.append(to_label_grid(predictor(inp.without_clues() if strip_clues else inp), grid))
        gts.append(store.label(fid))
    return evaluate(preds, gts)


def self_train(manifest: SplitManifest, store: FrameStore, grid: GridConfig, trainer: Trainer,
               predictor_factory: PredictorFactory, out_dir: Path, heldout: Sequence[str] = (),
               min_score: float | None = None) -> RunReport:
    """Train on labeled frames, pseudo-label the unlabeled ones, retrain on both.

    Step metrics: the step-1 and step-3 models are scored on ``heldout`` frames
    with clues withheld (test-time models never see clues); step-2 pseudo labels
    are scored against whatever ground truth the store holds for unlabeled frames.
    """
    out_dir = Path(out_dir)
    heldout = [str(h) for h in heldout]
    steps: list[StepReport] = []
    supervised_only = not manifest.unlabeled
    step = "train-labeled"
    try:
        samples = [TrainingSample(f, store.input(f), store.label(f), GROUND_TRUTH) for f in manifest.labeled]
        model = trainer(samples)
        steps.append(StepReport(step, len(samples),
                                _evaluate_predictor(predictor_factory(model), heldout, store, grid, True)))

        step = "pseudo-label"
        pseudo_dir = out_dir / "pseudo"
        manifest, plr = generate_pseudo_labels(predictor_factory(model), manifest.unlabeled, store.input,
                                               grid, pseudo_dir, manifest, min_score)
        known = [f for f in plr.written if f in store.labels]
        metrics = None
        if known:
            by_id = {p.id: p.path for p in manifest.pseudo}
            preds = [decode_voxel_labels((pseudo_dir / by_id[f]).read_bytes(), grid, IGNORE_LABEL) for f in known]
            metrics = evaluate([LabelGrid(grid, p.labels) for p in preds], [store.label(f) for f in known])
        steps.append(StepReport(step, len(plr.written), metrics, plr.failures))

        step = "retrain"
        roster = merge_datasets(manifest, pseudo_dir)
        samples = []
        for r in roster:
            target = store.label(r.frame_id) if r.source == GROUND_TRUTH else \
                decode_voxel_labels(Path(r.path).read_bytes(), grid, IGNORE_LABEL)
            samples.append(TrainingSample(r.frame_id, store.input(r.frame_id).without_clues(), target, r.source))
        final = trainer(samples)
        steps.append(StepReport(step, len(samples),
                                _evaluate_predictor(predictor_factory(final), heldout, store, grid, True)))
    except Exception as e:
        log.error("self-training failed in step %s: %s", step, e)
        return RunReport("failed", tuple(steps), manifest, supervised_only, step, f"{type(e).__name__}: {e}")
    return RunReport("ok", tuple(steps), manifest, supervised_only)


# -- shipped trainers -------------------------------------------------------------

def stub_trainer(samples: Sequence[TrainingSample]) -> None:
    """Learns nothing; pairs with a fixed predictor such as :func:`clue_predictor`."""
    return None


@dataclass(frozen=True)
class DeskModel:
    config: EnhanceConfig
    params: EnhanceParams


def desk_enhance_config(grid: GridConfig, feat_dim: int) -> EnhanceConfig:
    """A small enhance module whose output width is the class-score count."""
    return EnhanceConfig(dims=grid.dims, d=grid.num_classes + 1, heads=1, kernel=3, dilations=(1,),
                         layers=1, feat_dim=feat_dim, embed_dim=4, num_classes=grid.num_classes)


def _one_hot(labels: LabelGrid) -> np.ndarray:
    c = labels.config.num_classes + 1
    return np.eye(c)[labels.labels.reshape(-1).astype(np.int64)]


def _feats(inp: FrameInput, config: EnhanceConfig) -> np.ndarray:
    return inp.feats if inp.feats is not None else np.zeros((config.num_tokens, config.feat_dim))


def _clue_ids(inp: FrameInput, config: EnhanceConfig):
    return inp.clues if inp.clues is not None else np.full(config.dims, config.unknown_id)


def desk_trainer(grid: GridConfig, feat_dim: int, steps: int = 100, lr: float = 0.02, seed: int = 0) -> Trainer:
    """Fits the enhance module to one-hot targets with Adam (mean squared error over samples).

    Ignored target voxels contribute nothing to the loss.
    """
    config = desk_enhance_config(grid, feat_dim)

    def train(samples: Sequence[TrainingSample]) -> DeskModel:
        params = init_params(config, seed)
        state = AdamState.zeros(params)
        if not samples:
            return DeskModel(config, params)
        for _ in range(steps):
            total = params.zeros_like()
            for s in samples:
                y, cache = enhance_forward(_feats(s.inputs, config), _clue_ids(s.inputs, config), params, config,
                                           return_cache=True)
                _, grad = mse_loss(y, _one_hot(s.target))
                if s.target.ignore_mask is not None:
                    grad = grad * ~s.target.ignore_mask.reshape(-1, 1)
                _, g = enhance_backward(cache, grad / len(samples))
                total = total.map(np.add, g)
            params, state = adam_step(params, total, state, lr)
        return DeskModel(config, params)

    return train


def desk_predictor_factory(model: DeskModel) -> Predictor:
    config = model.config
    grid_dims = config.dims

    def predict(inp: FrameInput) -> np.ndarray:
        y = enhance_forward(_feats(inp, config), _clue_ids(inp, config), model.params, config)
        return y.T.reshape((config.d,) + grid_dims)

    return predict
