"""Metrics and experiments over trained models.

Covers top-1 and size-bucketed accuracy, the per-sample correction score
comparing an aggregated prediction against the four stage-level ones, the
four-row toggle-ablation grid, and red-rectangle overlays of the selected
tokens.  The CSV emitted by the ablation uses the schema
``config,seed,acc_total,acc_small,acc_medium,acc_large,score_gate,score_sum``
with empty cells where a quantity does not exist for that row (for example
gate scores when the gating module is disabled).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import data as D
from . import train as training
from .config import RunConfig, copy_config, validate
from .errors import ConfigError, ContractError
from .model import Model, predict_labels

BUCKET_NAMES = {"S": "Small", "M": "Medium", "L": "Large"}
CSV_HEADER = ("config,seed,acc_total,acc_small,acc_medium,acc_large,"
              "score_gate,score_sum")


# ---------------------------------------------------------------------------
# Correction score
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalRecord:
    """One test sample's five predicted classes, truth, and size bucket.

    ``preds`` holds the argmax of the four stage-level outputs followed by
    the aggregated output.
    """
    preds: tuple[int, int, int, int, int]
    label: int
    bucket: str

    def __post_init__(self):
        if len(self.preds) != 5:
            raise ContractError(
                f"EvalRecord needs 5 predictions, got {len(self.preds)}")
        if any(int(p) < 0 for p in self.preds) or int(self.label) < 0:
            raise ContractError("EvalRecord: class indices must be >= 0")
        if self.bucket not in BUCKET_NAMES:
            raise ContractError(f"EvalRecord: unknown bucket {self.bucket!r}")


def correction_score(record: EvalRecord, mode: str = "prose") -> int:
    """Integer in [-4, +4] measuring what aggregation changed.

    prose mode (default): if the aggregated prediction is right, count the
    stage predictions it corrected (those that were wrong); if it is wrong,
    count the correct stage predictions it destroyed, negated.

    equation mode: the literal alternative reading — if the aggregated
    prediction is right, +(number of stage predictions that are right);
    otherwise -(number that are wrong).  Both are kept because the two
    published definitions disagree; see the README.
    """
    y = int(record.label)
    stage_hits = sum(1 for p in record.preds[:4] if int(p) == y)
    agg_right = int(record.preds[4]) == y
    if mode == "prose":
        return (4 - stage_hits) if agg_right else -stage_hits
    if mode == "equation":
        return stage_hits if agg_right else -(4 - stage_hits)
    raise ContractError(f"correction_score: unknown mode {mode!r}")


def aggregate_score(records, mode: str = "prose") -> int:
    """Sum of per-record correction scores; 0 on an empty set."""
    return sum(correction_score(r, mode) for r in records)


# ---------------------------------------------------------------------------
# Bucketed accuracy
# ---------------------------------------------------------------------------

def _bucket_counts(pred: np.ndarray, labels: np.ndarray,
                   buckets) -> dict[str, tuple[int, int]]:
    counts: dict[str, tuple[int, int]] = {}
    for p, y, b in zip(pred, labels, buckets):
        name = BUCKET_NAMES.get(b, b)
        hit = int(int(p) == int(y))
        c, t = counts.get(name, (0, 0))
        counts[name] = (c + hit, t + 1)
        c, t = counts.get("Total", (0, 0))
        counts["Total"] = (c + hit, t + 1)
    return counts


def bucket_counts(records) -> dict[str, tuple[int, int]]:
    """(correct, total) per bucket and in total, from aggregated preds."""
    pred = np.array([r.preds[4] for r in records], dtype=np.int64)
    labels = np.array([r.label for r in records], dtype=np.int64)
    buckets = [r.bucket for r in records]
    return _bucket_counts(pred, labels, buckets)


def _accuracies(counts: dict[str, tuple[int, int]]) -> dict[str, float]:
    return {name: 100.0 * c / t for name, (c, t) in counts.items() if t > 0}


def bucketed_accuracy(records) -> dict[str, float]:
    """Percent accuracy of the aggregated prediction per bucket and overall.

    Keys are among Small/Medium/Large/Total; an empty bucket is absent from
    the result rather than reported as zero.
    """
    if not records:
        raise ContractError("bucketed_accuracy: empty record list")
    return _accuracies(bucket_counts(records))


def format_pct(x: float) -> str:
    """Percentages are reported at 0.1 resolution."""
    return f"{x:.1f}"


def quartile_buckets(sizes, q_low: float = 0.25,
                     q_high: float = 0.75) -> list[str]:
    """Assign S/M/L by size quartiles: bottom quarter S, top quarter L,
    the middle half M.  For datasets without generator ground-truth ranges;
    ``sizes`` is any per-sample scalar (e.g. max bbox side / image side)."""
    arr = np.asarray(sizes, dtype=np.float64)
    if arr.size == 0:
        raise ContractError("quartile_buckets: empty size list")
    lo = float(np.quantile(arr, q_low))
    hi = float(np.quantile(arr, q_high))
    return ["S" if s <= lo else ("L" if s >= hi else "M") for s in arr]


# ---------------------------------------------------------------------------
# Model evaluation -> records
# ---------------------------------------------------------------------------

@dataclass
class SplitPredictions:
    """Argmax labels per aggregation route over one split."""
    primary: np.ndarray            # (N,) the active mode's prediction
    stages: np.ndarray | None      # (4, N) stage-level predictions
    agg_sum: np.ndarray | None     # (N,) plain-sum aggregation
    agg_gate: np.ndarray | None    # (N,) gated aggregation
    labels: np.ndarray             # (N,)
    buckets: list[str]


def predict_split(model: Model, split: D.SplitData, cfg: RunConfig,
                  batch_size: int = 32) -> SplitPredictions:
    images = training.eval_view(split.images, cfg)
    n = images.shape[0]
    primary, stages, agg_sum, agg_gate = [], [], [], []
    has_stages = has_gate = False
    for b0 in range(0, n, batch_size):
        out = model.forward(images[b0:b0 + batch_size], train=False)
        primary.append(predict_labels(model.primary_logits(out)))
        if out.stage_logits is not None:
            has_stages = True
            stages.append(np.stack(
                [predict_labels(sl.data) for sl in out.stage_logits]))
            agg_sum.append(predict_labels(out.mr_sum.data))
        if out.mr_gate is not None:
            has_gate = True
            agg_gate.append(predict_labels(out.mr_gate.data))
    return SplitPredictions(
        primary=np.concatenate(primary),
        stages=np.concatenate(stages, axis=1) if has_stages else None,
        agg_sum=np.concatenate(agg_sum) if has_stages else None,
        agg_gate=np.concatenate(agg_gate) if has_gate else None,
        labels=split.labels.copy(),
        buckets=list(split.buckets))


def build_records(preds: SplitPredictions,
                  aggregation: str) -> list[EvalRecord]:
    """EvalRecords with the requested aggregation route as the fifth
    prediction; requires the stage heads (and the gate, if asked for)."""
    if preds.stages is None:
        raise ContractError(
            "build_records: model has no stage-level outputs")
    if aggregation == "gate":
        if preds.agg_gate is None:
            raise ContractError("build_records: model has no gate output")
        final = preds.agg_gate
    elif aggregation == "sum":
        final = preds.agg_sum
    else:
        raise ContractError(f"build_records: unknown aggregation "
                            f"{aggregation!r}")
    out = []
    for i in range(preds.labels.shape[0]):
        five = tuple(int(preds.stages[s, i]) for s in range(4)) \
            + (int(final[i]),)
        out.append(EvalRecord(preds=five, label=int(preds.labels[i]),
                              bucket=preds.buckets[i]))
    return out


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

ABLATION_ROWS: list[tuple[str, dict[str, bool]]] = [
    ("a_baseline", dict(msts=False, msda=False, msca=False)),
    ("b_msts", dict(msts=True, msda=False, msca=False)),
    ("c_msts_msda", dict(msts=True, msda=True, msca=False)),
    ("d_full", dict(msts=True, msda=True, msca=True)),
]


def check_toggles(toggles: dict[str, bool]) -> None:
    if toggles.get("msda") and not toggles.get("msts"):
        raise ConfigError(
            "ablation toggles: msda requires msts (the gate aggregates the "
            "per-stage heads)")


def apply_toggles(cfg: RunConfig, toggles: dict[str, bool]) -> RunConfig:
    check_toggles(toggles)
    out = copy_config(cfg)
    out.msts.enabled = toggles["msts"]
    out.msda.enabled = toggles["msda"]
    out.msca.enabled = toggles["msca"]
    return validate(out)


@dataclass
class AblationResult:
    config: str
    seed: int
    acc: dict[str, float]              # Small/Medium/Large/Total percents
    score_gate: int | None
    score_sum: int | None

    def csv_row(self) -> str:
        cells = [self.config, str(self.seed)]
        for key in ("Total", "Small", "Medium", "Large"):
            cells.append(format_pct(self.acc[key]) if key in self.acc
                         else "")
        cells.append("" if self.score_gate is None else str(self.score_gate))
        cells.append("" if self.score_sum is None else str(self.score_sum))
        return ",".join(cells)


def evaluate_row(model: Model, cfg: RunConfig, test_split: D.SplitData,
                 config_name: str, seed: int) -> AblationResult:
    preds = predict_split(model, test_split, cfg)
    counts = _bucket_counts(preds.primary, preds.labels, preds.buckets)
    acc = _accuracies(counts)
    score_gate = score_sum = None
    if preds.stages is not None:
        score_sum = aggregate_score(build_records(preds, "sum"))
        if preds.agg_gate is not None:
            score_gate = aggregate_score(build_records(preds, "gate"))
    return AblationResult(config=config_name, seed=seed, acc=acc,
                          score_gate=score_gate, score_sum=score_sum)


def run_ablation(base_cfg: RunConfig, train_split: D.SplitData,
                 test_split: D.SplitData, seeds, out_dir: str,
                 rows=None) -> list[AblationResult]:
    """Train and evaluate every (toggle row, seed) pair; write the CSV.

    Each run trains to completion under ``out_dir/<config>_seed<seed>/``;
    the summary lands in ``out_dir/ablation.csv``.  Same seeds + config =>
    identical CSV.
    """
    rows = list(ABLATION_ROWS if rows is None else rows)
    for _, toggles in rows:
        check_toggles(toggles)
    os.makedirs(out_dir, exist_ok=True)
    results: list[AblationResult] = []
    for config_name, toggles in rows:
        for seed in seeds:
            cfg = apply_toggles(base_cfg, toggles)
            cfg.seed = int(seed)
            run_dir = os.path.join(out_dir, f"{config_name}_seed{seed}")
            tr = training.run_training(cfg, train_split, run_dir)
            results.append(evaluate_row(tr.model, cfg, test_split,
                                        config_name, int(seed)))
    csv_path = os.path.join(out_dir, "ablation.csv")
    with open(csv_path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in results:
            fh.write(r.csv_row() + "\n")
    return results


# ---------------------------------------------------------------------------
# Selection overlays
# ---------------------------------------------------------------------------

RED = np.array([1.0, 0.0, 0.0])


def render_selection_overlay(image: np.ndarray, indices: np.ndarray,
                             grid: tuple[int, int],
                             cell_px: int) -> np.ndarray:
    """Copy of ``image`` with a 1-px red outline around every selected
    merged cell.  ``indices`` are row-major cell indices into ``grid``;
    ``cell_px`` is the side length of one cell in input pixels."""
    gh, gw = grid
    img = np.array(image, dtype=np.float64, copy=True)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(
            f"render_selection_overlay: expected (h, w, 3) image, got "
            f"{img.shape}")
    if gh * cell_px > img.shape[0] or gw * cell_px > img.shape[1]:
        raise ContractError(
            f"render_selection_overlay: grid {grid} at {cell_px}px/cell "
            f"exceeds image {img.shape[:2]}")
    for idx in np.asarray(indices).ravel():
        idx = int(idx)
        if not 0 <= idx < gh * gw:
            raise ContractError(
                f"render_selection_overlay: index {idx} outside grid "
                f"{gh}x{gw}")
        r, c = divmod(idx, gw)
        y0, x0 = r * cell_px, c * cell_px
        y1, x1 = y0 + cell_px, x0 + cell_px
        img[y0, x0:x1] = RED
        img[y1 - 1, x0:x1] = RED
        img[y0:y1, x0] = RED
        img[y0:y1, x1 - 1] = RED
    return img


def selection_overlays(model: Model, image: np.ndarray,
                       cfg: RunConfig) -> dict[int, np.ndarray]:
    """Per-stage overlay images for one sample (evaluation view)."""
    view = training.eval_view(image[None], cfg)
    out = model.forward(view, train=False)
    if not out.selections:
        raise ContractError(
            "selection_overlays: token selection is disabled in this config")
    overlays = {}
    size = cfg.backbone.image_size
    for stage, sel in out.selections.items():
        grid = out.merged_grids[stage]
        cell_px = size // grid[0]
        overlays[stage] = render_selection_overlay(
            view[0], sel[0], grid, cell_px)
    return overlays
