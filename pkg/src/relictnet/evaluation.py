"""Scene prediction, pixel-level precision/recall and the combination grid."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels
from .models import ParameterStore
from .raster import MaskRaster, MultibandRaster, RasterError, make_tile_grid, save_raster
from .training import Combination, predict_tiles

log = logging.getLogger(__name__)

# outcome map codes
TN, TP, FP, FN, NOT_EVALUATED = 0, 1, 2, 3, 255
OUTCOME_NAMES = {TN: "TN", TP: "TP", FP: "FP", FN: "FN", NOT_EVALUATED: "not_evaluated"}
OUTCOME_COLORS = {
    TN: (40, 40, 40),
    TP: (0, 200, 0),
    FP: (220, 30, 30),
    FN: (250, 200, 0),
    NOT_EVALUATED: (0, 0, 0),
}
GRID_COLUMNS = ("framework", "arch", "k", "dataset", "TP", "FP", "FN", "precision", "recall", "flags")


class EvaluationError(ValueError):
    pass


@dataclass
class PredictionRaster:
    probabilities: np.ndarray  # (H, W) float32
    threshold: float = 0.5
    coverage: np.ndarray | None = None  # pixels that were predicted and are valid
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float32)
        if self.coverage is None:
            self.coverage = np.ones(self.probabilities.shape, dtype=bool)

    @property
    def binary(self) -> np.ndarray:
        return (self.probabilities > self.threshold).astype(np.uint8)


def _as_store(checkpoint) -> ParameterStore:
    if isinstance(checkpoint, ParameterStore):
        return checkpoint
    return ParameterStore.load(checkpoint)


def predict_scene(checkpoint, raster: MultibandRaster, threshold: float = 0.5,
                  tile_size: int = 32, pad_mode: str = "zero_pad") -> PredictionRaster:
    """Tile the scene, run the segmenter per tile and stitch probabilities.

    ``checkpoint`` may be a ParameterStore, a checkpoint path or a built model.
    Nodata pixels get probability 0 and are left out of ``coverage``.
    """
    if not 0 < threshold < 1:
        raise EvaluationError("threshold must lie in (0, 1)")
    if hasattr(checkpoint, "encoder") and hasattr(checkpoint, "logits"):
        model, provenance = checkpoint, {}
    else:
        store = _as_store(checkpoint)
        model = store.build()
        provenance = {k: store.meta[k] for k in ("combination", "fingerprint") if k in store.meta}
    bands = model.encoder.spec.input_channels
    if bands != raster.band_count:
        raise EvaluationError(f"model expects {bands} bands, raster has {raster.band_count}")
    grid = make_tile_grid(raster, tile_size, pad_mode)
    pixels, _ = grid.stack()
    stitched = grid.stitch(predict_tiles(model, pixels))
    prob = np.zeros((raster.height, raster.width), dtype=np.float32)
    h, w = stitched.shape
    prob[:h, :w] = stitched
    coverage = np.zeros_like(raster.valid)
    coverage[:h, :w] = True
    coverage &= raster.valid
    prob[~raster.valid] = 0.0
    return PredictionRaster(prob, threshold, coverage, provenance)


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    precision_defined: bool
    recall_defined: bool
    outcome_map: np.ndarray | None = None
    combination: dict = field(default_factory=dict)

    @property
    def evaluated_pixels(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        return {
            "TP": self.tp,
            "FP": self.fp,
            "FN": self.fn,
            "TN": self.tn,
            "precision": self.precision,
            "recall": self.recall,
            "precision_defined": self.precision_defined,
            "recall_defined": self.recall_defined,
            "evaluated_pixels": self.evaluated_pixels,
            "combination": self.combination,
        }


def precision_recall(tp: int, fp: int, fn: int) -> tuple[float, float, bool, bool]:
    """TP/(TP+FP) and TP/(TP+FN); an empty denominator gives 0 and a False flag."""
    p_def, r_def = tp + fp > 0, tp + fn > 0
    precision = tp / (tp + fp) if p_def else 0.0
    recall = tp / (tp + fn) if r_def else 0.0
    return precision, recall, p_def, r_def


def outcome_map(pred: np.ndarray, truth: np.ndarray, valid: np.ndarray) -> np.ndarray:
    p, t = pred.astype(bool), truth.astype(bool)
    out = np.full(p.shape, TN, dtype=np.uint8)
    out[p & t] = TP
    out[p & ~t] = FP
    out[~p & t] = FN
    out[~valid] = NOT_EVALUATED
    return out


def confusion(pred, truth, valid=None, combination: dict | None = None) -> EvalReport:
    """Pixel TP/FP/FN over ``valid`` pixels (nodata and uncovered pixels excluded)."""
    if isinstance(pred, PredictionRaster):
        cov = pred.coverage
        pred = pred.binary
    else:
        cov = None
        pred = np.asarray(pred)
    truth = truth.values if isinstance(truth, MaskRaster) else np.asarray(truth)
    if pred.shape != truth.shape:
        raise EvaluationError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    v = np.ones(pred.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if v.shape != pred.shape:
        raise EvaluationError("valid mask shape differs from prediction")
    if cov is not None:
        v = v & cov
    tp, fp, fn, tn = kernels.confusion_counts(pred, truth, v)
    precision, recall, p_def, r_def = precision_recall(tp, fp, fn)
    return EvalReport(tp, fp, fn, tn, precision, recall, p_def, r_def,
                      outcome_map(pred, truth, v), dict(combination or {}))


def render_outcome_map(report: EvalReport, path) -> Path:
    """Write a 3-band color-coded raster plus a ``.legend.json`` sidecar."""
    if report.outcome_map is None:
        raise EvaluationError("report has no outcome map")
    om = report.outcome_map
    rgb = np.zeros((3,) + om.shape, dtype=np.uint8)
    for code, color in OUTCOME_COLORS.items():
        sel = om == code
        for b in range(3):
            rgb[b][sel] = color[b]
    path = Path(path)
    try:
        save_raster(MultibandRaster(rgb, band_names=("red", "green", "blue")), path)
    except RasterError as exc:
        raise EvaluationError(str(exc)) from exc
    legend = {
        OUTCOME_NAMES[c]: {"rgb": list(col), "pixels": int((om == c).sum())}
        for c, col in OUTCOME_COLORS.items()
    }
    path.with_suffix(".legend.json").write_text(json.dumps(legend, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- grid


@dataclass
class GridRow:
    combination: Combination
    tp: int = 0
    fp: int = 0
    fn: int = 0
    precision: float = 0.0
    recall: float = 0.0
    flags: list = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return "failed" in self.flags


@dataclass
class GridReport:
    rows: list

    def __len__(self) -> int:
        return len(self.rows)

    def totals(self) -> dict:
        ok = [r for r in self.rows if not r.failed]
        return {
            "rows": len(self.rows),
            "failed": len(self.rows) - len(ok),
            "TP": sum(r.tp for r in ok),
            "FP": sum(r.fp for r in ok),
            "FN": sum(r.fn for r in ok),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(GRID_COLUMNS)
        for r in self.rows:
            c = r.combination
            w.writerow([c.framework, c.arch, c.k_tag, c.dataset, r.tp, r.fp, r.fn,
                        f"{r.precision:.6f}", f"{r.recall:.6f}", ";".join(r.flags)])
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        return path

    @classmethod
    def read_csv(cls, path) -> "GridReport":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                k = None if rec["k"] == "na" else int(rec["k"])
                combo = Combination(rec["framework"], rec["arch"], k, rec["dataset"])
                rows.append(GridRow(combo, int(rec["TP"]), int(rec["FP"]), int(rec["FN"]),
                                    float(rec["precision"]), float(rec["recall"]),
                                    [f for f in rec["flags"].split(";") if f]))
        return cls(rows)


def flag_maxima(rows) -> None:
    """Mark the best precision and recall of every (framework, arch) table column."""
    groups = {}
    for r in rows:
        if not r.failed:
            groups.setdefault((r.combination.framework, r.combination.arch), []).append(r)
    for members in groups.values():
        for metric in ("precision", "recall"):
            best = max(getattr(r, metric) for r in members)
            for r in members:
                if getattr(r, metric) == best:
                    r.flags.append(f"max_{metric}")


def run_grid(
    combos,
    raster: MultibandRaster,
    truth: MaskRaster,
    valid: np.ndarray,
    checkpoint_for: Callable,
    threshold: float = 0.5,
    tile_size: int = 32,
    pad_mode: str = "zero_pad",
    on_report: Callable | None = None,
) -> GridReport:
    """Evaluate every combination on the ``valid`` (test-area) pixels.

    ``checkpoint_for(combo)`` returns a ParameterStore, checkpoint path or model,
    training inline if it wishes. Any exception marks that row failed.
    """
    rows = []
    for combo in sorted(combos, key=Combination.sort_key):
        row = GridRow(combo)
        try:
            pred = predict_scene(checkpoint_for(combo), raster, threshold, tile_size, pad_mode)
            rep = confusion(pred, truth, valid, combo.to_dict())
        except Exception as exc:  # a missing or broken checkpoint fails one row only
            log.warning("combination %s failed: %s", combo, exc)
            row.flags.append("failed")
        else:
            row.tp, row.fp, row.fn = rep.tp, rep.fp, rep.fn
            row.precision, row.recall = rep.precision, rep.recall
            if not rep.precision_defined:
                row.flags.append("precision_undefined")
            if not rep.recall_defined:
                row.flags.append("recall_undefined")
            if on_report is not None:
                on_report(combo, pred, rep)
        rows.append(row)
    flag_maxima(rows)
    return GridReport(rows)


def compare_frameworks(reports: dict) -> dict:
    """Mean precision/recall per framework for each seed and across seeds.

    Args:
        reports: ``{seed: GridReport}``.
    """
    per_seed = {}
    for seed, rep in sorted(reports.items()):
        stats = {}
        for fw in ("standard", "proposed"):
            ok = [r for r in rep.rows if r.combination.framework == fw and not r.failed]
            if ok:
                stats[fw] = {
                    "rows": len(ok),
                    "mean_precision": float(np.mean([r.precision for r in ok])),
                    "mean_recall": float(np.mean([r.recall for r in ok])),
                }
        per_seed[str(seed)] = stats
    summary = {"per_seed": per_seed, "seeds": len(per_seed)}
    both = [s for s in per_seed.values() if "standard" in s and "proposed" in s]
    if both:
        for metric in ("mean_precision", "mean_recall"):
            diffs = [s["proposed"][metric] - s["standard"][metric] for s in both]
            summary[f"proposed_minus_standard_{metric}"] = float(np.mean(diffs))
            summary[f"seeds_proposed_higher_{metric}"] = int(sum(d > 0 for d in diffs))
    return summary
