"""One-pass-evaluation metrics and dataset statistics.

Success averages the fraction of frames whose 3D IoU strictly exceeds each
threshold on a fixed 21-point overlap grid; Precision averages the fraction
whose center error stays within each threshold on a 21-point distance grid.
The first frame carries the given box and is excluded. Sequence aggregation
weights by evaluated frame counts.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .data import Frame, Tracklet, enlarge_box
from .geom import Box3D, center_error, iou_3d

SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRECISION_THRESHOLDS = np.linspace(0.0, 2.0, 21)


@dataclass
class OPEResult:
    success: float
    precision: float
    n_frames: int                      # evaluated frames (first excluded)
    ious: np.ndarray = field(default=None, repr=False)
    errors: np.ndarray = field(default=None, repr=False)


def ope(pred: Tracklet, gt: Tracklet, per_frame: bool = False) -> OPEResult:
    """Score a predicted tracklet against ground truth.

    Both tracklets must cover exactly the same frames; the first one is the
    given box and never counts.
    """
    pred_ids, gt_ids = pred.frame_ids(), gt.frame_ids()
    if pred_ids != gt_ids:
        missing = sorted(set(gt_ids) - set(pred_ids))
        extra = sorted(set(pred_ids) - set(gt_ids))
        raise ValueError(
            f"frame sets differ: missing from prediction {missing}, "
            f"unexpected in prediction {extra}"
        )
    if len(gt_ids) < 2:
        raise ValueError("need at least two frames to evaluate")

    ious = np.array(
        [iou_3d(pb, gb) for (_, pb), (_, gb) in zip(pred.entries[1:], gt.entries[1:])]
    )
    errors = np.array(
        [
            center_error(pb, gb)
            for (_, pb), (_, gb) in zip(pred.entries[1:], gt.entries[1:])
        ]
    )
    success = 100.0 * np.mean(
        [np.mean(ious > tau) for tau in SUCCESS_THRESHOLDS]
    )
    precision = 100.0 * np.mean(
        [np.mean(errors <= d) for d in PRECISION_THRESHOLDS]
    )
    return OPEResult(
        float(success),
        float(precision),
        len(ious),
        ious if per_frame else None,
        errors if per_frame else None,
    )


def weighted_mean(results) -> OPEResult:
    """Aggregate per-sequence results, weighting by evaluated frame count."""
    results = list(results)
    if not results:
        raise ValueError("no results to aggregate")
    weights = np.array([r.n_frames for r in results], dtype=np.float64)
    total = weights.sum()
    success = float(np.dot([r.success for r in results], weights) / total)
    precision = float(np.dot([r.precision for r in results], weights) / total)
    return OPEResult(success, precision, int(total))


def zero_motion_baseline(frames, first_box: Box3D) -> Tracklet:
    """Propagate the first box unchanged: the no-op competitor."""
    entries = [(f.frame_id, first_box.copy()) for f in frames]
    return Tracklet("target", "Car", entries)


def boxes_intersect(a: Box3D, b: Box3D) -> bool:
    return iou_3d(a, b) > 0.0


def distractor_stats(sequences, margin: float = 2.0) -> dict:
    """Histogram of same-category distractors near the target per frame.

    A distractor counts on a frame when its box intersects the target box
    enlarged by `margin` (additive, the training crop semantics). Bins are
    0, 1, 2, and 3+, summing to the total number of target frames.
    """
    bins = {"0": 0, "1": 0, "2": 0, "3+": 0}
    for seq in sequences:
        for fid in seq.target.frame_ids():
            region = enlarge_box(seq.target.box_at(fid), margin)
            count = 0
            for d in seq.distractors:
                if d.category != seq.target.category or not d.has_frame(fid):
                    continue
                if boxes_intersect(region, d.box_at(fid)):
                    count += 1
            bins[str(count) if count < 3 else "3+"] += 1
    return bins


def write_csv_report(path, rows, header):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_json_report(path, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def evaluate_tracklets(predictions: dict, ground_truth: dict) -> dict:
    """Score a batch of predicted tracklets keyed like the ground truth.

    Returns per-key OPEResult plus the frame-weighted aggregate under "mean".
    Keys present in only one side raise.
    """
    if set(predictions) != set(ground_truth):
        missing = sorted(set(ground_truth) - set(predictions))
        extra = sorted(set(predictions) - set(ground_truth))
        raise ValueError(f"tracklet keys differ: missing {missing}, extra {extra}")
    out = {}
    for key in sorted(ground_truth):
        out[key] = ope(predictions[key], ground_truth[key])
    out["mean"] = weighted_mean([out[k] for k in sorted(ground_truth)])
    return out
