"""Semi-supervised training from pseudo-labels.

Pipeline: pre-train on the labeled split, run the pre-trained tracker over
every unlabeled sequence to harvest pseudo tracklets, then train from scratch
on the mixture. Unlabeled samples contribute a down-weighted forward loss
against their pseudo boxes plus a cycle term: track forward, then track
backward from the predicted box, and penalize the disagreement with the
starting box over [x, y, z, sin yaw]. With probability p an unlabeled pair is
rebuilt by delete-cut-paste: the pseudo-localized object is removed and a
ground-truth object from a labeled sequence (same frame interval) is pasted
into its pose, which keeps the relative-motion label exact while making the
object-box alignment trustworthy.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .data import (
    Frame,
    TrackedSequence,
    Tracklet,
    make_training_sample,
    tracklet_rows,
    write_jsonl,
)
from .geom import Box3D, from_canonical, points_in_box, to_canonical
from .nn import TBox, Tensor
from .tracker import M2Tracker, TrackOptions, m2_forward, track_sequence
from .train import (
    TrainConfig,
    TrainResult,
    loss_full,
    sample_targets,
    train_supervised,
)


@dataclass
class SemiConfig:
    lam: float = 0.1            # unlabeled forward-loss weight
    alpha: float = 0.1          # cycle-loss weight
    gamma: float = 1.25         # deletion scale for delete-cut-paste
    paste_prob: float = 0.5
    grad_clip: float = 1.0
    cycle_on_labeled: bool = False
    unlabeled_per_batch: int = 0   # 0: match the labeled batch size
    source_retries: int = 8
    pretrain: TrainConfig = None
    mixed: TrainConfig = None

    def validate(self):
        if min(self.lam, self.alpha, self.grad_clip) < 0:
            raise ValueError("semi weights must be non-negative")
        if not 0.0 <= self.paste_prob <= 1.0:
            raise ValueError("paste probability must lie in [0, 1]")
        if self.gamma < 1.0:
            raise ValueError("deletion scale must be >= 1")


@dataclass
class PseudoTracklet:
    tracklet: Tracklet
    source: str                 # checkpoint id the labels came from
    is_pseudo: bool = True


def generate_pseudo_labels(tracker, unlabeled, source: str = "") -> list:
    """Track every unlabeled sequence from its given first box."""
    out = []
    for seq in unlabeled:
        pred = track_sequence(tracker, seq.frames, seq.first_box)
        pred.category = seq.category
        out.append(PseudoTracklet(pred, source))
    return out


def write_pseudo_labels(path, unlabeled, pseudo: list):
    rows = []
    for seq, p in zip(unlabeled, pseudo):
        rows.extend(tracklet_rows(seq.seq_id, p.tracklet, pseudo=True))
    write_jsonl(path, rows)


# ---------------------------------------------------------------------------
# delete-cut-paste

def delete_cut_paste(dest_frames, dest_boxes, src_frames, src_boxes,
                     gamma: float = 1.25):
    """Swap the (pseudo-localized) destination object for a labeled one.

    Per time step: remove all destination points inside the gamma-scaled
    destination box, cut the source object points, re-express them in the
    destination box pose, and shrink/grow the destination box to the source
    size. Centers and yaws never move, so the motion between the two output
    boxes equals the motion between the two input destination boxes exactly.

    Returns (frames, boxes) or None when a source crop holds no points.
    """
    if gamma < 1.0:
        raise ValueError("deletion scale must be >= 1")
    out_frames, out_boxes = [], []
    for dframe, dbox, sframe, sbox in zip(dest_frames, dest_boxes,
                                          src_frames, src_boxes):
        obj = sframe.points[points_in_box(sframe.points, sbox)]
        if len(obj) == 0:
            warnings.warn("delete-cut-paste skipped: empty source object")
            return None
        keep = ~points_in_box(dframe.points, dbox, scale=gamma)
        pasted = from_canonical(to_canonical(obj, sbox), dbox)
        out_frames.append(
            Frame(dframe.frame_id, np.vstack([dframe.points[keep], pasted]))
        )
        out_boxes.append(Box3D(dbox.center.copy(), dbox.yaw, sbox.size.copy()))
    return out_frames, out_boxes


def sample_source_pair(labeled, interval: int, rng, retries: int = 8):
    """Pick a labeled sequence pair (frames, GT boxes) at the given interval."""
    for _ in range(retries):
        seq = labeled[int(rng.integers(len(labeled)))]
        n = len(seq.frames)
        if n <= interval:
            continue
        t = int(rng.integers(n - interval))
        frames = (seq.frames[t], seq.frames[t + interval])
        boxes = tuple(seq.target.box_at(f.frame_id) for f in frames)
        if all(points_in_box(f.points, b).any() for f, b in zip(frames, boxes)):
            return frames, boxes
    return None


# ---------------------------------------------------------------------------
# losses

def loss_forward_semi(labeled_losses, unlabeled_losses, lam: float):
    """Eq-style forward loss: mean over labeled plus lam times the unlabeled
    mean. Inputs are plain floats (the per-sample totals)."""
    if not labeled_losses and not unlabeled_losses:
        raise ValueError("no losses to combine")
    total = 0.0
    if labeled_losses:
        total += float(np.mean(labeled_losses))
    if unlabeled_losses:
        total += lam * float(np.mean(unlabeled_losses))
    return total


def cycle_vector(box: TBox) -> Tensor:
    return nn.concat([box.center, box.yaw.sin().reshape(1)], axis=0)


def loss_cycle(nets, prev_pts, cur_pts, anchor_box: Box3D,
               forward_fn=m2_forward):
    """Two-pass consistency: track forward, track back from the prediction,
    and compare the round trip against the starting box on [x, y, z, sin yaw].

    Returns (loss Tensor or None, skipped flag). Degenerate passes skip (the
    caller counts them as zero-contribution samples).
    """
    fwd = forward_fn(nets, prev_pts, cur_pts, TBox.from_box(anchor_box))
    if fwd["degenerate"]:
        return None, True
    bwd = forward_fn(nets, cur_pts, prev_pts, fwd["refined"])
    if bwd["degenerate"]:
        return None, True
    target = np.concatenate([anchor_box.center, [np.sin(anchor_box.yaw)]])
    loss = nn.huber(cycle_vector(bwd["refined"]), Tensor(target)).mean()
    return loss, False


# ---------------------------------------------------------------------------
# mixed training

def _as_tracked(seq, tracklet) -> TrackedSequence:
    """View an unlabeled sequence plus its pseudo tracklet like a labeled one."""
    return TrackedSequence(seq.seq_id, seq.scene, seq.frames, tracklet, [])


class _SemiBatchHook:
    """Adds the unlabeled forward, pasted, and cycle terms to each batch."""

    def __init__(self, labeled, unlabeled_tracked, semi: SemiConfig,
                 train_cfg: TrainConfig):
        self.labeled = labeled
        self.unlabeled = unlabeled_tracked
        self.semi = semi
        self.cfg = train_cfg
        self.pairs = []
        for si, seq in enumerate(unlabeled_tracked):
            n = len(seq.frames)
            for k in range(1, train_cfg.interval_max + 1):
                self.pairs.extend((si, t, t + k) for t in range(n - k))
        self.skipped_cycles = 0
        self.pasted = 0

    def _build(self, pair, rng):
        si, ta, tb = pair
        seq = self.unlabeled[si]
        frames = (seq.frames[ta], seq.frames[tb])
        boxes = tuple(seq.target.box_at(f.frame_id) for f in frames)
        pasted = False
        if rng.uniform() < self.semi.paste_prob:
            src = sample_source_pair(self.labeled, tb - ta, rng,
                                     self.semi.source_retries)
            if src is not None:
                swap = delete_cut_paste(frames, boxes, src[0], src[1],
                                        self.semi.gamma)
                if swap is not None:
                    frames, boxes = swap
                    pasted = True
        sample = make_training_sample(
            frames[0], frames[1], boxes[0], boxes[1], rng,
            n_points=self.cfg.points_per_frame, margin=self.cfg.margin,
            perturb=self.cfg.perturb_prev, is_pseudo=True,
        )
        return sample, pasted

    def __call__(self, model, rng, agg):
        semi = self.semi
        if semi.lam == 0 and semi.alpha == 0 and semi.paste_prob == 0:
            return agg
        nu = semi.unlabeled_per_batch or self.cfg.batch_size
        nu = min(nu, len(self.pairs))
        picks = rng.choice(len(self.pairs), size=nu, replace=False)

        built = [self._build(self.pairs[i], rng) for i in picks]
        pseudo = [s for s, pasted in built if not pasted]
        pasted = [s for s, pasted in built if pasted]
        self.pasted += len(pasted)

        fwd_unlabeled = 0.0
        fwd_pasted = 0.0
        for group, weight, name in ((pseudo, semi.lam, "pseudo"),
                                    (pasted, 1.0, "pasted")):
            if not group or weight == 0:
                continue
            inv = weight / len(group)
            for sample in group:
                tgt = sample_targets(sample)
                res = m2_forward(
                    model, sample.prev.points, sample.cur.points,
                    TBox.from_box(sample.prev_box_input),
                    mask_override=tgt["mask"].astype(bool),
                    dynamic_override=bool(tgt["dynamic"]),
                )
                loss, comp = loss_full(res, tgt, self.cfg.weights)
                (loss * inv).backward()
                if name == "pseudo":
                    fwd_unlabeled += comp["total"] / len(group)
                else:
                    fwd_pasted += comp["total"] / len(group)

        cycle_total = 0.0
        if semi.alpha > 0 and built:
            inv = semi.alpha / len(built)
            for sample, _ in built:
                loss, skipped = loss_cycle(model, sample.prev.points,
                                           sample.cur.points,
                                           sample.prev_box_input)
                if skipped:
                    self.skipped_cycles += 1
                    continue
                (loss * inv).backward()
                cycle_total += float(loss.data) / len(built)

        agg = dict(agg)
        forward_total = agg["total"] + semi.lam * fwd_unlabeled + fwd_pasted
        agg["semi_forward"] = forward_total
        agg["semi_cycle"] = cycle_total
        agg["total"] = forward_total + semi.alpha * cycle_total
        return agg


@dataclass
class SemiResult:
    pretrain: TrainResult
    pseudo_path: str
    mixed: TrainResult
    skipped_cycles: int
    pasted_samples: int


def train_semim(labeled, unlabeled, semi: SemiConfig, out_dir,
                val_sequences=None, progress=None) -> SemiResult:
    """Full pipeline: pre-train, pseudo-label, then mixed training from
    scratch with the combined forward + cycle objective and gradient-norm
    clipping. `progress`, when given, receives one marker string as each
    stage starts."""
    semi.validate()
    if not labeled or not unlabeled:
        raise ValueError("semi-supervised training needs both splits")
    if semi.pretrain is None or semi.mixed is None:
        raise ValueError("semi config needs pretrain and mixed train configs")
    if semi.pretrain.model != "m2" or semi.mixed.model != "m2":
        raise ValueError("semi-supervised pipeline needs the two-stage model")
    os.makedirs(out_dir, exist_ok=True)
    progress = progress or (lambda msg: None)

    progress(f"stage 1/3: supervised pre-training on {len(labeled)} "
             f"labeled sequences")
    pre_dir = os.path.join(out_dir, "pretrain")
    pretrain = train_supervised(labeled, semi.pretrain, pre_dir,
                                val_sequences=val_sequences)

    progress(f"stage 2/3: pseudo-labeling {len(unlabeled)} unlabeled sequences")
    opts = TrackOptions(points_per_frame=semi.pretrain.points_per_frame,
                        margin=semi.pretrain.margin, seed=semi.pretrain.seed)
    tracker = M2Tracker(pretrain.model, opts)
    pseudo = generate_pseudo_labels(tracker, unlabeled,
                                    source=pretrain.last_checkpoint)
    pseudo_path = os.path.join(out_dir, "pseudo_labels.jsonl")
    write_pseudo_labels(pseudo_path, unlabeled, pseudo)

    progress("stage 3/3: mixed training with motion-consistency and "
             "paste augmentation")
    unlabeled_tracked = [
        _as_tracked(seq, p.tracklet) for seq, p in zip(unlabeled, pseudo)
    ]
    mixed_cfg = replace(semi.mixed, grad_clip=semi.grad_clip)
    hook = _SemiBatchHook(labeled, unlabeled_tracked, semi, mixed_cfg)
    mixed = train_supervised(labeled, mixed_cfg, os.path.join(out_dir, "mixed"),
                             val_sequences=val_sequences,
                             extra_batch_hook=hook)
    return SemiResult(pretrain, pseudo_path, mixed, hook.skipped_cycles,
                      hook.pasted)
