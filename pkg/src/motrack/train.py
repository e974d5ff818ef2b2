"""Supervised training: losses, augmentation, optimizer, and the epoch loop.

The loss follows the tracker composition end to end: segmentation cross
entropy, motion classification cross entropy, box-feature regression, and
Huber terms on all four motion vectors (the regressed motion, the previous-box
refinement, and the residual motions carrying the coarse and refined boxes
onto the ground-truth current box). Point selection and the dynamic/static
branch are teacher-forced with labels; inference uses the network's own
decisions.

Everything is deterministic per (seed, single thread): each epoch owns one
generator seeded by (seed, epoch), and resuming from a checkpoint at an epoch
boundary replays the exact remaining schedule.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .data import (
    Frame,
    TrainingSample,
    make_training_sample,
    perturb_box,
)
from .geom import (
    Box3D,
    RTM4,
    distance_map,
    from_canonical,
    points_in_box,
    rtm_between,
    to_canonical,
    transform_box,
    transform_points,
)
from .metrics import ope, weighted_mean
from .nn import TBox, Tensor
from .tracker import M2Tracker, MVanillaTracker, TrackOptions, m2_forward, mvanilla_forward

DYNAMIC_THRESHOLD = 0.15  # meters of GT center motion separating static/dynamic


@dataclass
class LossWeights:
    w_mask: float = 0.1
    w_motion: float = 0.1
    w_box_feat: float = 1.0
    w_rtm: float = 1.0


@dataclass
class AugConfig:
    prob: float = 0.5            # chance of the flip/rotate/translate draw
    temporal: bool = True        # enable time-reversal augmentation
    temporal_prob: float = 0.5
    max_rotate: float = np.deg2rad(10.0)
    max_translate: float = 0.3

    def validate(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError("augmentation probability must lie in [0, 1]")
        if not 0.0 <= self.temporal_prob <= 1.0:
            raise ValueError("temporal flip probability must lie in [0, 1]")


@dataclass
class TrainConfig:
    seed: int
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay: float = 0.1
    lr_step: int = 20
    points_per_frame: int = 1024
    margin: float = 2.0
    interval_max: int = 1
    samples_per_epoch: int = 0   # 0 means one full pass over all pairs
    perturb_prev: bool = True
    model: str = "m2"            # "m2" or "mvanilla"
    norm: bool = True
    grad_clip: float = 0.0       # 0 disables clipping
    stop_below_frac: float = 0.0  # early-stop when loss < frac * first loss
    save_every: int = 1          # checkpoint cadence in epochs (last epoch always)
    aug: AugConfig = field(default_factory=AugConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self):
        if self.seed is None:
            raise ValueError("training requires an explicit seed")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.model not in ("m2", "mvanilla"):
            raise ValueError(f"unknown model '{self.model}'")
        if self.interval_max < 1:
            raise ValueError("interval_max must be >= 1")
        self.aug.validate()


def lr_at(config: TrainConfig, epoch: int) -> float:
    return config.lr * config.lr_decay ** (epoch // config.lr_step)


# ---------------------------------------------------------------------------
# targets and losses

def is_dynamic_label(gt_prev: Box3D, gt_cur: Box3D) -> bool:
    return float(np.linalg.norm(gt_cur.center - gt_prev.center)) > DYNAMIC_THRESHOLD


def sample_targets(sample: TrainingSample) -> dict:
    """Label pack for one training sample, in stamped point order."""
    prev_in = points_in_box(sample.prev.points, sample.gt_prev)
    cur_in = points_in_box(sample.cur.points, sample.gt_cur)
    mask = np.concatenate([prev_in, cur_in]).astype(np.int64)
    box_feat = np.vstack(
        [
            distance_map(sample.prev.points, sample.gt_prev),
            distance_map(sample.cur.points, sample.gt_cur),
        ]
    )
    return {
        "mask": mask,
        "box_feat": box_feat,
        "dynamic": int(is_dynamic_label(sample.gt_prev, sample.gt_cur)),
        "rtm_motion": rtm_between(sample.gt_prev, sample.gt_cur).as_array(),
        "rtm_refine": rtm_between(sample.prev_box_input, sample.gt_prev).as_array(),
        "gt_prev": sample.gt_prev,
        "gt_cur": sample.gt_cur,
    }


_REQUIRED_TARGETS = ("mask", "box_feat", "dynamic", "rtm_motion", "rtm_refine", "gt_cur")


def loss_full(result: dict, targets: dict, w: LossWeights = None):
    """Weighted sum of all loss terms with a per-component report.

    `result` is an m2 forward dict; `targets` comes from sample_targets. When
    the forward pass is degenerate (no selected points) only the segmentation
    terms apply. Reported components sum to the total exactly.
    """
    w = w or LossWeights()
    missing = [k for k in _REQUIRED_TARGETS if k not in targets]
    if missing:
        raise ValueError(f"targets missing components: {missing}")

    seg_ce = nn.softmax_cross_entropy(result["logits"], targets["mask"]).mean()
    box_feat = nn.huber(result["bafeat"], Tensor(targets["box_feat"])).mean()
    total = w.w_mask * seg_ce + w.w_box_feat * box_feat
    components = {
        "mask": w.w_mask * float(seg_ce.data),
        "box_feat": w.w_box_feat * float(box_feat.data),
        "motion": 0.0,
        "rtm": 0.0,
    }
    if not result["degenerate"]:
        motion_ce = nn.softmax_cross_entropy(
            result["motion_logits"].reshape(1, 2),
            np.array([targets["dynamic"]], dtype=np.int64),
        ).mean()
        gt_cur = TBox.from_box(targets["gt_cur"])
        zero4 = Tensor(np.zeros(4))
        h_motion = nn.huber(result["rtm"], Tensor(targets["rtm_motion"])).mean()
        h_refine = nn.huber(result["refine_rtm"], Tensor(targets["rtm_refine"])).mean()
        h_stage1 = nn.huber(nn.t_rtm_between(result["coarse"], gt_cur), zero4).mean()
        h_stage2 = nn.huber(nn.t_rtm_between(result["refined"], gt_cur), zero4).mean()
        rtm_sum = h_motion + h_refine + h_stage1 + h_stage2
        total = total + w.w_motion * motion_ce + w.w_rtm * rtm_sum
        components["motion"] = w.w_motion * float(motion_ce.data)
        components["rtm"] = w.w_rtm * float(rtm_sum.data)
    components["total"] = float(total.data)
    return total, components


def loss_mvanilla(rtm_pred: Tensor, targets: dict, w: LossWeights = None):
    w = w or LossWeights()
    if "rtm_motion" not in targets:
        raise ValueError("targets missing components: ['rtm_motion']")
    h = nn.huber(rtm_pred, Tensor(targets["rtm_motion"])).mean()
    total = w.w_rtm * h
    return total, {"rtm": float(total.data), "mask": 0.0, "motion": 0.0,
                   "box_feat": 0.0, "total": float(total.data)}


def forward_sample(model, sample: TrainingSample, kind: str):
    """Run the training-time forward pass with teacher-forced gates."""
    anchor = TBox.from_box(sample.prev_box_input)
    if kind == "mvanilla":
        return mvanilla_forward(model, sample.prev.points, sample.cur.points,
                                anchor)
    tgt = sample_targets(sample)
    return m2_forward(
        model, sample.prev.points, sample.cur.points, anchor,
        mask_override=tgt["mask"].astype(bool),
        dynamic_override=bool(tgt["dynamic"]),
    )


# ---------------------------------------------------------------------------
# augmentation

def augment_basic(sample: TrainingSample, rng,
                  max_rotate: float = np.deg2rad(10.0),
                  max_translate: float = 0.3) -> TrainingSample:
    """Move the current-frame target (points and box together) to synthesize
    a new relative motion: optional width-axis mirror, then a small local
    rotation and translation. Background points and the previous frame stay
    untouched; motion labels are recomputed from the boxes downstream.
    """
    flip = rng.uniform() > 0.5
    dyaw = rng.uniform(-max_rotate, max_rotate)
    dt = rng.uniform(-max_translate, max_translate, 3)
    if not flip and dyaw == 0.0 and np.all(dt == 0.0):
        return sample

    inside = points_in_box(sample.cur.points, sample.gt_cur)
    target_pts = sample.cur.points[inside]
    if flip:
        canon = to_canonical(target_pts, sample.gt_cur)
        canon[:, 0] = -canon[:, 0]
        target_pts = from_canonical(canon, sample.gt_cur)
    move = RTM4(dt[0], dt[1], dt[2], dyaw)
    new_box = transform_box(sample.gt_cur, move)
    moved = transform_points(target_pts, sample.gt_cur, move)

    new_points = sample.cur.points.copy()
    new_points[inside] = moved
    new_cur = Frame(sample.cur.frame_id, new_points, sample.cur.degenerate)
    return replace(sample, cur=new_cur, gt_cur=new_box)


def coin_flip(sample: TrainingSample, rng, p: float) -> TrainingSample:
    """Apply augment_basic with probability p, identity otherwise."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    return augment_basic(sample, rng) if rng.uniform() < p else sample


def temporal_flip(sample: TrainingSample, rng) -> TrainingSample:
    """Reverse time: swap the frames and GT boxes, so the motion label becomes
    the inverse relation, and draw a fresh perturbed input box around the new
    previous ground truth."""
    return replace(
        sample,
        prev=sample.cur,
        cur=sample.prev,
        gt_prev=sample.gt_cur,
        gt_cur=sample.gt_prev,
        prev_box_input=perturb_box(sample.gt_cur, rng),
    )


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Classic exponential-moment optimizer over a named parameter dict."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            m = self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * p.grad
            v = self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * p.grad ** 2
            p.data -= lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def state_arrays(self) -> dict:
        out = {"adam.t": np.array([float(self.t)])}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict):
        self.t = int(arrays["adam.t"][0])
        for k in self.params:
            self.m[k] = arrays[f"adam.m.{k}"].reshape(self.m[k].shape).copy()
            self.v[k] = arrays[f"adam.v.{k}"].reshape(self.v[k].shape).copy()


def clip_gradients(params: dict, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def gradient_check(config: TrainConfig = None, probes: int = 6,
                   steps=(1e-5, 1e-6, 1e-7, 1e-9)) -> dict:
    """Finite-difference audit of the training-loss parameter gradients.

    Builds one small synthetic sample, evaluates the teacher-forced loss, and
    compares analytic gradients against central differences for a spread of
    parameter entries. Each entry keeps its best step from a small grid: near
    a relu/pool kink a single fixed step can straddle the boundary and bias
    the quotient, while a wrong backward formula disagrees at every step.
    Returns {"max_rel_err", "probes": [{param, index, analytic, rel_err}]}.
    """
    from .synth import SynthConfig, make_dataset

    config = config or TrainConfig(seed=0)
    synth_cfg = SynthConfig(n_frames=2, k_distractors=0, clutter_points=50,
                            points_per_object=(30, 40))
    seq = make_dataset(synth_cfg, 1, config.seed)[0]
    f0, f1 = seq.frames[0], seq.frames[1]
    sample = make_training_sample(
        f0, f1, seq.target.box_at(f0.frame_id), seq.target.box_at(f1.frame_id),
        np.random.default_rng((config.seed, 1)),
        n_points=min(config.points_per_frame, 24), margin=config.margin,
    )
    model = make_model(config)
    targets = sample_targets(sample)

    def closure():
        if config.model == "mvanilla":
            pred = forward_sample(model, sample, "mvanilla")
            return loss_mvanilla(pred, targets, config.weights)[0]
        res = forward_sample(model, sample, "m2")
        return loss_full(res, targets, config.weights)[0]

    params = model.named_params()
    for p in params.values():
        p.grad = None
    closure().backward()

    names = sorted(params)
    report = []
    worst = 0.0
    for name in names[:: max(1, len(names) // probes)][:probes]:
        p = params[name]
        flat = p.data.reshape(-1)
        idx = flat.size // 2
        analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[idx])
        orig = flat[idx]
        best = np.inf
        for h in steps:
            vals = []
            with nn.no_grad():
                for delta in (h, -h):
                    flat[idx] = orig + delta
                    vals.append(float(closure().data))
            flat[idx] = orig
            fd = (vals[0] - vals[1]) / (2 * h)
            best = min(best, abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-4))
            if best < 1e-6:
                break
        report.append({"param": name, "index": idx,
                       "analytic": analytic, "rel_err": best})
        worst = max(worst, best)
    return {"max_rel_err": worst, "probes": report}


# ---------------------------------------------------------------------------
# the epoch loop

CSV_HEADER = [
    "epoch", "loss_total", "loss_mask", "loss_motion", "loss_box_feat",
    "loss_rtm", "val_success", "val_precision", "lr", "wall_seconds",
]


@dataclass
class TrainResult:
    model: object
    last_checkpoint: str
    csv_log: str
    epoch_losses: list


def enumerate_pairs(sequences, interval_max: int):
    pairs = []
    for si, seq in enumerate(sequences):
        n = len(seq.frames)
        for k in range(1, interval_max + 1):
            pairs.extend((si, t, t + k) for t in range(n - k))
    return pairs


def build_sample(sequences, pair, rng, config: TrainConfig) -> TrainingSample:
    si, t_prev, t_cur = pair
    seq = sequences[si]
    f_prev, f_cur = seq.frames[t_prev], seq.frames[t_cur]
    sample = make_training_sample(
        f_prev, f_cur,
        seq.target.box_at(f_prev.frame_id), seq.target.box_at(f_cur.frame_id),
        rng, n_points=config.points_per_frame, margin=config.margin,
        perturb=config.perturb_prev,
    )
    aug = config.aug
    if aug.temporal and rng.uniform() < aug.temporal_prob:
        sample = temporal_flip(sample, rng)
    return coin_flip(sample, rng, aug.prob)


def make_model(config: TrainConfig, rng=None):
    rng = rng or np.random.default_rng((config.seed, 0xC0FFEE))
    if config.model == "mvanilla":
        return nn.MVanillaNet(rng, norm=config.norm)
    return nn.M2Nets(rng, norm=config.norm)


def batch_loss(model, samples, config: TrainConfig):
    """Accumulate gradients for one batch; returns summed component report."""
    agg = {"total": 0.0, "mask": 0.0, "motion": 0.0, "box_feat": 0.0, "rtm": 0.0}
    inv = 1.0 / len(samples)
    for sample in samples:
        if config.model == "mvanilla":
            rtm_pred = forward_sample(model, sample, "mvanilla")
            loss, comp = loss_mvanilla(rtm_pred, sample_targets(sample),
                                       config.weights)
        else:
            res = forward_sample(model, sample, "m2")
            loss, comp = loss_full(res, sample_targets(sample), config.weights)
        (loss * inv).backward()
        for key in agg:
            agg[key] += comp[key] * inv
    return agg


def _validate(model, config: TrainConfig, val_sequences) -> tuple:
    kind = config.model
    opts = TrackOptions(points_per_frame=config.points_per_frame,
                        margin=config.margin, seed=config.seed)
    tracker = (MVanillaTracker(model, opts) if kind == "mvanilla"
               else M2Tracker(model, opts))
    from .tracker import track_sequence

    results = []
    for seq in val_sequences:
        pred = track_sequence(tracker, seq.frames, seq.target.first_box())
        results.append(ope(pred, seq.target))
    model.train()
    agg = weighted_mean(results)
    return agg.success, agg.precision


def train_supervised(sequences, config: TrainConfig, out_dir,
                     val_sequences=None, resume: str = None,
                     model=None, extra_batch_hook=None) -> TrainResult:
    """Train a tracker on labeled sequences.

    Writes `last.ckpt` (weights + optimizer + epoch) and `train_log.csv` into
    out_dir every epoch. `resume` restarts from a checkpoint at its next
    epoch and reproduces the uninterrupted run exactly. `extra_batch_hook`
    (used by the semi-supervised loop) may add loss terms per batch.
    """
    config.validate()
    if not sequences:
        raise ValueError("empty training dataset")
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "train_log.csv")
    ckpt_path = os.path.join(out_dir, "last.ckpt")

    model = model if model is not None else make_model(config)
    params = model.named_params()
    opt = Adam(params, lr=config.lr)
    start_epoch = 0
    if resume is not None:
        extra = nn.load_checkpoint(resume, model)
        opt.load_state_arrays(extra)
        start_epoch = int(extra["epoch"][0]) + 1

    pairs = enumerate_pairs(sequences, config.interval_max)
    append = start_epoch > 0 and os.path.exists(csv_path)
    epoch_losses = []
    first_loss = None
    with open(csv_path, "a" if append else "w", newline="") as log:
        writer = csv.writer(log)
        if not append:
            writer.writerow(CSV_HEADER)
        for epoch in range(start_epoch, config.epochs):
            tic = time.perf_counter()
            rng = np.random.default_rng((config.seed, epoch))
            order = rng.permutation(len(pairs))
            if config.samples_per_epoch:
                order = order[: config.samples_per_epoch]
            model.train()
            lr = lr_at(config, epoch)
            epoch_agg = None
            n_batches = 0
            for lo in range(0, len(order), config.batch_size):
                batch = [build_sample(sequences, pairs[i], rng, config)
                         for i in order[lo: lo + config.batch_size]]
                opt.zero_grad()
                agg = batch_loss(model, batch, config)
                if extra_batch_hook is not None:
                    agg = extra_batch_hook(model, rng, agg)
                if config.grad_clip > 0:
                    clip_gradients(params, config.grad_clip)
                opt.step(lr=lr)
                n_batches += 1
                epoch_agg = (agg if epoch_agg is None else
                             {k: epoch_agg[k] + agg[k] for k in agg})
            epoch_agg = {k: v / n_batches for k, v in epoch_agg.items()}
            epoch_losses.append(epoch_agg["total"])
            if first_loss is None:
                first_loss = epoch_agg["total"]

            val_s = val_p = ""
            if val_sequences:
                s, p = _validate(model, config, val_sequences)
                val_s, val_p = f"{s:.4f}", f"{p:.4f}"
            writer.writerow([
                epoch, f"{epoch_agg['total']:.6f}", f"{epoch_agg['mask']:.6f}",
                f"{epoch_agg['motion']:.6f}", f"{epoch_agg['box_feat']:.6f}",
                f"{epoch_agg['rtm']:.6f}", val_s, val_p, f"{lr:.8g}",
                f"{time.perf_counter() - tic:.3f}",
            ])
            log.flush()
            stopping = (
                config.stop_below_frac > 0
                and epoch_agg["total"] < config.stop_below_frac * first_loss
            )
            if (epoch + 1) % config.save_every == 0 or epoch == config.epochs - 1 \
                    or stopping:
                nn.save_checkpoint(
                    ckpt_path, model,
                    extra={"epoch": np.array([float(epoch)]), **opt.state_arrays()},
                )
            if stopping:
                break
    return TrainResult(model, ckpt_path, csv_path, epoch_losses)
