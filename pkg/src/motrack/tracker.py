"""Motion-centric tracking pipelines.

One differentiable pipeline (`m2_forward`) serves three callers: inference
(wrapped in no_grad), supervised training (which overrides the hard gates with
ground-truth mask/motion labels), and the cycle loss (where even the anchor box
carries gradients). All network inputs are canonicalized to the anchor box
frame, so regressed motions live in that box's canonical frame exactly as the
relative-motion definition requires.

Per-step randomness (crop resampling) derives from (seed, prev frame id, cur
frame id), which makes ensemble proposals bit-identical to plain steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import Frame, Tracklet, build_stamped, crop_and_resample, resample
from .geom import Box3D, RTM4, points_in_box, to_canonical, transform_box
from .nn import TBox, Tensor


@dataclass(eq=False)
class MotionState:
    rtm: RTM4
    dynamic_logits: np.ndarray
    is_dynamic: bool


@dataclass(eq=False)
class TrackerOutput:
    refined_prev_box: Box3D
    coarse_box: Box3D
    refined_box: Box3D
    mask: np.ndarray          # over stamped points, previous rows first
    motion_state: MotionState
    degenerate: bool = False


@dataclass(eq=False)
class TrackOptions:
    points_per_frame: int = 1024
    margin: float = 2.0
    refine_margin: float = 1.0
    search_points: int = 1024
    template_points: int = 512
    seed: int = 0


def _step_rng(seed, prev_id: int, cur_id: int, salt: int = 0):
    return np.random.default_rng((seed, prev_id, cur_id, salt))


def t_local_to_world(local: TBox, anchor: TBox) -> TBox:
    """Compose a box expressed in the anchor's canonical frame with its pose."""
    center = anchor.center + nn.rot_z_apply(anchor.yaw, local.center.reshape(1, 3))[0]
    return TBox(center, nn.wrap_t(anchor.yaw + local.yaw), local.size)


def m2_forward(
    nets: nn.M2Nets,
    prev_pts: np.ndarray,
    cur_pts: np.ndarray,
    anchor: TBox,
    mask_override: np.ndarray = None,
    dynamic_override: bool = None,
):
    """Full two-stage forward pass anchored at `anchor` (the prior box).

    Returns a dict of tensors and TBoxes in the world frame. The target mask
    and the dynamic/static branch are hard gates: they default to the
    network's own argmax decisions and can be overridden with labels during
    training. `degenerate` is set when no point is classified target, in
    which case only the segmentation outputs are present.
    """
    n_prev, n_cur = len(prev_pts), len(cur_pts)
    anchor_np = anchor.to_box()

    prev_l = nn.t_to_canonical(Tensor(prev_pts), anchor)
    cur_l = nn.t_to_canonical(Tensor(cur_pts), anchor)
    pts_l = nn.concat([prev_l, cur_l], axis=0)

    time = np.concatenate([np.zeros(n_prev), np.ones(n_cur)])[:, None]
    prior = np.concatenate(
        [
            points_in_box(prev_pts, anchor_np).astype(np.float64),
            np.full(n_cur, 0.5),
        ]
    )[:, None]
    b0 = TBox(np.zeros(3), 0.0, anchor.size)
    dmap_prev = nn.t_distance_map(prev_l, b0)
    zeros_cur = Tensor(np.zeros((n_cur, 9)))
    dmap = nn.concat([dmap_prev, zeros_cur], axis=0)

    feats14 = nn.concat([pts_l, Tensor(time), Tensor(prior), dmap], axis=1)
    logits, bafeat = nets.seg(feats14)

    if mask_override is not None:
        mask = np.asarray(mask_override, dtype=bool)
    else:
        mask = np.argmax(logits.data, axis=-1) == 1

    out = {
        "logits": logits,
        "bafeat": bafeat,
        "mask": mask,
        "n_prev": n_prev,
        "degenerate": not mask.any(),
    }
    if out["degenerate"]:
        return out

    idx = np.flatnonzero(mask)
    feats13 = nn.concat(
        [pts_l[idx], Tensor(time[idx]), bafeat[idx]], axis=1
    )
    rtm, motion_logits, refine_rtm = nets.stage1(feats13)

    if dynamic_override is None:
        is_dynamic = bool(np.argmax(motion_logits.data) == 1)
    else:
        is_dynamic = bool(dynamic_override)

    refined_prev_l = nn.t_transform_box(b0, refine_rtm)
    coarse_l = (
        nn.t_transform_box(refined_prev_l, rtm) if is_dynamic else refined_prev_l
    )

    # motion-assisted shape completion: carry the previous target points along
    # the predicted motion, merge with the current target points
    prev_idx = idx[idx < n_prev]
    cur_idx = idx[idx >= n_prev]
    prev_sel = pts_l[prev_idx]
    cur_sel = pts_l[cur_idx]
    if is_dynamic:
        prev_sel = nn.t_transform_points(prev_sel, refined_prev_l, rtm)
    merged = nn.concat([prev_sel, cur_sel], axis=0)
    canon = nn.t_to_canonical(merged, coarse_l)
    feats12 = nn.concat(
        [canon, nn.concat([bafeat[prev_idx], bafeat[cur_idx]], axis=0)], axis=1
    )
    rtm2 = nets.stage2(feats12)
    refined_l = nn.t_transform_box(coarse_l, rtm2)

    out.update(
        rtm=rtm,
        motion_logits=motion_logits,
        refine_rtm=refine_rtm,
        rtm2=rtm2,
        is_dynamic=is_dynamic,
        refined_prev=t_local_to_world(refined_prev_l, anchor),
        coarse=t_local_to_world(coarse_l, anchor),
        refined=t_local_to_world(refined_l, anchor),
    )
    return out


def segment_target(nets: nn.M2Nets, prev: Frame, cur: Frame, prev_box: Box3D,
                   mask_override=None):
    """Segmentation stage alone: (points, time flags, mask, degenerate).

    Inputs are expected pre-cropped and resampled. The mask_override seam
    substitutes an oracle mask for the network's argmax.
    """
    stamped = build_stamped(prev, cur, prev_box)
    if mask_override is not None:
        mask = np.asarray(mask_override, dtype=bool)
    else:
        with nn.no_grad():
            anchor = TBox.from_box(prev_box)
            res = m2_forward(nets, prev.points, cur.points, anchor)
            mask = res["mask"]
    return stamped.points[mask], stamped.time[mask], mask, not mask.any()


class M2Tracker:
    """Two-stage tracker around an M2Nets bundle."""

    def __init__(self, nets: nn.M2Nets, options: TrackOptions = None):
        self.nets = nets
        self.options = options or TrackOptions()

    def step(self, prev: Frame, cur: Frame, prev_box: Box3D) -> TrackerOutput:
        opt = self.options
        rng = _step_rng(opt.seed, prev.frame_id, cur.frame_id)
        prev_crop = crop_and_resample(prev, prev_box, opt.margin,
                                      opt.points_per_frame, rng)
        cur_crop = crop_and_resample(cur, prev_box, opt.margin,
                                     opt.points_per_frame, rng)
        if prev_crop.degenerate or cur_crop.degenerate:
            return self._fallback(prev_box, opt.points_per_frame)

        self.nets.eval()
        with nn.no_grad():
            res = m2_forward(
                self.nets, prev_crop.points, cur_crop.points,
                TBox.from_box(prev_box),
            )
        if res["degenerate"]:
            return self._fallback(prev_box, opt.points_per_frame)

        state = MotionState(
            RTM4.from_array(res["rtm"].data),
            res["motion_logits"].data.copy(),
            res["is_dynamic"],
        )
        return TrackerOutput(
            refined_prev_box=res["refined_prev"].to_box(),
            coarse_box=res["coarse"].to_box(),
            refined_box=res["refined"].to_box(),
            mask=res["mask"],
            motion_state=state,
            degenerate=False,
        )

    @staticmethod
    def _fallback(prev_box: Box3D, n: int) -> TrackerOutput:
        zero = MotionState(RTM4.identity(), np.zeros(2), False)
        return TrackerOutput(
            prev_box.copy(), prev_box.copy(), prev_box.copy(),
            np.zeros(2 * n, dtype=bool), zero, degenerate=True,
        )


class MVanillaTracker:
    """Single-stage tracker: stamped cloud straight to one motion vector."""

    def __init__(self, net: nn.MVanillaNet, options: TrackOptions = None):
        self.net = net
        self.options = options or TrackOptions()

    def step(self, prev: Frame, cur: Frame, prev_box: Box3D) -> TrackerOutput:
        opt = self.options
        rng = _step_rng(opt.seed, prev.frame_id, cur.frame_id)
        prev_crop = crop_and_resample(prev, prev_box, opt.margin,
                                      opt.points_per_frame, rng)
        cur_crop = crop_and_resample(cur, prev_box, opt.margin,
                                     opt.points_per_frame, rng)
        if prev_crop.degenerate or cur_crop.degenerate:
            return M2Tracker._fallback(prev_box, opt.points_per_frame)

        self.net.eval()
        with nn.no_grad():
            rtm_t = mvanilla_forward(self.net, prev_crop.points,
                                     cur_crop.points, TBox.from_box(prev_box))
        rtm = RTM4.from_array(rtm_t.data)
        box = transform_box(prev_box, rtm)
        state = MotionState(rtm, np.zeros(2), True)
        n = opt.points_per_frame
        return TrackerOutput(prev_box.copy(), box, box.copy(),
                             np.zeros(2 * n, dtype=bool), state, False)


def load_tracker(path, options: TrackOptions = None):
    """Rebuild a tracker from a checkpoint, inferring the network family.

    Two-stage bundles store their segmentation arrays under "seg."; the
    presence of running-stat arrays tells whether the nets were built with
    feature normalization. Initialization draws are irrelevant (every
    parameter is overwritten), so the init rng is fixed.
    """
    arrays = nn.load_arrays(path)
    state = {k: v for k, v in arrays.items() if not k.startswith("extra.")}
    two_stage = any(k.startswith("seg.") for k in state)
    norm = any(k.endswith(".running_mean") for k in state)
    rng = np.random.default_rng(0)
    if two_stage:
        net = nn.M2Nets(rng, norm=norm)
        net.load_state_dict(state)
        return M2Tracker(net, options)
    net = nn.MVanillaNet(rng, norm=norm)
    net.load_state_dict(state)
    return MVanillaTracker(net, options)


def mvanilla_forward(net: nn.MVanillaNet, prev_pts, cur_pts, anchor: TBox) -> Tensor:
    """Stamped 14-channel features of both crops to a single RTM tensor."""
    n_prev, n_cur = len(prev_pts), len(cur_pts)
    anchor_np = anchor.to_box()
    prev_l = nn.t_to_canonical(Tensor(prev_pts), anchor)
    cur_l = nn.t_to_canonical(Tensor(cur_pts), anchor)
    pts_l = nn.concat([prev_l, cur_l], axis=0)
    time = np.concatenate([np.zeros(n_prev), np.ones(n_cur)])[:, None]
    prior = np.concatenate(
        [points_in_box(prev_pts, anchor_np).astype(np.float64), np.full(n_cur, 0.5)]
    )[:, None]
    b0 = TBox(np.zeros(3), 0.0, anchor.size)
    dmap = nn.concat(
        [nn.t_distance_map(prev_l, b0), Tensor(np.zeros((n_cur, 9)))], axis=0
    )
    feats = nn.concat([pts_l, Tensor(time), Tensor(prior), dmap], axis=1)
    return net(feats)


# ---------------------------------------------------------------------------
# sequence-level tracking

def ensemble_step(tracker, history, cur: Frame):
    """Multi-frame proposal voting.

    history holds (Frame, Box3D) pairs, most recent last. Each of the N most
    recent entries proposes a box for the current frame; the proposal holding
    the most current-frame points wins, ties favoring the most recent frame.
    Returns (winning TrackerOutput, debug dict).
    """
    if not history:
        raise ValueError("ensemble_step needs at least one history entry")
    best = None
    best_count = -1
    counts = []
    for n in range(1, len(history) + 1):
        prev_frame, prev_box = history[-n]
        out = tracker.step(prev_frame, cur, prev_box)
        count = int(points_in_box(cur.points, out.refined_box).sum())
        counts.append(count)
        if count > best_count:
            best, best_count = out, count
    return best, {"counts": counts, "chosen": int(np.argmax(counts)) + 1}


def track_sequence(tracker, frames, first_box: Box3D, ensemble: int = 1,
                   refiner=None, debug_sink: list = None) -> Tracklet:
    """Frame-by-frame propagation from a first-frame box.

    Each step's refined box becomes the next step's prior. With ensemble > 1
    the N most recent (frame, box) pairs vote. An optional refiner hook
    post-adjusts every step's output box. The first frame's box is echoed.
    """
    if len(frames) == 0:
        raise ValueError("empty sequence")
    if ensemble < 1:
        raise ValueError("ensemble must be >= 1")
    first_target = _target_points_cache(frames[0], first_box)
    entries = [(frames[0].frame_id, first_box.copy())]
    history = [(frames[0], first_box.copy())]
    for cur in frames[1:]:
        out, dbg = ensemble_step(tracker, history[-ensemble:], cur)
        box = out.refined_box
        if refiner is not None and not out.degenerate:
            prev_frame, prev_box = history[-1]
            box = refine_with_matcher(
                box, prev_frame, cur, prev_box, refiner,
                options=getattr(tracker, "options", None) or TrackOptions(),
                first_template=first_target,
            )
        if debug_sink is not None:
            debug_sink.append(
                {
                    "frame": int(cur.frame_id),
                    "degenerate": bool(out.degenerate),
                    "dynamic": bool(out.motion_state.is_dynamic),
                    "counts": dbg["counts"],
                    "chosen": dbg["chosen"],
                }
            )
        entries.append((cur.frame_id, box))
        history.append((cur, box))
    return Tracklet("target", "Car", entries)


def _target_points_cache(frame: Frame, box: Box3D) -> np.ndarray:
    """First-frame target points in the box's canonical frame (template seed)."""
    inside = points_in_box(frame.points, box)
    return to_canonical(frame.points[inside], box)


# ---------------------------------------------------------------------------
# matching-based refinement hook

def identity_refiner(search_pts: np.ndarray, template_pts: np.ndarray) -> np.ndarray:
    """No-op refiner: keep the motion box."""
    return np.zeros(4)


class CentroidRefiner:
    """Naive canonical-frame alignment: iteratively match trimmed centroids.

    Selects search points within the template's bounding extent (plus padding)
    around the current offset estimate and moves the offset to the centroid
    difference. Purely translational; yaw is left to the motion stage. The
    padding must cover the expected residual drift of the motion box, or the
    first selection window clips one side of the target and biases the match.
    """

    def __init__(self, iters: int = 3, pad: float = 0.5):
        self.iters = iters
        self.pad = pad

    def __call__(self, search_pts: np.ndarray, template_pts: np.ndarray) -> np.ndarray:
        if len(search_pts) == 0 or len(template_pts) == 0:
            return np.zeros(4)
        extent = np.abs(template_pts).max(axis=0) + self.pad
        t_centroid = template_pts.mean(axis=0)
        offset = np.zeros(3)
        for _ in range(self.iters):
            sel = np.all(np.abs(search_pts - offset) <= extent, axis=1)
            if not sel.any():
                break
            offset = search_pts[sel].mean(axis=0) - t_centroid
        return np.array([offset[0], offset[1], offset[2], 0.0])


def refine_with_matcher(motion_box: Box3D, prev: Frame, cur: Frame,
                        prev_box: Box3D, refiner, options: TrackOptions = None,
                        first_template: np.ndarray = None) -> Box3D:
    """Post-refine a motion-predicted box with a matching-style module.

    The search area is the current frame cropped around the motion box with a
    small margin and canonicalized to it; the template merges the previous
    target crop (centered on its box) with the first-frame target points. The
    refiner returns a canonical-frame motion applied on top of motion_box; the
    output size always stays the tracklet size.
    """
    opt = options or TrackOptions()
    rng = _step_rng(opt.seed, prev.frame_id, cur.frame_id, salt=1)
    search = crop_and_resample(cur, motion_box, opt.refine_margin,
                               opt.search_points, rng)
    if search.degenerate:
        return motion_box.copy()
    search_canon = to_canonical(search.points, motion_box)

    prev_inside = points_in_box(prev.points, prev_box)
    template = to_canonical(prev.points[prev_inside], prev_box)
    if first_template is not None and len(first_template):
        template = (
            np.vstack([template, first_template]) if len(template) else first_template
        )
    if len(template) == 0:
        return motion_box.copy()
    template = resample(Frame(prev.frame_id, template),
                        opt.template_points, rng).points

    rtm = np.asarray(refiner(search_canon, template), dtype=np.float64)
    out = transform_box(motion_box, RTM4.from_array(rtm))
    out.size = motion_box.size.copy()
    return out
