"""Procedural driving-scene generator for desk-scale training and benchmarks.

Each sequence simulates one rigid car-like target plus K same-category
distractors moving over a cluttered ground patch. Object points come from a
per-object surface template (sampled once) that is rigidly moved each frame,
then thinned by dropout and blurred by sensor jitter, so frames have realistic
partial correspondence. All draws flow through one numpy Generator, which
makes sequences bit-reproducible per (config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Frame, TrackedSequence, Tracklet
from .geom import Box3D, RTM4, transform_box, wrap_angle


@dataclass(eq=False)
class SynthConfig:
    n_frames: int = 20
    size_w: tuple = (1.6, 2.0)
    size_l: tuple = (3.8, 4.6)
    size_h: tuple = (1.4, 1.7)
    speed: tuple = (0.2, 0.8)      # m per frame along the heading
    turn: tuple = (-0.05, 0.05)    # rad per frame
    static_prob: float = 0.15
    k_distractors: int = 2
    points_per_object: tuple = (60, 150)
    clutter_points: int = 600
    dropout: float = 0.1
    jitter: float = 0.01
    category: str = "Car"

    def validate(self):
        if self.n_frames < 2:
            raise ValueError("n_frames must be at least 2")
        if self.k_distractors < 0 or self.clutter_points < 0:
            raise ValueError("counts must be non-negative")
        if not (0.0 <= self.static_prob <= 1.0 and 0.0 <= self.dropout < 1.0):
            raise ValueError("probabilities out of range")
        for lo, hi in (
            self.size_w, self.size_l, self.size_h,
            self.speed, self.turn, self.points_per_object,
        ):
            if hi < lo:
                raise ValueError(f"empty range ({lo}, {hi})")
        if self.points_per_object[0] < 1:
            raise ValueError("points_per_object must be at least 1")
        return self


@dataclass(eq=False)
class SynthSequence:
    frames: list
    target: Tracklet
    distractors: list
    commanded: list        # per-step RTM4 commands driving the target
    config: SynthConfig = None


# visible box faces and their canonical normals; the bottom face is skipped
# (a roof-mounted sensor never sees it)
_FACES = ("+x", "-x", "+y", "-y", "+z")


def _sample_surface(size, n, rng):
    """Uniform-by-area canonical surface samples on the 5 visible box faces."""
    w, l, h = size
    areas = np.array([l * h, l * h, w * h, w * h, w * l])
    face_idx = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, (n, 2))
    pts = np.zeros((n, 3))
    for i, face in enumerate(_FACES):
        sel = face_idx == i
        axis = "xyz".index(face[1])
        sign = 1.0 if face[0] == "+" else -1.0
        others = [a for a in range(3) if a != axis]
        pts[sel, axis] = sign * 0.5 * size[axis]
        pts[sel, others[0]] = u[sel, 0] * size[others[0]]
        pts[sel, others[1]] = u[sel, 1] * size[others[1]]
    return pts


def _simulate_object(cfg: SynthConfig, rng, start_center_xy, n_frames):
    """Roll one object's pose chain; returns (boxes, commanded rtms, template)."""
    size = np.array(
        [
            rng.uniform(*cfg.size_w),
            rng.uniform(*cfg.size_l),
            rng.uniform(*cfg.size_h),
        ]
    )
    yaw = rng.uniform(-np.pi, np.pi)
    box = Box3D(np.array([start_center_xy[0], start_center_xy[1], size[2] / 2]),
                yaw, size)
    static = rng.uniform() < cfg.static_prob
    speed = rng.uniform(*cfg.speed)
    turn = rng.uniform(*cfg.turn)
    n_pts = int(rng.integers(cfg.points_per_object[0], cfg.points_per_object[1] + 1))
    template = _sample_surface(size, n_pts, rng)

    boxes = [box]
    commanded = []
    for _ in range(n_frames - 1):
        if static:
            rtm = RTM4.identity()
        else:
            # forward speed with mild per-frame variation, slight lateral drift
            dy = speed + rng.uniform(-0.04, 0.04)
            dx = rng.uniform(-0.03, 0.03)
            dyaw = turn + rng.uniform(-0.01, 0.01)
            rtm = RTM4(dx, dy, 0.0, dyaw)
        commanded.append(rtm)
        boxes.append(transform_box(boxes[-1], rtm))
    return boxes, commanded, template


def _render(template, box, rng, dropout, jitter):
    """World points of one object in one frame: move, thin, blur."""
    keep = rng.uniform(size=len(template)) >= dropout
    pts = template[keep]
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    world = pts @ rot.T + box.center
    if jitter > 0:
        world = world + rng.normal(0.0, jitter, world.shape)
    return world


def synth_sequence(config: SynthConfig, seed) -> SynthSequence:
    """Generate one sequence: frames, target tracklet, distractor tracklets."""
    config.validate()
    rng = np.random.default_rng(seed)

    start = rng.uniform(-3.0, 3.0, 2)
    t_boxes, commanded, t_template = _simulate_object(
        config, rng, start, config.n_frames
    )

    d_boxes, d_templates = [], []
    for _ in range(config.k_distractors):
        ang = rng.uniform(-np.pi, np.pi)
        dist = rng.uniform(3.0, 8.0)
        pos = start + dist * np.array([np.cos(ang), np.sin(ang)])
        boxes, _, template = _simulate_object(config, rng, pos, config.n_frames)
        d_boxes.append(boxes)
        d_templates.append(template)

    # static ground clutter strewn along the target's path
    path = np.array([b.center[:2] for b in t_boxes])
    anchors = path[rng.integers(0, len(path), config.clutter_points)]
    clutter = np.column_stack(
        [
            anchors + rng.uniform(-6.0, 6.0, (config.clutter_points, 2)),
            rng.uniform(-0.05, 0.05, config.clutter_points),
        ]
    )

    frames = []
    for t in range(config.n_frames):
        parts = [_render(t_template, t_boxes[t], rng, config.dropout, config.jitter)]
        for boxes, template in zip(d_boxes, d_templates):
            parts.append(_render(template, boxes[t], rng, config.dropout, config.jitter))
        if config.clutter_points:
            keep = rng.uniform(size=config.clutter_points) >= config.dropout
            noisy = clutter[keep] + rng.normal(0.0, config.jitter, (keep.sum(), 3))
            parts.append(noisy)
        frames.append(Frame(t, np.vstack(parts)))

    target = Tracklet("target", config.category, list(enumerate(t_boxes)))
    distractors = [
        Tracklet(f"distractor_{j}", config.category, list(enumerate(boxes)))
        for j, boxes in enumerate(d_boxes)
    ]
    return SynthSequence(frames, target, distractors, commanded, config)


def make_dataset(config: SynthConfig, n_sequences: int, seed, start_index: int = 0):
    """A list of TrackedSequences; sequence i is seeded by (seed, start_index+i)."""
    if n_sequences < 0:
        raise ValueError("n_sequences must be non-negative")
    out = []
    for i in range(start_index, start_index + n_sequences):
        ss = synth_sequence(config, (seed, i))
        out.append(TrackedSequence(f"{i:04d}", i, ss.frames, ss.target, ss.distractors))
    return out
