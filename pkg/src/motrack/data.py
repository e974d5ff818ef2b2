"""Dataset types, KITTI-format ingestion, cropping/sampling, and disk formats.

On-disk formats:
  * KITTI tracking labels: 17 space-separated fields per row, camera frame
  * point clouds: 16 bytes per point, four little-endian float32 (x, y, z, r)
  * native tracklets: JSON Lines, one box per line
  * dataset manifest: flat key=value text
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geom import Box3D, distance_map, points_in_box, wrap_angle

KNOWN_CATEGORIES = {
    "Car", "Van", "Truck", "Pedestrian", "Person_sitting", "Cyclist", "Tram", "Misc",
}


@dataclass(eq=False)
class Frame:
    """One sweep: an id and an (N, 3) point array."""

    frame_id: int
    points: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return len(self.points)


@dataclass(eq=False)
class Tracklet:
    """One tracked instance: ordered (frame_id, box) pairs sharing a single size."""

    instance_id: str
    category: str
    entries: list

    def __post_init__(self):
        fids = [f for f, _ in self.entries]
        if any(b <= a for a, b in zip(fids, fids[1:])):
            raise ValueError(f"tracklet {self.instance_id}: frame ids not increasing")
        sizes = np.array([b.size for _, b in self.entries])
        if len(sizes) and not np.allclose(sizes, sizes[0]):
            raise ValueError(f"tracklet {self.instance_id}: box size varies")
        self._by_frame = {f: b for f, b in self.entries}

    def frame_ids(self):
        return [f for f, _ in self.entries]

    def box_at(self, frame_id: int) -> Box3D:
        return self._by_frame[frame_id]

    def has_frame(self, frame_id: int) -> bool:
        return frame_id in self._by_frame

    def first_box(self) -> Box3D:
        return self.entries[0][1]

    def __len__(self):
        return len(self.entries)


@dataclass(eq=False)
class TrackedSequence:
    """A fully annotated sequence: frames, the target tracklet, distractors."""

    seq_id: str
    scene: int
    frames: list
    target: Tracklet
    distractors: list = field(default_factory=list)


@dataclass(eq=False)
class UnlabeledSequence:
    """A sequence where only the first target box is known."""

    seq_id: str
    scene: int
    frames: list
    first_box: Box3D
    category: str = "Car"


@dataclass(eq=False)
class SequenceDataset:
    labeled: list
    unlabeled: list


@dataclass(eq=False)
class StampedCloud:
    """Two merged frames with per-point time flag, prior targetness, box features.

    Feature layout (as_features): xyz (3) | time flag (1) | prior (1) | box-aware (9).
    Time flag 0 marks previous-frame points, 1 current-frame points. Prior
    targetness is 1/0 for previous points in/out of the prior box and exactly
    0.5 for current points, whose box-aware rows are all zero.
    """

    points: np.ndarray
    time: np.ndarray
    prior: np.ndarray
    box_aware: np.ndarray

    def validate(self):
        n = len(self.points)
        assert self.time.shape == (n,) and self.prior.shape == (n,)
        assert self.box_aware.shape == (n, 9)
        assert set(np.unique(self.time)).issubset({0.0, 1.0})
        cur = self.time == 1.0
        assert np.all(self.prior[cur] == 0.5)
        assert np.all(self.box_aware[cur] == 0.0)
        assert np.all(np.isin(self.prior[~cur], (0.0, 1.0)))

    def as_features(self) -> np.ndarray:
        return np.hstack(
            [self.points, self.time[:, None], self.prior[:, None], self.box_aware]
        )

    def __len__(self):
        return len(self.points)


@dataclass(eq=False)
class TrainingSample:
    """A resampled frame pair with its input prior box and GT boxes."""

    prev: Frame
    cur: Frame
    prev_box_input: Box3D
    gt_prev: Box3D
    gt_cur: Box3D
    is_pseudo: bool = False


# ---------------------------------------------------------------------------
# KITTI ingestion

def _cam_row_to_box(h, w, l, x, y, z, ry) -> Box3D:
    """Camera-frame KITTI box (bottom-centered, y down) to z-up world frame."""
    center = np.array([z, -x, -y + h / 2.0])
    yaw = float(wrap_angle(np.pi - ry))
    return Box3D(center, yaw, np.array([w, l, h]))


def parse_kitti_labels(text: str):
    """Parse KITTI tracking label text into a list of Tracklets.

    DontCare rows are dropped silently, unknown categories with a warning.
    Malformed rows raise with their line number.
    """
    per_track = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 17:
            raise ValueError(
                f"line {lineno}: expected 17 fields, got {len(fields)}"
            )
        cat = fields[2]
        if cat == "DontCare":
            continue
        if cat not in KNOWN_CATEGORIES:
            warnings.warn(f"line {lineno}: unknown category {cat!r}, skipped")
            continue
        try:
            frame = int(fields[0])
            track = fields[1]
            h, w, l, x, y, z, ry = (float(v) for v in fields[10:17])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        per_track.setdefault((track, cat), []).append(
            (frame, _cam_row_to_box(h, w, l, x, y, z, ry))
        )
    tracklets = []
    for (track, cat), entries in per_track.items():
        entries.sort(key=lambda e: e[0])
        tracklets.append(Tracklet(track, cat, entries))
    return tracklets


def read_point_bin(raw: bytes, frame_id: int = 0) -> Frame:
    """Decode a 16-byte-per-point binary cloud; reflectance is dropped."""
    if len(raw) % 16 != 0:
        raise ValueError(f"point payload of {len(raw)} bytes is not 16-aligned")
    arr = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return Frame(frame_id, arr[:, :3].astype(np.float64))


def write_point_bin(points: np.ndarray) -> bytes:
    """Encode (N, 3) points in the 16-byte format with zero reflectance."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.zeros((len(pts), 4), dtype="<f4")
    out[:, :3] = pts.astype("<f4")
    return out.tobytes()


# ---------------------------------------------------------------------------
# cropping and sampling

def enlarge_box(box: Box3D, margin: float) -> Box3D:
    """Grow each size dimension by `margin` meters (margin/2 per side)."""
    return Box3D(box.center.copy(), box.yaw, box.size + margin)


def crop_subregion(frame: Frame, anchor: Box3D, margin: float = 2.0) -> Frame:
    """Keep the points inside the anchor box enlarged by `margin` meters."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    if len(frame) == 0:
        return Frame(frame.frame_id, np.zeros((0, 3)))
    keep = points_in_box(frame.points, enlarge_box(anchor, margin))
    return Frame(frame.frame_id, frame.points[keep])


def resample(frame: Frame, n: int, rng, sentinel=None) -> Frame:
    """Resample a frame to exactly n points.

    Without replacement when enough points exist, with replacement otherwise.
    An empty frame yields n copies of the sentinel (default origin) and the
    degenerate flag so downstream stages can fall back to zero motion.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if len(frame) == 0:
        center = np.zeros(3) if sentinel is None else np.asarray(sentinel, float)
        return Frame(frame.frame_id, np.tile(center, (n, 1)), degenerate=True)
    idx = rng.choice(len(frame), size=n, replace=len(frame) < n)
    return Frame(frame.frame_id, frame.points[idx], degenerate=frame.degenerate)


def crop_and_resample(frame: Frame, anchor: Box3D, margin: float, n: int, rng) -> Frame:
    """crop_subregion followed by resample, with the anchor center as sentinel."""
    crop = crop_subregion(frame, anchor, margin)
    return resample(crop, n, rng, sentinel=anchor.center)


def build_stamped(prev: Frame, cur: Frame, prev_box: Box3D) -> StampedCloud:
    """Merge a frame pair into one cloud with time, prior, and box-aware channels."""
    pts = np.vstack([prev.points, cur.points])
    n_prev, n_cur = len(prev), len(cur)
    time = np.concatenate([np.zeros(n_prev), np.ones(n_cur)])
    prior = np.concatenate(
        [
            points_in_box(prev.points, prev_box).astype(np.float64),
            np.full(n_cur, 0.5),
        ]
    )
    box_aware = np.zeros((n_prev + n_cur, 9))
    if n_prev:
        box_aware[:n_prev] = distance_map(prev.points, prev_box)
    return StampedCloud(pts, time, prior, box_aware)


def perturb_box(box: Box3D, rng) -> Box3D:
    """Small random pose shift simulating tracker localization error.

    Uniform offsets: +-0.3 m on x/y, +-0.1 m on z, +-5 degrees yaw. Size kept.
    """
    dxy = rng.uniform(-0.3, 0.3, 2)
    dz = rng.uniform(-0.1, 0.1)
    dyaw = rng.uniform(-np.deg2rad(5.0), np.deg2rad(5.0))
    center = box.center + np.array([dxy[0], dxy[1], dz])
    return Box3D(center, float(wrap_angle(box.yaw + dyaw)), box.size.copy())


def make_training_sample(
    prev_frame: Frame,
    cur_frame: Frame,
    gt_prev: Box3D,
    gt_cur: Box3D,
    rng,
    n_points: int = 1024,
    margin: float = 2.0,
    perturb: bool = True,
    is_pseudo: bool = False,
) -> TrainingSample:
    """Assemble one training pair: perturbed prior box, cropped/resampled frames."""
    prev_box_input = perturb_box(gt_prev, rng) if perturb else gt_prev.copy()
    prev = crop_and_resample(prev_frame, prev_box_input, margin, n_points, rng)
    cur = crop_and_resample(cur_frame, prev_box_input, margin, n_points, rng)
    return TrainingSample(prev, cur, prev_box_input, gt_prev, gt_cur, is_pseudo)


def split_breakpoint(sequences, k: int) -> SequenceDataset:
    """Keep labels for scenes 0..k; later scenes retain only the first target box."""
    scenes = [s.scene for s in sequences]
    if k < 0 or (scenes and k > max(scenes)):
        raise ValueError(f"breakpoint {k} out of scene range 0..{max(scenes)}")
    labeled, unlabeled = [], []
    for seq in sequences:
        if seq.scene <= k:
            labeled.append(seq)
        else:
            unlabeled.append(
                UnlabeledSequence(
                    seq.seq_id,
                    seq.scene,
                    seq.frames,
                    seq.target.first_box().copy(),
                    seq.target.category,
                )
            )
    return SequenceDataset(labeled, unlabeled)


# ---------------------------------------------------------------------------
# native serialization

def tracklet_rows(seq_id: str, tracklet: Tracklet, pseudo: bool = False):
    """Flatten one tracklet into JSONL row dicts."""
    rows = []
    for frame, box in tracklet.entries:
        row = {
            "seq": seq_id,
            "frame": frame,
            "track": tracklet.instance_id,
            "cat": tracklet.category,
            "center": [float(v) for v in box.center],
            "yaw": float(box.yaw),
            "size": [float(v) for v in box.size],
        }
        if pseudo:
            row["pseudo"] = True
        rows.append(row)
    return rows


def write_jsonl(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def rows_to_tracklets(rows):
    """Group JSONL rows back into {(seq, track): Tracklet}."""
    grouped = {}
    for row in rows:
        key = (row["seq"], row["track"])
        grouped.setdefault(key, []).append(row)
    out = {}
    for (seq, track), group in grouped.items():
        group.sort(key=lambda r: r["frame"])
        entries = [
            (r["frame"], Box3D(np.array(r["center"]), r["yaw"], np.array(r["size"])))
            for r in group
        ]
        out[(seq, track)] = Tracklet(track, group[0]["cat"], entries)
    return out


def write_manifest(path, kv: dict):
    with open(path, "w") as fh:
        for key, val in kv.items():
            fh.write(f"{key}={val}\n")


def read_manifest(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            out[key.strip()] = val.strip()
    return out


# ---------------------------------------------------------------------------
# dataset directory layout: manifest.txt + seq_<id>/frame_<t>.bin + boxes.jsonl

def write_dataset(root, sequences, manifest_extra=None):
    """Persist TrackedSequences under `root` in the native layout."""
    os.makedirs(root, exist_ok=True)
    manifest = {"n_sequences": len(sequences)}
    if manifest_extra:
        manifest.update(manifest_extra)
    write_manifest(os.path.join(root, "manifest.txt"), manifest)
    for seq in sequences:
        seq_dir = os.path.join(root, f"seq_{seq.seq_id}")
        os.makedirs(seq_dir, exist_ok=True)
        for fr in seq.frames:
            with open(os.path.join(seq_dir, f"frame_{fr.frame_id:04d}.bin"), "wb") as fh:
                fh.write(write_point_bin(fr.points))
        rows = tracklet_rows(seq.seq_id, seq.target)
        for dis in seq.distractors:
            rows += tracklet_rows(seq.seq_id, dis)
        write_jsonl(os.path.join(seq_dir, "boxes.jsonl"), rows)


def load_dataset(root):
    """Load a native dataset directory back into TrackedSequences."""
    manifest = read_manifest(os.path.join(root, "manifest.txt"))
    sequences = []
    seq_dirs = sorted(
        d for d in os.listdir(root) if d.startswith("seq_")
        and os.path.isdir(os.path.join(root, d))
    )
    for d in seq_dirs:
        seq_id = d[len("seq_"):]
        seq_dir = os.path.join(root, d)
        frames = []
        for name in sorted(os.listdir(seq_dir)):
            if name.startswith("frame_") and name.endswith(".bin"):
                fid = int(name[len("frame_"):-len(".bin")])
                with open(os.path.join(seq_dir, name), "rb") as fh:
                    frames.append(read_point_bin(fh.read(), fid))
        tracklets = rows_to_tracklets(read_jsonl(os.path.join(seq_dir, "boxes.jsonl")))
        target = None
        distractors = []
        for (_, track), tr in sorted(tracklets.items()):
            if track == "target":
                target = tr
            else:
                distractors.append(tr)
        if target is None:
            raise ValueError(f"{d}: no tracklet named 'target'")
        sequences.append(
            TrackedSequence(seq_id, int(seq_id), frames, target, distractors)
        )
    return sequences, manifest
