"""Motion-centric 3D single object tracking on LiDAR point clouds.

The package tracks one rigid object through a point cloud sequence by
regressing its relative motion between consecutive frames (a 4DOF translation
plus yaw), optionally refining the motion-predicted box in a second stage.
Includes a procedural scene generator, KITTI-format ingestion, a hand-rolled
float64 autodiff stack (`motrack.nn`), supervised and semi-supervised
training, one-pass evaluation metrics, and a command line (`motrack`).

Submodules and curated names load lazily on first attribute access, which
keeps `import motrack` free of numpy until something numeric is touched (the
command line relies on this to pin BLAS thread pools before numpy starts).
"""

from importlib import import_module

__version__ = "0.1.0"

_SUBMODULES = (
    "cli", "data", "geom", "metrics", "nn", "semi", "synth", "tracker", "train",
)

# name -> defining submodule
_EXPORTS = {
    # geometry
    "Box3D": "geom", "RTM4": "geom", "wrap_angle": "geom", "rot_z": "geom",
    "to_canonical": "geom", "from_canonical": "geom", "transform_box": "geom",
    "transform_points": "geom", "rtm_between": "geom", "points_in_box": "geom",
    "box_corners": "geom", "distance_map": "geom", "iou_3d": "geom",
    "center_error": "geom",
    # data handling
    "Frame": "data", "Tracklet": "data", "TrackedSequence": "data",
    "UnlabeledSequence": "data", "SequenceDataset": "data",
    "StampedCloud": "data", "TrainingSample": "data",
    "parse_kitti_labels": "data", "read_point_bin": "data",
    "write_point_bin": "data", "crop_and_resample": "data",
    "build_stamped": "data", "make_training_sample": "data",
    "split_breakpoint": "data", "write_dataset": "data", "load_dataset": "data",
    "read_jsonl": "data", "write_jsonl": "data", "rows_to_tracklets": "data",
    "tracklet_rows": "data", "read_manifest": "data", "write_manifest": "data",
    # scene generator
    "SynthConfig": "synth", "SynthSequence": "synth", "synth_sequence": "synth",
    "make_dataset": "synth",
    # trackers
    "TrackOptions": "tracker", "TrackerOutput": "tracker",
    "MotionState": "tracker", "M2Tracker": "tracker",
    "MVanillaTracker": "tracker", "m2_forward": "tracker",
    "mvanilla_forward": "tracker", "track_sequence": "tracker",
    "ensemble_step": "tracker", "load_tracker": "tracker",
    "CentroidRefiner": "tracker", "identity_refiner": "tracker",
    "refine_with_matcher": "tracker",
    # training
    "TrainConfig": "train", "AugConfig": "train", "LossWeights": "train",
    "TrainResult": "train", "train_supervised": "train", "make_model": "train",
    "gradient_check": "train", "clip_gradients": "train", "Adam": "train",
    "loss_full": "train", "loss_mvanilla": "train",
    # semi-supervised pipeline
    "SemiConfig": "semi", "SemiResult": "semi", "train_semim": "semi",
    "delete_cut_paste": "semi", "loss_cycle": "semi",
    "loss_forward_semi": "semi", "generate_pseudo_labels": "semi",
    "write_pseudo_labels": "semi", "sample_source_pair": "semi",
    # evaluation
    "OPEResult": "metrics", "ope": "metrics", "weighted_mean": "metrics",
    "evaluate_tracklets": "metrics", "zero_motion_baseline": "metrics",
    "distractor_stats": "metrics",
}

__all__ = ["__version__", *(_SUBMODULES), *sorted(_EXPORTS)]


def __getattr__(name):
    if name in _SUBMODULES:
        return import_module(f".{name}", __name__)
    owner = _EXPORTS.get(name)
    if owner is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    return getattr(import_module(f".{owner}", __name__), name)


def __dir__():
    return sorted(set(globals()) | set(_SUBMODULES) | set(_EXPORTS))
