"""Shared fixtures and stub trackers for the test suite."""

import numpy as np
import pytest

from motrack.data import Frame
from motrack.geom import Box3D, rtm_between, transform_box
from motrack.tracker import MotionState, TrackerOutput
from motrack.geom import RTM4


class OracleTracker:
    """Step stub that regresses the exact motion onto the ground-truth box.

    Mirrors the real output contract so sequence-level code paths (ensembling,
    history bookkeeping, tracklet assembly) run unchanged while the box chain
    stays glued to ground truth up to composition round-off.
    """

    def __init__(self, gt_boxes: dict):
        self.gt = gt_boxes  # frame_id -> Box3D
        self.options = None

    def step(self, prev: Frame, cur: Frame, prev_box: Box3D) -> TrackerOutput:
        rtm = rtm_between(prev_box, self.gt[cur.frame_id])
        box = transform_box(prev_box, rtm)
        state = MotionState(rtm, np.zeros(2), True)
        return TrackerOutput(prev_box.copy(), box, box.copy(),
                             np.zeros(0, dtype=bool), state, False)


class ConstantTracker:
    """Always proposes a fixed box; used to exercise voting logic."""

    def __init__(self, box_for):
        self.box_for = box_for  # (prev_id, cur_id) -> Box3D
        self.options = None

    def step(self, prev: Frame, cur: Frame, prev_box: Box3D) -> TrackerOutput:
        box = self.box_for[(prev.frame_id, cur.frame_id)]
        state = MotionState(RTM4.identity(), np.zeros(2), False)
        return TrackerOutput(box.copy(), box.copy(), box.copy(),
                             np.zeros(0, dtype=bool), state, False)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
