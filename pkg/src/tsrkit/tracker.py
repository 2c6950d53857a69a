"""Multi-object Kalman tracking with consecutive-hit confirmation.

State per track is ``[cx, cy, w, h, vx, vy]``: constant velocity on the
center, random walk on the size. Only the box (``cx, cy, w, h``) is observed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .geometry import BBox, Detection, iou

CONFIRM_HITS = 4
MAX_MISSES = 3
DEFAULT_MIN_IOU = 0.3
MIN_SIZE = 1e-6

_H = np.hstack([np.eye(4), np.zeros((4, 2))])


class TrackStatus(enum.Enum):
    TENTATIVE = "Tentative"
    CONFIRMED = "Confirmed"
    DEAD = "Dead"


@dataclass(frozen=True)
class KalmanParams:
    q: float = 1e-2    # process noise per frame
    r: float = 1.0     # measurement noise variance
    v0: float = 100.0  # initial velocity variance
    p0: float = 10.0   # initial variance of the observed components

    def __post_init__(self) -> None:
        if min(self.q, self.r, self.v0, self.p0) < 0:
            raise ValueError("Kalman noise parameters must be non-negative")


def transition(dt: float) -> np.ndarray:
    f = np.eye(6)
    f[0, 4] = dt
    f[1, 5] = dt
    return f


def process_noise(q: float, dt: float) -> np.ndarray:
    return np.eye(6) * (q * dt)


@dataclass(frozen=True, eq=False)
class TrackState:
    id: int
    x: np.ndarray
    P: np.ndarray
    class_id: int
    hits: int = 1
    misses: int = 0
    status: TrackStatus = TrackStatus.TENTATIVE
    lifetime_hits: int = 1
    age: int = 0

    @property
    def box(self) -> BBox:
        cx, cy, w, h = self.x[:4]
        return BBox.from_center(float(cx), float(cy), max(float(w), MIN_SIZE), max(float(h), MIN_SIZE))

    @property
    def velocity(self) -> tuple[float, float]:
        return float(self.x[4]), float(self.x[5])


def measurement(box: BBox) -> np.ndarray:
    cx, cy = box.center
    return np.array([cx, cy, box.width, box.height], dtype=np.float64)


def init_track(track_id: int, det: Detection, params: KalmanParams) -> TrackState:
    x = np.concatenate([measurement(det.box), [0.0, 0.0]])
    P = np.diag([params.p0] * 4 + [params.v0] * 2).astype(np.float64)
    return TrackState(track_id, x, P, det.class_id)


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return (P + P.T) / 2.0


def predict(track: TrackState, params: KalmanParams, dt: float = 1.0) -> TrackState:
    if dt < 0:
        raise ValueError("dt must be non-negative")
    F = transition(dt)
    x = F @ track.x
    P = _symmetrize(F @ track.P @ F.T + process_noise(params.q, dt))
    return replace(track, x=x, P=P)


def update(track: TrackState, box: BBox, params: KalmanParams) -> TrackState:
    z = measurement(box)
    R = np.eye(4) * params.r
    P = track.P
    S = _H @ P @ _H.T + R
    # Pseudo-inverse keeps the gain finite when a component is already exact (r = 0).
    K = P @ _H.T @ np.linalg.pinv(S, hermitian=True)
    x = track.x + K @ (z - _H @ track.x)
    IKH = np.eye(6) - K @ _H
    P = _symmetrize(IKH @ P @ IKH.T + K @ R @ K.T)
    x[2] = max(x[2], MIN_SIZE)
    x[3] = max(x[3], MIN_SIZE)
    return replace(track, x=x, P=P)


@dataclass
class Association:
    matches: list[tuple[int, int]]
    unmatched_tracks: list[int]
    unmatched_detections: list[int]


def associate(tracks: Sequence[TrackState], detections: Sequence[Detection],
              min_iou: float = DEFAULT_MIN_IOU) -> Association:
    """Greedy same-class matching in descending IoU; pairs below ``min_iou`` are rejected.

    IoU ties are broken by track index, then detection index.
    """
    pairs = []
    for ti, t in enumerate(tracks):
        tbox = t.box
        for di, d in enumerate(detections):
            if d.class_id != t.class_id:
                continue
            v = iou(tbox, d.box)
            if v >= min_iou and v > 0.0:
                pairs.append((-v, ti, di))
    pairs.sort()
    used_t: set[int] = set()
    used_d: set[int] = set()
    matches = []
    for _, ti, di in pairs:
        if ti in used_t or di in used_d:
            continue
        used_t.add(ti)
        used_d.add(di)
        matches.append((ti, di))
    return Association(
        sorted(matches),
        [i for i in range(len(tracks)) if i not in used_t],
        [i for i in range(len(detections)) if i not in used_d],
    )


@dataclass
class Tracker:
    """Sequential per-stream state machine; feed one frame of detections at a time."""

    params: KalmanParams = field(default_factory=KalmanParams)
    min_iou: float = DEFAULT_MIN_IOU
    confirm_hits: int = CONFIRM_HITS
    max_misses: int = MAX_MISSES
    tracks: list[TrackState] = field(default_factory=list)
    frame: int = 0
    removed: list[TrackState] = field(default_factory=list)
    _next_id: int = 1

    def step(self, detections: Sequence[Detection], dt: float = 1.0) -> list[TrackState]:
        """Advance one frame and return the live tracks; tracks that died are in ``removed``."""
        self.frame += 1
        predicted = [predict(t, self.params, dt) for t in self.tracks]
        assoc = associate(predicted, detections, self.min_iou)
        survivors: list[TrackState] = []
        self.removed = []
        for ti, di in assoc.matches:
            t = update(predicted[ti], detections[di].box, self.params)
            hits = t.hits + 1
            status = t.status
            if status is TrackStatus.TENTATIVE and hits >= self.confirm_hits:
                status = TrackStatus.CONFIRMED
            survivors.append(replace(t, hits=hits, misses=0, status=status,
                                     lifetime_hits=t.lifetime_hits + 1, age=t.age + 1))
        for ti in assoc.unmatched_tracks:
            t = predicted[ti]
            misses = t.misses + 1
            t = replace(t, hits=0, misses=misses, age=t.age + 1)
            if misses >= self.max_misses:
                self.removed.append(replace(t, status=TrackStatus.DEAD))
            else:
                survivors.append(t)
        for di in assoc.unmatched_detections:
            t = init_track(self._next_id, detections[di], self.params)
            self._next_id += 1
            if self.confirm_hits <= 1:
                t = replace(t, status=TrackStatus.CONFIRMED)
            survivors.append(t)
        survivors.sort(key=lambda t: t.id)
        self.tracks = survivors
        return list(survivors)


def step_frame(tracker: Tracker, detections: Sequence[Detection]) -> list[TrackState]:
    return tracker.step(detections)
