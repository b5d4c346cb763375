"""Frame embedding, online keyframe selection, and submap segmentation.

A frame is summarized by a g x g grid of per-cell statistics (mean R, G,
B and mean inverse depth over valid pixels), L2-normalized into a 4g^2
feature vector. A frame becomes a keyframe when its minimum Euclidean
feature distance to the current submap's keyframes is at least alpha;
a submap closes once it holds keyframes_per_submap keyframes.
"""

from dataclasses import dataclass, field

import numpy as np


class KeyframingError(Exception):
    pass


@dataclass(frozen=True)
class KeyframingConfig:
    alpha: float = 0.12
    keyframes_per_submap: int = 10
    grid: int = 8

    def __post_init__(self):
        if self.alpha <= 0:
            raise KeyframingError("alpha must be positive")
        if self.keyframes_per_submap < 2:
            raise KeyframingError("keyframes_per_submap must be >= 2")
        if self.grid < 1:
            raise KeyframingError("grid must be >= 1")


@dataclass
class KeyframeRecord:
    frame_index: int
    pose: object  # agent-local odometry Pose
    feature: np.ndarray
    frame: object  # the source Frame (color/depth)


@dataclass
class SubmapSegment:
    start_frame: int
    end_frame: int
    keyframes: list = field(default_factory=list)


def embed_frame(frame, g=8):
    """4g^2-dim L2-normalized grid feature; all-zero raw input maps to e1."""
    color = np.asarray(frame.color, dtype=np.float64)
    depth = np.asarray(frame.depth, dtype=np.float64)
    H, W = depth.shape
    if H < 1 or W < 1:
        raise KeyframingError("empty frame")
    rb = (H * np.arange(g)) // g
    cb = (W * np.arange(g)) // g
    npix = np.outer(np.diff(np.append(rb, H)), np.diff(np.append(cb, W)))
    csum = np.add.reduceat(np.add.reduceat(color, rb, axis=0), cb, axis=1)
    cmean = csum / npix[:, :, None]
    valid = depth > 0
    inv = np.where(valid, 1.0 / np.where(valid, depth, 1.0), 0.0)
    isum = np.add.reduceat(np.add.reduceat(inv, rb, axis=0), cb, axis=1)
    vcnt = np.add.reduceat(np.add.reduceat(valid.astype(np.float64), rb, axis=0), cb, axis=1)
    imean = np.where(vcnt > 0, isum / np.maximum(vcnt, 1.0), 0.0)
    feat = np.concatenate([cmean, imean[:, :, None]], axis=2).reshape(-1)
    n = np.linalg.norm(feat)
    if n < 1e-12:
        feat = np.zeros(4 * g * g)
        feat[0] = 1.0
    else:
        feat = feat / n
    return feat.astype(np.float32)


def keyframe_decision(phi, existing, alpha):
    """True iff existing is empty or min distance to it is >= alpha."""
    if len(existing) == 0:
        return True
    d = np.linalg.norm(np.stack(existing) - phi, axis=1)
    return bool(d.min() >= alpha)


def segment_stream(frames, poses, cfg):
    """Sequential pass: select keyframes and cut submaps of fixed size.

    The distance test only looks at keyframes of the current submap; a
    trailing partial submap with at least one keyframe is kept.
    """
    if len(frames) != len(poses):
        raise KeyframingError("frames and poses length mismatch")
    submaps = []
    current = None
    feats = []
    for frame, pose in zip(frames, poses):
        phi = embed_frame(frame, cfg.grid)
        if not keyframe_decision(phi, feats, cfg.alpha):
            if current is not None:
                current.end_frame = frame.index
            continue
        if current is None:
            current = SubmapSegment(frame.index, frame.index)
            feats = []
        current.keyframes.append(KeyframeRecord(frame.index, pose, phi, frame))
        current.end_frame = frame.index
        feats.append(phi)
        if len(current.keyframes) == cfg.keyframes_per_submap:
            submaps.append(current)
            current = None
            feats = []
    if current is not None and current.keyframes:
        submaps.append(current)
    return submaps


def segment_every_nth(frames, poses, n, keyframes_per_submap, grid=8):
    """Keyframing-off baseline: every n-th frame is a keyframe."""
    if len(frames) != len(poses):
        raise KeyframingError("frames and poses length mismatch")
    submaps = []
    current = None
    for i, (frame, pose) in enumerate(zip(frames, poses)):
        if i % n != 0:
            if current is not None:
                current.end_frame = frame.index
            continue
        phi = embed_frame(frame, grid)
        if current is None:
            current = SubmapSegment(frame.index, frame.index)
        current.keyframes.append(KeyframeRecord(frame.index, pose, phi, frame))
        current.end_frame = frame.index
        if len(current.keyframes) == keyframes_per_submap:
            submaps.append(current)
            current = None
    if current is not None and current.keyframes:
        submaps.append(current)
    return submaps
