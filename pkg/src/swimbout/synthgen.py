"""Procedural generator of labeled synthetic swim-bout videos.

Renders a stylized larval fish on a light background: a dark swim bladder
(with an eye-like decoy further left), a 25-joint tail poly-line, and an
optional faint corner texture whose motion is synchronized with the bout --
the stand-in for the agarose artifact.  Every clip carries a ground-truth log
(joint-angle trajectory, tail point positions, bout onset) that downstream
tests use as an oracle.

Class 1 ("prey") bouts move the trunk joints with low amplitude and low
frequency while the tail tip performs fine higher-frequency motion; class 0
("spontaneous") bouts oscillate all joints with high amplitude and frequency.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

# rendering intensities; preprocessing thresholds (3 after gamma correction
# for the bladder, 200 for the tail) are only valid if these stay put: the
# textured background keeps the intensity skewness moderate so the implied
# gamma never crushes the tail below the bladder threshold
BACKGROUND_MEAN = 228
BACKGROUND_SPREAD = 26            # texture spans roughly [202, 254]
TAIL_INTENSITY = 55
BLOB_INTENSITY = 1

# static dark debris speckles scattered outside the fish corridor; they add
# dark-pixel mass that keeps the frame skewness (and the gamma correction it
# implies) moderate, yet contribute nothing to frame-to-frame motion
DEBRIS_INTENSITY = 115
DEBRIS_FRACTION = 0.05            # of total frame area
FISH_CORRIDOR = (slice(40, 216), slice(0, 232))  # rows/cols kept debris-free

N_TAIL_POINTS = 25
SEGMENT_LENGTH = 7.0

# fish layout relative to the frame's top-left 256x256 region
BLADDER_CENTER = (128.0, 24.0)
BLADDER_AXES = (5.0, 8.0)       # (row semi-axis, col semi-axis)
DECOY_CENTER = (118.0, 8.0)
DECOY_RADIUS = 4.0
TAIL_BASE = (128.0, 40.0)

BOUT_DURATION = 45
ARTIFACT_SIZE = 85

# per-class kinematics (degrees / oscillations per bout); chosen for
# separability at desk scale, not biological fidelity
CLASS_KINEMATICS = {
    1: dict(trunk_amp=3.0, tip_amp=50.0, trunk_osc=1.0, tip_osc=3.25),
    0: dict(trunk_amp=22.0, tip_amp=25.0, trunk_osc=4.5, tip_osc=4.5),
}
N_TRUNK_JOINTS = 8  # remaining 16 joints form the tip


@dataclass(frozen=True)
class SynthSpec:
    n_videos: int = 38
    frame_size: tuple[int, int] = (512, 512)
    frames_per_video: int = 180
    class_balance: float = 0.439
    artifact_probability: float = 0.0
    seed: int = 462019

    def __post_init__(self):
        if not 0.0 <= self.class_balance <= 1.0:
            raise ValueError("class_balance must be in [0, 1]")
        if not 0.0 <= self.artifact_probability <= 1.0:
            raise ValueError("artifact_probability must be in [0, 1]")
        if self.frames_per_video < 150:
            raise ValueError("frames_per_video must be >= 150")


@dataclass
class TailPose:
    base_point: tuple[float, float]
    joint_angles: np.ndarray          # radians, relative to previous segment
    segment_length: float = SEGMENT_LENGTH

    def __post_init__(self):
        self.joint_angles = np.asarray(self.joint_angles, dtype=np.float64)
        if self.joint_angles.size < 8:
            raise ValueError("need at least 8 joint angles")
        if np.abs(self.joint_angles).max() >= np.pi / 2:
            raise ValueError("joint angles must stay below pi/2 in magnitude")

    def points(self) -> np.ndarray:
        """(n_joints + 1, 2) tail polyline as (row, col) coordinates."""
        headings = np.cumsum(self.joint_angles)
        steps = self.segment_length * np.stack(
            [np.sin(headings), np.cos(headings)], axis=1)
        pts = np.concatenate([[self.base_point],
                              self.base_point + np.cumsum(steps, axis=0)])
        return pts


@dataclass
class ClipLog:
    """Generator ground truth attached to each clip."""
    class_label: int
    onset: int
    duration: int
    artifact: bool
    joint_angles: np.ndarray      # (T, n_joints) radians
    tail_points: np.ndarray       # (T, 25, 2) row/col
    bladder_right_edge: tuple[int, int]
    trunk_joints: int = N_TRUNK_JOINTS

    def trunk_angle_std(self) -> float:
        """Mean temporal std of the trunk joint angles (separability feature)."""
        return float(self.joint_angles[:, :self.trunk_joints].std(axis=0).mean())


@dataclass
class VideoClip:
    frames: np.ndarray            # (T, H, W) uint8
    frame_rate: float = 300.0
    source_id: str = ""
    log: ClipLog | None = None

    def __post_init__(self):
        if self.frames.ndim != 3 or self.frames.dtype != np.uint8:
            raise ValueError("frames must be a (T, H, W) uint8 array")


def joint_angle_trajectory(class_label: int, n_frames: int, onset: int,
                           duration: int, rng: np.random.Generator,
                           amplitude_scale: float = 1.0) -> np.ndarray:
    """(T, 24) relative joint angles of the bout as a traveling wave."""
    kin = CLASS_KINEMATICS[class_label]
    n_joints = N_TAIL_POINTS - 1
    amp = np.empty(n_joints)
    osc = np.empty(n_joints)
    amp[:N_TRUNK_JOINTS] = np.deg2rad(kin["trunk_amp"])
    amp[N_TRUNK_JOINTS:] = np.deg2rad(kin["tip_amp"])
    osc[:N_TRUNK_JOINTS] = kin["trunk_osc"]
    osc[N_TRUNK_JOINTS:] = kin["tip_osc"]
    amp *= amplitude_scale

    t = np.arange(n_frames, dtype=np.float64)
    # envelope anchored one frame early so the logged onset is the first
    # frame that actually differs from the still pose
    progress = np.clip((t - (onset - 1)) / duration, 0.0, 1.0)
    ramp = 3.0 / duration
    env = np.minimum(np.clip(progress / ramp, 0, 1),
                     np.clip((1.0 - progress) / ramp, 0, 1))
    env *= (t >= onset - 1) & (t < onset - 1 + duration)

    # lag steep enough that cumulative headings stay bounded (~ amp / 2sin(lag/2))
    # and the tail never enters the 85x85 corner regions
    phase_lag = 0.9 * np.arange(n_joints)
    psi = rng.uniform(0.0, 2 * np.pi)
    wave = np.sin(2 * np.pi * osc[None, :] * progress[:, None]
                  - phase_lag[None, :] + psi)
    return amp[None, :] * env[:, None] * wave


def _ellipse_indices(shape, center, axes):
    r0 = int(max(0, np.floor(center[0] - axes[0] - 1)))
    r1 = int(min(shape[0], np.ceil(center[0] + axes[0] + 2)))
    c0 = int(max(0, np.floor(center[1] - axes[1] - 1)))
    c1 = int(min(shape[1], np.ceil(center[1] + axes[1] + 2)))
    rr, cc = np.mgrid[r0:r1, c0:c1]
    inside = (((rr - center[0]) / axes[0]) ** 2
              + ((cc - center[1]) / axes[1]) ** 2) <= 1.0
    return rr[inside], cc[inside]


def _densify(points: np.ndarray, per_segment: int = 10) -> np.ndarray:
    segs = []
    for a, b in zip(points[:-1], points[1:]):
        frac = np.linspace(0.0, 1.0, per_segment, endpoint=False)[:, None]
        segs.append(a + frac * (b - a))
    segs.append(points[-1:])
    return np.concatenate(segs)


def _draw_tail(canvas: np.ndarray, points: np.ndarray) -> None:
    dense = _densify(points)
    n = len(dense)
    halfw = np.linspace(1.6, 0.7, n)
    offs = np.arange(-2, 3)
    dr, dc = [o.ravel() for o in np.meshgrid(offs, offs, indexing="ij")]
    br = np.floor(dense[:, 0]).astype(int)
    bc = np.floor(dense[:, 1]).astype(int)
    rr = br[:, None] + dr[None, :]
    cc = bc[:, None] + dc[None, :]
    dist = np.hypot(rr - dense[:, 0:1], cc - dense[:, 1:2])
    alpha = np.clip(dist - halfw[:, None] + 0.5, 0.0, 1.0)
    ok = (rr >= 0) & (rr < canvas.shape[0]) & (cc >= 0) & (cc < canvas.shape[1])
    # anti-alias against the local background value
    val = TAIL_INTENSITY + (canvas[rr[ok], cc[ok]] - TAIL_INTENSITY) * alpha[ok]
    np.minimum.at(canvas, (rr[ok], cc[ok]), val)


def _artifact_regions(shape):
    h = shape[0]
    return [(slice(0, ARTIFACT_SIZE), slice(0, ARTIFACT_SIZE)),
            (slice(h - ARTIFACT_SIZE, h), slice(0, ARTIFACT_SIZE))]


def _make_background(shape, rng: np.random.Generator) -> np.ndarray:
    """Static blotchy texture plus dark debris speckles off the fish corridor."""
    coarse = rng.uniform(-0.5, 0.5, (max(2, shape[0] // 16), max(2, shape[1] // 16)))
    blotch = ndimage.zoom(coarse, (shape[0] / coarse.shape[0],
                                   shape[1] / coarse.shape[1]),
                          order=1, mode="nearest", grid_mode=True)
    bg = BACKGROUND_MEAN + BACKGROUND_SPREAD * blotch

    field = ndimage.gaussian_filter(rng.standard_normal(shape), 3.0)
    allowed = np.ones(shape, dtype=bool)
    allowed[FISH_CORRIDOR] = False
    n_allowed = int(allowed.sum())
    n_target = int(DEBRIS_FRACTION * shape[0] * shape[1])
    if n_allowed > 0 and n_target > 0:
        frac = min(1.0, n_target / n_allowed)
        cut = np.quantile(field[allowed], 1.0 - frac)
        speckle = allowed & (field > cut)
        bg[speckle] = DEBRIS_INTENSITY + 30.0 * (field[speckle] - cut)
    return bg


def _warp_texture(tex: np.ndarray, amplitude: float, phase: float) -> np.ndarray:
    h, w = tex.shape
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    shift = amplitude * np.sin(2 * np.pi * cc / 64.0 + phase)
    return ndimage.map_coordinates(tex, [rr + shift, cc], order=1, mode="wrap")


def generate_bout(spec: SynthSpec, class_label: int,
                  rng: np.random.Generator,
                  with_artifact: bool | None = None,
                  amplitude_scale: float = 1.0,
                  source_id: str = "") -> VideoClip:
    """Render one labeled clip; deterministic given the rng state."""
    h, w = spec.frame_size
    if h < 256 or w < 256:
        raise ValueError(f"frame_size must be at least 256x256, got {spec.frame_size}")
    if class_label not in (0, 1):
        raise ValueError("class_label must be 0 or 1")
    t_total = spec.frames_per_video

    onset = int(rng.integers(25, min(41, t_total - BOUT_DURATION - 5)))
    angles = joint_angle_trajectory(class_label, t_total, onset, BOUT_DURATION,
                                    rng, amplitude_scale)
    if with_artifact is None:
        with_artifact = (class_label == 0
                         and rng.random() < spec.artifact_probability)

    jit_r = float(rng.integers(-2, 3))
    jit_c = float(rng.integers(-3, 4))
    bladder_center = (BLADDER_CENTER[0] + jit_r, BLADDER_CENTER[1] + jit_c)
    decoy_center = (DECOY_CENTER[0] + jit_r, DECOY_CENTER[1] + jit_c)
    tail_base = (TAIL_BASE[0] + jit_r, TAIL_BASE[1] + jit_c)

    template = _make_background((h, w), rng)
    corner_textures = [template[region].copy()
                       for region in _artifact_regions((h, w))]
    bl_idx = _ellipse_indices((h, w), bladder_center, BLADDER_AXES)
    dc_idx = _ellipse_indices((h, w), decoy_center, (DECOY_RADIUS, DECOY_RADIUS))
    template[bl_idx] = BLOB_INTENSITY
    template[dc_idx] = BLOB_INTENSITY
    bladder_edge = (int(round(bladder_center[0])),
                    int(round(bladder_center[1] + BLADDER_AXES[1])))

    art_phase = rng.uniform(0.0, 2 * np.pi)

    env = np.zeros(t_total)
    prog = np.clip((np.arange(t_total) - (onset - 1)) / BOUT_DURATION, 0.0, 1.0)
    ramp = 3.0 / BOUT_DURATION
    env = np.minimum(np.clip(prog / ramp, 0, 1), np.clip((1 - prog) / ramp, 0, 1))
    env *= ((np.arange(t_total) >= onset - 1)
            & (np.arange(t_total) < onset - 1 + BOUT_DURATION))

    frames = np.empty((t_total, h, w), dtype=np.uint8)
    tail_points = np.empty((t_total, N_TAIL_POINTS, 2))
    for t in range(t_total):
        canvas = template.copy()
        pose = TailPose(tail_base, angles[t])
        pts = pose.points()
        if pts[:, 0].min() < 0 or pts[:, 0].max() >= h \
                or pts[:, 1].min() < 0 or pts[:, 1].max() >= w:
            raise RuntimeError("tail left the frame; kinematic constants invalid")
        tail_points[t] = pts
        if with_artifact and env[t] > 0.0:
            amp = 6.0 * env[t]
            for region, tex in zip(_artifact_regions((h, w)), corner_textures):
                canvas[region] = _warp_texture(tex, amp, art_phase + 0.9 * t)
        _draw_tail(canvas, pts)
        frames[t] = np.clip(np.round(canvas), 0, 255).astype(np.uint8)

    log = ClipLog(class_label=class_label, onset=onset, duration=BOUT_DURATION,
                  artifact=bool(with_artifact), joint_angles=angles,
                  tail_points=tail_points, bladder_right_edge=bladder_edge)
    return VideoClip(frames=frames, source_id=source_id, log=log)


def save_clip(clip: VideoClip, clip_dir: Path) -> None:
    clip_dir = Path(clip_dir)
    clip_dir.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(clip.frames):
        Image.fromarray(frame).save(clip_dir / f"frame_{t:04d}.png")
    if clip.log is not None:
        np.savez_compressed(
            clip_dir / "log.npz",
            class_label=clip.log.class_label, onset=clip.log.onset,
            duration=clip.log.duration, artifact=clip.log.artifact,
            joint_angles=clip.log.joint_angles, tail_points=clip.log.tail_points,
            bladder_right_edge=np.array(clip.log.bladder_right_edge))


def load_clip(clip_dir: Path, source_id: str = "") -> VideoClip:
    clip_dir = Path(clip_dir)
    paths = sorted(clip_dir.glob("frame_*.png"))
    if not paths:
        raise IOError(f"no frames found in {clip_dir}")
    frames = np.stack([np.asarray(Image.open(p)) for p in paths])
    log = None
    log_path = clip_dir / "log.npz"
    if log_path.exists():
        z = np.load(log_path)
        log = ClipLog(class_label=int(z["class_label"]), onset=int(z["onset"]),
                      duration=int(z["duration"]), artifact=bool(z["artifact"]),
                      joint_angles=z["joint_angles"], tail_points=z["tail_points"],
                      bladder_right_edge=tuple(z["bladder_right_edge"]))
    return VideoClip(frames=frames, source_id=source_id or clip_dir.name, log=log)


def clip_rngs(spec: SynthSpec):
    """Per-clip generators plus one for label assignment, all from spec.seed."""
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_videos + 1)
    return ([np.random.default_rng(c) for c in children[:-1]],
            np.random.default_rng(children[-1]))


def generate_dataset(spec: SynthSpec, out_dir: Path) -> list[dict]:
    """Write n_videos clips plus a JSON-lines manifest; deterministic per seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rngs, label_rng = clip_rngs(spec)
    labels = (label_rng.random(spec.n_videos) < spec.class_balance).astype(int)

    rows = []
    for i in range(spec.n_videos):
        source_id = f"clip_{i:05d}"
        clip = generate_bout(spec, int(labels[i]), rngs[i], source_id=source_id)
        clip_dir = out_dir / source_id
        try:
            save_clip(clip, clip_dir)
        except OSError as exc:
            raise IOError(f"failed to store clip at {clip_dir}: {exc}") from exc
        rows.append({
            "path": source_id,
            "label": int(labels[i]),
            "artifact": clip.log.artifact,
            "onset": clip.log.onset,
            "params": {
                "frame_size": list(spec.frame_size),
                "frames_per_video": spec.frames_per_video,
                "class_balance": spec.class_balance,
                "artifact_probability": spec.artifact_probability,
                "seed": spec.seed,
            },
        })
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return rows
