"""Camera geometry, key-frame selection and fragment assembly.

Poses map camera-frame points into the world frame (world <- camera).
Cameras follow the usual pinhole convention: +z forward, +x right, +y down.
Continuous pixel coordinates put pixel ``i`` on ``[i, i + 1)``, so its centre is ``i + 0.5``.
"""
from __future__ import annotations

import enum
import math
import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation


class SequenceFormatError(ValueError):
    """Raised for malformed trajectory / intrinsics files or unmatched images."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float, vfov_deg: Optional[float] = None) -> "Intrinsics":
        """Centered pinhole camera with the given horizontal (and vertical) field of view."""
        fx = 0.5 * width / math.tan(math.radians(hfov_deg) / 2)
        fy = fx if vfov_deg is None else 0.5 * height / math.tan(math.radians(vfov_deg) / 2)
        return cls(fx, fy, width / 2.0, height / 2.0, int(width), int(height))

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, stride: int) -> "Intrinsics":
        """Intrinsics of a feature map downsampled by an integer stride."""
        w, h = self.width // stride, self.height // stride
        return Intrinsics(self.fx / stride, self.fy / stride, self.cx / stride, self.cy / stride, w, h)


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(r.T @ r - np.eye(3)).max() >= 1e-6 or np.linalg.det(r) <= 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quaternion(cls, xyzw: Sequence[float], translation: Sequence[float]) -> "Pose":
        return cls(Rotation.from_quat(np.asarray(xyzw, dtype=np.float64)).as_matrix(), translation)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Camera at ``eye`` whose +z axis points at ``target``; image-down is world ``-up``."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return cls(np.stack([right, down, fwd], axis=1), eye)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def quaternion(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation).as_quat()

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation


@dataclass(frozen=True, eq=False)
class Frame:
    index: int
    pose: Pose
    intrinsics: Intrinsics
    image: np.ndarray
    depth: Optional[np.ndarray] = None

    def __post_init__(self):
        shape = (self.intrinsics.height, self.intrinsics.width)
        if tuple(self.image.shape[:2]) != shape:
            raise ValueError(f"frame {self.index}: image shape {self.image.shape[:2]} != {shape}")
        if self.depth is not None and tuple(self.depth.shape) != shape:
            raise ValueError(f"frame {self.index}: depth shape {self.depth.shape} != {shape}")


@dataclass(frozen=True)
class Fbv:
    """Cubic, world-axis-aligned fragment bounding volume."""

    min_corner: tuple
    side_length: float

    def __post_init__(self):
        if not self.side_length > 0:
            raise ValueError("side_length must be positive")
        object.__setattr__(self, "min_corner", tuple(float(v) for v in self.min_corner))

    @property
    def max_corner(self) -> np.ndarray:
        return np.asarray(self.min_corner) + self.side_length

    def contains(self, points: np.ndarray, eps: float = 1e-9) -> np.ndarray:
        p = np.atleast_2d(points)
        lo = np.asarray(self.min_corner)
        return np.all((p >= lo - eps) & (p <= lo + self.side_length + eps), axis=1)

    def n_cells(self, voxel_size: float) -> int:
        return int(round(self.side_length / voxel_size))


@dataclass(frozen=True)
class Fragment:
    frames: list
    fbv: Fbv
    fragment_index: int

    @property
    def frame_indices(self) -> list:
        return [f.index for f in self.frames]


class KeyframeMode(enum.Enum):
    CONJUNCTION = "conjunction"
    DISJUNCTION = "disjunction"


def relative_motion(a: Pose, b: Pose) -> tuple[float, float]:
    """Translation norm (m) and rotation angle (deg) of ``a^-1 o b``."""
    rel = a.inverse().compose(b)
    angle = math.degrees(Rotation.from_matrix(rel.rotation).magnitude())
    return float(np.linalg.norm(rel.translation)), float(min(max(angle, 0.0), 180.0))


def select_keyframe(last_keyframe_pose: Pose, candidate_pose: Pose, t_max: float = 0.1,
                    r_max: float = 15.0, mode: KeyframeMode = KeyframeMode.CONJUNCTION) -> bool:
    if t_max <= 0 or r_max <= 0:
        raise ValueError("thresholds must be positive")
    dt, dr = relative_motion(last_keyframe_pose, candidate_pose)
    if KeyframeMode(mode) is KeyframeMode.CONJUNCTION:
        return dt > t_max and dr > r_max
    return dt > t_max or dr > r_max


def frustum_corners(pose: Pose, intr: Intrinsics, d_max: float) -> np.ndarray:
    """8 world-space corners: 4 at the camera centre (depth 0) and 4 on the far plane."""
    u = np.array([0.0, intr.width, intr.width, 0.0])
    v = np.array([0.0, 0.0, intr.height, intr.height])
    far = np.stack([(u - intr.cx) / intr.fx * d_max, (v - intr.cy) / intr.fy * d_max,
                    np.full(4, d_max)], axis=1)
    cam = np.vstack([np.zeros((4, 3)), far])
    return pose.apply(cam)


def _snap_floor(x, v):
    return np.floor(np.asarray(x) / v + 1e-9)


def compute_fbv(frames: Sequence[Frame], d_max: float = 3.0, coarse_voxel_size: float = 0.16) -> Fbv:
    """Axis-aligned cube enclosing every frustum (truncated at ``d_max``), snapped to the coarse lattice."""
    if not frames:
        raise ValueError("compute_fbv needs at least one frame")
    pts = np.vstack([frustum_corners(f.pose, f.intrinsics, d_max) for f in frames])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = 0.5 * (lo + hi)
    v = coarse_voxel_size
    n = int(math.ceil((hi - lo).max() / v - 1e-9))
    while True:
        start = _snap_floor(center - 0.5 * n * v, v)
        if np.all((start + n) * v >= hi - 1e-9) and np.all(start * v <= lo + 1e-9):
            break
        n += 1
    return Fbv(tuple(start * v), n * v)


# ---------------------------------------------------------------------------
# sequence ingestion

def read_trajectory(path) -> dict:
    """Parse ``index tx ty tz qx qy qz qw`` lines into ``{index: Pose}``."""
    poses = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                if len(parts) != 8:
                    raise ValueError(f"expected 8 fields, got {len(parts)}")
                idx = int(parts[0])
                t = np.array([float(p) for p in parts[1:4]])
                q = np.array([float(p) for p in parts[4:8]])
            except ValueError as exc:
                raise SequenceFormatError(f"{path}: line {lineno}: malformed pose ({exc})") from None
            qn = np.linalg.norm(q)
            if abs(qn - 1.0) > 1e-3:
                raise SequenceFormatError(f"{path}: line {lineno}: quaternion norm {qn:.6f} not unit")
            poses[idx] = Pose.from_quaternion(q / qn, t)
    return poses


def write_trajectory(path, poses: Iterable[tuple[int, Pose]]) -> None:
    with open(path, "w") as fh:
        for idx, pose in poses:
            t, q = pose.translation, pose.quaternion
            fh.write(f"{idx} " + " ".join(f"{v:.9f}" for v in (*t, *q)) + "\n")


def read_intrinsics(path) -> Intrinsics:
    with open(path) as fh:
        tokens = [ln.strip() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    if len(tokens) != 1 or len(tokens[0].split()) != 6:
        raise SequenceFormatError(f"{path}: line 1: expected 'fx fy cx cy width height'")
    fx, fy, cx, cy, w, h = tokens[0].split()
    try:
        return Intrinsics(float(fx), float(fy), float(cx), float(cy), int(w), int(h))
    except ValueError as exc:
        raise SequenceFormatError(f"{path}: line 1: {exc}") from None


def write_intrinsics(path, intr: Intrinsics) -> None:
    with open(path, "w") as fh:
        fh.write(f"{intr.fx:.9f} {intr.fy:.9f} {intr.cx:.9f} {intr.cy:.9f} {intr.width} {intr.height}\n")


def write_depth_png(path, depth_m: np.ndarray, scale: float = 1000.0) -> None:
    raw = np.clip(np.round(np.nan_to_num(depth_m) * scale), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path)


def read_depth_png(path, scale: float = 1000.0) -> np.ndarray:
    raw = np.array(Image.open(path))
    if raw.dtype == np.uint8:
        raise SequenceFormatError(f"{path}: 8-bit image is not a depth map")
    return raw.astype(np.float64) / scale


_TRAILING_INT = re.compile(r"(\d+)$")


def _image_index(p: Path) -> int:
    m = _TRAILING_INT.search(p.stem)
    if m is None:
        raise SequenceFormatError(f"{p}: cannot parse a frame index from the file name")
    return int(m.group(1))


def ingest_sequence(trajectory_path, intrinsics_path, image_dir, depth_scale: float = 1000.0) -> Iterator[Frame]:
    """Yield frames in index order from a trajectory file, an intrinsics file and a PNG directory.

    16-bit PNGs are decoded as depth in meters (``value / depth_scale``, 0 = invalid) and also
    used as the frame image; 8-bit PNGs are decoded as grayscale in [0, 1].
    """
    poses = read_trajectory(trajectory_path)
    intr = read_intrinsics(intrinsics_path)
    files = sorted(Path(image_dir).glob("*.png"), key=_image_index)
    for p in files:
        idx = _image_index(p)
        if idx not in poses:
            raise SequenceFormatError(f"no pose for image index {idx} ({p.name})")
        raw = np.array(Image.open(p))
        if raw.ndim == 3:
            raw = raw[..., :3].mean(axis=2).astype(np.uint8)
        if raw.dtype == np.uint8:
            image, depth = raw.astype(np.float64) / 255.0, None
        else:
            depth = raw.astype(np.float64) / depth_scale
            image = depth
        yield Frame(idx, poses[idx], intr, image, depth)


def assemble_fragments(frames: Iterable[Frame], n_views: int = 9, t_max: float = 0.1, r_max: float = 15.0,
                       d_max: float = 3.0, coarse_voxel_size: float = 0.16,
                       mode: KeyframeMode = KeyframeMode.CONJUNCTION) -> Iterator[Fragment]:
    """Select key frames against the last selected key frame and group them into windows of ``n_views``.

    The first frame is always a key frame. A trailing window with at least two key frames is
    emitted as a short final fragment.
    """
    if n_views < 2:
        raise ValueError("n_views must be >= 2")
    window: list = []
    last = None
    n_key = 0
    count = 0

    def _emit(win):
        nonlocal count
        frag = Fragment(list(win), compute_fbv(win, d_max, coarse_voxel_size), count)
        count += 1
        return frag

    for frame in frames:
        if last is None or select_keyframe(last.pose, frame.pose, t_max, r_max, mode):
            last = frame
            n_key += 1
            window.append(frame)
            if len(window) == n_views:
                yield _emit(window)
                window = []
    if len(window) >= 2:
        yield _emit(window)
    if n_key < 2:
        warnings.warn(f"only {n_key} key frame(s) selected; no fragment produced", RuntimeWarning)
