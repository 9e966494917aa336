"""Synthetic pose-varying face benchmark: generation, rendering, file I/O.

A 3-D landmark template is rotated by R(yaw)*R(pitch)*R(roll) (extrinsic,
fixed order, heads-up: y points down so image and head coordinates agree),
orthographically projected, and rendered as a shaded ellipsoid with darker
feature blobs. Identity variation deforms the template; per-landmark jitter
models annotation noise. Everything is deterministic under (pose, seed).

On-disk format per sample: a binary PGM image (P5, maxval 255, quantized from
[-1, 1]), a landmarks text file ("x y" per line, 6 fractional digits), and a
key=value metadata file (pose in radians, bounding box, seed). A dataset
directory holds train/ and test/ plus a template.txt with the landmark
conventions.
"""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError
from .pose import PoseAngles

MIN_IMAGE_SIZE = 32


@dataclass(frozen=True)
class Template3D:
    """Landmark template in head units plus mirror/pupil conventions."""

    points: np.ndarray          # (P, 3): x right, y down, z toward viewer
    mirror: np.ndarray          # (P,) int, involution pairing left/right
    pupil_left: int
    pupil_right: int
    semi_axes: tuple[float, float, float] = (0.75, 1.0, 0.85)

    @property
    def num_landmarks(self) -> int:
        return self.points.shape[0]


def _surface_z(x: float, y: float, axes) -> float:
    ax, ay, az = axes
    r = 1.0 - (x / ax) ** 2 - (y / ay) ** 2
    return az * math.sqrt(max(r, 0.0))


def default_template() -> Template3D:
    """Twelve landmarks: pupils, eye corners, brows, nose, mouth, jaw, chin."""
    axes = (0.75, 1.0, 0.85)

    def on(x, y, lift=1.0):
        return (x, y, _surface_z(x, y, axes) * lift)

    pts = np.array([
        on(-0.30, -0.25),        # 0 left pupil
        on(+0.30, -0.25),        # 1 right pupil
        on(-0.48, -0.25),        # 2 left eye outer corner
        on(+0.48, -0.25),        # 3 right eye outer corner
        (0.0, 0.05, 0.85 * 1.05),  # 4 nose tip (protrudes)
        on(-0.28, 0.42),         # 5 left mouth corner
        on(+0.28, 0.42),         # 6 right mouth corner
        on(0.0, 0.78),           # 7 chin
        on(-0.62, 0.35),         # 8 left jaw
        on(+0.62, 0.35),         # 9 right jaw
        on(-0.30, -0.45),        # 10 left brow
        on(+0.30, -0.45),        # 11 right brow
    ])
    mirror = np.array([1, 0, 3, 2, 4, 6, 5, 7, 9, 8, 11, 10])
    return Template3D(points=pts, mirror=mirror, pupil_left=0, pupil_right=1,
                      semi_axes=axes)


def rotation_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """R = R_y(yaw) @ R_x(pitch) @ R_z(roll), extrinsic fixed order."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return ry @ rx @ rz


@dataclass(frozen=True)
class BBox:
    """Axis-aligned face box: origin (x, y) plus height and width."""

    x: float
    y: float
    h: float
    w: float


@dataclass
class Sample:
    """One synthetic face with ground truth."""

    sample_id: str
    image: np.ndarray       # (H, W) float64 on the 256-level grid in [-1, 1]
    landmarks: np.ndarray   # (2P,) interleaved x, y
    pose: PoseAngles
    bbox: BBox
    seed: int


def pixels_to_float(k: np.ndarray) -> np.ndarray:
    """Map 8-bit pixel levels onto the [-1, 1] grid (shared by gen and I/O)."""
    return k.astype(np.float64) * (2.0 / 255.0) - 1.0


def quantize_image(values: np.ndarray) -> np.ndarray:
    """Quantize float intensities in [-1, 1] to the PGM 256-level grid."""
    k = np.clip(np.floor((values + 1.0) * 127.5 + 0.5), 0.0, 255.0)
    return k.astype(np.uint8)


# ------------------------------------------------------------------ render

# Feature blobs: (landmark index or explicit point, amplitude, sigma relative
# to head scale). The mouth center is a synthetic point between the corners.
_FEATURES = (
    (0, 0.95, 0.075),     # pupils
    (1, 0.95, 0.075),
    (2, 0.45, 0.055),     # eye corners
    (3, 0.45, 0.055),
    (4, 0.55, 0.085),     # nose
    (5, 0.70, 0.065),     # mouth corners
    (6, 0.70, 0.065),
    (10, 0.55, 0.105),    # brows
    (11, 0.55, 0.105),
    ("mouth_center", 0.70, 0.085),
)
_LIGHT = np.array([0.0, -0.45, 0.89])
_BACKGROUND = -0.85


def _render(points3d: np.ndarray, R: np.ndarray, scale: float,
            center: np.ndarray, size: int, axes) -> np.ndarray:
    """Shaded ellipsoid head with feature blobs; float image in [-1, 1].

    The light direction has no x component, so rendering commutes with
    horizontal mirroring of the geometry.
    """
    light = _LIGHT / np.linalg.norm(_LIGHT)
    d = np.diag([1.0 / axes[0] ** 2, 1.0 / axes[1] ** 2, 1.0 / axes[2] ** 2])
    Q = R @ d @ R.T
    iy, ix = np.mgrid[0:size, 0:size]
    X = (ix - center[0]) / scale
    Y = (iy - center[1]) / scale
    a = Q[2, 2]
    b = 2.0 * (Q[0, 2] * X + Q[1, 2] * Y)
    c = Q[0, 0] * X * X + 2.0 * Q[0, 1] * X * Y + Q[1, 1] * Y * Y - 1.0
    disc = b * b - 4.0 * a * c
    inside = disc >= 0.0
    Z = np.where(inside, (-b + np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a), 0.0)
    # outward normal of p^T Q p = 1 is Q p
    P3 = np.stack([X, Y, Z], axis=-1)
    N = P3 @ Q.T
    norm = np.linalg.norm(N, axis=-1)
    norm = np.where(norm > 0, norm, 1.0)
    lambert = np.maximum((N @ light) / norm, 0.0)
    shade = -0.20 + 1.05 * lambert

    world = points3d @ R.T
    mouth_center = 0.5 * (world[5] + world[6])
    for key, amp, sig_rel in _FEATURES:
        p = mouth_center if key == "mouth_center" else world[key]
        n = p @ Q.T
        nz = n[2] / max(np.linalg.norm(n), 1e-12)
        vis = max(nz, 0.0)
        if vis == 0.0:
            continue
        px = center[0] + scale * p[0]
        py = center[1] + scale * p[1]
        sig = sig_rel * scale
        d2 = (ix - px) ** 2 + (iy - py) ** 2
        shade = shade - amp * vis * np.exp(-d2 / (2.0 * sig * sig))

    img = np.where(inside, shade, _BACKGROUND)
    return np.clip(img, -1.0, 1.0)


# ---------------------------------------------------------------- sampling


def _validate_pose(pose: PoseAngles) -> None:
    tol = 1e-12
    if abs(pose.yaw) > math.pi / 2 + tol or abs(pose.pitch) > math.pi / 2 + tol:
        raise ValueError(
            f"pose out of range: |yaw|={abs(pose.yaw):.4f}, |pitch|={abs(pose.pitch):.4f} "
            f"must be <= pi/2")
    if abs(pose.roll) > math.pi / 4 + tol:
        raise ValueError(f"pose out of range: |roll|={abs(pose.roll):.4f} must be <= pi/4")


def generate_sample(pose, seed: int, *, image_size: int = 96,
                    template: Template3D | None = None,
                    jitter_sigma: float = 1.0, deform_sigma: float = 0.02,
                    mirrored_noise: bool = False,
                    sample_id: str | None = None) -> Sample:
    """Render one sample, deterministic under (pose, seed).

    ``mirrored_noise`` re-draws the same seeded noise fields but reflects
    them through the mirror correspondence, so the sample generated at the
    negated yaw/roll is the horizontal mirror of its partner.
    """
    if not isinstance(pose, PoseAngles):
        pose = PoseAngles(*pose)
    _validate_pose(pose)
    if image_size < MIN_IMAGE_SIZE:
        raise ValueError(f"image size must be at least {MIN_IMAGE_SIZE}, got {image_size}")
    tpl = template or default_template()
    P = tpl.num_landmarks
    rng = np.random.default_rng(seed)
    # Fixed draw order: template deformation, identity scale, center offset,
    # landmark jitter.
    deform = rng.normal(0.0, deform_sigma * 2.0, size=(P, 3))
    s_id = 1.0 + rng.normal(0.0, 0.02)
    offset = rng.normal(0.0, 2.0, size=2)
    jitter = rng.normal(0.0, 1.0, size=(P, 2)) * jitter_sigma
    if mirrored_noise:
        flip3 = np.array([-1.0, 1.0, 1.0])
        deform = deform[tpl.mirror] * flip3
        offset = offset * np.array([-1.0, 1.0])
        jitter = jitter[tpl.mirror] * np.array([-1.0, 1.0])

    points = tpl.points + deform
    R = rotation_matrix(pose.yaw, pose.pitch, pose.roll)
    scale = 0.36 * image_size * s_id
    center = np.array([(image_size - 1) / 2.0 + offset[0],
                       (image_size - 1) / 2.0 + offset[1]])
    world = points @ R.T
    proj = center[None, :] + scale * world[:, :2]
    gt = np.round(proj + jitter, 6)  # landmark files carry 6 decimals

    lo = gt.min(axis=0)
    hi = gt.max(axis=0)
    span = hi - lo
    margin = 0.18 * span
    bbox = BBox(x=float(lo[0] - margin[0]), y=float(lo[1] - margin[1]),
                h=float(span[1] + 2 * margin[1]), w=float(span[0] + 2 * margin[0]))

    img = _render(points, R, scale, center, image_size, tpl.semi_axes)
    image = pixels_to_float(quantize_image(img))
    if sample_id is None:
        sample_id = f"sample_{seed & 0xFFFFFFFF:010d}"
    return Sample(sample_id=sample_id, image=image,
                  landmarks=gt.reshape(-1), pose=pose, bbox=bbox, seed=seed)


def draw_poses(n: int, seed: int, *, yaw_max_deg: float = 90.0,
               pitch_max_deg: float = 20.0, roll_max_deg: float = 15.0) -> list[PoseAngles]:
    """The dataset pose sequence: yaw uniform over [-yaw_max, yaw_max]."""
    rng = np.random.default_rng(seed)
    ym = math.radians(yaw_max_deg)
    pm = math.radians(pitch_max_deg)
    rm = math.radians(roll_max_deg)
    out = []
    for _ in range(n):
        yaw = rng.uniform(-ym, ym)
        pitch = rng.uniform(-pm, pm)
        roll = rng.uniform(-rm, rm)
        out.append(PoseAngles(yaw, pitch, roll))
    return out


def _child_seed(seed: int, sample_id: str) -> int:
    digest = hashlib.sha256(f"{seed}:{sample_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFFFFFFFFFFFFFF


def _split_rank(seed: int, sample_id: str) -> bytes:
    return hashlib.sha256(f"{seed}|{sample_id}|split".encode()).digest()


def generate_dataset(out_dir, n: int, seed: int, *, split: float = 0.8,
                     yaw_max_deg: float = 90.0, pitch_max_deg: float = 20.0,
                     roll_max_deg: float = 15.0, image_size: int = 96,
                     jitter_sigma: float = 1.0,
                     deform_sigma: float = 0.02) -> tuple[list[str], list[str]]:
    """Write n samples under out_dir/train and out_dir/test.

    The split is deterministic: ids are ranked by a seeded hash and the first
    round(n*split) become training samples. Returns (train_ids, test_ids).
    """
    if n < 1:
        raise ValueError(f"dataset size must be positive, got {n}")
    if not (0.0 <= split <= 1.0):
        raise ValueError(f"split fraction must lie in [0, 1], got {split}")
    out_dir = Path(out_dir)
    tpl = default_template()
    poses = draw_poses(n, seed, yaw_max_deg=yaw_max_deg,
                       pitch_max_deg=pitch_max_deg, roll_max_deg=roll_max_deg)
    ids = [f"sample_{i:05d}" for i in range(n)]
    by_rank = sorted(ids, key=lambda s: _split_rank(seed, s))
    n_train = int(round(n * split))
    train_set = set(by_rank[:n_train])
    for sub in ("train", "test"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
        # a previous generation with a different size or split must not
        # leak stale samples into the new dataset
        for leftover in (out_dir / sub).glob("sample_*"):
            leftover.unlink()
    write_template_info(out_dir / "template.txt", tpl, image_size)
    train_ids, test_ids = [], []
    for sid, pose in zip(ids, poses):
        sample = generate_sample(pose, _child_seed(seed, sid), image_size=image_size,
                                 template=tpl, jitter_sigma=jitter_sigma,
                                 deform_sigma=deform_sigma, sample_id=sid)
        sub = "train" if sid in train_set else "test"
        write_sample(sample, out_dir / sub)
        (train_ids if sub == "train" else test_ids).append(sid)
    return train_ids, test_ids


# -------------------------------------------------------------------- I/O


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255) from a [-1, 1] grid image."""
    k = quantize_image(np.asarray(image))
    H, W = k.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        f.write(k.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 PGM back onto the [-1, 1] float grid."""
    raw = Path(path).read_bytes()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(raw):
            if raw[pos:pos + 1].isspace():
                pos += 1
            elif raw[pos:pos + 1] == b"#":
                while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        return raw[start:pos]

    magic = token()
    if magic != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {magic!r}, expected b'P5')")
    try:
        W, H, maxval = int(token()), int(token()), int(token())
    except ValueError as e:
        raise DataError(f"{path}: malformed PGM header: {e}") from None
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval} (expected 255)")
    pos += 1  # single whitespace byte after maxval
    pixels = raw[pos:]
    if len(pixels) != W * H:
        raise DataError(f"{path}: expected {W * H} pixels, found {len(pixels)}")
    k = np.frombuffer(pixels, dtype=np.uint8).reshape(H, W)
    return pixels_to_float(k)


def write_landmarks(path, landmarks: np.ndarray) -> None:
    pts = np.asarray(landmarks, dtype=np.float64).reshape(-1, 2)
    with open(path, "w", newline="\n") as f:
        for x, y in pts:
            f.write(f"{x:.6f} {y:.6f}\n")


def read_landmarks(path) -> np.ndarray:
    pts = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 2:
                raise DataError(
                    f"{path}:{lineno}: expected 'x y', got {len(fields)} fields")
            try:
                pts.append((float(fields[0]), float(fields[1])))
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric coordinate") from None
    if len(pts) < 2:
        raise DataError(f"{path}: needs at least 2 landmarks, found {len(pts)}")
    return np.asarray(pts, dtype=np.float64).reshape(-1)


_META_KEYS = ("pose_yaw", "pose_pitch", "pose_roll",
              "bbox_x", "bbox_y", "bbox_h", "bbox_w", "seed")


def write_meta(path, sample: Sample) -> None:
    vals = {
        "pose_yaw": sample.pose.yaw, "pose_pitch": sample.pose.pitch,
        "pose_roll": sample.pose.roll,
        "bbox_x": sample.bbox.x, "bbox_y": sample.bbox.y,
        "bbox_h": sample.bbox.h, "bbox_w": sample.bbox.w,
    }
    with open(path, "w", newline="\n") as f:
        for key in _META_KEYS[:-1]:
            f.write(f"{key}={vals[key]:.17g}\n")
        f.write(f"seed={sample.seed}\n")


def read_meta(path) -> dict:
    vals = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            if key not in _META_KEYS:
                raise DataError(f"{path}:{lineno}: unknown metadata key {key!r}")
            try:
                vals[key] = int(value) if key == "seed" else float(value)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric value for {key}") from None
    missing = [k for k in _META_KEYS if k not in vals]
    if missing:
        raise DataError(f"{path}: missing metadata keys: {', '.join(missing)}")
    return vals


def write_sample(sample: Sample, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_pgm(directory / f"{sample.sample_id}.pgm", sample.image)
    write_landmarks(directory / f"{sample.sample_id}.landmarks.txt", sample.landmarks)
    write_meta(directory / f"{sample.sample_id}.meta.txt", sample)


def read_sample(directory, sample_id: str) -> Sample:
    directory = Path(directory)
    image = read_pgm(directory / f"{sample_id}.pgm")
    landmarks = read_landmarks(directory / f"{sample_id}.landmarks.txt")
    meta = read_meta(directory / f"{sample_id}.meta.txt")
    pose = PoseAngles(meta["pose_yaw"], meta["pose_pitch"], meta["pose_roll"])
    bbox = BBox(x=meta["bbox_x"], y=meta["bbox_y"], h=meta["bbox_h"], w=meta["bbox_w"])
    return Sample(sample_id=sample_id, image=image, landmarks=landmarks,
                  pose=pose, bbox=bbox, seed=int(meta["seed"]))


@dataclass(frozen=True)
class TemplateInfo:
    """Per-dataset landmark conventions (subset of Template3D that I/O needs)."""

    num_landmarks: int
    pupil_left: int
    pupil_right: int
    mirror: np.ndarray
    image_size: int


def write_template_info(path, tpl: Template3D, image_size: int) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(f"landmarks={tpl.num_landmarks}\n")
        f.write(f"image_size={image_size}\n")
        f.write(f"pupil_left={tpl.pupil_left}\n")
        f.write(f"pupil_right={tpl.pupil_right}\n")
        f.write("mirror=" + ",".join(str(int(m)) for m in tpl.mirror) + "\n")


def read_template_info(path) -> TemplateInfo:
    vals = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            vals[key] = value
    try:
        P = int(vals["landmarks"])
        mirror = np.array([int(v) for v in vals["mirror"].split(",")])
        info = TemplateInfo(
            num_landmarks=P,
            pupil_left=int(vals["pupil_left"]),
            pupil_right=int(vals["pupil_right"]),
            mirror=mirror,
            image_size=int(vals["image_size"]),
        )
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: malformed template info: {e}") from None
    if mirror.shape != (P,) or not np.array_equal(mirror[mirror], np.arange(P)):
        raise DataError(f"{path}: mirror table is not an involution over {P} landmarks")
    return info


@dataclass
class LandmarkDataset:
    """Loaded split: samples sorted by id plus the dataset conventions."""

    samples: list[Sample]
    template: TemplateInfo


def load_split(dataset_dir, subset: str) -> LandmarkDataset:
    """Load dataset_dir/{subset} (subset is 'train' or 'test')."""
    root = Path(dataset_dir)
    sub = root / subset
    if not sub.is_dir():
        raise DataError(f"{sub}: dataset split directory not found")
    info = read_template_info(root / "template.txt")
    ids = sorted(p.name[:-4] for p in sub.glob("*.pgm"))
    if not ids:
        raise DataError(f"{sub}: no samples found")
    samples = [read_sample(sub, sid) for sid in ids]
    for s in samples:
        if s.landmarks.size != 2 * info.num_landmarks:
            raise DataError(
                f"{s.sample_id}: has {s.landmarks.size // 2} landmarks, "
                f"dataset template says {info.num_landmarks}")
    return LandmarkDataset(samples=samples, template=info)
