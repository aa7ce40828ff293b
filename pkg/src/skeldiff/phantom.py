"""Procedural paired foot phantoms and dataset I/O.

Each phantom is a 2-D foot skeleton with 10 canonical joints:

    0-4  metatarsophalangeal (MTP) joints of rays 1-5
    5    interphalangeal joint of the hallux
    6    hallux tip
    7    midfoot (tarsometatarsal apex)
    8    medial ankle landmark
    9    lateral ankle landmark

The hallux deviates from the first metatarsal axis by the hallux-valgus
angle, so the angle is recoverable exactly from keypoints 7, 0 and 5.
The X-ray rendering shows bright anti-aliased bone segments with joint
bulbs over a dark soft-tissue silhouette; the natural-light rendering is
the smooth-shaded silhouette with no internal bone detail.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .schedule import ImageTensor

N_KEYPOINTS = 10
KEYPOINT_NAMES = (
    "mtp1", "mtp2", "mtp3", "mtp4", "mtp5",
    "hallux_ip", "hallux_tip", "midfoot", "ankle_medial", "ankle_lateral",
)

# canonical layout in a unit frame, x right / y down, toes at the top
_MIDFOOT = np.array([0.52, 0.62])
_ANKLE_MED = np.array([0.44, 0.88])
_ANKLE_LAT = np.array([0.63, 0.88])
_MTP = np.array([
    [0.30, 0.34],
    [0.42, 0.285],
    [0.53, 0.28],
    [0.63, 0.31],
    [0.72, 0.36],
])
_HALLUX_PROX_LEN = 0.13
_HALLUX_DIST_LEN = 0.10
_LESSER_TOE_LEN = 0.07


@dataclass
class FootPhantomParams:
    hv_angle: float = 15.0  # degrees, hallux deviation from the first metatarsal axis
    bone_lengths: list[float] = field(default_factory=lambda: [1.0] * 10)
    bone_width: float = 1.2  # half-width of bone segments, pixels at 64 resolution
    bulb_radius: float = 2.2  # joint bulb radius, pixels at 64 resolution
    foot_scale: float = 0.82  # skeleton extent as a fraction of image width
    pose_jitter: float = 0.02  # rotation (radians) and translation (fraction) scale
    resolution: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.hv_angle <= 45.0:
            raise ValueError(f"hv_angle must be in [0, 45], got {self.hv_angle}")
        if len(self.bone_lengths) != 10 or any(v <= 0 for v in self.bone_lengths):
            raise ValueError("bone_lengths must be 10 positive values")
        if self.bone_width <= 0 or self.bulb_radius <= 0 or self.foot_scale <= 0:
            raise ValueError("bone_width, bulb_radius and foot_scale must be positive")


@dataclass
class PairedSample:
    c: ImageTensor  # natural-light condition
    x: ImageTensor  # X-ray target
    d: ImageTensor  # diff-domain image x - c
    keypoints_gt: np.ndarray  # [10, 2] pixel (x, y)
    params: FootPhantomParams | None = None
    sample_id: str = ""


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _skeleton(params: FootPhantomParams):
    """Keypoints [10, 2] and bone segments [(p0, p1), ...] in unit coords."""
    L = params.bone_lengths
    mid = _MIDFOOT
    mtp = np.empty((5, 2))
    for i in range(5):
        mtp[i] = mid + (_MTP[i] - mid) * L[i]

    axis = mtp[0] - mid
    axis = axis / np.linalg.norm(axis)
    hv = math.radians(params.hv_angle)
    # positive hv swings the hallux laterally, toward the lesser toes
    hallux_dir = _rot(hv) @ axis
    ip = mtp[0] + hallux_dir * _HALLUX_PROX_LEN * L[5]
    tip = ip + hallux_dir * _HALLUX_DIST_LEN * L[6]

    ankle_med = mid + (_ANKLE_MED - mid) * L[7]
    ankle_lat = mid + (_ANKLE_LAT - mid) * L[8]

    keypoints = np.stack([*mtp, ip, tip, mid, ankle_med, ankle_lat])

    segments = [(mid, mtp[i]) for i in range(5)]
    segments += [(mtp[0], ip), (ip, tip)]
    segments += [(mid, ankle_med), (mid, ankle_lat), (ankle_med, ankle_lat)]
    # short non-keypoint toe stubs on rays 2-5 for silhouette realism
    for i in range(1, 5):
        ray = mtp[i] - mid
        ray = ray / np.linalg.norm(ray)
        segments.append((mtp[i], mtp[i] + ray * _LESSER_TOE_LEN * L[9]))
    return keypoints, segments


def _segment_distances(points: np.ndarray, segments) -> np.ndarray:
    """Distance of each point [N, 2] to each segment -> [N, n_seg]."""
    out = np.empty((points.shape[0], len(segments)))
    for j, (p0, p1) in enumerate(segments):
        v = p1 - p0
        vv = float(v @ v)
        t = np.clip((points - p0) @ v / vv, 0.0, 1.0) if vv > 0 else np.zeros(len(points))
        proj = p0 + t[:, None] * v
        out[:, j] = np.linalg.norm(points - proj, axis=1)
    return out


def _smoothstep(edge: np.ndarray) -> np.ndarray:
    t = np.clip(edge, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def generate_phantom(params: FootPhantomParams) -> PairedSample:
    """Render one paired sample, deterministic for a given params.seed."""
    res = params.resolution
    rng = np.random.default_rng(params.seed)
    theta = rng.uniform(-1.0, 1.0) * params.pose_jitter
    shift = rng.uniform(-1.0, 1.0, size=2) * params.pose_jitter

    kps_u, segs_u = _skeleton(params)
    center = np.array([0.51, 0.58])
    transform = lambda p: (_rot(theta) @ ((p - center) * params.foot_scale).T).T + center + shift
    kps = transform(kps_u) * res
    segments = [(transform(p0[None])[0] * res, transform(p1[None])[0] * res) for p0, p1 in segs_u]

    margin = params.bulb_radius * res / 64 + 1.0
    if kps.min() < margin or kps.max() > res - margin:
        raise ValueError("rendered foot exceeds the image frame")

    ys, xs = np.mgrid[0:res, 0:res]
    grid = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1).astype(np.float64)
    seg_dist = _segment_distances(grid, segments).min(axis=1).reshape(res, res)
    bulb_dist = np.linalg.norm(grid[:, None, :] - kps[None, :, :], axis=2).min(axis=1)
    bulb_dist = bulb_dist.reshape(res, res)

    px = res / 64.0  # geometry parameters are specified at 64-pixel scale
    tissue_r = 7.0 * px
    edge = 2.5 * px
    tissue = _smoothstep((tissue_r + edge - seg_dist) / edge)

    bone_w = params.bone_width * px
    bone = _smoothstep((bone_w + 0.8 * px - seg_dist) / (0.8 * px))
    bulb_r = params.bulb_radius * px
    bulb = _smoothstep((bulb_r + 0.8 * px - bulb_dist) / (0.8 * px))

    xray = 0.02 + 0.23 * tissue
    xray = np.maximum(xray, 0.85 * bone)
    xray = np.maximum(xray, 0.95 * bulb)
    xray = np.clip(xray, 0.0, 1.0)

    # natural image: shaded silhouette, no internal bone structure
    interior = _smoothstep((tissue_r + edge - seg_dist) / (3.0 * edge))
    shade_y = 1.0 - 0.25 * (ys / max(res - 1, 1))
    natural = 0.06 + tissue * (0.42 + 0.22 * interior) * shade_y
    natural = np.clip(natural, 0.0, 1.0)

    c = ImageTensor(natural[None], "natural")
    x = ImageTensor(xray[None], "xray")
    d = ImageTensor(x.data - c.data, "diff")
    return PairedSample(c=c, x=x, d=d, keypoints_gt=kps, params=params)


def sample_params(rng: np.random.Generator, resolution: int = 64,
                  hv_range=(0.0, 40.0)) -> FootPhantomParams:
    """Draw randomized phantom parameters from an explicit generator."""
    return FootPhantomParams(
        hv_angle=float(rng.uniform(*hv_range)),
        bone_lengths=list(rng.uniform(0.92, 1.08, size=10)),
        pose_jitter=0.02,
        resolution=resolution,
        seed=int(rng.integers(0, 2**31 - 1)),
    )


# --- dataset I/O ----------------------------------------------------------
#
# Layout: {root}/{train|val|test}/{id}_nat.png, {id}_xray.png, {id}_kp.txt
# plus a json "manifest" file at the root.

MANIFEST_NAME = "manifest"


def _to_png(path: Path, img: np.ndarray):
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr[0] if arr.ndim == 3 else arr, mode="L").save(path, format="PNG")


def _from_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return (arr / 255.0)[None]


def _write_keypoints(path: Path, kps: np.ndarray):
    lines = [f"{i} {repr(float(x))} {repr(float(y))}" for i, (x, y) in enumerate(kps)]
    path.write_text("\n".join(lines) + "\n")


def _read_keypoints(path: Path) -> np.ndarray:
    kps = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"corrupted keypoint sidecar {path}: line {line!r}")
        kps.append((float(parts[1]), float(parts[2])))
    if len(kps) != N_KEYPOINTS:
        raise ValueError(f"{path}: expected {N_KEYPOINTS} keypoints, found {len(kps)}")
    return np.array(kps, dtype=np.float64)


def split_sizes(n: int) -> tuple[int, int, int]:
    """(train, val, test) counts: val and test get floor(n * 15/145) each,
    at least 1, remainder to train."""
    if n < 3:
        raise ValueError(f"need at least 3 samples, got {n}")
    holdout = max(1, int(n * 15 / 145))
    return n - 2 * holdout, holdout, holdout


def make_dataset(n: int, resolution: int, seed: int, root) -> Path:
    """Generate n paired phantoms under root, split into train/val/test."""
    root = Path(root)
    n_train, n_val, n_test = split_sizes(n)
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test

    manifest = {"seed": seed, "resolution": resolution, "n": n,
                "splits": {"train": [], "val": [], "test": []}, "format_version": 1}
    for i, split in enumerate(splits):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        params = sample_params(rng, resolution=resolution)
        sample = generate_phantom(params)
        sdir = root / split
        sdir.mkdir(parents=True, exist_ok=True)
        sid = f"{i:04d}"
        _to_png(sdir / f"{sid}_nat.png", sample.c.data)
        _to_png(sdir / f"{sid}_xray.png", sample.x.data)
        _write_keypoints(sdir / f"{sid}_kp.txt", sample.keypoints_gt)
        manifest["splits"][split].append(sid)
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_pair(prefix, expected_resolution: int | None = None) -> PairedSample:
    """Load one sample given its path prefix ({split_dir}/{id})."""
    prefix = Path(prefix)
    nat_path = prefix.parent / f"{prefix.name}_nat.png"
    xray_path = prefix.parent / f"{prefix.name}_xray.png"
    kp_path = prefix.parent / f"{prefix.name}_kp.txt"
    for p in (nat_path, xray_path, kp_path):
        if not p.exists():
            raise FileNotFoundError(f"missing dataset file {p}")
    nat = _from_png(nat_path)
    xray = _from_png(xray_path)
    if expected_resolution is not None and nat.shape[-1] != expected_resolution:
        raise ValueError(
            f"{nat_path}: resolution {nat.shape[-1]} does not match manifest "
            f"value {expected_resolution}"
        )
    kps = _read_keypoints(kp_path)
    c = ImageTensor(nat, "natural")
    x = ImageTensor(xray, "xray")
    return PairedSample(
        c=c, x=x, d=ImageTensor(x.data - c.data, "diff"),
        keypoints_gt=kps, sample_id=prefix.name,
    )


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return json.loads(path.read_text())


def load_split(root, split: str) -> list[PairedSample]:
    manifest = read_manifest(root)
    if split not in manifest["splits"]:
        raise ValueError(f"unknown split {split!r}")
    res = manifest["resolution"]
    return [load_pair(Path(root) / split / sid, expected_resolution=res)
            for sid in manifest["splits"][split]]
