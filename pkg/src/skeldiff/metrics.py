"""Evaluation suite: SSIM, PSNR, MAE, FID, LPIPS and the keypoint
confidence-completeness (KCC) score.

Feature extraction (for FID/LPIPS) and keypoint detection are pluggable;
the shipped defaults are a fixed-seed random convolutional encoder and a
template-matching detector for the phantom data. FID/LPIPS values are
therefore internally comparable across runs of this codebase, not
comparable to numbers computed with Inception/VGG features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


def _as_2d_or_3d(img) -> np.ndarray:
    arr = np.asarray(getattr(img, "data", img), dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected [H, W] or [C, H, W] image, got shape {arr.shape}")
    return arr


def _check_same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


# --- pixel metrics --------------------------------------------------------

def _ssim_window(window: int, sigma: float) -> np.ndarray:
    r = window // 2
    xs = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(xs[:, None] ** 2 + xs[None, :] ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def ssim(a, b, window: int = 11, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0, sigma: float = 1.5) -> float:
    """Mean local SSIM over a Gaussian window, symmetric reflect padding."""
    a = _as_2d_or_3d(a)
    b = _as_2d_or_3d(b)
    _check_same_shape(a, b)
    w = _ssim_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def filt(x):
        return np.stack([ndimage.correlate(ch, w, mode="reflect") for ch in x])

    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def psnr(a, b, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE) in dB; +inf when the images are identical."""
    a = _as_2d_or_3d(a)
    b = _as_2d_or_3d(b)
    _check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def mae(a, b) -> float:
    a = _as_2d_or_3d(a)
    b = _as_2d_or_3d(b)
    _check_same_shape(a, b)
    return float(np.mean(np.abs(a - b)))


# --- FID ------------------------------------------------------------------

@dataclass
class FidStats:
    """Gaussian fit (mean, covariance, count) of a feature distribution."""

    mu: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = self.mu.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"cov shape {self.cov.shape} does not match mu dim {d}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-10):
            raise ValueError("covariance must be symmetric")
        if self.n < 2:
            raise ValueError(f"need n >= 2 samples, got {self.n}")


def _trace_sqrt_product(cov_r: np.ndarray, cov_g: np.ndarray, tol: float = 1e-6) -> float:
    # Tr((Sr Sg)^(1/2)) = Tr(M^(1/2)) with M = sqrt(Sr) Sg sqrt(Sr), which is
    # symmetric PSD, so an eigendecomposition suffices.
    er, vr = np.linalg.eigh(cov_r)
    er = np.clip(er, 0.0, None)
    sqrt_r = vr @ np.diag(np.sqrt(er)) @ vr.T
    m = sqrt_r @ cov_g @ sqrt_r
    ev = np.linalg.eigvalsh((m + m.T) / 2.0)
    if np.any(ev < -tol):
        raise ValueError(f"covariance product badly non-PSD: min eigenvalue {ev.min()}")
    ev = np.clip(ev, 0.0, None)
    return float(np.sum(np.sqrt(ev)))


def fid(real_stats: FidStats, gen_stats: FidStats) -> float:
    """Frechet distance between two Gaussian feature fits."""
    if real_stats.mu.shape != gen_stats.mu.shape:
        raise ValueError(
            f"feature dimension mismatch: {real_stats.mu.shape} vs {gen_stats.mu.shape}"
        )
    diff = real_stats.mu - gen_stats.mu
    tr_sqrt = _trace_sqrt_product(real_stats.cov, gen_stats.cov)
    return float(diff @ diff + np.trace(real_stats.cov) + np.trace(gen_stats.cov) - 2.0 * tr_sqrt)


# --- feature extraction ---------------------------------------------------

class FeatureExtractor:
    """Interface: deterministic multi-layer feature maps for LPIPS/FID."""

    def layer_activations(self, img) -> list[np.ndarray]:
        """Per-layer activations, each [C_l, H_l, W_l]."""
        raise NotImplementedError

    def pooled_features(self, img) -> np.ndarray:
        """Global-average-pooled final-layer features (1-D vector)."""
        return self.layer_activations(img)[-1].mean(axis=(1, 2))

    def manifest(self) -> dict:
        raise NotImplementedError


class IdentityExtractor(FeatureExtractor):
    """Single layer equal to the input image; useful as a test oracle."""

    def layer_activations(self, img):
        return [_as_2d_or_3d(img)]

    def manifest(self):
        return {"name": "identity", "version": 1}


def _conv2d_stride2(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # x: [Cin, H, W], w: [Cout, Cin, 3, 3]; padding 1, stride 2
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    windows = windows[:, ::2, ::2]  # stride 2
    return np.einsum("cijkl,ockl->oij", windows, w) + b[:, None, None]


class RandomConvExtractor(FeatureExtractor):
    """Fixed-seed random 4-layer convolutional encoder.

    Weights are drawn once from a seeded generator, so features are
    reproducible across processes and machines with the same numpy.
    """

    VERSION = 1

    def __init__(self, in_channels: int = 1, widths=(8, 16, 32, 64), seed: int = 2024):
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.seed = seed
        rng = np.random.default_rng(seed)
        self._layers = []
        cin = in_channels
        for cout in self.widths:
            w = rng.standard_normal((cout, cin, 3, 3)) / math.sqrt(cin * 9)
            b = rng.standard_normal(cout) * 0.1
            self._layers.append((w, b))
            cin = cout

    def layer_activations(self, img):
        x = _as_2d_or_3d(img)
        if x.shape[0] != self.in_channels:
            raise ValueError(f"extractor expects {self.in_channels} channels, got {x.shape[0]}")
        acts = []
        for w, b in self._layers:
            x = np.maximum(_conv2d_stride2(x, w, b), 0.0)
            acts.append(x)
        return acts

    def manifest(self):
        return {
            "name": "random_conv",
            "version": self.VERSION,
            "seed": self.seed,
            "in_channels": self.in_channels,
            "widths": list(self.widths),
        }


def lpips(a, b, extractor: FeatureExtractor) -> float:
    """Layer-wise squared distance between unit-normalized channel features."""
    total = 0.0
    for fa, fb in zip(extractor.layer_activations(a), extractor.layer_activations(b)):
        na = fa / (np.linalg.norm(fa, axis=0, keepdims=True) + 1e-12)
        nb = fb / (np.linalg.norm(fb, axis=0, keepdims=True) + 1e-12)
        total += float(np.mean(np.sum((na - nb) ** 2, axis=0)))
    return total


def feature_stats(images, extractor: FeatureExtractor) -> FidStats:
    """Sample mean and unbiased covariance of pooled final-layer features."""
    feats = [extractor.pooled_features(img) for img in images]
    if len(feats) < 2:
        raise ValueError(f"need at least 2 images, got {len(feats)}")
    mat = np.stack(feats)
    mu = mat.mean(axis=0)
    cov = np.cov(mat, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    return FidStats(mu=mu, cov=cov, n=mat.shape[0])


# --- keypoints and KCC ----------------------------------------------------

@dataclass
class KeypointSet:
    """Detected keypoints: ((x, y), confidence) pairs, confidences in [0, 1]."""

    points: list  # [((x, y), c), ...]
    max_count: int = 10

    def __post_init__(self):
        if len(self.points) > self.max_count:
            raise ValueError(f"{len(self.points)} keypoints exceeds declared max {self.max_count}")
        for (_, conf) in self.points:
            if not 0.0 <= conf <= 1.0:
                raise ValueError(f"confidence {conf} outside [0, 1]")

    @property
    def M(self) -> int:
        return len(self.points)

    @property
    def confidences(self) -> np.ndarray:
        return np.array([c for _, c in self.points], dtype=np.float64)

    @property
    def coordinates(self) -> np.ndarray:
        return np.array([k for k, _ in self.points], dtype=np.float64).reshape(-1, 2)


@dataclass
class KccResult:
    S: float
    completeness: float
    kcc: float
    tau: float
    empty: bool = False


def kcc(keypoints: KeypointSet, tau: float = 0.65) -> KccResult:
    """Mean confidence times the fraction of confidences at or above tau.

    The completeness threshold is non-strict (c_i = tau counts as detected).
    An empty keypoint set scores 0 with the ``empty`` flag set.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    if keypoints.M == 0:
        return KccResult(S=0.0, completeness=0.0, kcc=0.0, tau=tau, empty=True)
    conf = keypoints.confidences
    s = float(conf.mean())
    completeness = float(np.mean(conf >= tau))
    return KccResult(S=s, completeness=completeness, kcc=s * completeness, tau=tau)


class KeypointDetector:
    """Interface: image in [0, 1] -> KeypointSet with up to max_keypoints."""

    max_keypoints: int = 10

    def detect(self, img) -> KeypointSet:
        raise NotImplementedError


class PhantomKeypointDetector(KeypointDetector):
    """Reference detector for phantom X-rays.

    Joint bulbs are bright disks; the detector correlates the image with a
    disk-minus-annulus matched filter, picks the strongest non-overlapping
    responses, and scores each as clipped normalized local contrast
    (response / contrast_ref, clipped to [0, 1]). Geometry scales linearly
    with image size relative to the 64-pixel reference.
    """

    def __init__(self, max_keypoints: int = 10, disk_radius: float = 2.0,
                 annulus: tuple = (3.0, 5.0), min_distance: float = 4.0,
                 contrast_ref: float = 0.25, reference_size: int = 64):
        self.max_keypoints = max_keypoints
        self.disk_radius = disk_radius
        self.annulus = annulus
        self.min_distance = min_distance
        self.contrast_ref = contrast_ref
        self.reference_size = reference_size

    def _kernel(self, scale: float) -> np.ndarray:
        r_in = self.disk_radius * scale
        a0, a1 = self.annulus[0] * scale, self.annulus[1] * scale
        r = int(math.ceil(a1))
        xs = np.arange(-r, r + 1, dtype=np.float64)
        dist = np.sqrt(xs[:, None] ** 2 + xs[None, :] ** 2)
        disk = (dist <= r_in).astype(np.float64)
        ring = ((dist > a0) & (dist <= a1)).astype(np.float64)
        return disk / disk.sum() - ring / ring.sum()

    def detect(self, img) -> KeypointSet:
        arr = _as_2d_or_3d(img)
        if arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
            raise ValueError("detector input must lie in [0, 1]")
        plane = arr.mean(axis=0)
        scale = plane.shape[0] / self.reference_size
        response = ndimage.correlate(plane, self._kernel(scale), mode="reflect")

        # greedy non-max suppression over local maxima
        min_d = self.min_distance * scale
        order = np.argsort(response, axis=None)[::-1]
        h, w = response.shape
        picked: list[tuple[float, float, float]] = []
        for flat in order:
            if len(picked) == self.max_keypoints:
                break
            y, x = divmod(int(flat), w)
            if any((x - px) ** 2 + (y - py) ** 2 < min_d**2 for px, py, _ in picked):
                continue
            picked.append((float(x), float(y), float(response[y, x])))
        points = [
            ((x, y), float(np.clip(resp / self.contrast_ref, 0.0, 1.0)))
            for x, y, resp in picked
        ]
        return KeypointSet(points=points, max_count=self.max_keypoints)


def detect_keypoints(img, detector: KeypointDetector) -> KeypointSet:
    return detector.detect(img)


# --- report ---------------------------------------------------------------

COLUMNS = ("ssim", "psnr", "mae", "fid", "lpips", "kcc")


@dataclass
class MetricReport:
    """Per-image metric values plus set-level FID for one evaluation run."""

    ssim: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    mae: list = field(default_factory=list)
    lpips: list = field(default_factory=list)
    kcc: list = field(default_factory=list)
    fid: float = float("nan")
    image_ids: list = field(default_factory=list)

    def aggregate(self) -> dict:
        out = {"fid": self.fid}
        for name in ("ssim", "psnr", "mae", "lpips", "kcc"):
            vals = np.array(getattr(self, name), dtype=np.float64)
            with np.errstate(invalid="ignore"):  # std over inf values is nan
                out[name] = float(vals.mean()) if len(vals) else float("nan")
                out[f"{name}_std"] = float(vals.std(ddof=0)) if len(vals) else float("nan")
        return out

    def to_text(self) -> str:
        header = f"{'image':<16}" + "".join(f"{c.upper():>12}" for c in COLUMNS)
        lines = [header, "-" * len(header)]
        for i in range(len(self.ssim)):
            img_id = self.image_ids[i] if i < len(self.image_ids) else str(i)
            row = [self.ssim[i], self.psnr[i], self.mae[i], float("nan"), self.lpips[i], self.kcc[i]]
            cells = "".join(f"{v:>12.4f}" if math.isfinite(v) else f"{'inf' if v > 0 else 'nan':>12}" for v in row)
            lines.append(f"{img_id:<16}" + cells)
        agg = self.aggregate()
        lines.append("-" * len(header))
        footer = [agg["ssim"], agg["psnr"], agg["mae"], self.fid, agg["lpips"], agg["kcc"]]
        cells = "".join(f"{v:>12.4f}" if math.isfinite(v) else f"{'inf' if v > 0 else 'nan':>12}" for v in footer)
        lines.append(f"{'mean':<16}" + cells)
        stds = [agg["ssim_std"], agg["psnr_std"], agg["mae_std"], float("nan"), agg["lpips_std"], agg["kcc_std"]]
        cells = "".join(f"{v:>12.4f}" if math.isfinite(v) else f"{'':>12}" for v in stds)
        lines.append(f"{'std':<16}" + cells)
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())
