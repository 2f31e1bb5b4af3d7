"""Quantitative evaluation of predictions against held-out images.

MSE/PSNR over all channels, SSIM on Rec.601 luma with the standard
11-tap Gaussian window, and epipolar slices (one pixel row stacked across a
coordinate-ordered sequence) for eyeballing interpolation smoothness.
"""

from __future__ import annotations

import dataclasses
import json
import math

import numpy as np


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared difference over all pixels and channels."""
    _check_same_shape(a, b)
    diff = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(diff * diff))


def psnr(mse_value: float) -> float:
    """10 * log10(1 / mse) for images in [0, 1]; +inf when mse is 0."""
    if mse_value < 0:
        raise ValueError("mse must be non-negative")
    if mse_value == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse_value)


def luma(img: np.ndarray) -> np.ndarray:
    """Rec.601 luma of an RGB image (or pass-through for single-channel)."""
    if img.ndim == 2:
        return img.astype(np.float64)
    return img.astype(np.float64) @ np.array([0.299, 0.587, 0.114])


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _windowed_mean(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation with a 1D window applied to both axes."""
    size = window.shape[0]
    rows = np.stack([img[:, j:j + img.shape[1] - size + 1] for j in range(size)], axis=0)
    horiz = np.tensordot(window, rows, axes=(0, 0))
    cols = np.stack([horiz[i:i + horiz.shape[0] - size + 1, :] for i in range(size)], axis=0)
    return np.tensordot(window, cols, axes=(0, 0))


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03,
         window_size: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity on luma, dynamic range 1, valid windows."""
    _check_same_shape(a, b)
    ya, yb = luma(a), luma(b)
    if min(ya.shape) < window_size:
        raise ValueError(f"image must be at least {window_size} px per side, got {ya.shape}")
    window = _gaussian_window(window_size, sigma)
    c1 = k1 ** 2
    c2 = k2 ** 2

    mu_a = _windowed_mean(ya, window)
    mu_b = _windowed_mean(yb, window)
    var_a = _windowed_mean(ya * ya, window) - mu_a * mu_a
    var_b = _windowed_mean(yb * yb, window) - mu_b * mu_b
    cov = _windowed_mean(ya * yb, window) - mu_a * mu_b

    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def epipolar_slice(images: list[np.ndarray], row: int) -> np.ndarray:
    """Stack one pixel row across a coordinate-ordered sequence.

    Output is (sequence length) x W x C: space horizontal, coordinate
    vertical; straight stripes mean smooth interpolation.
    """
    if not images:
        raise ValueError("empty image sequence")
    h = images[0].shape[0]
    if not 0 <= row < h:
        raise ValueError(f"row {row} out of range for height {h}")
    for img in images:
        if img.shape != images[0].shape:
            raise ValueError("all images in the sequence must share one shape")
    return np.stack([img[row] for img in images], axis=0)


@dataclasses.dataclass
class EvalEntry:
    index: int
    path: str
    mse: float
    psnr_db: float
    ssim: float


@dataclasses.dataclass
class EvalReport:
    """Per-held-out-image metrics plus aggregates and runtime stats."""

    entries: list[EvalEntry]
    mean_mse: float
    mean_psnr_db: float
    mean_ssim: float
    render_seconds_mean: float
    render_seconds_total: float

    @classmethod
    def from_entries(cls, entries: list[EvalEntry], render_seconds: list[float]) -> "EvalReport":
        finite_psnr = [e.psnr_db for e in entries if math.isfinite(e.psnr_db)]
        return cls(
            entries=entries,
            mean_mse=float(np.mean([e.mse for e in entries])),
            mean_psnr_db=float(np.mean(finite_psnr)) if finite_psnr else math.inf,
            mean_ssim=float(np.mean([e.ssim for e in entries])),
            render_seconds_mean=float(np.mean(render_seconds)),
            render_seconds_total=float(np.sum(render_seconds)),
        )

    def to_json(self) -> dict:
        def _psnr(value):
            return None if math.isinf(value) else value   # sentinel for mse == 0

        return {
            "images": [{"index": e.index, "path": e.path, "mse": e.mse,
                        "psnr_db": _psnr(e.psnr_db), "ssim": e.ssim} for e in self.entries],
            "aggregate": {"mean_mse": self.mean_mse, "mean_psnr_db": _psnr(self.mean_psnr_db),
                          "mean_ssim": self.mean_ssim},
            "runtime": {"render_seconds_mean": self.render_seconds_mean,
                        "render_seconds_total": self.render_seconds_total},
        }

    def to_csv(self) -> str:
        lines = ["index,path,mse,psnr_db,ssim"]
        for e in self.entries:
            psnr_txt = "inf" if math.isinf(e.psnr_db) else f"{e.psnr_db:.6g}"
            lines.append(f"{e.index},{e.path},{e.mse:.9g},{psnr_txt},{e.ssim:.6g}")
        return "\n".join(lines) + "\n"

    def write(self, json_path, csv_path) -> None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())


def evaluate(render_fn, observations, heldout: list[int]) -> EvalReport:
    """Render each held-out coordinate and compare against its stored image.

    ``render_fn(coord)`` must return a float image; ``observations`` maps the
    held-out indices to (coord, image, path) triples via attribute access.
    """
    import time

    if not heldout:
        raise ValueError("no held-out observations to evaluate")
    by_index = {obs.index: obs for obs in observations}
    entries, seconds = [], []
    for index in heldout:
        obs = by_index[index]
        t0 = time.perf_counter()
        rendered = render_fn(obs.coord)
        seconds.append(time.perf_counter() - t0)
        m = mse(rendered, obs.image)
        entries.append(EvalEntry(index=index, path=getattr(obs, "path", f"image_{index}"),
                                 mse=m, psnr_db=psnr(m), ssim=ssim(rendered, obs.image)))
    return EvalReport.from_entries(entries, seconds)
