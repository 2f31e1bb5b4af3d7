"""Dataset manifests, PNG image I/O, held-out splits and synthetic scenes.

A dataset is a directory of 8-bit RGB PNGs plus a ``manifest.json`` that
assigns each image a raw coordinate vector and declares the coordinate
dimensions. Raw coordinates are normalized per dimension to [0, 1] before
anything downstream sees them.

The synthetic generators emit scenes whose per-pixel motion is known in
closed form, so trained models can be scored against exact ground truth.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from typing import Sequence

import numpy as np
from PIL import Image

VIEW_KINDS = ("view_horizontal", "view_vertical")
DIMENSION_KINDS = VIEW_KINDS + ("time", "light", "generic")


class ManifestSchemaError(ValueError):
    """The manifest JSON does not match the expected schema."""


class CoordinateLengthError(ManifestSchemaError):
    """An image's coordinate vector length disagrees with the declared dims."""


@dataclasses.dataclass
class DimensionSpec:
    """One coordinate axis of the field: name, semantic kind, raw range."""

    name: str
    kind: str
    min: float
    max: float

    def __post_init__(self):
        if self.kind not in DIMENSION_KINDS:
            raise ManifestSchemaError(f"unknown dimension kind {self.kind!r}")
        if not self.max > self.min:
            raise ManifestSchemaError(f"dimension {self.name!r}: need max > min, got [{self.min}, {self.max}]")

    def normalize(self, raw: float) -> float:
        return (raw - self.min) / (self.max - self.min)

    def to_json(self) -> dict:
        return {"name": self.name, "kind": self.kind, "min": self.min, "max": self.max}


@dataclasses.dataclass
class ImageEntry:
    path: str
    coord: list[float]


@dataclasses.dataclass
class Manifest:
    name: str
    dims: list[DimensionSpec]
    images: list[ImageEntry]
    heldout: list[int] | None = None

    @property
    def n_d(self) -> int:
        return len(self.dims)

    def normalized_coord(self, index: int) -> np.ndarray:
        raw = self.images[index].coord
        return np.array([d.normalize(r) for d, r in zip(self.dims, raw)], dtype=np.float64)

    def validate(self) -> None:
        if not self.dims:
            raise ManifestSchemaError("manifest declares no dimensions")
        for entry in self.images:
            if len(entry.coord) != self.n_d:
                raise CoordinateLengthError(
                    f"image {entry.path!r} has coordinate length {len(entry.coord)}, expected {self.n_d}")
        coords = [tuple(e.coord) for e in self.images]
        if len(set(coords)) != len(coords):
            raise ManifestSchemaError("image coordinates must be pairwise distinct")
        if self.heldout is not None:
            for i in self.heldout:
                if not 0 <= i < len(self.images):
                    raise ManifestSchemaError(f"heldout index {i} out of range")

    def to_json(self) -> dict:
        out = {
            "name": self.name,
            "dims": [d.to_json() for d in self.dims],
            "images": [{"path": e.path, "coord": list(map(float, e.coord))} for e in self.images],
        }
        if self.heldout is not None:
            out["heldout"] = list(self.heldout)
        return out


def _canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def load_manifest(path: str | os.PathLike) -> Manifest:
    """Parse and validate a manifest; raises FileNotFoundError if absent."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ManifestSchemaError(f"manifest is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ManifestSchemaError("manifest root must be an object")
    try:
        dims = [DimensionSpec(d["name"], d["kind"], float(d["min"]), float(d["max"])) for d in raw["dims"]]
        images = [ImageEntry(str(e["path"]), [float(c) for c in e["coord"]]) for e in raw["images"]]
        name = str(raw["name"])
    except (KeyError, TypeError) as e:
        raise ManifestSchemaError(f"manifest missing or malformed field: {e}") from e
    heldout = raw.get("heldout")
    if heldout is not None:
        heldout = [int(i) for i in heldout]
    manifest = Manifest(name, dims, images, heldout)
    manifest.validate()
    return manifest


def save_manifest(manifest: Manifest, path: str | os.PathLike) -> None:
    manifest.validate()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_canonical_json(manifest.to_json()))


# ---------------------------------------------------------------------------
# image I/O
# ---------------------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) / 255.0


def load_image(path: str | os.PathLike) -> np.ndarray:
    """8-bit RGB PNG to float32 H x W x 3 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return from_uint8(arr)


def save_image(path: str | os.PathLike, img: np.ndarray) -> None:
    """float [0, 1] H x W x 3 to an 8-bit RGB PNG (deterministic bytes)."""
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


@dataclasses.dataclass
class Observation:
    """A captured image with its normalized coordinate."""

    coord: np.ndarray           # (n_d,) in [0, 1]
    image: np.ndarray           # H x W x 3 float32
    index: int = 0


def load_observations(manifest: Manifest, base_dir: str | os.PathLike) -> list[Observation]:
    obs = []
    shape = None
    for i, entry in enumerate(manifest.images):
        img = load_image(os.path.join(base_dir, entry.path))
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise ManifestSchemaError(f"image {entry.path!r} has shape {img.shape}, expected {shape}")
        obs.append(Observation(manifest.normalized_coord(i), img, i))
    return obs


# ---------------------------------------------------------------------------
# held-out splits
# ---------------------------------------------------------------------------

PROTOCOLS = ("corners", "center", "middle_frame", "explicit")


def _grid_axes(manifest: Manifest) -> list[np.ndarray]:
    """Sorted distinct raw values per dimension; errors if not a full grid."""
    axes = []
    for d in range(manifest.n_d):
        axes.append(np.array(sorted({e.coord[d] for e in manifest.images})))
    expected = int(np.prod([len(a) for a in axes]))
    if expected != len(manifest.images):
        raise ValueError(f"images do not form a full grid: {len(manifest.images)} images, grid wants {expected}")
    return axes


def holdout_split(manifest: Manifest, protocol: str) -> tuple[list[int], list[int]]:
    """Split image indices into (train, held-out) per the named protocol."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    n = len(manifest.images)

    if protocol == "explicit":
        if manifest.heldout is None:
            raise ValueError("protocol 'explicit' needs a heldout list in the manifest")
        held = list(manifest.heldout)
        return [i for i in range(n) if i not in set(held)], held

    if protocol == "middle_frame":
        if manifest.n_d != 1:
            raise ValueError("protocol 'middle_frame' needs a 1-dimensional field")
        order = sorted(range(n), key=lambda i: manifest.images[i].coord[0])
        held = [order[i] for i in range(1, n - 1, 2)]
        train = [i for i in order if i not in set(held)]
        return train, held

    axes = _grid_axes(manifest)
    if protocol == "center":
        for a in axes:
            if len(a) % 2 == 0:
                raise ValueError("protocol 'center' needs an odd extent in every dimension")
        center = tuple(a[len(a) // 2] for a in axes)
        held = [i for i, e in enumerate(manifest.images) if tuple(e.coord) == center]
        if len(held) != 1:
            raise ValueError("grid has no unique central element")
        return [i for i in range(n) if i != held[0]], held

    # corners: keep the 2^n_d extreme coordinates, hold out everything else
    lo_hi = [(a[0], a[-1]) for a in axes]
    corner_set = {tuple(c) for c in _cartesian(lo_hi)}
    train = [i for i, e in enumerate(manifest.images) if tuple(e.coord) in corner_set]
    held = [i for i in range(n) if i not in set(train)]
    return train, held


def _cartesian(pairs: Sequence[tuple]) -> list[tuple]:
    combos = [()]
    for p in pairs:
        combos = [c + (v,) for c in combos for v in p]
    return combos


# ---------------------------------------------------------------------------
# synthetic scenes with analytic ground truth
# ---------------------------------------------------------------------------

def sample_texture(tex: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Plain bilinear lookup of tex (H x W x C) at continuous (px, py)."""
    h, w = tex.shape[:2]
    x = np.clip(px, 0.0, w - 1.0)
    y = np.clip(py, 0.0, h - 1.0)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.clip(x0 + 1, 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    top = tex[y0, x0] * (1 - fx) + tex[y0, x1] * fx
    bot = tex[y1, x0] * (1 - fx) + tex[y1, x1] * fx
    return top * (1 - fy) + bot * fy


class AnalyticTexture:
    """A smooth closed-form texture that can be sampled at any real position.

    Band-limited value noise (random low-frequency plane waves) plus a few
    soft-edged high-contrast disks. Frames are exact point samples of this
    function, so the only resampling error in a ground-truth warp is the one
    bilinear interpolation of the source frame; the curvature budget keeps
    that below the generator's 1e-3 contract while photometric gradients
    stay strong enough to pin pixel motion everywhere.
    """

    def __init__(self, extent: float, seed: int, n_waves: int = 14, n_disks: int = 5,
                 wavelengths: tuple = (14.0, 60.0), curvature: float = 6e-3,
                 amplitude: float = 0.16):
        rng = np.random.default_rng([seed, 7919])
        wavelength = rng.uniform(*wavelengths, size=(n_waves, 1))
        angle = rng.uniform(0.0, 2 * np.pi, size=n_waves)
        self.freq = (2 * np.pi / wavelength) * np.stack([np.cos(angle), np.sin(angle)], axis=1)
        self.phase = rng.uniform(0.0, 2 * np.pi, size=(n_waves, 3))
        # a wave's curvature is amp * |k|^2; the default budget keeps bilinear
        # resampling of a rendered frame within the generators' warp contract,
        # while static scenes can trade it away for contrast
        k2 = (self.freq ** 2).sum(axis=1)
        self.amp = rng.uniform(0.5, 1.0, size=n_waves) / k2
        self.amp *= amplitude / self.amp.sum()
        total_curv = (self.amp * k2).sum()
        if total_curv > curvature:
            self.amp *= curvature / total_curv

        # non-overlapping soft disks: bounded value range without any clipping
        centers, radii = [], []
        for _ in range(n_disks):
            for _try in range(64):
                c = rng.uniform(0.12, 0.88, size=2) * extent
                r = rng.uniform(0.12, 0.24) * extent
                if all(np.hypot(*(c - c2)) > r + r2 + 10.0 for c2, r2 in zip(centers, radii)):
                    centers.append(c)
                    radii.append(r)
                    break
        self.disk_center = np.array(centers)
        self.disk_radius = np.array(radii)
        signs = rng.choice([-1.0, 1.0], size=(len(centers), 3))
        self.disk_color = signs * rng.uniform(0.15, 0.35, size=(len(centers), 3))
        self.disk_edge = 5.0
        self.disk_core = 8.0      # softened radial coordinate: bounded curvature at the center

    def sample(self, px: np.ndarray, py: np.ndarray) -> np.ndarray:
        """Evaluate at continuous pixel positions; returns (..., 3) in (0, 1)."""
        pos = np.stack([px, py], axis=-1).astype(np.float64)
        arg = pos @ self.freq.T                                    # ... x n_waves
        out = np.full(pos.shape[:-1] + (3,), 0.5)
        for c in range(3):
            out[..., c] += np.sin(arg + self.phase[:, c]) @ self.amp
        for center, radius, color in zip(self.disk_center, self.disk_radius, self.disk_color):
            dist = np.sqrt(((pos - center) ** 2).sum(axis=-1) + self.disk_core ** 2)
            blend = 1.0 / (1.0 + np.exp((dist - radius) / self.disk_edge))
            out += blend[..., None] * color
        return out


def textured_mask(img: np.ndarray, percentile: float = 30.0) -> np.ndarray:
    """Pixels whose local luminance gradient is strong enough to pin motion."""
    luma = img @ np.array([0.299, 0.587, 0.114])
    gy, gx = np.gradient(luma)
    mag = np.hypot(gx, gy)
    return mag > np.percentile(mag, percentile)


@dataclasses.dataclass
class SyntheticScene:
    """Generated frames plus exact motion ground truth.

    ``true_jacobian`` is H x W x 2 x n_d in pixels per unit normalized
    coordinate, matching the flow convention q = p + (x - y) @ J^T. Frames
    sample a shared oversized texture at p + offset(coord), which makes
    warping any frame to any other coordinate exact up to resampling.
    """

    manifest: Manifest
    images: list[np.ndarray]
    true_jacobian: np.ndarray
    mask: np.ndarray
    extras: dict = dataclasses.field(default_factory=dict)

    def analytic_flow(self, src_coord: np.ndarray, dst_coord: np.ndarray) -> np.ndarray:
        """Absolute source positions q (H x W x 2) for warping src -> dst."""
        h, w = self.images[0].shape[:2]
        delta = np.asarray(dst_coord, dtype=np.float64) - np.asarray(src_coord, dtype=np.float64)
        disp = np.tensordot(self.true_jacobian, delta, axes=(3, 0))  # H x W x 2
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        return np.stack([xx + disp[..., 0], yy + disp[..., 1]], axis=-1)

    def warp_by_truth(self, src_index: int, dst_coord: np.ndarray) -> np.ndarray:
        q = self.analytic_flow(self.manifest.normalized_coord(src_index), dst_coord)
        return sample_texture(self.images[src_index], q[..., 0], q[..., 1])

    def save(self, out_dir: str | os.PathLike) -> str:
        """Write PNG frames + manifest.json + truth.npz; returns manifest path."""
        os.makedirs(out_dir, exist_ok=True)
        for entry, img in zip(self.manifest.images, self.images):
            save_image(os.path.join(out_dir, entry.path), img)
        manifest_path = os.path.join(out_dir, "manifest.json")
        save_manifest(self.manifest, manifest_path)
        np.savez_compressed(
            os.path.join(out_dir, "truth.npz"),
            true_jacobian=self.true_jacobian.astype(np.float32),
            mask=self.mask,
            **{k: np.asarray(v) for k, v in self.extras.items()},
        )
        return manifest_path


def _frame(tex: AnalyticTexture, height: int, width: int, dx: float, dy: float = 0.0) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    return tex.sample(xx + dx, yy + dy).astype(np.float32)


def synth_translate(size: int = 64, total_shift_px: float = 8.0, n_frames: int = 3,
                    seed: int = 0) -> SyntheticScene:
    """1D scene: a texture sliding horizontally as the coordinate advances.

    Frame i samples the texture at p + (i * total_shift / (n_frames - 1), 0),
    so the true Jacobian column is (total_shift_px, 0) per unit normalized
    coordinate, constant over the image.
    """
    if n_frames < 2:
        raise ValueError("need at least 2 frames")
    if abs(total_shift_px) > size / 2:
        raise ValueError(f"total shift {total_shift_px} px exceeds half the image width")
    tex = AnalyticTexture(size, seed)
    images, entries = [], []
    for i in range(n_frames):
        shift = total_shift_px * i / (n_frames - 1)
        images.append(_frame(tex, size, size, shift))
        entries.append(ImageEntry(f"frame_{i:03d}.png", [float(i)]))
    dims = [DimensionSpec("t", "time", 0.0, float(n_frames - 1))]
    manifest = Manifest("translate1d", dims, entries)
    jac = np.zeros((size, size, 2, 1))
    jac[..., 0, 0] = total_shift_px
    return SyntheticScene(manifest, images, jac, textured_mask(images[0]))


def synth_lightfield_plane(size: int = 64, disparity_px: float = 4.0, grid: tuple = (3, 3),
                           seed: int = 0) -> SyntheticScene:
    """Fronto-parallel textured plane seen from an M x N camera grid.

    View (u, v), normalized to [0, 1] each, samples the texture at
    p + disparity * (u, v): constant disparity everywhere, view-horizontal
    motion purely horizontal and view-vertical purely vertical.
    """
    rows, cols = grid
    if rows < 2 or cols < 2:
        raise ValueError("grid must be at least 2 x 2")
    if abs(disparity_px) > size / 2:
        raise ValueError(f"disparity {disparity_px} px exceeds half the image width")
    tex = AnalyticTexture(size, seed)
    images, entries = [], []
    for i in range(rows):
        for j in range(cols):
            u = j / (cols - 1)
            v = i / (rows - 1)
            images.append(_frame(tex, size, size, disparity_px * u, disparity_px * v))
            entries.append(ImageEntry(f"view_{i}{j}.png", [float(j), float(i)]))
    dims = [
        DimensionSpec("u", "view_horizontal", 0.0, float(cols - 1)),
        DimensionSpec("v", "view_vertical", 0.0, float(rows - 1)),
    ]
    manifest = Manifest("lightfield_plane", dims, entries)
    jac = np.zeros((size, size, 2, 2))
    jac[..., 0, 0] = disparity_px   # horizontal view moves pixels horizontally
    jac[..., 1, 1] = disparity_px   # vertical view moves pixels vertically
    scene = SyntheticScene(manifest, images, jac, textured_mask(images[0]))
    scene.extras["true_disparity"] = np.full((size, size), disparity_px, dtype=np.float32)
    return scene


def synth_shadow_sweep(size: int = 64, n_lights: int = 5, travel_px: float = 12.0,
                       shadow_factor: float = 0.4, band_width_px: float = 14.0,
                       edge_px: float = 3.0, light_positions: list | None = None,
                       seed: int = 0) -> SyntheticScene:
    """Static texture under a soft shadow band that sweeps with the light.

    The frame at light coordinate t is texture * shading(t); the shading
    band samples its profile at x + travel * t, so the shading motion is
    (travel_px, 0) per unit light coordinate while the texture itself never
    moves. The combined Jacobian ground truth is zero (texture frame of
    reference); the shading motion is reported in ``extras``.
    """
    if light_positions is not None:
        light_positions = sorted(float(p) for p in light_positions)
        if len(light_positions) != len(set(light_positions)):
            raise ValueError("light positions must be distinct")
        n_lights = len(light_positions)
    if n_lights < 2:
        raise ValueError("need at least 2 lights")
    # the albedo never moves here, so it can be much sharper than the moving
    # scenes allow: strong texture gradients pin the albedo flow to zero and
    # force the sweeping shadow into the shading layer
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    tex = AnalyticTexture(size, seed, n_waves=28, wavelengths=(6.0, 26.0),
                          curvature=2.0, amplitude=0.55).sample(xx, yy)
    tex = np.clip(tex, 0.04, 0.96)
    xs = np.arange(size, dtype=np.float64)

    def shading_profile(x_positions: np.ndarray) -> np.ndarray:
        # soft-edged band centered mid-image in band coordinates
        center = size / 2.0
        half = band_width_px / 2.0
        rise = 1.0 / (1.0 + np.exp(-(x_positions - (center - half)) / edge_px))
        fall = 1.0 / (1.0 + np.exp(-(x_positions - (center + half)) / edge_px))
        band = rise - fall
        return 1.0 - (1.0 - shadow_factor) * band

    if light_positions is None:
        light_positions = list(range(n_lights))
    lo, hi = light_positions[0], light_positions[-1]

    images, entries, masks, shadings = [], [], [], []
    for i, raw in enumerate(light_positions):
        t = (raw - lo) / (hi - lo)
        profile = shading_profile(xs + travel_px * (t - 0.5))
        shading = np.broadcast_to(profile[None, :, None], (size, size, 3)).astype(np.float32)
        frame = (tex * shading).astype(np.float32)
        images.append(frame)
        shadings.append(shading[..., 0].copy())
        masks.append(shading[..., 0] < (1.0 + shadow_factor) / 2.0)
        entries.append(ImageEntry(f"light_{i:03d}.png", [float(raw)]))
    dims = [DimensionSpec("l", "light", float(lo), float(hi))]
    manifest = Manifest("shadow_sweep", dims, entries)
    jac = np.zeros((size, size, 2, 1))     # the texture itself is static
    scene = SyntheticScene(manifest, images, jac, textured_mask(images[0]))
    scene.extras["shadow_masks"] = np.stack(masks)
    scene.extras["true_shading"] = np.stack(shadings).astype(np.float32)
    scene.extras["true_albedo"] = tex.astype(np.float32)
    scene.extras["shading_motion_px"] = np.array([travel_px, 0.0], dtype=np.float32)
    return scene


GENERATORS = {
    "translate1d": synth_translate,
    "lightfield_plane": synth_lightfield_plane,
    "shadow_sweep": synth_shadow_sweep,
}
