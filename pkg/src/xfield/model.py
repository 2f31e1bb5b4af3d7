"""The differentiable coordinate-to-image pipeline.

A small coordinate-conditioned CNN decodes a field coordinate into a
per-pixel Jacobian of pixel motion w.r.t. the field coordinates. Finite
coordinate steps project that Jacobian to dense flow, observed images are
warped along the flow, and the warps are blended with weights from a
forward/backward flow round-trip check (soft occlusion handling). An
optional mode splits every observation into shading times albedo and
interpolates the two factors with independent Jacobian heads before
remultiplying.

Everything here is built from :mod:`xfield.autodiff` ops, so one scalar
loss at the end differentiates through the entire pipeline.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DimensionSpec, Observation, VIEW_KINDS

DELIGHT_EPS = 1e-8


@dataclasses.dataclass
class ConsistencyConfig:
    """Bandwidth of the round-trip weighting, applied to pixel L1 residuals."""

    sigma: float = 10.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


@dataclasses.dataclass
class JacobianMap:
    """Per-pixel 2 x n_d pixel-motion derivatives, possibly at reduced resolution.

    ``values`` holds channels [dx_0, dy_0, dx_1, dy_1, ...] (H_f x W_f x 2n_d):
    column j of the Jacobian is (dx_j, dy_j), in pixels per unit normalized
    coordinate of dimension j.
    """

    values: Tensor
    n_d: int

    @property
    def resolution(self) -> tuple:
        return self.values.data.shape[:2]

    def as_array(self) -> np.ndarray:
        """H x W x 2 x n_d numpy view of the Jacobian."""
        h, w = self.resolution
        return self.values.data.reshape(h, w, self.n_d, 2).transpose(0, 1, 3, 2)


def clamp_coord(coord, n_d: int) -> np.ndarray:
    """Componentwise clamp into [0, 1]^n_d (the observed convex range)."""
    arr = np.asarray(coord, dtype=np.float64).reshape(-1)
    if arr.shape != (n_d,):
        raise ValueError(f"coordinate has length {arr.shape[0]}, expected {n_d}")
    return np.clip(arr, 0.0, 1.0)


def raw_channel_count(dims: list[DimensionSpec]) -> int:
    """Decoder head channels: one shared disparity + 2 per non-view dimension."""
    n_view = sum(1 for d in dims if d.kind in VIEW_KINDS)
    n_other = len(dims) - n_view
    return (1 if n_view else 0) + 2 * n_other


def validate_dims(dims: list[DimensionSpec]) -> None:
    for kind in VIEW_KINDS:
        if sum(1 for d in dims if d.kind == kind) > 1:
            raise ValueError(
                f"more than one {kind} dimension: a single per-pixel disparity "
                "needs a structured camera grid with one axis per view kind")


# ---------------------------------------------------------------------------
# decoder parameters
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class DecoderParams:
    """All trainable state: decoder weights plus optional per-image shading."""

    dims: list[DimensionSpec]
    image_hw: tuple
    flow_hw: tuple
    channel_schedule: list[int]
    jacobian_scale: float
    delight: bool
    tensors: dict[str, Tensor]

    @property
    def n_d(self) -> int:
        return len(self.dims)

    @property
    def dtype(self):
        return self.tensors["fc.w"].data.dtype

    def trainable(self) -> list[tuple[str, Tensor]]:
        return sorted(self.tensors.items())

    def parameter_count(self) -> int:
        return sum(t.data.size for _, t in self.tensors.items())

    def shading_tensor(self, obs_index: int) -> Tensor:
        try:
            return self.tensors[f"raw_e.{obs_index:03d}"]
        except KeyError:
            raise KeyError(f"no shading parameters for observation {obs_index}; "
                           "was the model trained with de-light enabled?") from None


def _stage_plan(flow_hw: tuple) -> tuple[int, list[int]]:
    h, w = flow_hw
    if h != w:
        raise ValueError(f"flow resolution must be square, got {h}x{w}")
    n_stages = int(round(math.log2(h / 2)))
    if h < 2 or 2 * (2 ** n_stages) != h:
        raise ValueError(f"flow resolution {h} is not a power-of-two multiple of 2")
    schedule = [max(16, 128 >> (s + 1)) for s in range(n_stages)]
    return n_stages, schedule


def init_decoder_params(dims: list[DimensionSpec], image_hw: tuple, seed: int,
                        delight: bool = False, flow_factor: int = 1,
                        observation_indices: list[int] | None = None,
                        dtype=np.float32) -> DecoderParams:
    """Seeded parameter initialization.

    The final projection layers start at exactly zero so the initial flow is
    zero everywhere and training departs from pure linear blending. Raw
    decoder outputs are multiplied by ``jacobian_scale`` (half the image
    extent) so unit-scale activations cover plausible pixel motions.
    """
    validate_dims(dims)
    if flow_factor not in (1, 2, 4):
        raise ValueError("flow_factor must be 1, 2 or 4")
    h, w = image_hw
    flow_hw = (h // flow_factor, w // flow_factor)
    n_stages, schedule = _stage_plan(flow_hw)
    n_d = len(dims)
    n_raw = raw_channel_count(dims)
    rng = np.random.default_rng([seed, 1009])

    def he(shape, fan_in):
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(dtype)

    tensors: dict[str, Tensor] = {}
    tensors["fc.w"] = Tensor(he((n_d, 512), n_d), requires_grad=True, name="fc.w")
    tensors["fc.b"] = Tensor(np.zeros(512, dtype=dtype), requires_grad=True, name="fc.b")

    c_in = 128 + n_d + 2      # seed channels + coord-conv (full coord + pixel position)
    for s in range(n_stages):
        c_out = schedule[s]
        tensors[f"stage{s}.k"] = Tensor(he((3, 3, c_in, c_out), 9 * c_in),
                                        requires_grad=True, name=f"stage{s}.k")
        tensors[f"stage{s}.b"] = Tensor(np.zeros(c_out, dtype=dtype),
                                        requires_grad=True, name=f"stage{s}.b")
        c_in = c_out

    heads = ["head.flow"] + (["head.shading"] if delight else [])
    for head in heads:
        tensors[f"{head}.k"] = Tensor(np.zeros((3, 3, c_in, n_raw), dtype=dtype),
                                      requires_grad=True, name=f"{head}.k")
        tensors[f"{head}.b"] = Tensor(np.zeros(n_raw, dtype=dtype),
                                      requires_grad=True, name=f"{head}.b")

    if delight:
        for idx in (observation_indices or []):
            tensors[f"raw_e.{idx:03d}"] = Tensor(np.zeros((h, w, 3), dtype=dtype),
                                                 requires_grad=True, name=f"raw_e.{idx:03d}")

    # gain from unit-scale activations to pixel motion. An eighth of the image
    # covers the plausible per-unit-coordinate motion range while keeping the
    # flow heads' effective step size close to the per-pixel shading
    # parameters' (huge gains let the flow race ahead and explain shading
    # motion before the shading layer can, which breaks de-lighting).
    return DecoderParams(list(dims), (h, w), flow_hw, schedule,
                         jacobian_scale=min(h, w) / 8.0, delight=delight, tensors=tensors)


# ---------------------------------------------------------------------------
# decoding: coordinate -> Jacobian map
# ---------------------------------------------------------------------------

def _coordconv_channels(x: np.ndarray, hw: tuple, dtype) -> np.ndarray:
    h, w = hw
    chans = np.empty((h, w, x.size + 2), dtype=dtype)
    chans[..., :x.size] = x.astype(dtype)
    ys = (np.arange(h, dtype=dtype) + 0.5) / h
    xs = (np.arange(w, dtype=dtype) + 0.5) / w
    chans[..., x.size] = xs[None, :]
    chans[..., x.size + 1] = ys[:, None]
    return chans


def _decode_trunk(params: DecoderParams, x: np.ndarray) -> Tensor:
    dtype = params.dtype
    fc_in = Tensor(x.astype(dtype)[None, :])
    seed = ad.add(ad.matmul(fc_in, params.tensors["fc.w"]), params.tensors["fc.b"])
    feat = ad.reshape(seed, (2, 2, 128))
    feat = ad.concat([feat, Tensor(_coordconv_channels(x, (2, 2), dtype))], axis=-1)
    for s in range(len(params.channel_schedule)):
        feat = ad.upsample2x(feat)
        feat = ad.conv2d(feat, params.tensors[f"stage{s}.k"], params.tensors[f"stage{s}.b"])
        feat = ad.leaky_relu(feat, 0.2)
    return feat


def disparity_to_jacobian(raw: Tensor, dims: list[DimensionSpec]) -> JacobianMap:
    """Assemble the 2 x n_d Jacobian from raw head channels.

    View-kind dimensions share one scalar disparity channel, reprojected as
    purely horizontal / purely vertical pixel motion (structured grid,
    translation parallel to the image plane). Other dimensions consume two
    raw channels directly.
    """
    validate_dims(dims)
    h, w = raw.data.shape[:2]
    if raw.data.shape[2] != raw_channel_count(dims):
        raise ValueError(f"raw channels {raw.data.shape[2]} != expected {raw_channel_count(dims)}")
    zero = Tensor(np.zeros((h, w, 1), dtype=raw.data.dtype))
    has_view = any(d.kind in VIEW_KINDS for d in dims)
    disparity = ad.slice_channels(raw, 0, 1) if has_view else None
    next_raw = 1 if has_view else 0

    columns = []
    for d in dims:
        if d.kind == "view_horizontal":
            columns.extend([disparity, zero])
        elif d.kind == "view_vertical":
            columns.extend([zero, disparity])
        else:
            columns.append(ad.slice_channels(raw, next_raw, next_raw + 2))
            next_raw += 2
    return JacobianMap(ad.concat(columns, axis=-1), len(dims))


def decode_jacobians(params: DecoderParams, x) -> tuple[JacobianMap, JacobianMap | None]:
    """Decode the flow Jacobian (and the shading head's, when de-lighting).

    The scaled head output passes through a half-image-bounded tanh before
    assembly: near zero it is the identity gain, but no predicted motion can
    exceed half the image per unit coordinate. Without the bound, a flow
    that wanders past the edge clamp loses its image gradient entirely and
    optimizer momentum can run it away without limit.
    """
    x = clamp_coord(x, params.n_d)
    trunk = _decode_trunk(params, x)
    limit = min(params.image_hw) / 2.0

    def head(name):
        raw = ad.conv2d(trunk, params.tensors[f"{name}.k"], params.tensors[f"{name}.b"])
        scaled = ad.mul(raw, params.jacobian_scale / limit)
        return disparity_to_jacobian(ad.mul(ad.tanh(scaled), limit), params.dims)

    shading = head("head.shading") if params.delight else None
    return head("head.flow"), shading


def decode_jacobian(params: DecoderParams, x) -> JacobianMap:
    return decode_jacobians(params, x)[0]


# ---------------------------------------------------------------------------
# flow projection and warping
# ---------------------------------------------------------------------------

def pixel_grid(hw: tuple, dtype) -> np.ndarray:
    """H x W x 2 map of each pixel's own (x, y) position."""
    h, w = hw
    grid = np.empty((h, w, 2), dtype=dtype)
    grid[..., 0] = np.arange(w, dtype=dtype)[None, :]
    grid[..., 1] = np.arange(h, dtype=dtype)[:, None]
    return grid


def project_flow(jac: JacobianMap, delta, image_hw: tuple | None = None) -> Tensor:
    """Absolute source positions q[p] = p + delta . J[p] (H x W x 2).

    ``delta`` is the finite normalized-coordinate step x - y. A reduced-
    resolution Jacobian is bilinearly upsampled to the image resolution
    before projection.
    """
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    if delta.shape[0] != jac.n_d:
        raise ValueError(f"delta has length {delta.shape[0]}, Jacobian has n_d={jac.n_d}")
    values = jac.values
    h, w = image_hw if image_hw is not None else jac.resolution
    if (h, w) != jac.resolution:
        values = ad.resize_bilinear(values, (h, w))
    dtype = values.data.dtype
    cols = ad.reshape(values, (h, w, jac.n_d, 2))
    disp = ad.sum_axis(ad.mul(cols, Tensor(delta.astype(dtype)[:, None])), axis=2)
    return ad.add(disp, Tensor(pixel_grid((h, w), dtype)))


def warp(image, flow: Tensor) -> Tensor:
    """Backward-warp: output[p] = image sampled at flow[p], bilinear, edge-clamped."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.data.shape[:2] != flow.data.shape[:2]:
        raise ad.ShapeError(f"warp: image {image.data.shape} vs flow {flow.data.shape}")
    return ad.bilinear_sample(image, flow)


# ---------------------------------------------------------------------------
# consistency weighting
# ---------------------------------------------------------------------------

def roundtrip_residual(forward_flow: Tensor, backward_flow_field: Tensor) -> Tensor:
    """Pixelwise L1 distance |p - back(q)| for one source (H x W x 1).

    The backward flow field is itself a position map; it is bilinearly
    sampled at the forward target positions q.
    """
    h, w = forward_flow.data.shape[:2]
    dtype = forward_flow.data.dtype
    back_at_q = ad.bilinear_sample(backward_flow_field, forward_flow)
    diff = ad.sub(Tensor(pixel_grid((h, w), dtype)), back_at_q)
    return ad.sum_axis(ad.absolute(diff), axis=2, keepdims=True)


def consistency_from_residuals(residuals: list[Tensor], sigma: float = 10.0) -> list[Tensor]:
    """Partition-of-unity weights exp(-sigma * r_i) / sum_j exp(-sigma * r_j).

    The shared minimum residual is subtracted (as a constant) before the
    exponential; the normalized weights are mathematically unchanged but the
    largest weight is exactly 1, so the denominator can never underflow.
    """
    if not residuals:
        raise ValueError("need at least one residual map")
    if len(residuals) == 1:
        return [Tensor(np.ones_like(residuals[0].data))]
    floor = np.minimum.reduce([r.data for r in residuals])
    weights = [ad.exp(ad.mul(ad.sub(r, Tensor(floor)), -sigma)) for r in residuals]
    total = weights[0]
    for wgt in weights[1:]:
        total = ad.add(total, wgt)
    return [ad.div(wgt, total) for wgt in weights]


def consistency_weights(x, source_coords: list[np.ndarray], jacobian_provider,
                        image_hw: tuple, sigma: float = 10.0) -> tuple[list[Tensor], list[Tensor]]:
    """Per-source weight maps plus the forward flows they were computed from.

    ``jacobian_provider(coord)`` returns the JacobianMap at a coordinate; the
    provider is called once for x and once per source.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    jac_x = jacobian_provider(x)
    flows, residuals = [], []
    for y in source_coords:
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        q = project_flow(jac_x, x - y, image_hw)
        back = project_flow(jacobian_provider(y), y - x, image_hw)
        flows.append(q)
        residuals.append(roundtrip_residual(q, back))
    return consistency_from_residuals(residuals, sigma), flows


# ---------------------------------------------------------------------------
# de-lighting and interpolation
# ---------------------------------------------------------------------------

def delight_decompose(observation: Observation, params: DecoderParams) -> tuple[Tensor, Tensor]:
    """Split an observed image into (shading E, albedo A) with E * A == image.

    E is exp of the learned per-pixel parameters (strictly positive); A is
    the observation divided by E + eps, so the product reconstructs the
    observation up to eps-scale error by construction.
    """
    if not params.delight:
        raise ValueError("de-light is disabled for these parameters")
    raw_e = params.shading_tensor(observation.index)
    shading = ad.exp(raw_e)
    albedo = ad.div(Tensor(observation.image.astype(params.dtype)),
                    ad.add(shading, DELIGHT_EPS))
    return shading, albedo


def _blend(images: list[Tensor], weights: list[Tensor], flows: list[Tensor]) -> Tensor:
    out = None
    for img, wgt, q in zip(images, weights, flows):
        term = ad.mul(wgt, warp(img, q))
        out = term if out is None else ad.add(out, term)
    return out


def interpolate(observations: list[Observation], x, params: DecoderParams,
                config: ConsistencyConfig | None = None,
                source_jacobians: dict | None = None) -> Tensor:
    """Consistency-weighted combination of the observations warped to x.

    With de-lighting, shading and albedo are blended separately (each with
    its own Jacobian head and weights) and remultiplied per pixel.
    ``source_jacobians`` can inject precomputed per-source JacobianMaps keyed
    by (observation index, head name), which rendering uses to avoid
    re-decoding static sources.
    """
    if not observations:
        raise ValueError("interpolate needs at least one observation")
    config = config or ConsistencyConfig()
    x = clamp_coord(x, params.n_d)
    hw = observations[0].image.shape[:2]

    jac_x = decode_jacobians(params, x)
    cache: dict = {}

    def jacobians_at(coord) -> tuple:
        if np.array_equal(coord, x):
            return jac_x
        key = tuple(coord)
        if key not in cache:
            obs = next((o for o in observations if np.array_equal(o.coord, coord)), None)
            if obs is None:
                raise KeyError(f"no observation at coordinate {coord}")
            if source_jacobians is not None and obs.index in source_jacobians:
                cache[key] = source_jacobians[obs.index]
            else:
                cache[key] = decode_jacobians(params, coord)
        return cache[key]

    coords = [obs.coord for obs in observations]
    if not params.delight:
        weights, flows = consistency_weights(
            x, coords, lambda c: jacobians_at(c)[0], hw, config.sigma)
        images = [Tensor(obs.image.astype(params.dtype)) for obs in observations]
        return _blend(images, weights, flows)

    shadings, albedos = zip(*(delight_decompose(obs, params) for obs in observations))
    w_a, f_a = consistency_weights(x, coords, lambda c: jacobians_at(c)[0], hw, config.sigma)
    w_e, f_e = consistency_weights(x, coords, lambda c: jacobians_at(c)[1], hw, config.sigma)
    blend_a = _blend(list(albedos), w_a, f_a)
    blend_e = _blend(list(shadings), w_e, f_e)
    return ad.mul(blend_a, blend_e)
