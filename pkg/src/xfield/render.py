"""Rendering a trained model at arbitrary coordinates.

A :class:`ModelRuntime` bundles parameters with the observations the model
was trained on and pre-decodes each observation's Jacobians once (they are
fixed after training), so a frame render costs one decoder pass plus warps.
The runtime never mutates its state after construction: renders are pure
and safe to run concurrently.
"""

from __future__ import annotations

import os

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Observation, load_image
from .model import (ConsistencyConfig, DecoderParams, JacobianMap, clamp_coord,
                    decode_jacobians, interpolate)
from .modelio import import_model
from .training import neighbor_select


class ModelRuntime:
    def __init__(self, params: DecoderParams, header: dict,
                 observations: list[Observation] | None = None):
        self.params = params
        self.header = header
        dataset = header.get("dataset", {})
        if observations is None:
            image_dir = dataset["image_dir"]
            observations = []
            for index in dataset["train_indices"]:
                entry = dataset["images"][index]
                coord = np.array([d.normalize(c) for d, c in zip(params.dims, entry["coord"])])
                observations.append(Observation(coord, load_image(os.path.join(image_dir, entry["path"])), index))
        self.observations = observations
        training = header.get("training", {})
        self.k = training.get("k")
        self.sigma = float(training.get("sigma", 10.0))
        self.config = ConsistencyConfig(self.sigma)
        # observations never change after training: decode their Jacobians once
        self.source_jacobians = {}
        for obs in self.observations:
            flow, shading = decode_jacobians(params, obs.coord)
            self.source_jacobians[obs.index] = (
                _freeze(flow), _freeze(shading) if shading is not None else None)

    @classmethod
    def load(cls, path) -> "ModelRuntime":
        params, header = import_model(path)
        return cls(params, header)

    @property
    def n_d(self) -> int:
        return self.params.n_d

    @property
    def resolution(self) -> tuple:
        return self.params.image_hw

    def meta(self) -> dict:
        return {
            "name": self.header.get("dataset", {}).get("name", "model"),
            "dims": [d.to_json() for d in self.params.dims],
            "resolution": list(self.params.image_hw),
        }

    def _effective_k(self) -> int:
        n = len(self.observations)
        if self.k:
            return min(int(self.k), n)
        return n if n <= 9 else 4

    def render_frame(self, coord, width: int | None = None, height: int | None = None) -> np.ndarray:
        """Float RGB image at the (clamped) coordinate; resized on request."""
        coord = clamp_coord(coord, self.n_d)
        pool = [obs.coord for obs in self.observations]
        picked = neighbor_select(coord, pool, self._effective_k())
        if not picked:   # rendering exactly at the single observed coordinate
            picked = list(range(len(self.observations)))
        sources = [self.observations[i] for i in picked]
        out = interpolate(sources, coord, self.params, self.config,
                          source_jacobians=self.source_jacobians).data
        h, w = self.params.image_hw
        th, tw = height or h, width or w
        if (th, tw) != (h, w):
            out = ad.resize_bilinear(Tensor(out), (th, tw)).data
        return np.clip(out, 0.0, 1.0)

    def render_effect(self, coord, axis: int, radius: float, n_samples: int,
                      width: int | None = None, height: int | None = None) -> np.ndarray:
        """Pixelwise mean of renders spanning +-radius along one axis.

        Time-axis spans integrate motion blur; view axes approximate
        depth-of-field. Sampled coordinates are clamped like any render.
        """
        if not 0 <= axis < self.n_d:
            raise ValueError(f"axis {axis} out of range for {self.n_d} dimensions")
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        coord = clamp_coord(coord, self.n_d)
        center = coord[axis]
        values = [center] if n_samples == 1 else np.linspace(center - radius, center + radius, n_samples)
        total = None
        for value in values:
            c = coord.copy()
            c[axis] = value
            frame = self.render_frame(c, width=width, height=height).astype(np.float64)
            total = frame if total is None else total + frame
        return (total / len(values)).astype(np.float32)


def _freeze(jac):
    return JacobianMap(Tensor(jac.values.data.copy()), jac.n_d)
