"""Per-scene optimization of the decoder parameters.

Each step picks one observed coordinate, reconstructs its image from its
nearest observed neighbors through the full differentiable pipeline, and
applies one Adam update to the L1 reconstruction loss. Epoch order is a
seeded shuffle of the observed set, so a (seed, dataset, config) triple
replays bitwise identically; checkpoints store parameters, optimizer
moments and the step index, and resuming reproduces the uninterrupted run.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DimensionSpec, Observation
from .model import ConsistencyConfig, DecoderParams, init_decoder_params, interpolate


class TrainingDivergedError(RuntimeError):
    """Loss became NaN/Inf; carries the step index for diagnosis."""


@dataclasses.dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 2000
    seed: int = 0
    k: int | None = None          # None: all others when |Y| <= 9, else 4
    delight: bool = False
    flow_factor: int = 1
    sigma: float = 10.0
    delight_smoothness: float = 0.05
    delight_warmup: int = 0       # steps with the albedo flow head frozen at zero
    weight_decay: float = 0.0     # decoupled, decoder weights only (never raw_e)
    checkpoint_interval: int = 0  # 0: no intermediate checkpoints

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")

    def effective_k(self, n_observations: int) -> int:
        if self.k is not None:
            if self.k > n_observations - 1:
                raise ValueError(f"k={self.k} exceeds |observations|-1={n_observations - 1}")
            return self.k
        return n_observations - 1 if n_observations <= 9 else 4

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def neighbor_select(target: np.ndarray, pool: list[np.ndarray], k: int) -> list[int]:
    """Indices of the k pool coordinates nearest to target in L2.

    Pool entries exactly equal to the target are excluded; ties break by
    pool index order. Result size is min(k, pool size after exclusion).
    """
    if not pool:
        raise ValueError("empty coordinate pool")
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    candidates = []
    for i, coord in enumerate(pool):
        coord = np.asarray(coord, dtype=np.float64).reshape(-1)
        if np.array_equal(coord, target):
            continue
        candidates.append((float(np.sum((coord - target) ** 2)), i))
    candidates.sort()
    return [i for _, i in candidates[:k]]


@dataclasses.dataclass
class AdamState:
    """First/second moment estimates per parameter plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: DecoderParams) -> "AdamState":
        return cls(m={n: np.zeros_like(t.data) for n, t in params.trainable()},
                   v={n: np.zeros_like(t.data) for n, t in params.trainable()},
                   t=0)


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, config: TrainConfig, decay: float = 0.0) -> None:
    """One bias-corrected Adam update, in place, t counted from 1.

    ``decay`` applies decoupled weight decay: a drift guard for parameters
    whose loss gradient can vanish (flow heads pointing far off-image).
    """
    if param.shape != grad.shape:
        raise ValueError(f"param shape {param.shape} != grad shape {grad.shape}")
    if t < 1:
        raise ValueError("adam step index starts at 1")
    m *= config.beta1
    m += (1.0 - config.beta1) * grad
    v *= config.beta2
    v += (1.0 - config.beta2) * grad * grad
    m_hat = m / (1.0 - config.beta1 ** t)
    v_hat = v / (1.0 - config.beta2 ** t)
    param -= (config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)).astype(param.dtype)
    if decay:
        param -= (config.learning_rate * decay) * param


def training_step(params: DecoderParams, target: Observation, observations: list[Observation],
                  config: TrainConfig, state: AdamState) -> float:
    """Reconstruct one observation from its neighbors and update parameters."""
    pool = [obs.coord for obs in observations]
    picked = neighbor_select(target.coord, pool, config.effective_k(len(observations)))
    sources = [observations[i] for i in picked]

    for _, tensor in params.trainable():
        tensor.grad = None
    try:
        pred = interpolate(sources, target.coord, params, ConsistencyConfig(config.sigma))
        loss = ad.mean_all(ad.absolute(ad.sub(pred, Tensor(target.image.astype(params.dtype)))))
    except ad.NonFiniteError as e:
        raise TrainingDivergedError(f"non-finite activations at adam step {state.t + 1} "
                                    f"(target observation {target.index}): {e}") from e
    loss_value = loss.item()
    if not np.isfinite(loss_value):
        raise TrainingDivergedError(f"non-finite loss at adam step {state.t + 1} "
                                    f"(target observation {target.index})")

    objective = loss
    if params.delight and config.delight_smoothness > 0:
        # shading layers are smooth by nature; penalizing log-shading
        # gradients rules out solving the reconstruction by memorizing
        # pixel-level detail into the per-image shading parameters
        for obs in sources:
            raw_e = params.shading_tensor(obs.index)
            for axis in (0, 1):
                diff = ad.spatial_diff(raw_e, axis)
                objective = ad.add(objective, ad.mul(ad.mean_all(ad.mul(diff, diff)),
                                                     config.delight_smoothness))
    ad.backward(objective)
    state.t += 1
    # shading-first warm-up: the multiplicative split is ambiguous, so the
    # zero-initialized flow head stays frozen while the shading layer and its
    # motion explain everything they can; texture motion only unlocks after
    freeze_flow = params.delight and state.t <= config.delight_warmup
    for name, tensor in params.trainable():
        if freeze_flow and name.startswith("head.flow."):
            tensor.grad = None
            continue
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        decay = 0.0 if name.startswith("raw_e.") else config.weight_decay
        adam_step(tensor.data, grad, state.m[name], state.v[name], state.t, config, decay)
        tensor.grad = None
    return loss_value


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 4231, epoch]).permutation(n)


def train(observations: list[Observation], dims: list[DimensionSpec], config: TrainConfig,
          params: DecoderParams | None = None, state: AdamState | None = None,
          start_step: int = 0, loss_history: list[float] | None = None,
          on_checkpoint=None) -> tuple[DecoderParams, list[float]]:
    """Optimize decoder parameters over seeded shuffled epochs.

    Only observed coordinates are ever evaluated. Pass ``params``/``state``/
    ``start_step`` (e.g. from a checkpoint) to continue a run; the result is
    bitwise identical to the uninterrupted one. ``on_checkpoint(step, params,
    state, losses)`` fires every ``checkpoint_interval`` steps and at the end.
    """
    if len(observations) < 2:
        raise ValueError("training needs at least 2 observations")
    hw = observations[0].image.shape[:2]
    if params is None:
        params = init_decoder_params(dims, hw, config.seed, delight=config.delight,
                                     flow_factor=config.flow_factor,
                                     observation_indices=[o.index for o in observations])
    if state is None:
        state = AdamState.for_params(params)
    losses = list(loss_history) if loss_history else []

    n = len(observations)
    step = start_step
    while step < config.steps:
        order = _epoch_order(config.seed, step // n, n)
        for pos in range(step % n, n):
            target = observations[order[pos]]
            losses.append(training_step(params, target, observations, config, state))
            step += 1
            at_interval = config.checkpoint_interval and step % config.checkpoint_interval == 0
            if on_checkpoint is not None and (at_interval or step == config.steps):
                on_checkpoint(step, params, state, losses)
            if step >= config.steps:
                break
    return params, losses


def write_loss_log(path, losses: list[float]) -> None:
    """CSV loss log: one `step,loss` row per training step."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for i, value in enumerate(losses, start=1):
            fh.write(f"{i},{value:.9g}\n")
