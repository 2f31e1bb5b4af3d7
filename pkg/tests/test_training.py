"""Trainer contracts: neighbor policy, Adam, determinism, checkpoint resume."""

import math

import numpy as np
import pytest

from xfield import data, training
from xfield.data import DimensionSpec, Observation
from xfield.model import decode_jacobian, init_decoder_params, interpolate
from xfield.training import (AdamState, TrainConfig, TrainingDivergedError, adam_step,
                             neighbor_select, train, training_step)

TIME_DIM = [DimensionSpec("t", "time", 0.0, 1.0)]


def scene_observations(n_frames=3, size=16, shift=4.0, seed=0):
    scene = data.synth_translate(size=size, total_shift_px=shift, n_frames=n_frames, seed=seed)
    return scene, [Observation(scene.manifest.normalized_coord(i), scene.images[i], i)
                   for i in range(n_frames)]


class TestNeighborSelect:
    def test_both_endpoints_for_midpoint(self):
        pool = [np.array([0.0]), np.array([1.0])]
        assert neighbor_select(np.array([0.5]), pool, 2) == [0, 1]

    def test_target_excluded_by_equality(self):
        pool = [np.array([0.0]), np.array([0.5]), np.array([1.0])]
        picked = neighbor_select(np.array([0.5]), pool, 3)
        assert 1 not in picked and len(picked) == 2

    def test_3x3_grid_center_axis_neighbors(self):
        pool = [np.array([i % 3, i // 3]) / 2.0 for i in range(9)]
        picked = neighbor_select(np.array([0.5, 0.5]), pool, 4)
        # axis neighbors of the center in row-major index order: 1, 3, 5, 7
        assert sorted(picked) == [1, 3, 5, 7]

    def test_ties_break_by_pool_index(self):
        pool = [np.array([1.0]), np.array([0.0])]   # equidistant from 0.5
        assert neighbor_select(np.array([0.5]), pool, 1) == [0]

    def test_result_size_capped(self):
        pool = [np.array([0.0]), np.array([1.0])]
        assert len(neighbor_select(np.array([0.25]), pool, 10)) == 2

    def test_empty_pool_rejected(self):
        with pytest.raises(ValueError):
            neighbor_select(np.array([0.5]), [], 1)


def scalar_adam_reference(params, grads_sequence, lr, b1, b2, eps):
    """Independent elementwise Adam in plain python floats."""
    p = list(map(float, params))
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    for t, grads in enumerate(grads_sequence, start=1):
        for i, g in enumerate(map(float, grads)):
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * g * g
            m_hat = m[i] / (1 - b1 ** t)
            v_hat = v[i] / (1 - b2 ** t)
            p[i] -= lr * m_hat / (math.sqrt(v_hat) + eps)
    return np.array(p)


class TestAdam:
    def test_zero_gradient_from_rest_leaves_param_unchanged(self):
        config = TrainConfig(learning_rate=0.1)
        param = np.array([1.0, -2.0])
        m = np.zeros(2)
        v = np.zeros(2)
        adam_step(param, np.zeros(2), m, v, 1, config)
        np.testing.assert_array_equal(param, [1.0, -2.0])

    def test_zero_gradient_decays_existing_moments(self):
        config = TrainConfig(learning_rate=0.1)
        m = np.array([0.5, 0.5])
        v = np.array([0.25, 0.25])
        adam_step(np.array([1.0, -2.0]), np.zeros(2), m, v, 3, config)
        np.testing.assert_allclose(m, 0.45)
        np.testing.assert_allclose(v, 0.25 * 0.999)

    def test_first_step_magnitude_is_lr(self):
        config = TrainConfig(learning_rate=1e-2)
        param = np.array([0.0])
        m = np.zeros(1)
        v = np.zeros(1)
        adam_step(param, np.array([3.7]), m, v, 1, config)
        np.testing.assert_allclose(abs(param[0]), 1e-2, rtol=1e-6)

    def test_sequence_matches_scalar_reference(self):
        rng = np.random.default_rng(0)
        config = TrainConfig(learning_rate=3e-3)
        param = rng.normal(size=5)
        grads = [rng.normal(size=5) for _ in range(40)]
        expected = scalar_adam_reference(param, grads, config.learning_rate,
                                         config.beta1, config.beta2, config.eps)
        m = np.zeros(5)
        v = np.zeros(5)
        for t, g in enumerate(grads, start=1):
            adam_step(param, g, m, v, t, config)
        np.testing.assert_allclose(param, expected, atol=1e-12)

    def test_invalid_step_index(self):
        with pytest.raises(ValueError):
            adam_step(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1), 0, TrainConfig())


class TestTrainingStep:
    def test_step0_loss_equals_linear_blending_error(self):
        scene, obs = scene_observations()
        params = init_decoder_params(TIME_DIM, (16, 16), seed=0)
        state = AdamState.for_params(params)
        config = TrainConfig(steps=1, learning_rate=1e-3)
        loss = training_step(params, obs[1], obs, config, state)
        blend = 0.5 * obs[0].image + 0.5 * obs[2].image
        expected = float(np.mean(np.abs(blend - obs[1].image)))
        assert loss == expected

    def test_zero_gradient_when_loss_zero(self):
        img = np.full((16, 16, 3), 0.5, dtype=np.float32)
        obs = [Observation(np.array([0.0]), img.copy(), 0),
               Observation(np.array([0.5]), img.copy(), 1),
               Observation(np.array([1.0]), img.copy(), 2)]
        params = init_decoder_params(TIME_DIM, (16, 16), seed=0)
        before = {n: t.data.copy() for n, t in params.trainable()}
        state = AdamState.for_params(params)
        loss = training_step(params, obs[1], obs, TrainConfig(learning_rate=1e-2), state)
        assert loss == 0.0
        for name, tensor in params.trainable():
            np.testing.assert_array_equal(tensor.data, before[name])

    def test_nonfinite_loss_aborts(self):
        scene, obs = scene_observations()
        params = init_decoder_params(TIME_DIM, (16, 16), seed=0)
        params.tensors["fc.w"].data[:] = np.inf
        with pytest.raises(TrainingDivergedError):
            training_step(params, obs[1], obs, TrainConfig(), AdamState.for_params(params))


class TestTrain:
    def test_deterministic_replay_bitwise(self):
        scene, obs = scene_observations()
        config = TrainConfig(steps=12, learning_rate=1e-3, seed=3)
        p1, l1 = train(obs, scene.manifest.dims, config)
        p2, l2 = train(obs, scene.manifest.dims, config)
        assert l1 == l2
        for (n1, t1), (n2, t2) in zip(p1.trainable(), p2.trainable()):
            assert n1 == n2
            np.testing.assert_array_equal(t1.data, t2.data)

    def test_epoch_covers_every_observation(self):
        scene, obs = scene_observations()
        seen = []
        config = TrainConfig(steps=6, learning_rate=1e-3, seed=1, checkpoint_interval=1)

        def record(step, params, state, losses):
            seen.append(step)

        train(obs, scene.manifest.dims, config, on_checkpoint=record)
        assert seen == list(range(1, 7))

    def test_too_few_observations(self):
        scene, obs = scene_observations()
        with pytest.raises(ValueError):
            train(obs[:1], scene.manifest.dims, TrainConfig(steps=1))

    def test_k_validated_against_pool(self):
        scene, obs = scene_observations()
        with pytest.raises(ValueError):
            train(obs, scene.manifest.dims, TrainConfig(steps=1, k=5))

    def test_resume_matches_uninterrupted_run(self):
        scene, obs = scene_observations()
        full_config = TrainConfig(steps=10, learning_rate=2e-3, seed=5)
        p_full, l_full = train(obs, scene.manifest.dims, full_config)

        snap = {}
        half_config = TrainConfig(steps=5, learning_rate=2e-3, seed=5)
        p_half, l_half = train(obs, scene.manifest.dims, half_config)
        state_half = None

        # redo the first half capturing the optimizer state via the hook
        captured = {}
        half_config2 = TrainConfig(steps=5, learning_rate=2e-3, seed=5, checkpoint_interval=5)

        def capture(step, params, state, losses):
            if step == 5:
                captured["m"] = {n: a.copy() for n, a in state.m.items()}
                captured["v"] = {n: a.copy() for n, a in state.v.items()}

        p_half, l_half = train(obs, scene.manifest.dims, half_config2, on_checkpoint=capture)
        state = AdamState(m=captured["m"], v=captured["v"], t=5)
        resumed_config = TrainConfig(steps=10, learning_rate=2e-3, seed=5)
        p_res, l_res = train(obs, scene.manifest.dims, resumed_config, params=p_half,
                             state=state, start_step=5, loss_history=l_half)
        assert l_res == l_full
        for (_, t_full), (_, t_res) in zip(p_full.trainable(), p_res.trainable()):
            np.testing.assert_array_equal(t_full.data, t_res.data)

    def test_loss_log_format(self, tmp_path):
        path = tmp_path / "loss.csv"
        training.write_loss_log(path, [0.5, 0.25])
        assert path.read_text() == "step,loss\n1,0.5\n2,0.25\n"
