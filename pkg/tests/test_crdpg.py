import copy
import math

import numpy as np
import pytest

from config import RunConfig, TrainConfig
from core.crdpg import (
    CRDPGTrainer, Optimizers, actor_update, augmented_batch, collect_episode, compute_step_losses,
    compute_targets, critic_update, discounted_tail, generator_update, lr_schedule, noise_scale,
    ou_noise_step, rotate_action, supervised_targets, supervised_weight, target_bootstrap, train,
    update_running_stats
)
from core.exceptions import ContractError, UsageError
from core.networks import actor_step, actor_unroll, critic_step, critic_unroll, generator_forward, init_networks
from core.numcore import AdamState, mse_loss
from core.replay import ReplayBatch, ReplayBuffer
from core.scan_env import split_dataset, preprocess_dataset, synth_dataset
from models.scan import SplitDataset
from models.training import NoiseState, RunningStats


class ZeroNormal:
    def standard_normal(self):
        return 0.0


def bare_batch(steps, size=1):
    return ReplayBatch(
        image_indices=np.zeros(size, np.int64),
        actions=np.zeros((size, steps, 2), np.float32),
        observations=np.zeros((size, steps, 5), np.float32),
        over_edge=np.zeros((size, steps), bool),
        probe_positions=np.zeros((size, steps, 5, 2)),
    )


def tail_oracle(gamma):
    """Stub Q' that returns the exact discounted loss after each non-terminal step"""
    def bootstrap(batch, step_losses):
        return discounted_tail(step_losses, gamma)[:, 1:]
    return bootstrap


def params_of(net):
    return {name: t.data.copy() for name, t in net.params.items()}


def assert_unchanged(before, net):
    for name, value in before.items():
        np.testing.assert_array_equal(net.params[name].data, value)


@pytest.fixture
def tiny_split():
    train_ds, test_ds = split_dataset(synth_dataset(12, 16, 16, seed=2), 0.75)
    return SplitDataset(train=train_ds, test=test_ds,
                        train_processed=preprocess_dataset(train_ds), test_processed=preprocess_dataset(test_ds))


@pytest.fixture
def bundle(tiny_train, tiny_env):
    return init_networks(tiny_train, tiny_env, 7)


@pytest.fixture
def batch(bundle, tiny_env, tiny_train, tiny_images):
    rng = np.random.default_rng(3)
    replay = ReplayBuffer(8, tiny_env.segments)
    for i in range(3):
        history = collect_episode(bundle, tiny_env, tiny_images[i], rng, 0, tiny_train.iterations, tiny_train)
        replay.push(history, i)
    return ReplayBatch.from_entries(replay.entries())


class TestNoise:

    def test_ou_step_arithmetic(self):
        cfg = TrainConfig(iterations=100)
        eps, state = ou_noise_step(NoiseState(eps_prev=0.5), ZeroNormal(), 0, 100, cfg)
        assert eps == pytest.approx(0.45)
        assert state.eps_prev == pytest.approx(0.45)

    def test_full_decay(self):
        cfg = TrainConfig(iterations=100)
        eps, state = ou_noise_step(NoiseState(eps_prev=0.5), np.random.default_rng(0), 100, 100, cfg)
        assert eps == 0.0
        assert state.eps_prev != 0.0

    def test_decay_can_be_disabled(self):
        cfg = TrainConfig(iterations=100, noise_decay=False)
        assert noise_scale(100, 100, cfg) == 1.0
        assert noise_scale(50, 100, TrainConfig(iterations=100)) == pytest.approx(0.5)

    def test_stationary_std(self):
        cfg = TrainConfig(noise_decay=False)
        rng = np.random.default_rng(0)
        state = NoiseState()
        samples = np.empty(100_000)
        for i in range(samples.size):
            samples[i], state = ou_noise_step(state, rng, i, samples.size, cfg)
        expected = 0.2 / math.sqrt(1 - 0.9 ** 2)
        assert samples[1000:].std() == pytest.approx(expected, rel=0.05)

    def test_rotation(self):
        np.testing.assert_allclose(rotate_action(np.array([0.6, 0.8]), 0.0), [0.6, 0.8])
        np.testing.assert_allclose(rotate_action(np.array([1.0, 0.0]), math.pi / 2), [0.0, 1.0], atol=1e-12)

    def test_rotation_is_isometric(self, rng):
        angle = rng.uniform(0, 2 * math.pi, 100)
        directions = np.stack([np.cos(angle), np.sin(angle)], axis=1)
        rotated = rotate_action(directions, rng.normal(size=100))
        np.testing.assert_allclose(np.linalg.norm(rotated, axis=1), 1.0, atol=1e-6)

    def test_rotation_needs_unit(self):
        with pytest.raises(ContractError):
            rotate_action(np.array([2.0, 0.0]), 0.1)


class TestCollectEpisode:

    def test_history_contract(self, bundle, tiny_env, tiny_train, tiny_images, rng):
        history = collect_episode(bundle, tiny_env, tiny_images[0], rng, 0, tiny_train.iterations, tiny_train)
        assert history.length == tiny_env.segments
        assert history.observations.shape == (tiny_env.segments, tiny_env.samples_per_segment)
        np.testing.assert_allclose(np.linalg.norm(history.actions, axis=1), 1.0, atol=1e-6)

    def test_deterministic(self, bundle, tiny_env, tiny_train, tiny_images):
        runs = [
            collect_episode(bundle, tiny_env, tiny_images[1], np.random.default_rng(9), 3, 20, tiny_train)
            for _ in range(2)
        ]
        np.testing.assert_array_equal(runs[0].actions, runs[1].actions)
        np.testing.assert_array_equal(runs[0].observations, runs[1].observations)

    def test_zero_noise_is_policy_rollout(self, bundle, tiny_env, tiny_train, tiny_images):
        decayed = collect_episode(bundle, tiny_env, tiny_images[2], np.random.default_rng(1), 20, 20, tiny_train)
        greedy = collect_episode(bundle, tiny_env, tiny_images[2], np.random.default_rng(1), 20, 20, tiny_train,
                                 explore=False)
        np.testing.assert_array_equal(decayed.actions, greedy.actions)


class TestStepLosses:

    def test_self_normalized_terminal(self, tiny_train):
        stats = RunningStats(l_avg=2.0, l_sq_avg=4.0, initialized=True)
        losses = compute_step_losses(2.0, np.zeros(4, bool), stats, tiny_train)
        np.testing.assert_allclose(losses, [0.0, 0.0, 0.0, 1.0])

    def test_over_edge_penalty(self, tiny_train):
        stats = RunningStats(l_avg=2.0, l_sq_avg=4.0, initialized=True)
        losses = compute_step_losses(2.0, np.ones(4, bool), stats, tiny_train, over_edge_penalty=0.1)
        np.testing.assert_allclose(losses, [0.1, 0.1, 0.1, 1.1])

    def test_clipping(self):
        stats = RunningStats(l_avg=1.0, l_sq_avg=1.25, initialized=True)
        outlier = 1.0 + 10 * stats.std
        clipped = compute_step_losses(outlier, np.zeros(3, bool), stats, TrainConfig())
        assert clipped[-1] == pytest.approx(2.5)
        raw = compute_step_losses(outlier, np.zeros(3, bool), stats, TrainConfig(clip_enabled=False))
        assert raw[-1] == pytest.approx(6.0)

    def test_normalization_switch(self):
        stats = RunningStats(l_avg=4.0, l_sq_avg=16.0, initialized=True)
        losses = compute_step_losses(2.0, np.zeros(2, bool), stats, TrainConfig(normalize_losses=False))
        np.testing.assert_allclose(losses, [0.0, 2.0])

    def test_batched(self, tiny_train):
        stats = RunningStats(l_avg=1.0, l_sq_avg=1.0, initialized=True)
        flags = np.array([[False, True, False], [False, False, True]])
        losses = compute_step_losses(np.array([0.5, 1.0]), flags, stats, tiny_train)
        np.testing.assert_allclose(losses, [[0.0, 0.1, 0.5], [0.0, 0.0, 1.1]])

    def test_uninitialized(self, tiny_train):
        with pytest.raises(UsageError):
            compute_step_losses(1.0, np.zeros(3, bool), RunningStats(), tiny_train)

    def test_scale_invariance(self, tiny_train):
        ratios = []
        for scale in (1.0, 50.0):
            stats = RunningStats()
            for _ in range(3000):
                stats = update_running_stats(stats, [0.3 * scale], tiny_train)
            ratios.append(compute_step_losses(0.3 * scale, np.zeros(2, bool), stats, tiny_train)[-1])
        assert ratios[0] == pytest.approx(ratios[1], rel=0.01)


class TestTargets:

    def test_supervised_hand_sum(self):
        np.testing.assert_allclose(supervised_targets(np.array([[1.0, 1.0, 1.0]]), 0.5), [[1.75, 1.5, 1.0]])

    def test_supervised_without_discount(self):
        losses = np.array([[0.2, 0.0, 1.3]])
        np.testing.assert_allclose(supervised_targets(losses, 0.0), losses)

    @pytest.mark.parametrize("steps", [3, 5])
    def test_bellman_oracle(self, steps):
        cfg = TrainConfig(gamma=0.8)
        losses = np.random.default_rng(steps).uniform(0, 1, size=(2, steps))
        targets = compute_targets(None, bare_batch(steps, 2), losses, cfg, bootstrap=tail_oracle(cfg.gamma))
        np.testing.assert_allclose(targets, supervised_targets(losses, cfg.gamma))
        np.testing.assert_allclose(targets[:, -1], losses[:, -1])

    def test_zero_discount(self, bundle, batch):
        losses = np.random.default_rng(0).uniform(size=(batch.size, batch.steps))
        np.testing.assert_array_equal(compute_targets(bundle, batch, losses, TrainConfig(gamma=0.0)), losses)

    def test_penalty_reaches_previous_step_only_through_bootstrap(self):
        cfg = TrainConfig(gamma=0.5)
        losses = np.array([[0.0, 0.0, 0.1, 1.0]])
        targets = compute_targets(None, bare_batch(4), losses, cfg, bootstrap=lambda b, l: np.zeros((1, 3)))
        np.testing.assert_allclose(targets, losses)

    def test_live_states_feed_target_networks(self, bundle, batch):
        bootstrap = target_bootstrap(bundle, batch)
        assert bootstrap.shape == (batch.size, batch.steps - 1)
        obs_in, prev = batch.network_observations(), batch.previous_actions()
        for i in range(batch.size):
            _, actor_states = actor_unroll(bundle.actor, obs_in[i:i + 1], prev[i:i + 1])
            _, critic_states = critic_unroll(bundle.critic, obs_in[i:i + 1], prev[i:i + 1], batch.actions[i:i + 1])
            for k in range(batch.steps - 1):
                taken, seen = batch.actions[i, k][None], batch.observations[i, k][None]
                next_action, _ = actor_step(bundle.target_actor, actor_states[k], taken, seen)
                q, _ = critic_step(bundle.target_critic, critic_states[k], taken, seen, next_action)
                assert bootstrap[i, k] == pytest.approx(float(q.data[0]), rel=1e-4, abs=1e-6)

    def test_supervised_weight(self):
        cfg = TrainConfig(supervised_mode="decayed", supervised_decay_iterations=100)
        assert supervised_weight(0, cfg) == 1.0
        assert supervised_weight(50, cfg) == pytest.approx(0.5)
        assert supervised_weight(150, cfg) == 0.0
        assert supervised_weight(0, TrainConfig()) == 0.0
        assert supervised_weight(10 ** 6, TrainConfig(supervised_mode="always")) == 1.0


class TestUpdates:

    def test_critic_loss_recomputation(self, bundle, batch):
        targets = np.random.default_rng(1).uniform(size=(batch.size, batch.steps))
        values, _ = critic_unroll(bundle.critic, batch.network_observations(), batch.previous_actions(), batch.actions)
        q = np.stack([v.data for v in values], axis=1).astype(np.float64)
        expected = ((targets - q) ** 2).sum() / (2 * batch.size * batch.steps)
        reported = critic_update(bundle, batch, targets, AdamState(lr=0.001))
        assert reported == pytest.approx(expected, rel=1e-5)

    def test_critic_at_targets_does_not_move(self, bundle, batch):
        values, _ = critic_unroll(bundle.critic, batch.network_observations(), batch.previous_actions(), batch.actions)
        targets = np.stack([v.data for v in values], axis=1).astype(np.float64)
        before = params_of(bundle.critic)
        assert critic_update(bundle, batch, targets, AdamState(lr=0.001)) == 0.0
        assert_unchanged(before, bundle.critic)

    def test_critic_update_touches_only_critic(self, bundle, batch):
        actor, generator = params_of(bundle.actor), params_of(bundle.generator)
        critic = params_of(bundle.critic)
        critic_update(bundle, batch, np.ones((batch.size, batch.steps)), AdamState(lr=0.001))
        assert_unchanged(actor, bundle.actor)
        assert_unchanged(generator, bundle.generator)
        assert any(np.any(bundle.critic.params[n].data != v) for n, v in critic.items())

    def test_actor_update_touches_only_actor(self, bundle, batch, tiny_train):
        critic, generator = params_of(bundle.critic), params_of(bundle.generator)
        actor = params_of(bundle.actor)
        actor_update(bundle, batch, AdamState(lr=0.001), tiny_train)
        assert_unchanged(critic, bundle.critic)
        assert_unchanged(generator, bundle.generator)
        assert any(np.any(bundle.actor.params[n].data != v) for n, v in actor.items())

    def test_action_blind_critic_gives_no_actor_gradient(self, bundle, batch, tiny_train, tiny_env):
        action_rows = slice(tiny_env.samples_per_segment + 2, tiny_env.samples_per_segment + 4)
        for layer in ("lstm1.weight", "lstm2.weight"):
            bundle.critic.params[layer].data[action_rows] = 0.0
        before = params_of(bundle.actor)
        actor_update(bundle, batch, AdamState(lr=0.001), tiny_train)
        assert_unchanged(before, bundle.actor)

    def test_actor_descends_predicted_loss(self, tiny_train, tiny_env, tiny_images):
        cfg = tiny_train.model_copy(update={"init_std": 0.5})
        bundle = init_networks(cfg, tiny_env, 4)
        replay = ReplayBuffer(4, tiny_env.segments)
        for i in range(2):
            replay.push(collect_episode(bundle, tiny_env, tiny_images[i], np.random.default_rng(i), 0, 20, cfg), i)
        batch = ReplayBatch.from_entries(replay.entries())
        optimizer = AdamState(lr=1e-4)
        first = actor_update(bundle, batch, optimizer, tiny_train)
        second = actor_update(bundle, batch, optimizer, tiny_train)
        assert second < first

    def test_replayed_actions_match_live_without_noise(self, tiny_train, tiny_env, tiny_images):
        bundle = init_networks(tiny_train, tiny_env, 11)
        replay = ReplayBuffer(4, tiny_env.segments)
        for i in range(2):
            replay.push(collect_episode(bundle, tiny_env, tiny_images[i], None, 0, 20, tiny_train, explore=False), i)
        batch = ReplayBatch.from_entries(replay.entries())
        twin = copy.deepcopy(bundle)
        live = actor_update(bundle, batch, AdamState(lr=0.001), tiny_train)
        replayed = actor_update(twin, batch, AdamState(lr=0.001), tiny_train.model_copy(update={"actor_gradient": "replayed"}))
        assert replayed == pytest.approx(live, rel=1e-5)

    def test_generator_losses_recomputed(self, bundle, batch, tiny_images, tiny_train):
        scans, targets = augmented_batch(batch, tiny_images, np.random.default_rng(2))
        assert scans.shape == (batch.size, 2, 16, 16)
        reference = copy.deepcopy(bundle.generator)
        expected = mse_loss(generator_forward(reference, scans, "train"), targets, reduction="none").data
        before = params_of(bundle.generator)
        losses = generator_update(bundle, scans, targets, Optimizers.create(tiny_train).generator, tiny_train, 0.003)
        np.testing.assert_allclose(losses, expected, rtol=1e-6)
        assert any(np.any(bundle.generator.params[n].data != v) for n, v in before.items())

    def test_sgd_generator_update(self, bundle, batch, tiny_images, tiny_train):
        scans, targets = augmented_batch(batch, tiny_images, np.random.default_rng(2))
        cfg = tiny_train.model_copy(update={"gen_optimizer": "sgd"})
        optimizer = Optimizers.create(cfg).generator
        before = params_of(bundle.generator)
        generator_update(bundle, scans, targets, optimizer, cfg, 0.01)
        assert optimizer.step == 1 and optimizer.first_moment == {}
        assert any(np.any(bundle.generator.params[n].data != v) for n, v in before.items())

    def test_augmented_rasters_are_consistent(self, batch, tiny_images):
        scans, targets = augmented_batch(batch, tiny_images, np.random.default_rng(5))
        values, mask = scans[:, 0], scans[:, 1]
        assert np.all(values[mask == 0] == 0.0)
        assert np.all(mask.reshape(batch.size, -1).sum(axis=1) >= 1)
        assert targets.shape == (batch.size, 16, 16)


class TestRunningStats:

    def test_initialized_from_first_batch(self, tiny_train):
        stats = update_running_stats(RunningStats(), [1.0, 3.0], tiny_train)
        assert stats.initialized
        assert stats.l_avg == 2.0
        assert stats.l_sq_avg == 5.0

    def test_ema_arithmetic(self):
        stats = RunningStats(l_avg=1.0, l_sq_avg=1.0, initialized=True)
        assert update_running_stats(stats, [2.0], TrainConfig(beta_loss=0.997)).l_avg == pytest.approx(1.003, rel=1e-6)

    def test_constant_stream(self, tiny_train):
        stats = RunningStats(l_avg=1.0, l_sq_avg=1.0, initialized=True)
        for _ in range(6000):
            stats = update_running_stats(stats, [0.7], tiny_train)
        assert stats.l_avg == pytest.approx(0.7, rel=1e-4)
        assert stats.variance < 1e-4

    def test_empty_batch(self, tiny_train):
        with pytest.raises(UsageError):
            update_running_stats(RunningStats(), [], tiny_train)


class TestLearningRate:

    def test_initial_rate(self):
        assert lr_schedule(0, TrainConfig(iterations=9000)) == pytest.approx(0.003)

    def test_final_envelope(self):
        cfg = TrainConfig(iterations=9000)
        m = cfg.iterations - 1
        period = cfg.lr_period_fraction * cfg.iterations
        saw = 1.0 - 0.8 * ((m / period) % 1.0)
        assert lr_schedule(m, cfg) / (0.003 * saw) == pytest.approx(0.75 ** 5, rel=1e-3)

    def test_sawtooth_edges(self):
        cfg = TrainConfig(iterations=9000)
        envelope = 0.75 ** (5 * 1998 / 9000)
        assert lr_schedule(1998, cfg) / (0.003 * envelope) == pytest.approx(0.2, abs=0.002)
        envelope = 0.75 ** (5 * 2001 / 9000)
        assert lr_schedule(2001, cfg) / (0.003 * envelope) == pytest.approx(1.0, abs=0.002)

    def test_four_periods(self):
        cfg = TrainConfig(iterations=9000)
        rates = np.array([lr_schedule(m, cfg) for m in range(cfg.iterations)])
        assert int((rates[1:] > 2.0 * rates[:-1]).sum()) == 4

    def test_ramp_up_variant(self):
        assert lr_schedule(0, TrainConfig(iterations=9000, lr_sawtooth="up")) == pytest.approx(0.0006)

    def test_sweep_endpoints(self):
        cfg = TrainConfig(iterations=5000, lr_sweep=True)
        assert lr_schedule(0, cfg) == pytest.approx(10 ** -6.5, rel=1e-12)
        assert lr_schedule(cfg.iterations - 1, cfg) == pytest.approx(10 ** 0.5, rel=1e-12)

    def test_sweep_is_geometric(self):
        cfg = TrainConfig(iterations=101, lr_sweep=True, lr_sweep_start=-3.0, lr_sweep_stop=-1.0)
        rates = np.array([lr_schedule(m, cfg) for m in range(cfg.iterations)])
        np.testing.assert_allclose(rates[1:] / rates[:-1], 10 ** 0.02, rtol=1e-12)
        assert lr_schedule(50, cfg) == pytest.approx(0.01)

    def test_sweep_single_iteration(self):
        assert lr_schedule(0, TrainConfig(iterations=1, lr_sweep=True)) == pytest.approx(10 ** -6.5)


class TestTrainingLoop:

    def _config(self, tiny_env, tiny_train, **updates):
        return RunConfig(env=tiny_env, train=tiny_train.model_copy(update=updates))

    def test_zero_iterations(self, tiny_env, tiny_train, tiny_split):
        config = self._config(tiny_env, tiny_train, iterations=0)
        trainer = CRDPGTrainer(config, tiny_split)
        before = {label: params_of(net) for label, net in trainer.state.bundle.named_networks()}
        assert trainer.run() == []
        for label, net in trainer.state.bundle.named_networks():
            assert_unchanged(before[label], net)

    def test_records(self, tiny_env, tiny_train, tiny_split):
        config = self._config(tiny_env, tiny_train, iterations=6, eval_every=3)
        bundle, records = train(config, tiny_split)
        assert [r.iteration for r in records] == [1, 2, 3, 4, 5, 6]
        assert records[0].gen_loss is None
        assert all(r.gen_loss is not None and np.isfinite(r.gen_loss) for r in records[1:])
        assert records[2].test_mse_mean is not None and records[5].test_mse_std is not None
        assert records[3].test_mse_mean is None
        assert records[0].lr_gen == pytest.approx(config.train.lr_generator)

    def test_same_seed_same_log(self, tiny_env, tiny_train, tiny_split):
        config = self._config(tiny_env, tiny_train, iterations=5, eval_every=5)
        runs = [[r.to_row() for r in train(config, tiny_split)[1]] for _ in range(2)]
        assert runs[0] == runs[1]

    def test_checkpoint_hook(self, tiny_env, tiny_train, tiny_split):
        config = self._config(tiny_env, tiny_train, iterations=4, checkpoint_every=2, eval_every=4)
        seen = []
        train(config, tiny_split, checkpoint_hook=lambda state, records: seen.append((state.iteration, len(records))))
        assert seen == [(2, 2), (4, 4)]

    @pytest.mark.parametrize("updates", [
        {"supervised_mode": "always"},
        {"supervised_mode": "decayed", "supervised_decay_iterations": 2},
        {"loss_variant": "region_max"},
        {"loss_variant": "mse+sobel", "actor_gradient": "replayed"},
    ])
    def test_variants_run(self, tiny_env, tiny_train, tiny_split, updates):
        config = self._config(tiny_env, tiny_train, iterations=4, eval_every=4, **updates)
        _, records = train(config, tiny_split)
        assert all(np.isfinite(r.critic_loss) for r in records[1:])

    @pytest.mark.slow
    def test_generator_loss_halves(self, tiny_env, tiny_train):
        train_ds, test_ds = split_dataset(synth_dataset(40, 16, 16, seed=4), 0.9)
        split = SplitDataset(train=train_ds, test=test_ds,
                             train_processed=preprocess_dataset(train_ds), test_processed=preprocess_dataset(test_ds))
        config = self._config(tiny_env, tiny_train, iterations=400, batch_size=4, hidden_size=8, gen_channels=(4, 8),
                              replay_capacity=400, eval_every=400)
        _, records = train(config, split)
        losses = [r.gen_loss for r in records if r.gen_loss is not None]
        assert len(losses) >= 100
        assert np.mean(losses[-50:]) <= 0.5 * np.mean(losses[:50])
        assert np.isfinite(records[-1].test_mse_mean) and np.isfinite(records[-1].test_mse_std)
