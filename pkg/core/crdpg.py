"""
Cooperative Recurrent Deterministic Policy Gradients
Episode collection with rotational Ornstein-Uhlenbeck noise, step-loss shaping,
target computation with live-state propagation, the generator / critic / actor
updates and the training loop that ties them together.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from config import EnvConfig, RunConfig, TrainConfig
from core.exceptions import ContractError, UsageError
from core.evaluation import evaluate
from core.networks import (
    NetworkBundle, RecurrentState, actor_step, actor_unroll, critic_step, critic_unroll,
    generator_forward, init_networks, soft_update
)
from core.numcore import AdamState, Tape, Tensor, adam_step, backward, concat, generator_loss, sgd_step
from core.replay import ReplayBatch, ReplayBuffer
from core.scan_env import augment_dihedral, episode_reset, episode_step, history_from_state, rasterize_positions, \
    UNIT_TOLERANCE
from models.scan import ProcessedImage, ScanHistory, SplitDataset
from models.training import IterationRecord, NoiseState, RunningStats

logger = logging.getLogger(__name__)

CLIP_SIGMAS = 3.0

# estimate of the discounted future loss after each non-terminal step, [N, T - 1]
BootstrapFn = Callable[[ReplayBatch, np.ndarray], np.ndarray]
CheckpointHook = Callable[["TrainingState", List[IterationRecord]], None]


# exploration noise

def noise_scale(m: int, total: int, cfg: TrainConfig) -> float:
    if not cfg.noise_decay or total <= 0:
        return 1.0
    return max(0.0, 1.0 - m / total)


def ou_noise_step(state: NoiseState, rng: np.random.Generator, m: int, total: int,
                  cfg: TrainConfig) -> Tuple[float, NoiseState]:
    """
    eps = eps_prev + theta * (mean - eps_prev) + sigma * W. The returned angle is
    scaled by the linear decay; the state keeps the undecayed value.
    """
    w = rng.standard_normal()
    eps = state.eps_prev + cfg.ou_theta * (cfg.ou_mean - state.eps_prev) + cfg.ou_sigma * w
    return eps * noise_scale(m, total, cfg), NoiseState(eps_prev=eps, iteration=m)


def rotate_action(direction: np.ndarray, eps) -> np.ndarray:
    direction = np.asarray(direction, dtype=np.float64)
    norms = np.linalg.norm(direction, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
        raise ContractError(f"rotate_action needs unit directions, got norm(s) {norms}")
    cos, sin = np.cos(eps), np.sin(eps)
    x, y = direction[..., 0], direction[..., 1]
    return np.stack([cos * x - sin * y, sin * x + cos * y], axis=-1)


def collect_episode(bundle: NetworkBundle, env: EnvConfig, image: ProcessedImage, rng: np.random.Generator,
                    m: int, total: int, cfg: TrainConfig, explore: bool = True) -> ScanHistory:
    """One T-step rollout of the live actor; every action, a_0 included, is rotated by OU noise"""
    state = episode_reset(env, image)
    recurrent = bundle.actor.initial_state(1)
    prev_action = np.zeros((1, 2), dtype=np.float32)
    observation = np.zeros((1, env.samples_per_segment), dtype=np.float32)
    noise = NoiseState(eps_prev=cfg.ou_start, iteration=m)
    for _ in range(env.segments):
        mu, recurrent = actor_step(bundle.actor, recurrent, prev_action, observation)
        direction = mu.data[0].astype(np.float64)
        if explore:
            eps, noise = ou_noise_step(noise, rng, m, total, cfg)
            direction = rotate_action(direction, eps)
        state, segment, _ = episode_step(state, direction)
        prev_action = np.asarray(state.actions[-1], dtype=np.float32)[None]
        observation = segment[None]
    return history_from_state(state)


# losses and targets

def compute_step_losses(gen_loss, over_edge: np.ndarray, stats: RunningStats, cfg: TrainConfig,
                        over_edge_penalty: float = 0.1) -> np.ndarray:
    """
    L_k = E * flag_k for every step, plus clip(L_G) / L_avg at the last step. Accepts one
    episode (scalar loss, [T] flags) or a batch ([N] losses, [N, T] flags).
    """
    if not stats.initialized:
        raise UsageError("running loss statistics are not initialized")
    flags = np.asarray(over_edge, dtype=np.float64)
    gen_loss = np.asarray(gen_loss, dtype=np.float64)
    losses = over_edge_penalty * flags
    terminal = gen_loss
    if cfg.clip_enabled:
        terminal = np.minimum(terminal, stats.l_avg + CLIP_SIGMAS * stats.std)
    if cfg.normalize_losses:
        terminal = terminal / stats.l_avg
    losses[..., -1] += terminal
    return losses


def discounted_tail(step_losses: np.ndarray, gamma: float) -> np.ndarray:
    tail = np.zeros_like(step_losses, dtype=np.float64)
    running = np.zeros(step_losses.shape[:-1])
    for k in range(step_losses.shape[-1] - 1, -1, -1):
        running = step_losses[..., k] + gamma * running
        tail[..., k] = running
    return tail


def supervised_targets(step_losses: np.ndarray, gamma: float) -> np.ndarray:
    """y_k = sum over k' >= k of gamma^(k'-k) L_k'"""
    return discounted_tail(np.asarray(step_losses, dtype=np.float64), gamma)


def supervised_weight(m: int, cfg: TrainConfig) -> float:
    if cfg.supervised_mode == "always":
        return 1.0
    if cfg.supervised_mode == "decayed":
        return max(0.0, 1.0 - m / cfg.supervised_decay_iterations)
    return 0.0


def target_bootstrap(bundle: NetworkBundle, batch: ReplayBatch) -> np.ndarray:
    """
    Q' after each non-terminal step k. The target networks start from the live
    networks' recurrent states after step k and read (o_{k+1}, a_k).
    """
    n, steps = batch.size, batch.steps
    if steps < 2:
        return np.zeros((n, 0))
    obs_in, prev = batch.network_observations(), batch.previous_actions()
    _, actor_states = actor_unroll(bundle.actor, obs_in, prev)
    _, critic_states = critic_unroll(bundle.critic, obs_in, prev, batch.actions)

    # steps 0..T-2 stacked along the batch axis, step-major
    actor_joined = RecurrentState.join(actor_states[:-1])
    critic_joined = RecurrentState.join(critic_states[:-1])
    next_obs = batch.observations[:, :-1].transpose(1, 0, 2).reshape(-1, batch.observations.shape[-1])
    taken = batch.actions[:, :-1].transpose(1, 0, 2).reshape(-1, 2)
    next_action, _ = actor_step(bundle.target_actor, actor_joined, taken, next_obs)
    q_next, _ = critic_step(bundle.target_critic, critic_joined, taken, next_obs, next_action)
    return q_next.data.astype(np.float64).reshape(steps - 1, n).T


def compute_targets(bundle: Optional[NetworkBundle], batch: ReplayBatch, step_losses: np.ndarray, cfg: TrainConfig,
                    bootstrap: Optional[BootstrapFn] = None) -> np.ndarray:
    """y_k = L_k + gamma * Q'(...) for k < T - 1; the terminal target is the bare step loss"""
    step_losses = np.asarray(step_losses, dtype=np.float64)
    targets = step_losses.copy()
    if batch.steps < 2 or cfg.gamma == 0.0:
        return targets
    q_next = bootstrap(batch, step_losses) if bootstrap is not None else target_bootstrap(bundle, batch)
    targets[:, :-1] += cfg.gamma * np.asarray(q_next, dtype=np.float64)
    return targets


# updates

def _finite_or_skip(value: float, what: str) -> bool:
    if math.isfinite(value):
        return True
    logger.warning("Skipping %s update: non-finite loss %r", what, value)
    return False


def critic_update(bundle: NetworkBundle, batch: ReplayBatch, targets: np.ndarray, optimizer: AdamState) -> float:
    """One ADAM step on the critic minimizing (1 / 2NT) * sum (y - Q)^2 with full-episode BPTT"""
    critic = bundle.critic
    obs_in, prev = batch.network_observations(), batch.previous_actions()
    with Tape() as tape:
        values, _ = critic_unroll(critic, obs_in, prev, batch.actions)
        q = concat([v.reshape(batch.size, 1) for v in values], axis=1)
        diff = q - Tensor(targets, dtype=q.dtype)
        loss = (diff * diff).sum() * (1.0 / (2 * batch.size * batch.steps))
    value = loss.item()
    if not _finite_or_skip(value, "critic"):
        return value
    grads = backward(loss, tape)
    adam_step(critic.params, grads.for_params(critic.params), optimizer)
    return value


def actor_update(bundle: NetworkBundle, batch: ReplayBatch, optimizer: AdamState, cfg: TrainConfig) -> float:
    """
    One ADAM descent step on the actor for the mean predicted loss of its live actions.
    Critic recurrent states come from the replayed history; only actor parameters move.
    """
    actor, critic = bundle.actor, bundle.critic
    n, steps = batch.size, batch.steps
    obs_in, prev = batch.network_observations(), batch.previous_actions()

    _, replayed = critic_unroll(critic, obs_in, prev, batch.actions)
    entering = [critic.initial_state(n)] + replayed[:-1]
    critic_states = RecurrentState.join([s.detach() for s in entering])
    flat_obs = obs_in.transpose(1, 0, 2).reshape(n * steps, -1)
    flat_prev = prev.transpose(1, 0, 2).reshape(n * steps, 2)

    with Tape() as tape:
        actions, _ = actor_unroll(actor, obs_in, prev)
        live = concat(actions, axis=0)
        if cfg.actor_gradient == "replayed":
            taken = batch.actions.transpose(1, 0, 2).reshape(n * steps, 2)
            live = live + Tensor(taken - live.data, dtype=live.dtype)
        q, _ = critic_step(critic, critic_states, flat_prev, flat_obs, live)
        objective = q.mean()
    value = objective.item()
    if not _finite_or_skip(value, "actor"):
        return value
    grads = backward(objective, tape)
    adam_step(actor.params, grads.for_params(actor.params), optimizer)
    return value


def augmented_batch(batch: ReplayBatch, images: Sequence[ProcessedImage],
                    rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Rasterize each sampled episode and apply a random dihedral transform; [N, 2, h, w] and [N, h, w]"""
    scans, targets = [], []
    for positions, index in zip(batch.probe_positions, batch.image_indices):
        image = images[int(index)]
        scan = rasterize_positions(positions, image)
        scan, target = augment_dihedral(scan, image.target_blur, int(rng.integers(0, 8)))
        scans.append(scan.as_channels())
        targets.append(target)
    return np.stack(scans), np.stack(targets).astype(np.float32)


def generator_update(bundle: NetworkBundle, scans: np.ndarray, targets: np.ndarray, optimizer: AdamState,
                     cfg: TrainConfig, lr: float) -> np.ndarray:
    """One optimizer step on the generator (ADAM, or SGD for comparison sweeps); returns the per-episode losses L_G"""
    generator = bundle.generator
    with Tape() as tape:
        pred = generator_forward(generator, scans, mode="train")
        per_image = generator_loss(pred, targets, cfg.loss_variant, sobel_weight=cfg.sobel_weight,
                                   region=cfg.region_size, reduction="none")
        loss = per_image.mean()
    losses = per_image.data.astype(np.float64)
    if not _finite_or_skip(loss.item(), "generator"):
        return losses
    grads = backward(loss, tape)
    step = sgd_step if cfg.gen_optimizer == "sgd" else adam_step
    step(generator.params, grads.for_params(generator.params), optimizer, lr=lr)
    return losses


def update_running_stats(stats: RunningStats, losses: Sequence[float], cfg: TrainConfig) -> RunningStats:
    """The first call sets both averages to the batch means; later calls are EMA updates at beta_loss"""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise UsageError("running statistics need at least one loss")
    mean, mean_sq = float(losses.mean()), float((losses * losses).mean())
    if stats.initialized:
        beta = cfg.beta_loss
        mean = beta * stats.l_avg + (1.0 - beta) * mean
        mean_sq = beta * stats.l_sq_avg + (1.0 - beta) * mean_sq
    return RunningStats(l_avg=float(np.float32(mean)), l_sq_avg=float(np.float32(mean_sq)), initialized=True)


def lr_sweep(m: int, cfg: TrainConfig) -> float:
    """Exponential ramp from 10^start at the first iteration to 10^stop at the last"""
    fraction = m / max(cfg.iterations - 1, 1)
    return 10.0 ** (cfg.lr_sweep_start + (cfg.lr_sweep_stop - cfg.lr_sweep_start) * fraction)


def lr_schedule(m: int, cfg: TrainConfig) -> float:
    """Exponentially decayed sawtooth: lr * base^(exponent * m / M) * saw(m), period fraction * M"""
    if cfg.lr_sweep:
        return lr_sweep(m, cfg)
    total = cfg.iterations
    if total <= 0:
        return cfg.lr_generator
    envelope = cfg.lr_decay_base ** (cfg.lr_decay_exponent * m / total)
    phase = math.modf(m / (cfg.lr_period_fraction * total))[0]
    if cfg.lr_sawtooth == "down":
        saw = 1.0 - (1.0 - cfg.lr_floor) * phase
    else:
        saw = cfg.lr_floor + (1.0 - cfg.lr_floor) * phase
    return cfg.lr_generator * envelope * saw


# training loop

@dataclass
class Optimizers:
    actor: AdamState
    critic: AdamState
    generator: AdamState

    @classmethod
    def create(cls, cfg: TrainConfig) -> "Optimizers":
        return cls(
            actor=AdamState(lr=cfg.lr_actor),
            critic=AdamState(lr=cfg.lr_critic),
            generator=AdamState(lr=cfg.lr_generator, weight_decay=cfg.gen_weight_decay),
        )

    def named(self) -> List[Tuple[str, AdamState]]:
        return [("actor", self.actor), ("critic", self.critic), ("generator", self.generator)]


@dataclass
class TrainingState:
    bundle: NetworkBundle
    optimizers: Optimizers
    replay: ReplayBuffer
    rng: np.random.Generator
    stats: RunningStats = field(default_factory=RunningStats)
    iteration: int = 0


class CRDPGTrainer:
    """Runs iterations m = iteration..M-1; one episode is collected per iteration"""

    def __init__(self, config: RunConfig, split: SplitDataset, state: Optional[TrainingState] = None,
                 checkpoint_hook: Optional[CheckpointHook] = None,
                 bootstrap: Optional[BootstrapFn] = None):
        self.config = config
        self.env = config.env
        self.cfg = config.train
        self.split = split
        self.state = state or self.initial_state(config)
        self.checkpoint_hook = checkpoint_hook
        self.bootstrap = bootstrap
        self.records: List[IterationRecord] = []

    @staticmethod
    def initial_state(config: RunConfig) -> TrainingState:
        rng = np.random.default_rng(config.train.seed)
        bundle = init_networks(config.train, config.env, rng)
        return TrainingState(
            bundle=bundle,
            optimizers=Optimizers.create(config.train),
            replay=ReplayBuffer(config.train.replay_capacity, config.env.segments),
            rng=rng,
        )

    def run(self) -> List[IterationRecord]:
        total = self.cfg.iterations
        if self.state.iteration >= total:
            logger.info("Nothing to do: %d of %d iterations already complete", self.state.iteration, total)
            return self.records
        logger.info("Training iterations %d..%d", self.state.iteration + 1, total)
        while self.state.iteration < total:
            record = self.train_iteration(self.state.iteration)
            self.state.iteration += 1
            if self.state.iteration % self.cfg.eval_interval() == 0:
                self._evaluate(record)
            self.records.append(record)
            if self.state.iteration % self.cfg.checkpoint_interval() == 0 or self.state.iteration == total:
                self._checkpoint()
        return self.records

    def train_iteration(self, m: int) -> IterationRecord:
        state, cfg = self.state, self.cfg
        rng, bundle = state.rng, state.bundle
        images = self.split.train_processed
        total = cfg.iterations

        image_index = int(rng.integers(0, len(images)))
        history = collect_episode(bundle, self.env, images[image_index], rng, m, total, cfg)
        state.replay.push(history, image_index)

        lr = lr_schedule(m, cfg)
        record = IterationRecord(iteration=m + 1, lr_gen=lr, noise_scale=noise_scale(m, total, cfg))
        batch = state.replay.sample_batch(cfg.batch_size, rng)
        if batch is None:
            logger.debug("Iteration %d: replay holds %d < %d episodes, updates skipped",
                         m + 1, len(state.replay), cfg.batch_size)
            return record

        scans, targets = augmented_batch(batch, images, rng)
        gen_losses = generator_update(bundle, scans, targets, state.optimizers.generator, cfg, lr)

        first_batch = not state.stats.initialized
        if first_batch:
            state.stats = update_running_stats(state.stats, gen_losses, cfg)
            logger.info("Iteration %d: loss statistics initialized at L_avg=%.6f", m + 1, state.stats.l_avg)

        step_losses = compute_step_losses(gen_losses, batch.over_edge, state.stats, cfg, self.env.over_edge_penalty)
        weight = supervised_weight(m, cfg)
        if weight >= 1.0:
            targets_y = supervised_targets(step_losses, cfg.gamma)
        else:
            targets_y = compute_targets(bundle, batch, step_losses, cfg, self.bootstrap)
            if weight > 0.0:
                targets_y = weight * supervised_targets(step_losses, cfg.gamma) + (1.0 - weight) * targets_y

        critic_loss = critic_update(bundle, batch, targets_y, state.optimizers.critic)
        actor_obj = actor_update(bundle, batch, state.optimizers.actor, cfg)

        soft_update(bundle.actor, bundle.target_actor, cfg.beta_actor)
        soft_update(bundle.critic, bundle.target_critic, cfg.beta_critic)
        if not first_batch:
            state.stats = update_running_stats(state.stats, gen_losses, cfg)

        record.gen_loss = float(gen_losses.mean())
        record.critic_loss = critic_loss
        record.actor_obj = actor_obj
        record.l_avg = state.stats.l_avg
        return record

    def _evaluate(self, record: IterationRecord) -> None:
        bundle = self.state.bundle
        report = evaluate(bundle.generator, bundle.actor, self.env, self.split.test_processed,
                          mode="adaptive", limit=self.cfg.eval_limit)
        record.test_mse_mean = report.mean
        record.test_mse_std = report.std

    def _checkpoint(self) -> None:
        if self.checkpoint_hook is None:
            return
        self.checkpoint_hook(self.state, self.records)
        logger.info("Checkpoint written at iteration %d", self.state.iteration)


def get_trainer(config: RunConfig, split: SplitDataset, state: Optional[TrainingState] = None,
                checkpoint_hook: Optional[CheckpointHook] = None) -> CRDPGTrainer:
    return CRDPGTrainer(config, split, state=state, checkpoint_hook=checkpoint_hook)


def train(config: RunConfig, split: SplitDataset,
          checkpoint_hook: Optional[CheckpointHook] = None) -> Tuple[NetworkBundle, List[IterationRecord]]:
    trainer = get_trainer(config, split, checkpoint_hook=checkpoint_hook)
    records = trainer.run()
    return trainer.state.bundle, records
