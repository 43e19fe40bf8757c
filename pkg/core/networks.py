"""
Networks
Actor and critic deep LSTMs, the generator CNN, initialization and target maintenance.
"""
import copy
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import truncnorm

from config import EnvConfig, TrainConfig
from core.exceptions import ConfigError, DimensionError
from core.numcore import (
    BatchNormStats, Tensor, as_tensor, batch_norm, concat, conv2d, conv2d_transpose,
    lstm_cell, matmul, parameter, relu, tanh, unit_normalize
)
from models.scan import PartialScan

logger = logging.getLogger(__name__)

ACTION_SIZE = 2
GENERATOR_KERNEL = 3


def truncated_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float) -> np.ndarray:
    """Normal samples rejected outside two standard deviations"""
    if std == 0:
        return np.zeros(shape, dtype=np.float32)
    return truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng).astype(np.float32)


def xavier_uniform(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_out, fan_in = shape[0] * receptive, shape[1] * receptive
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


@dataclass
class RecurrentState:
    h1: Tensor
    c1: Tensor
    h2: Tensor
    c2: Tensor

    @property
    def batch(self) -> int:
        return self.h1.shape[0]

    def detach(self) -> "RecurrentState":
        return RecurrentState(self.h1.detach(), self.c1.detach(), self.h2.detach(), self.c2.detach())

    @classmethod
    def join(cls, states: Sequence["RecurrentState"]) -> "RecurrentState":
        """Concatenate several batches of states along the batch axis (no gradients)"""
        return cls(*(
            Tensor(np.concatenate([getattr(s, slot).data for s in states]), dtype=states[0].h1.dtype)
            for slot in ("h1", "c1", "h2", "c2")
        ))


class DeepRecurrentNet:
    """
    Two stacked LSTM layers. The second layer sees [input, h1]; the head reads [h1, h2].
    Initial hidden and cell states are trainable vectors.
    """

    def __init__(self, input_size: int, hidden_size: int, output_size: int, rng: np.random.Generator,
                 init_std: float = 0.02):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.output_size = output_size
        hidden = hidden_size

        def lstm_bias() -> np.ndarray:
            bias = np.zeros(4 * hidden, dtype=np.float32)
            bias[hidden:2 * hidden] = 1.0
            return bias

        self.params: Dict[str, Tensor] = {
            "lstm1.weight": parameter(truncated_normal(rng, (input_size + hidden, 4 * hidden), init_std)),
            "lstm1.bias": parameter(lstm_bias()),
            "lstm2.weight": parameter(truncated_normal(rng, (input_size + 2 * hidden, 4 * hidden), init_std)),
            "lstm2.bias": parameter(lstm_bias()),
            "init.h1": parameter(np.zeros(hidden, dtype=np.float32)),
            "init.c1": parameter(np.zeros(hidden, dtype=np.float32)),
            "init.h2": parameter(np.zeros(hidden, dtype=np.float32)),
            "init.c2": parameter(np.zeros(hidden, dtype=np.float32)),
            "head.weight": parameter(truncated_normal(rng, (2 * hidden, output_size), init_std)),
            "head.bias": parameter(np.zeros(output_size, dtype=np.float32)),
        }
        for name, tensor in self.params.items():
            tensor.name = name

    def initial_state(self, batch: int) -> RecurrentState:
        ones = Tensor(np.ones((batch, 1)), dtype=self.params["init.h1"].dtype)
        slots = [self.params[f"init.{slot}"].reshape(1, self.hidden_size) * ones for slot in ("h1", "c1", "h2", "c2")]
        return RecurrentState(*slots)

    def step(self, state: RecurrentState, x: Tensor) -> Tuple[Tensor, RecurrentState]:
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.input_size:
            raise DimensionError(f"recurrent net expects [batch, {self.input_size}] input, got {x.shape}")
        p = self.params
        h1, c1 = lstm_cell(x, state.h1, state.c1, p["lstm1.weight"], p["lstm1.bias"])
        h2, c2 = lstm_cell(concat([x, h1], axis=1), state.h2, state.c2, p["lstm2.weight"], p["lstm2.bias"])
        out = matmul(concat([h1, h2], axis=1), p["head.weight"]) + p["head.bias"]
        return out, RecurrentState(h1, c1, h2, c2)

    def copy(self) -> "DeepRecurrentNet":
        clone = copy.copy(self)
        clone.params = {name: parameter(t.data.copy(), name=name) for name, t in self.params.items()}
        return clone


class GeneratorNet:
    """
    Encoder of stride-2 convolutions, skip-3 residual blocks, mirrored decoder of
    stride-2 transposed convolutions and a linear single-channel head. Every hidden
    convolution is followed by ReLU then batch normalization; residual sums are added
    after the third activation and before its normalization.
    """

    def __init__(self, channels: Sequence[int], res_blocks: int, height: int, width: int,
                 rng: np.random.Generator, in_channels: int = 2):
        self.channels = tuple(channels)
        self.res_blocks = res_blocks
        self.height = height
        self.width = width
        self.in_channels = in_channels
        stride = 2 ** len(self.channels)
        if height % stride or width % stride:
            raise ConfigError(f"generator needs extents divisible by {stride}, got {height}x{width}")

        self.params: Dict[str, Tensor] = {}
        self.bn_stats: Dict[str, BatchNormStats] = {}
        k = GENERATOR_KERNEL

        previous = in_channels
        for i, c in enumerate(self.channels):
            self._add_conv(f"enc{i}", (c, previous, k, k), c, rng)
            previous = c
        for b in range(res_blocks):
            for j in range(3):
                self._add_conv(f"res{b}.conv{j}", (previous, previous, k, k), previous, rng)
        outputs = list(reversed(self.channels[:-1])) + [self.channels[0]]
        for i, c in enumerate(outputs):
            # transposed kernels keep the [input channels, output channels, k, k] layout
            self._add_conv(f"dec{i}", (previous, c, k, k), c, rng)
            previous = c
        self.params["head.weight"] = parameter(xavier_uniform(rng, (1, previous, k, k)), name="head.weight")
        self.params["head.bias"] = parameter(np.zeros(1, dtype=np.float32), name="head.bias")

    def _add_conv(self, name: str, shape: Tuple[int, ...], out_channels: int, rng: np.random.Generator) -> None:
        self.params[f"{name}.weight"] = parameter(xavier_uniform(rng, shape), name=f"{name}.weight")
        self.params[f"{name}.bias"] = parameter(np.zeros(out_channels, dtype=np.float32), name=f"{name}.bias")
        self.params[f"{name}.bn.scale"] = parameter(np.ones(out_channels, dtype=np.float32), name=f"{name}.bn.scale")
        self.params[f"{name}.bn.shift"] = parameter(np.zeros(out_channels, dtype=np.float32), name=f"{name}.bn.shift")
        self.bn_stats[name] = BatchNormStats.create(out_channels)

    def _normalize(self, name: str, x: Tensor, mode: str) -> Tensor:
        p = self.params
        return batch_norm(x, p[f"{name}.bn.scale"], p[f"{name}.bn.shift"], self.bn_stats[name], mode)

    def _conv_block(self, name: str, x: Tensor, mode: str, stride: int = 1, transpose: bool = False,
                    residual: Optional[Tensor] = None) -> Tensor:
        p = self.params
        op = conv2d_transpose if transpose else conv2d
        y = relu(op(x, p[f"{name}.weight"], stride=stride, bias=p[f"{name}.bias"]))
        if residual is not None:
            y = y + residual
        return self._normalize(name, y, mode)

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        """[B, 2, h, w] -> [B, h, w]"""
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.in_channels or x.shape[2:] != (self.height, self.width):
            raise DimensionError(
                f"generator expects [batch, {self.in_channels}, {self.height}, {self.width}], got {x.shape}"
            )
        for i in range(len(self.channels)):
            x = self._conv_block(f"enc{i}", x, mode, stride=2)
        for b in range(self.res_blocks):
            skip = x
            x = self._conv_block(f"res{b}.conv0", x, mode)
            x = self._conv_block(f"res{b}.conv1", x, mode)
            x = self._conv_block(f"res{b}.conv2", x, mode, residual=skip)
        for i in range(len(self.channels)):
            x = self._conv_block(f"dec{i}", x, mode, stride=2, transpose=True)
        out = conv2d(x, self.params["head.weight"], stride=1, bias=self.params["head.bias"])
        return out.reshape(out.shape[0], self.height, self.width)


@dataclass
class NetworkBundle:
    actor: DeepRecurrentNet
    critic: DeepRecurrentNet
    generator: GeneratorNet
    target_actor: DeepRecurrentNet
    target_critic: DeepRecurrentNet

    def named_networks(self) -> List[Tuple[str, object]]:
        return [
            ("actor", self.actor), ("critic", self.critic), ("generator", self.generator),
            ("target_actor", self.target_actor), ("target_critic", self.target_critic),
        ]


def init_networks(train: TrainConfig, env: EnvConfig, rng: Union[np.random.Generator, int]) -> NetworkBundle:
    """Draw actor, critic and generator in that order from one generator; targets are copies"""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    samples = env.samples_per_segment
    actor = DeepRecurrentNet(samples + ACTION_SIZE, train.hidden_size, ACTION_SIZE, rng, train.init_std)
    critic = DeepRecurrentNet(samples + 2 * ACTION_SIZE, train.hidden_size, 1, rng, train.init_std)
    generator = GeneratorNet(train.gen_channels, train.gen_res_blocks, env.height, env.width, rng)
    logger.info(
        "Initialized networks: hidden=%d, generator channels=%s, residual blocks=%d",
        train.hidden_size, list(train.gen_channels), train.gen_res_blocks,
    )
    return NetworkBundle(actor, critic, generator, actor.copy(), critic.copy())


def _promote(vector, width: int, label: str) -> Tuple[Tensor, bool]:
    vector = as_tensor(vector)
    if vector.ndim == 1:
        vector, single = vector.reshape(1, vector.shape[0]), True
    else:
        single = False
    if vector.ndim != 2 or vector.shape[1] != width:
        raise DimensionError(f"{label} must have length {width}, got shape {vector.shape}")
    return vector, single


def actor_step(net: DeepRecurrentNet, state: RecurrentState, prev_action, observation) -> Tuple[Tensor, RecurrentState]:
    """Next unit action from [observation, prev_action]; single vectors or [batch, ...] rows"""
    observation, single = _promote(observation, net.input_size - ACTION_SIZE, "observation")
    prev_action, _ = _promote(prev_action, ACTION_SIZE, "previous action")
    out, state = net.step(state, concat([observation, prev_action], axis=1))
    action = unit_normalize(tanh(out))
    return (action.reshape(ACTION_SIZE) if single else action), state


def critic_step(net: DeepRecurrentNet, state: RecurrentState, prev_action, observation,
                action) -> Tuple[Tensor, RecurrentState]:
    """Predicted discounted future loss from [observation, prev_action, action]"""
    observation, single = _promote(observation, net.input_size - 2 * ACTION_SIZE, "observation")
    prev_action, _ = _promote(prev_action, ACTION_SIZE, "previous action")
    action, _ = _promote(action, ACTION_SIZE, "action")
    out, state = net.step(state, concat([observation, prev_action, action], axis=1))
    q = out.reshape(out.shape[0])
    return (q.reshape(()) if single else q), state


def actor_unroll(net: DeepRecurrentNet, observations: np.ndarray, prev_actions: np.ndarray,
                 state: Optional[RecurrentState] = None) -> Tuple[List[Tensor], List[RecurrentState]]:
    """Run the actor over [batch, T, ...] inputs; returns per-step actions and states after each step"""
    if state is None:
        state = net.initial_state(observations.shape[0])
    actions, states = [], []
    for k in range(observations.shape[1]):
        action, state = actor_step(net, state, prev_actions[:, k], observations[:, k])
        actions.append(action)
        states.append(state)
    return actions, states


def critic_unroll(net: DeepRecurrentNet, observations: np.ndarray, prev_actions: np.ndarray, actions: np.ndarray,
                  state: Optional[RecurrentState] = None) -> Tuple[List[Tensor], List[RecurrentState]]:
    if state is None:
        state = net.initial_state(observations.shape[0])
    values, states = [], []
    for k in range(observations.shape[1]):
        q, state = critic_step(net, state, prev_actions[:, k], observations[:, k], actions[:, k])
        values.append(q)
        states.append(state)
    return values, states


def generator_forward(net: GeneratorNet, scans, mode: str = "train") -> Tensor:
    """Complete one PartialScan ([h, w] out) or a batch of them / a [B, 2, h, w] array ([B, h, w] out)"""
    if isinstance(scans, PartialScan):
        return net.forward(scans.as_channels()[None], mode).reshape(net.height, net.width)
    if isinstance(scans, (list, tuple)):
        scans = np.stack([scan.as_channels() for scan in scans])
    return net.forward(scans, mode)


def _param_dict(net) -> Dict[str, Tensor]:
    return net if isinstance(net, dict) else net.params


def soft_update(live, target, beta: float) -> None:
    """target <- beta * target + (1 - beta) * live, in place"""
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"soft update rate must lie in [0, 1], got {beta}")
    live, target = _param_dict(live), _param_dict(target)
    if live.keys() != target.keys():
        raise DimensionError("soft update: live and target parameter sets differ")
    for name, t in target.items():
        source = live[name]
        if source.shape != t.shape:
            raise DimensionError(f"soft update: '{name}' has shape {source.shape} live and {t.shape} target")
        t.data = (beta * t.data + (1.0 - beta) * source.data).astype(t.dtype)
