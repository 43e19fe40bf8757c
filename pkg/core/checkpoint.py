"""
Checkpoints
ASC1 binary layout: magic "ASC1", u32 version, u32 tensor count; per tensor a u16 name
length, the UTF-8 name, u8 rank, u32 dims and little-endian float32 values; then a u32
length-prefixed JSON RNG state and a u64 iteration counter.
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from config import RunConfig
from core.crdpg import Optimizers, TrainingState
from core.exceptions import DataError, FormatError, TruncationError, VersionError
from core.file_formats import atomic_write
from core.networks import NetworkBundle, init_networks
from core.replay import ReplayBuffer, ReplayEntry
from core.scan_env import trace_probe_positions
from models.scan import ScanHistory
from models.training import RunningStats

logger = logging.getLogger(__name__)

ASC1_MAGIC = b"ASC1"
ASC1_VERSION = 1

PathLike = Union[str, Path]


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: str = "{}"
    iteration: int = 0


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, fmt: str, what: str) -> Tuple:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.payload):
            raise TruncationError(f"checkpoint truncated while reading {what}", offset=self.offset)
        values = struct.unpack_from(fmt, self.payload, self.offset)
        self.offset += size
        return values

    def raw(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.payload):
            raise TruncationError(f"checkpoint truncated while reading {what}", offset=self.offset)
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    parts = [struct.pack("<4sII", ASC1_MAGIC, ASC1_VERSION, len(checkpoint.tensors))]
    for name, array in checkpoint.tensors.items():
        encoded = name.encode("utf-8")
        array = np.asarray(array, dtype="<f4")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
        parts.append(array.tobytes(order="C"))
    rng = checkpoint.rng_state.encode("utf-8")
    parts.append(struct.pack("<I", len(rng)) + rng)
    parts.append(struct.pack("<Q", checkpoint.iteration))
    return b"".join(parts)


def decode_checkpoint(payload: bytes) -> Checkpoint:
    reader = _Reader(payload)
    magic, version, count = reader.take("<4sII", "header")
    if magic != ASC1_MAGIC:
        raise VersionError(f"not an ASC1 checkpoint (magic {magic!r})", offset=0)
    if version != ASC1_VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {ASC1_VERSION})", offset=4)
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (length,) = reader.take("<H", "tensor name length")
        try:
            name = reader.raw(length, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", offset=reader.offset - length)
        (rank,) = reader.take("<B", f"rank of '{name}'")
        shape = reader.take(f"<{rank}I", f"shape of '{name}'")
        size = int(np.prod(shape)) if rank else 1
        data = reader.raw(4 * size, f"values of '{name}'")
        tensors[name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
    (length,) = reader.take("<I", "RNG state length")
    rng_state = reader.raw(length, "RNG state").decode("utf-8")
    (iteration,) = reader.take("<Q", "iteration counter")
    return Checkpoint(tensors=tensors, rng_state=rng_state, iteration=iteration)


def save_checkpoint(checkpoint: Checkpoint, path: PathLike) -> None:
    atomic_write(path, encode_checkpoint(checkpoint))


def load_checkpoint(path: PathLike) -> Checkpoint:
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}")
    return decode_checkpoint(payload)


# training state <-> tensors

def _network_tensors(bundle: NetworkBundle) -> Dict[str, np.ndarray]:
    tensors = {}
    for label, net in bundle.named_networks():
        for name, param in net.params.items():
            tensors[f"{label}/{name}"] = param.data
    for name, stats in bundle.generator.bn_stats.items():
        tensors[f"generator_bn/{name}/mean"] = stats.mean
        tensors[f"generator_bn/{name}/var"] = stats.var
    return tensors


def _optimizer_tensors(optimizers: Optimizers) -> Dict[str, np.ndarray]:
    tensors = {}
    for label, adam in optimizers.named():
        tensors[f"adam/{label}/step"] = np.array(adam.step, dtype=np.float32)
        tensors[f"adam/{label}/skipped"] = np.array(adam.skipped, dtype=np.float32)
        for name in sorted(adam.first_moment):
            tensors[f"adam/{label}/m/{name}"] = adam.first_moment[name]
            tensors[f"adam/{label}/v/{name}"] = adam.second_moment[name]
    return tensors


def _replay_tensors(replay: ReplayBuffer) -> Dict[str, np.ndarray]:
    entries = replay.entries()
    tensors = {"replay/meta": np.array([replay.cursor, replay.inserted], dtype=np.float32)}
    if entries:
        tensors["replay/image_index"] = np.array([e.image_index for e in entries], dtype=np.float32)
        tensors["replay/actions"] = np.stack([e.history.actions for e in entries])
        tensors["replay/observations"] = np.stack([e.history.observations for e in entries])
        tensors["replay/over_edge"] = np.stack([e.history.over_edge for e in entries]).astype(np.float32)
    return tensors


def snapshot_training(state: TrainingState) -> Checkpoint:
    tensors = _network_tensors(state.bundle)
    tensors.update(_optimizer_tensors(state.optimizers))
    stats = state.stats
    tensors["stats/running"] = np.array([stats.l_avg, stats.l_sq_avg, float(stats.initialized)], dtype=np.float32)
    tensors.update(_replay_tensors(state.replay))
    rng_state = json.dumps(state.rng.bit_generator.state, sort_keys=True)
    return Checkpoint(tensors=tensors, rng_state=rng_state, iteration=state.iteration)


def _take(tensors: Dict[str, np.ndarray], name: str, like: np.ndarray) -> np.ndarray:
    if name not in tensors:
        raise VersionError(f"checkpoint has no tensor '{name}'")
    value = tensors[name]
    if value.shape != like.shape:
        raise VersionError(f"checkpoint tensor '{name}' has shape {value.shape}, configuration needs {like.shape}")
    return value.astype(like.dtype).copy()


def restore_networks(checkpoint: Checkpoint, bundle: NetworkBundle) -> NetworkBundle:
    tensors = checkpoint.tensors
    for label, net in bundle.named_networks():
        for name, param in net.params.items():
            param.data = _take(tensors, f"{label}/{name}", param.data)
    for name, stats in bundle.generator.bn_stats.items():
        stats.mean = _take(tensors, f"generator_bn/{name}/mean", stats.mean)
        stats.var = _take(tensors, f"generator_bn/{name}/var", stats.var)
    return bundle


def _restore_optimizers(checkpoint: Checkpoint, optimizers: Optimizers, bundle: NetworkBundle) -> None:
    tensors = checkpoint.tensors
    nets = {"actor": bundle.actor, "critic": bundle.critic, "generator": bundle.generator}
    for label, adam in optimizers.named():
        adam.step = int(_take(tensors, f"adam/{label}/step", np.zeros((), np.float32)))
        adam.skipped = int(_take(tensors, f"adam/{label}/skipped", np.zeros((), np.float32)))
        for name, param in nets[label].params.items():
            key = f"adam/{label}/m/{name}"
            if key in tensors:
                adam.first_moment[name] = _take(tensors, key, param.data)
                adam.second_moment[name] = _take(tensors, f"adam/{label}/v/{name}", param.data)


def _restore_replay(checkpoint: Checkpoint, replay: ReplayBuffer, run: RunConfig) -> None:
    tensors = checkpoint.tensors
    if "replay/meta" not in tensors:
        raise VersionError("checkpoint has no replay state")
    cursor, inserted = (int(v) for v in tensors["replay/meta"])
    entries: List[ReplayEntry] = []
    if "replay/actions" in tensors:
        actions = tensors["replay/actions"]
        if actions.shape[1:] != (run.env.segments, 2):
            raise VersionError(f"stored episodes have shape {actions.shape[1:]}, configuration needs ({run.env.segments}, 2)")
        for i in range(actions.shape[0]):
            history = ScanHistory(
                actions=actions[i].copy(),
                observations=tensors["replay/observations"][i].copy(),
                over_edge=tensors["replay/over_edge"][i] > 0.5,
                probe_positions=trace_probe_positions(actions[i], run.env),
            )
            entries.append(ReplayEntry(history=history, image_index=int(tensors["replay/image_index"][i])))
    replay.restore(entries, cursor, inserted)


def _restore_rng(checkpoint: Checkpoint) -> np.random.Generator:
    try:
        state = json.loads(checkpoint.rng_state)
        bit_generator = getattr(np.random, state["bit_generator"])()
        bit_generator.state = state
    except (ValueError, KeyError, AttributeError, TypeError) as e:
        raise VersionError(f"checkpoint RNG state is unusable: {e}")
    return np.random.Generator(bit_generator)


def restore_training(checkpoint: Checkpoint, run: RunConfig) -> TrainingState:
    """Rebuild the full training state for a resumed run under the given configuration"""
    bundle = restore_networks(checkpoint, init_networks(run.train, run.env, 0))
    optimizers = Optimizers.create(run.train)
    _restore_optimizers(checkpoint, optimizers, bundle)
    replay = ReplayBuffer(run.train.replay_capacity, run.env.segments)
    _restore_replay(checkpoint, replay, run)
    l_avg, l_sq_avg, initialized = (float(v) for v in _take(checkpoint.tensors, "stats/running", np.zeros(3, np.float32)))
    state = TrainingState(
        bundle=bundle, optimizers=optimizers, replay=replay, rng=_restore_rng(checkpoint),
        stats=RunningStats(l_avg=l_avg, l_sq_avg=l_sq_avg, initialized=initialized > 0.5),
        iteration=checkpoint.iteration,
    )
    logger.info("Restored training state at iteration %d (%d replay episodes)", state.iteration, len(replay))
    return state


def load_bundle(path: PathLike, run: RunConfig) -> NetworkBundle:
    """Networks only, for evaluation and rendering"""
    checkpoint = load_checkpoint(path)
    return restore_networks(checkpoint, init_networks(run.train, run.env, 0))
