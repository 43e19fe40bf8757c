"""
Evaluation
Test-set error of the completion pipeline for the adaptive policy and the static
spiral / waypoint baselines, plus the rasters behind the render command.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from config import EnvConfig
from core.exceptions import ConfigError, UsageError
from core.networks import DeepRecurrentNet, GeneratorNet, actor_step, generator_forward
from core.scan_env import check_unit, fixed_path_from_waypoints, probe_pixels, rasterize_positions, segment_probes, \
    spiral_path, start_position
from models.scan import PartialScan, ProcessedImage
from models.training import EVAL_MODES, EvalReport

logger = logging.getLogger(__name__)

EVAL_CHUNK = 16


@dataclass
class EvalMode:
    kind: str
    waypoints: Optional[str] = None


def parse_mode(mode: str) -> EvalMode:
    """'adaptive', 'spiral' or 'waypoints:PATH'"""
    kind, _, path = mode.partition(":")
    if kind not in EVAL_MODES:
        raise ConfigError(f"unknown mode '{mode}', expected adaptive, spiral or waypoints:PATH")
    if kind == "waypoints":
        if not path:
            raise ConfigError("waypoints mode needs a path: waypoints:PATH")
        return EvalMode(kind, path)
    if path:
        raise ConfigError(f"mode '{kind}' takes no argument")
    return EvalMode(kind)


def rollout_positions(actor: DeepRecurrentNet, env: EnvConfig, images: List[ProcessedImage]) -> np.ndarray:
    """
    Deterministic (noise-free) policy rollout over a batch of images at once.
    Returns [B, T * samples, 2] probe positions.
    """
    batch = len(images)
    raw = np.stack([image.raw_norm for image in images])
    position = np.tile(np.array(start_position(env)), (batch, 1))
    prev_action = np.zeros((batch, 2), dtype=np.float32)
    observation = np.zeros((batch, env.samples_per_segment), dtype=np.float32)
    state = actor.initial_state(batch)
    segments = []
    for _ in range(env.segments):
        action, state = actor_step(actor, state, prev_action, observation)
        direction = check_unit(action.data).astype(np.float32)
        probes = segment_probes(position, direction.astype(np.float64), env)
        rows, cols, _ = probe_pixels(probes, env.height, env.width)
        observation = raw[np.arange(batch)[:, None], rows, cols].astype(np.float32)
        prev_action = direction
        position = probes[:, -1]
        segments.append(probes)
    return np.concatenate(segments, axis=1)


def static_positions(mode: EvalMode, env: EnvConfig) -> np.ndarray:
    if mode.kind == "spiral":
        return spiral_path(env)
    if mode.kind == "waypoints":
        return fixed_path_from_waypoints(mode.waypoints, env)
    raise UsageError(f"mode '{mode.kind}' has no static path")


def scan_images(mode: EvalMode, actor: Optional[DeepRecurrentNet], env: EnvConfig,
                images: List[ProcessedImage]) -> List[PartialScan]:
    if mode.kind == "adaptive":
        if actor is None:
            raise UsageError("adaptive evaluation needs an actor")
        positions = rollout_positions(actor, env, images)
        return [rasterize_positions(p, image) for p, image in zip(positions, images)]
    path = static_positions(mode, env)
    return [rasterize_positions(path, image) for image in images]


def complete_scans(generator: GeneratorNet, scans: List[PartialScan], chunk: int = EVAL_CHUNK) -> np.ndarray:
    """Infer-mode completions in fixed-size chunks, [B, h, w]"""
    outputs = []
    for start in range(0, len(scans), chunk):
        outputs.append(generator_forward(generator, scans[start:start + chunk], mode="infer").data)
    return np.concatenate(outputs).astype(np.float32)


def per_image_mse(completions: np.ndarray, images: List[ProcessedImage]) -> np.ndarray:
    targets = np.stack([image.target_blur for image in images]).astype(np.float64)
    diff = completions.astype(np.float64) - targets
    return (diff * diff).mean(axis=(1, 2))


def evaluate(generator: GeneratorNet, actor: Optional[DeepRecurrentNet], env: EnvConfig,
             images: List[ProcessedImage], mode: str = "adaptive", limit: int = 0) -> EvalReport:
    """Mean and population std of per-image MSE against the blurred targets; no parameter is changed"""
    parsed = parse_mode(mode)
    if limit:
        images = images[:limit]
    if not images:
        raise UsageError("evaluation needs a non-empty test split")
    errors = []
    for start in range(0, len(images), EVAL_CHUNK):
        chunk = images[start:start + EVAL_CHUNK]
        scans = scan_images(parsed, actor, env, chunk)
        errors.append(per_image_mse(complete_scans(generator, scans), chunk))
    per_image = np.concatenate(errors)
    report = EvalReport(
        mode=mode, mean=float(per_image.mean()), std=float(per_image.std()),
        count=int(per_image.size), per_image=per_image,
    )
    logger.info("Evaluation %s over %d images: mean=%.6f std=%.6f", mode, report.count, report.mean, report.std)
    return report


def render_rasters(generator: GeneratorNet, actor: Optional[DeepRecurrentNet], env: EnvConfig,
                   images: List[ProcessedImage], index: int, mode: str = "adaptive") -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(scan, completion, target) rasters for one test image"""
    if not 0 <= index < len(images):
        raise UsageError(f"image index {index} outside the test split of {len(images)} images")
    image = images[index]
    scan = scan_images(parse_mode(mode), actor, env, [image])[0]
    completion = complete_scans(generator, [scan])[0]
    return scan.values, completion, image.target_blur
