"""
Scan Environment
Image ingestion and synthesis, preprocessing, the partial-scan episode
(segment geometry, nearest-pixel sampling, over-edge detection), rasterization,
dihedral augmentation and the static spiral / waypoint baseline paths.
"""
import logging
import math
from dataclasses import replace
from functools import lru_cache
from typing import List, Tuple, Union

import numpy as np
from scipy.ndimage import correlate
from scipy.optimize import brentq

from config import EnvConfig
from core.exceptions import ConfigError, ContractError, DataError, DimensionError, UsageError
from core.file_formats import read_waypoints, read_wem1, write_wem1
from models.scan import DIHEDRAL_TRANSFORMS, EpisodeState, ImageDataset, PartialScan, ProcessedImage, ScanHistory

logger = logging.getLogger(__name__)

BLUR_SIZE = 5
BLUR_SIGMA = 2.5
UNIT_TOLERANCE = 1e-6


# datasets

def load_dataset(path: str) -> ImageDataset:
    return ImageDataset(images=read_wem1(path))


def save_dataset(dataset: ImageDataset, path: str) -> None:
    write_wem1(dataset.images, path)


def _synth_image(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    image = np.full((height, width), rng.uniform(0.2, 0.8))

    # a uniform region split off by a random half-plane
    angle = rng.uniform(0.0, 2.0 * math.pi)
    offset = rng.uniform(-0.3, 0.3) * min(height, width)
    side = (xx - width / 2.0) * math.cos(angle) + (yy - height / 2.0) * math.sin(angle) > offset
    image[side] = rng.uniform(0.2, 0.8)

    # periodic lattice of atoms, over the whole image or one side only
    if rng.random() < 0.75:
        spacing = rng.uniform(5.0, 12.0)
        theta = rng.uniform(0.0, math.pi)
        width_sigma = spacing * rng.uniform(0.15, 0.3)
        u = xx * math.cos(theta) + yy * math.sin(theta) + rng.uniform(0.0, spacing)
        v = -xx * math.sin(theta) + yy * math.cos(theta) + rng.uniform(0.0, spacing)
        du = np.mod(u, spacing) - spacing / 2.0
        dv = np.mod(v, spacing) - spacing / 2.0
        atoms = np.exp(-(du * du + dv * dv) / (2.0 * width_sigma ** 2)) * rng.uniform(0.3, 1.0)
        region = ~side if rng.random() < 0.5 else np.ones_like(side)
        image += atoms * region

    for _ in range(int(rng.integers(0, 6))):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        blob_sigma = rng.uniform(3.0, 15.0)
        image += rng.uniform(-0.5, 0.5) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * blob_sigma ** 2))

    image += rng.normal(0.0, rng.uniform(0.01, 0.08), size=(height, width))
    return image.astype(np.float32)


def synth_dataset(count: int, height: int = 96, width: int = 96, seed: int = 1) -> ImageDataset:
    """Seeded stand-in image set: uniform regions, atom lattices, smooth blobs and pixel noise"""
    if count < 1:
        raise ConfigError(f"synthetic dataset needs count >= 1, got {count}")
    rng = np.random.default_rng(seed)
    images = np.stack([_synth_image(rng, height, width) for _ in range(count)])
    return ImageDataset(images=images)


def split_dataset(dataset: ImageDataset, train_fraction: float = 0.8) -> Tuple[ImageDataset, ImageDataset]:
    """First floor(fraction * count) images train, the rest test; no shuffling"""
    if dataset.count < 2:
        raise ConfigError(f"cannot split a dataset of {dataset.count} image(s)")
    n_train = int(math.floor(train_fraction * dataset.count))
    if n_train < 1 or n_train >= dataset.count:
        raise ConfigError(
            f"train fraction {train_fraction} leaves an empty side for {dataset.count} images"
        )
    return ImageDataset(images=dataset.images[:n_train]), ImageDataset(images=dataset.images[n_train:])


# preprocessing

@lru_cache()
def gaussian_kernel(size: int = BLUR_SIZE, sigma: float = BLUR_SIGMA) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2.0
    kernel = np.exp(-(offsets[:, None] ** 2 + offsets[None, :] ** 2) / (2.0 * sigma ** 2))
    return kernel / kernel.sum()


def preprocess(image: np.ndarray) -> ProcessedImage:
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise DataError("image contains non-finite pixels")
    low, high = image.min(), image.max()
    if high == low:
        zeros = np.zeros(image.shape, dtype=np.float32)
        return ProcessedImage(raw_norm=zeros, target_blur=zeros.copy())
    raw_norm = 2.0 * (image - low) / (high - low) - 1.0
    blurred = correlate(raw_norm, gaussian_kernel(), mode="constant", cval=0.0)
    return ProcessedImage(raw_norm=raw_norm.astype(np.float32), target_blur=blurred.astype(np.float32))


def preprocess_dataset(dataset: ImageDataset) -> List[ProcessedImage]:
    return [preprocess(image) for image in dataset.images]


# episode geometry

def start_position(env: EnvConfig) -> Tuple[float, float]:
    return ((env.width - 1) / 2.0, (env.height - 1) / 2.0)


def check_unit(action: np.ndarray) -> np.ndarray:
    action = np.asarray(action, dtype=np.float64)
    norms = np.linalg.norm(action.reshape(-1, 2), axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
        raise ContractError(f"actions must be unit vectors, got norm(s) {norms}")
    return action


def segment_probes(position: np.ndarray, action: np.ndarray, env: EnvConfig) -> np.ndarray:
    """Nominal probe positions p_k = pos + k * d * action, k = 1..samples; [..., samples, 2]"""
    steps = np.arange(1, env.samples_per_segment + 1, dtype=np.float64) * env.probe_spacing
    return np.asarray(position, np.float64)[..., None, :] + steps[:, None] * np.asarray(action, np.float64)[..., None, :]


def probe_pixels(positions: np.ndarray, height: int, width: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest pixel (round half up) per probe, clamped; also flags probes that were outside"""
    index = np.floor(np.asarray(positions) + 0.5).astype(np.int64)
    cols, rows = index[..., 0], index[..., 1]
    outside = (cols < 0) | (cols >= width) | (rows < 0) | (rows >= height)
    return np.clip(rows, 0, height - 1), np.clip(cols, 0, width - 1), outside


def episode_reset(env: EnvConfig, image: ProcessedImage) -> EpisodeState:
    if image.shape != (env.height, env.width):
        raise DimensionError(f"image {image.shape} does not match configured {env.height}x{env.width}")
    return EpisodeState(env=env, image=image, position=start_position(env))


def episode_step(state: EpisodeState, action) -> Tuple[EpisodeState, np.ndarray, bool]:
    env = state.env
    if state.step >= env.segments:
        raise UsageError(f"episode already has {env.segments} segments")
    # geometry follows the float32 action kept in the history
    action = check_unit(action).reshape(2).astype(np.float32).astype(np.float64)
    probes = segment_probes(np.array(state.position), action, env)
    rows, cols, outside = probe_pixels(probes, env.height, env.width)
    observation = state.image.raw_norm[rows, cols].astype(np.float32)
    over_edge = bool(outside.any())
    new_state = replace(
        state,
        position=(float(probes[-1, 0]), float(probes[-1, 1])),
        step=state.step + 1,
        actions=state.actions + ((float(action[0]), float(action[1])),),
        observations=state.observations + (observation,),
        over_edge=state.over_edge + (over_edge,),
        probe_positions=state.probe_positions + (probes,),
    )
    return new_state, observation, over_edge


def history_from_state(state: EpisodeState) -> ScanHistory:
    if state.step == 0:
        raise UsageError("episode has no steps")
    return ScanHistory(
        actions=np.array(state.actions, dtype=np.float32),
        observations=np.stack(state.observations).astype(np.float32),
        over_edge=np.array(state.over_edge, dtype=bool),
        probe_positions=np.stack(state.probe_positions),
    )


def trace_probe_positions(actions: np.ndarray, env: EnvConfig) -> np.ndarray:
    """Rebuild [T, samples, 2] probe positions from stored actions"""
    position = np.array(start_position(env), dtype=np.float64)
    segments = []
    for action in np.asarray(actions, dtype=np.float64):
        probes = segment_probes(position, action, env)
        segments.append(probes)
        position = probes[-1]
    return np.stack(segments)


def replay_history(actions: np.ndarray, image: ProcessedImage, env: EnvConfig) -> ScanHistory:
    """Re-run a stored action sequence on an image, reproducing observations and flags"""
    state = episode_reset(env, image)
    for action in actions:
        state, _, _ = episode_step(state, action)
    return history_from_state(state)


# rasterization and augmentation

def rasterize_positions(positions: np.ndarray, image: ProcessedImage) -> PartialScan:
    height, width = image.shape
    rows, cols, _ = probe_pixels(np.asarray(positions).reshape(-1, 2), height, width)
    values = np.zeros((height, width), dtype=np.float32)
    mask = np.zeros((height, width), dtype=np.float32)
    values[rows, cols] = image.raw_norm[rows, cols]
    mask[rows, cols] = 1.0
    return PartialScan(values=values, mask=mask)


def rasterize_scan(history: ScanHistory, env: EnvConfig, image: ProcessedImage) -> PartialScan:
    if history.length != env.segments:
        raise UsageError(f"history has {history.length} of {env.segments} segments")
    return rasterize_positions(history.probe_positions, image)


def _dihedral_index(index: Union[int, str]) -> int:
    if isinstance(index, str):
        if index not in DIHEDRAL_TRANSFORMS:
            raise ConfigError(f"unknown dihedral transform '{index}', expected one of {DIHEDRAL_TRANSFORMS}")
        return DIHEDRAL_TRANSFORMS.index(index)
    if not 0 <= index < len(DIHEDRAL_TRANSFORMS):
        raise ConfigError(f"dihedral index must be in 0..{len(DIHEDRAL_TRANSFORMS) - 1}, got {index}")
    return index


def dihedral(raster: np.ndarray, index: Union[int, str]) -> np.ndarray:
    """Indices 0-3 rotate by index * 90 degrees; 4-7 rotate the same way, then mirror. Names follow DIHEDRAL_TRANSFORMS"""
    index = _dihedral_index(index)
    out = np.rot90(raster, index % 4)
    if index >= 4:
        out = np.fliplr(out)
    return np.ascontiguousarray(out)


def augment_dihedral(scan: PartialScan, target: np.ndarray, index: Union[int, str]) -> Tuple[PartialScan, np.ndarray]:
    index = _dihedral_index(index)
    for raster in (scan.values, scan.mask, target):
        if raster.ndim != 2 or raster.shape[0] != raster.shape[1]:
            raise ConfigError(f"dihedral augmentation needs square rasters, got {raster.shape}")
    return (
        PartialScan(values=dihedral(scan.values, index), mask=dihedral(scan.mask, index)),
        dihedral(target, index),
    )


# static baselines

def _spiral_points(pitch: float, count: int, spacing: float) -> np.ndarray:
    """Points on r = pitch * theta from the origin, each exactly `spacing` from the previous one"""
    points = [(0.0, 0.0)]
    theta = 0.0
    for _ in range(count - 1):
        x0, y0 = points[-1]

        def gap(t: float) -> float:
            return math.hypot(pitch * t * math.cos(t) - x0, pitch * t * math.sin(t) - y0) - spacing

        width = spacing / pitch
        while gap(theta + width) < 0:
            width *= 2.0
        theta = brentq(gap, theta, theta + width, xtol=1e-12)
        points.append((pitch * theta * math.cos(theta), pitch * theta * math.sin(theta)))
    return np.array(points)


def _outward_line(count: int, spacing: float) -> np.ndarray:
    """The limit of the spiral as its pitch grows: a straight run along +x from the origin"""
    return np.stack([np.arange(count, dtype=np.float64) * spacing, np.zeros(count)], axis=1)


@lru_cache(maxsize=16)
def _spiral_offsets(count: int, spacing: float, radius: float) -> np.ndarray:
    if count < 2 or (count - 1) * spacing <= radius:
        logger.info("Path of %d probes cannot reach radius %.2f px; laying it out along a straight line",
                    count, radius)
        return _outward_line(count, spacing)

    def overshoot(pitch: float) -> float:
        return float(np.linalg.norm(_spiral_points(pitch, count, spacing)[-1]) - radius)

    low, high = 1e-3, max(radius, spacing) * 4.0
    while overshoot(low) > 0.0 and low > 1e-9:
        low /= 10.0
    for _ in range(20):
        if overshoot(high) >= 0.0:
            break
        high *= 4.0
    if overshoot(low) > 0.0 or overshoot(high) < 0.0:
        return _outward_line(count, spacing)
    pitch = brentq(overshoot, low, high, xtol=1e-10)
    return _spiral_points(pitch, count, spacing)


def spiral_path(env: EnvConfig) -> np.ndarray:
    """
    Archimedean spiral from the image centre with consecutive probes exactly d apart,
    sized so the outermost probe lies (min(h, w) / 2 - 1) px from the centre.
    Returns [T * samples, 2] (x, y) positions.
    """
    radius = min(env.height, env.width) / 2.0 - 1.0
    offsets = _spiral_offsets(env.probes_per_episode, float(env.probe_spacing), radius)
    return np.asarray(start_position(env)) + offsets


def resample_polyline(waypoints: np.ndarray, count: int, spacing: float) -> np.ndarray:
    """Probes at arc length k * spacing, k = 1..count, along straight waypoint-to-waypoint legs"""
    if len(waypoints) < 2:
        raise ConfigError(f"a fixed path needs at least 2 waypoints, got {len(waypoints)}")
    legs = np.linalg.norm(np.diff(waypoints, axis=0), axis=1)
    cumulative = np.concatenate([[0.0], np.cumsum(legs)])
    wanted = np.arange(1, count + 1, dtype=np.float64) * spacing
    if wanted[-1] > cumulative[-1] + 1e-6:
        raise ConfigError(
            f"path of length {cumulative[-1]:.3f} px is too short for {count} probes at {spacing:.4f} px"
        )
    wanted = np.minimum(wanted, cumulative[-1])
    return np.stack([np.interp(wanted, cumulative, waypoints[:, 0]),
                     np.interp(wanted, cumulative, waypoints[:, 1])], axis=1)


def fixed_path_from_waypoints(path: str, env: EnvConfig) -> np.ndarray:
    return resample_polyline(read_waypoints(path), env.probes_per_episode, env.probe_spacing)
