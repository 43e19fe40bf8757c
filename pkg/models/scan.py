from dataclasses import dataclass, field
from typing import Any, List, Tuple

import numpy as np

DIHEDRAL_TRANSFORMS = [
    "identity", "rot90", "rot180", "rot270",
    "flip", "rot90_flip", "rot180_flip", "rot270_flip"
]


@dataclass
class ImageDataset:
    images: np.ndarray  # [count, height, width] float32

    @property
    def count(self) -> int:
        return int(self.images.shape[0])

    @property
    def height(self) -> int:
        return int(self.images.shape[1])

    @property
    def width(self) -> int:
        return int(self.images.shape[2])

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, index: int) -> np.ndarray:
        return self.images[index]


@dataclass
class ProcessedImage:
    raw_norm: np.ndarray     # sampling source, [-1, 1]
    target_blur: np.ndarray  # generator target, [-1, 1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.raw_norm.shape


@dataclass
class EpisodeState:
    """Explicit value threaded through episode_step; never mutated in place"""
    env: Any  # EnvConfig
    image: ProcessedImage
    position: Tuple[float, float]  # (x, y), continuous, unclamped
    step: int = 0
    actions: Tuple[Tuple[float, float], ...] = ()
    observations: Tuple[np.ndarray, ...] = ()
    over_edge: Tuple[bool, ...] = ()
    probe_positions: Tuple[np.ndarray, ...] = ()


@dataclass
class ScanHistory:
    actions: np.ndarray          # [T, 2] float32 unit vectors
    observations: np.ndarray     # [T, samples] float32
    over_edge: np.ndarray        # [T] bool
    probe_positions: np.ndarray  # [T, samples, 2] float64 (x, y)

    @property
    def length(self) -> int:
        return int(self.actions.shape[0])

    def __len__(self) -> int:
        return self.length


@dataclass
class PartialScan:
    values: np.ndarray  # [h, w] float32, 0 where unsampled
    mask: np.ndarray    # [h, w] float32, 1 where sampled

    @property
    def coverage(self) -> float:
        return float(self.mask.sum() / self.mask.size)

    def as_channels(self) -> np.ndarray:
        return np.stack([self.values, self.mask]).astype(np.float32)


@dataclass
class SplitDataset:
    train: ImageDataset
    test: ImageDataset
    train_processed: List[ProcessedImage] = field(default_factory=list)
    test_processed: List[ProcessedImage] = field(default_factory=list)
