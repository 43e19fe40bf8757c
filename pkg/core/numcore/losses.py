"""
Generator loss functions.
All losses accept [h, w] or batched [B, h, w] predictions; reduction="none" returns
the per-image losses as a [B] tensor and "mean" their average.
"""
import numpy as np

from core.exceptions import ConfigError, DimensionError
from core.numcore.ops import conv2d
from core.numcore.tensor import Tensor, as_tensor

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


def _prepare(pred: Tensor, target, op: str):
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"{op}: prediction {pred.shape} and target {target.shape} differ")
    return pred, Tensor(target, dtype=pred.dtype)


def _reduce(per_image: Tensor, reduction: str) -> Tensor:
    if reduction == "none":
        return per_image
    if reduction != "mean":
        raise ConfigError(f"unknown reduction '{reduction}'")
    return per_image.mean()


def _as_batch(pred: Tensor, target: Tensor):
    if pred.ndim == 2:
        return pred.reshape(1, *pred.shape), target.reshape(1, *target.shape)
    if pred.ndim == 3:
        return pred, target
    raise DimensionError(f"expected [h, w] or [B, h, w], got {pred.shape}")


def mse_loss(pred: Tensor, target, reduction: str = "mean") -> Tensor:
    pred, target = _prepare(pred, target, "mse_loss")
    diff = pred - target
    squared = diff * diff
    if reduction == "mean":
        return squared.mean()
    if pred.ndim <= 2:
        return _reduce(squared.mean().reshape(1), reduction)
    return _reduce(squared.mean(axis=tuple(range(1, pred.ndim))), reduction)


def sobel_filter(image: Tensor) -> Tensor:
    """[B, h, w] -> [B, 2, h, w] horizontal and vertical Sobel derivatives"""
    image = as_tensor(image)
    kernel = Tensor(np.stack([SOBEL_X, SOBEL_Y])[:, None], dtype=image.dtype)
    return conv2d(image.reshape(image.shape[0], 1, *image.shape[1:]), kernel, stride=1)


def sobel_loss(pred: Tensor, target, reduction: str = "mean") -> Tensor:
    pred, target = _prepare(pred, target, "sobel_loss")
    pred_b, target_b = _as_batch(pred, target)
    diff = sobel_filter(pred_b) - sobel_filter(target_b).detach()
    per_image = (diff * diff).mean(axis=(1, 2, 3))
    return _reduce(per_image, reduction)


def region_max_mse(pred: Tensor, target, region: int = 5, reduction: str = "mean") -> Tensor:
    """Largest per-tile MSE over non-overlapping region x region tiles; partial tiles are dropped"""
    pred, target = _prepare(pred, target, "region_max_mse")
    pred_b, target_b = _as_batch(pred, target)
    batch, height, width = pred_b.shape
    if region < 1 or height < region or width < region:
        raise ConfigError(f"region_max_mse: image {height}x{width} is smaller than region {region}")
    rows, cols = height // region, width // region
    diff = pred_b[:, :rows * region, :cols * region] - target_b[:, :rows * region, :cols * region]
    tiles = (diff * diff).reshape(batch, rows, region, cols, region).mean(axis=(2, 4))
    per_image = tiles.reshape(batch, rows * cols).max(axis=1)
    return _reduce(per_image, reduction)


def generator_loss(pred: Tensor, target, variant: str, sobel_weight: float = 0.1,
                   region: int = 5, reduction: str = "mean") -> Tensor:
    """Dispatch on the configured loss variant: mse, mse+sobel or region_max"""
    if variant == "mse":
        return mse_loss(pred, target, reduction=reduction)
    if variant == "mse+sobel":
        return mse_loss(pred, target, reduction=reduction) + sobel_loss(pred, target, reduction=reduction) * sobel_weight
    if variant == "region_max":
        return region_max_mse(pred, target, region=region, reduction=reduction)
    raise ConfigError(f"unknown loss variant '{variant}'")
