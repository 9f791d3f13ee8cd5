"""Block-grid geometry: pixel images vs channels-packed block tensors.

An RGB image of shape (3, H, W) with H, W divisible by the block size B is
rearranged so that each 3xBxB pixel block becomes one length-3B^2 channel
vector at a single site of an (H/B, W/B) grid.  The intra-block scan order is
frozen (channel-major, then row-major within the block) because bitstreams
and checkpoints depend on it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Identifier of the frozen intra-block scan order, recorded in checkpoints:
# channel index = c*B*B + row_in_block*B + col_in_block.
SCAN_ORDER_ID = 0


@dataclass(frozen=True)
class ImageRGB:
    """RGB image, values in [0, 1], shape (3, H, W)."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise ValueError(f"ImageRGB: expected (3, H, W), got {self.data.shape}")
        if self.data.shape[1] < 1 or self.data.shape[2] < 1:
            raise ValueError("ImageRGB: empty image")
        if np.any(self.data < 0) or np.any(self.data > 1):
            raise ValueError("ImageRGB: values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class BlockTensor:
    """Channels-packed block grid of shape (C, Hb, Wb); C = 3B^2 for pixel content."""

    data: np.ndarray
    block_size: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"BlockTensor: expected (C, Hb, Wb), got {self.data.shape}")
        if self.block_size < 1:
            raise ValueError("BlockTensor: block size must be >= 1")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


@dataclass(frozen=True)
class PadInfo:
    orig_h: int
    orig_w: int
    padded_h: int
    padded_w: int

    def __post_init__(self):
        if self.padded_h < self.orig_h or self.padded_w < self.orig_w:
            raise ValueError("PadInfo: padded dims smaller than originals")


def pad_to_block_multiple(img: ImageRGB, block_size: int) -> tuple[ImageRGB, PadInfo]:
    """Edge-replicate the right/bottom borders up to the next multiple of B."""
    if block_size < 1:
        raise ValueError("block size must be >= 1")
    h, w = img.height, img.width
    ph = -(-h // block_size) * block_size
    pw = -(-w // block_size) * block_size
    info = PadInfo(h, w, ph, pw)
    if ph == h and pw == w:
        return img, info
    padded = np.pad(img.data, ((0, 0), (0, ph - h), (0, pw - w)), mode="edge")
    return ImageRGB(padded), info


def crop_to_original(img: ImageRGB, pad: PadInfo) -> ImageRGB:
    if img.height != pad.padded_h or img.width != pad.padded_w:
        raise ValueError(f"crop: image is {img.height}x{img.width}, PadInfo says {pad.padded_h}x{pad.padded_w}")
    if pad.orig_h == pad.padded_h and pad.orig_w == pad.padded_w:
        return img
    return ImageRGB(np.ascontiguousarray(img.data[:, : pad.orig_h, : pad.orig_w]))


def b2c(img: ImageRGB, block_size: int) -> BlockTensor:
    """Pack each 3xBxB pixel block into one channel vector: (3,H,W) -> (3B^2, H/B, W/B)."""
    b = block_size
    h, w = img.height, img.width
    if h % b or w % b:
        raise ValueError(f"b2c: dims {h}x{w} not divisible by block size {b}; pad first")
    hb, wb = h // b, w // b
    packed = (
        img.data.reshape(3, hb, b, wb, b)
        .transpose(0, 2, 4, 1, 3)
        .reshape(3 * b * b, hb, wb)
    )
    return BlockTensor(np.ascontiguousarray(packed), b)


def c2b(bt: BlockTensor, block_size: int | None = None) -> ImageRGB:
    """Exact inverse of :func:`b2c` under the frozen scan order."""
    b = bt.block_size if block_size is None else block_size
    c, hb, wb = bt.data.shape
    if c != 3 * b * b:
        raise ValueError(f"c2b: channel count {c} != 3*B^2 = {3 * b * b}")
    img = (
        bt.data.reshape(3, b, b, hb, wb)
        .transpose(0, 3, 1, 4, 2)
        .reshape(3, hb * b, wb * b)
    )
    return ImageRGB(np.ascontiguousarray(img))


def b2c_array(data: np.ndarray, block_size: int) -> np.ndarray:
    """Array-level b2c for internal callers that carry raw (3,H,W) float arrays."""
    b = block_size
    _, h, w = data.shape
    if h % b or w % b:
        raise ValueError(f"b2c: dims {h}x{w} not divisible by block size {b}")
    hb, wb = h // b, w // b
    return np.ascontiguousarray(
        data.reshape(3, hb, b, wb, b).transpose(0, 2, 4, 1, 3).reshape(3 * b * b, hb, wb)
    )


def c2b_array(data: np.ndarray, block_size: int) -> np.ndarray:
    """Array-level c2b; inverse of :func:`b2c_array`."""
    b = block_size
    c, hb, wb = data.shape
    if c != 3 * b * b:
        raise ValueError(f"c2b: channel count {c} != 3*B^2 = {3 * b * b}")
    return np.ascontiguousarray(
        data.reshape(3, b, b, hb, wb).transpose(0, 3, 1, 4, 2).reshape(3, hb * b, wb * b)
    )
