"""Visual-spatial feature construction: an 8-channel coordinate map plus a
small trainable convolutional encoder that downsamples the image 8x."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

# Channel widths of the three stride-2 stages before the 1x1 projection.
ENCODER_WIDTHS = (16, 24, 32)
DOWNSAMPLE = 8


def spatial_coordinates(width: int, height: int) -> Tensor:
    """The (height, width, 8) coordinate map.

    Channels 0-2: left edge, center, right edge of the cell's column,
    normalized to [-1, 1]. Channels 3-5: the same for the row. Channel 6 is
    the constant 1/width, channel 7 the constant 1/height.
    """
    if width < 1 or height < 1:
        raise ShapeError("grid extents must be positive")
    out = np.empty((height, width, 8))
    cols = np.arange(width, dtype=np.float64)
    rows = np.arange(height, dtype=np.float64)
    out[:, :, 0] = 2.0 * cols / width - 1.0
    out[:, :, 1] = (2.0 * cols + 1.0) / width - 1.0
    out[:, :, 2] = 2.0 * (cols + 1.0) / width - 1.0
    out[:, :, 3] = (2.0 * rows / height - 1.0)[:, None]
    out[:, :, 4] = ((2.0 * rows + 1.0) / height - 1.0)[:, None]
    out[:, :, 5] = (2.0 * (rows + 1.0) / height - 1.0)[:, None]
    out[:, :, 6] = 1.0 / width
    out[:, :, 7] = 1.0 / height
    return Tensor(out)


def _conv_init(cout: int, fan_in: int, rng: np.random.Generator):
    s = 1.0 / np.sqrt(fan_in)
    weight = Tensor(rng.uniform(-s, s, size=(cout, fan_in)), requires_grad=True)
    bias = Tensor(np.zeros(cout), requires_grad=True)
    return weight, bias


@dataclass
class EncoderParams:
    """Three stride-2 3x3 conv stages plus a linear 1x1 projection."""

    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    conv3_w: Tensor
    conv3_b: Tensor
    project_w: Tensor
    project_b: Tensor

    @classmethod
    def init(cls, d_image: int, rng: np.random.Generator, widths=ENCODER_WIDTHS) -> "EncoderParams":
        c1, c2, c3 = widths
        w1, b1 = _conv_init(c1, 9 * 3, rng)
        w2, b2 = _conv_init(c2, 9 * c1, rng)
        w3, b3 = _conv_init(c3, 9 * c2, rng)
        wp, bp = _conv_init(d_image, c3, rng)
        return cls(w1, b1, w2, b2, w3, b3, wp, bp)

    def named(self) -> dict:
        return {
            "encoder.conv1.weight": self.conv1_w,
            "encoder.conv1.bias": self.conv1_b,
            "encoder.conv2.weight": self.conv2_w,
            "encoder.conv2.bias": self.conv2_b,
            "encoder.conv3.weight": self.conv3_w,
            "encoder.conv3.bias": self.conv3_b,
            "encoder.project.weight": self.project_w,
            "encoder.project.bias": self.project_b,
        }

    @classmethod
    def from_named(cls, named: dict) -> "EncoderParams":
        return cls(
            named["encoder.conv1.weight"],
            named["encoder.conv1.bias"],
            named["encoder.conv2.weight"],
            named["encoder.conv2.bias"],
            named["encoder.conv3.weight"],
            named["encoder.conv3.bias"],
            named["encoder.project.weight"],
            named["encoder.project.bias"],
        )


def toy_visual_encoder(image: Tensor, params: EncoderParams) -> Tensor:
    """Encode an (H, W, 3) image into an (H/8, W/8, d_image) feature map."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {image.shape}")
    if image.shape[0] % DOWNSAMPLE or image.shape[1] % DOWNSAMPLE:
        raise ShapeError(f"image extents {image.shape[:2]} not divisible by {DOWNSAMPLE}")
    x = T.relu(T.conv2d(image, params.conv1_w, params.conv1_b, ksize=3, stride=2, pad=1))
    x = T.relu(T.conv2d(x, params.conv2_w, params.conv2_b, ksize=3, stride=2, pad=1))
    x = T.relu(T.conv2d(x, params.conv3_w, params.conv3_b, ksize=3, stride=2, pad=1))
    return T.conv1x1(x, params.project_w, params.project_b)


def fuse(visual: Tensor, coords: Tensor) -> Tensor:
    """Channel-wise concatenation, visual channels first."""
    if visual.shape[:2] != coords.shape[:2]:
        raise ShapeError(f"spatial extents differ: {visual.shape[:2]} vs {coords.shape[:2]}")
    return T.concat([visual, coords], axis=2)
