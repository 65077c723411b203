"""Small convolutional feature extractor and fixed 2D positional table."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import BadImageShape, ShapeMismatch
from .nn import Linear, Module
from .tensor import Tensor


def positional_table_2d(h, w, d):
    """Sinusoidal (HW, d) table: first d/2 channels encode the row, the rest the column."""
    if d % 4:
        raise ShapeMismatch(f"feature width {d} must be divisible by 4 for 2D sinusoids")
    half = d // 2
    freqs = 1.0 / (10000.0 ** (np.arange(0, half, 2) / half))

    def encode(pos):
        ang = pos[:, None] * freqs[None, :]
        out = np.empty((pos.size, half))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    rows = encode(np.arange(h, dtype=np.float64))
    cols = encode(np.arange(w, dtype=np.float64))
    table = np.empty((h, w, d))
    table[:, :, :half] = rows[:, None, :]
    table[:, :, half:] = cols[None, :, :]
    return table.reshape(h * w, d)


@dataclass
class FeatureMap:
    x_spatial: Tensor  # (B, H, W, d)
    x_flat: Tensor  # (B, HW, d); cross-attention values
    x_pos_added: Tensor  # (B, HW, d); cross-attention keys
    height: int
    width: int

    @property
    def batch(self):
        return self.x_flat.shape[0]


def add_positional(x_flat, pos_table):
    """X' + X_pos for a (B, HW, d) batch; ``pos_table=None`` disables the term."""
    if pos_table is None:
        return x_flat
    if x_flat.shape[-2:] != pos_table.shape:
        raise ShapeMismatch(f"positional table {pos_table.shape} vs features {x_flat.shape}")
    pos = Tensor(np.broadcast_to(pos_table, x_flat.shape).copy())
    return x_flat + pos


class Backbone(Module):
    """Two stride-2 3x3 conv + GELU blocks, then a 1x1 projection to width d."""

    def __init__(self, rng, d=64, in_channels=1, channels=(16, 32), pos_embedding=True):
        super().__init__()
        c1, c2 = channels
        self.d = d
        self.in_channels = in_channels
        self.pos_embedding = pos_embedding
        self.conv1_w = self.param("conv1_w", (3, 3, in_channels, c1), "uniform_fanin", rng)
        self.conv1_b = self.param("conv1_b", (c1,), "zeros", rng)
        self.conv2_w = self.param("conv2_w", (3, 3, c1, c2), "uniform_fanin", rng)
        self.conv2_b = self.param("conv2_b", (c2,), "zeros", rng)
        self.proj = self.child("proj", Linear(c2, d, rng))
        self._pos_cache = {}

    def pos_table(self, h, w):
        key = (h, w)
        if key not in self._pos_cache:
            self._pos_cache[key] = positional_table_2d(h, w, self.d)
        return self._pos_cache[key]

    def __call__(self, images):
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[-1] != self.in_channels:
            raise BadImageShape(f"expected (B, H0, W0, {self.in_channels}) images, got {x.shape}")
        h0, w0 = x.shape[1], x.shape[2]
        if h0 % 4 or w0 % 4:
            raise BadImageShape(f"image size {h0}x{w0} must be divisible by 4")
        y = T.gelu(T.add_bias(T.conv2d(x, self.conv1_w, stride=2, pad=1), self.conv1_b))
        y = T.gelu(T.add_bias(T.conv2d(y, self.conv2_w, stride=2, pad=1), self.conv2_b))
        spatial = self.proj(y)
        b, h, w, d = spatial.shape
        flat = T.reshape(spatial, (b, h * w, d))
        keys = add_positional(flat, self.pos_table(h, w) if self.pos_embedding else None)
        return FeatureMap(spatial, flat, keys, h, w)


def extract_features(backbone, image):
    return backbone(image)
