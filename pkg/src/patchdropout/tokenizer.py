"""Images to embedded token sequences.

Positional embeddings and the CLS token are attached here, before any patch
is dropped, so a kept patch carries exactly the representation it has in the
full pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import IndivisibleImage, ShapeMismatch
from .numerics import Tensor


@dataclass
class ImageBatch:
    """Pixel batch ``[B, C, H, W]`` with values in [0, 1]."""

    data: Tensor

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]


@dataclass
class TokenBatch:
    tokens: Tensor  # [B, T, d]
    grid_rows: int
    grid_cols: int
    has_cls: bool = True
    # [B, k] sorted patch indices per sample; None means every patch is present
    kept_indices: np.ndarray | None = None

    @property
    def num_patches(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]


def patchify(images: ImageBatch | Tensor, patch: int) -> Tensor:
    """Tile ``[B, C, H, W]`` into ``[B, N, P*P*C]`` row-major patches.

    Within a patch the pixel block is flattened in (row, col, channel) order.
    """
    x = images.data if isinstance(images, ImageBatch) else images
    B, C, H, W = x.shape
    if H % patch or W % patch:
        raise IndivisibleImage(f"{H}x{W} image is not divisible by patch size {patch}")
    gh, gw = H // patch, W // patch
    x = nx.reshape(x, (B, C, gh, patch, gw, patch))
    x = nx.transpose(x, (0, 2, 4, 3, 5, 1))
    return nx.reshape(x, (B, gh * gw, patch * patch * C))


def unpatchify(patches: np.ndarray, patch: int, channels: int, height: int, width: int) -> np.ndarray:
    """Inverse of :func:`patchify` on raw arrays."""
    B = patches.shape[0]
    gh, gw = height // patch, width // patch
    x = np.asarray(patches).reshape(B, gh, gw, patch, patch, channels)
    return x.transpose(0, 5, 1, 3, 2, 4).reshape(B, channels, height, width)


def embed_tokens(
    patches: Tensor,
    proj: Tensor,
    pos: Tensor,
    cls: Tensor,
    grid: tuple[int, int] | None = None,
) -> TokenBatch:
    """Project patches, add positions and prepend the CLS token.

    Row 0 of ``pos`` belongs to the CLS slot; row ``j + 1`` to patch ``j``.
    The projection runs over every patch, so its MACs are paid regardless of
    how many tokens are dropped afterwards.
    """
    B, N, pdim = patches.shape
    if proj.ndim != 2 or proj.shape[0] != pdim:
        raise ShapeMismatch(f"projection {proj.shape} does not accept patch dim {pdim}")
    d = proj.shape[1]
    if pos.shape != (N + 1, d):
        raise ShapeMismatch(f"positional table {pos.shape}, expected {(N + 1, d)}")
    if cls.shape != (d,):
        raise ShapeMismatch(f"cls vector {cls.shape}, expected {(d,)}")
    if grid is None:
        side = int(round(N**0.5))
        if side * side != N:
            raise ShapeMismatch(f"grid shape needed for non-square patch count {N}")
        grid = (side, side)

    pos3 = nx.reshape(pos, (1, N + 1, d))
    body = nx.add(nx.matmul(patches, proj), nx.gather_rows(pos3, np.arange(1, N + 1)))
    head = nx.add(nx.reshape(cls, (1, 1, d)), nx.gather_rows(pos3, [0]))
    if B > 1:
        head = nx.add(head, Tensor(nx._meta_array((B, 1, d)) if nx.is_meta() else np.zeros((B, 1, d))))
    tokens = nx.concat([head, body], axis=1)
    return TokenBatch(tokens=tokens, grid_rows=grid[0], grid_cols=grid[1], has_cls=True)
