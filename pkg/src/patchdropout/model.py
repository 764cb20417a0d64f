"""Pre-norm ViT classifier (DeiT layout) on top of ``numerics``.

The forward pass accepts any sequence length, which is all PatchDropout needs
from the architecture: dropped tokens simply never enter the blocks.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import BadMagic, ShapeMismatch, TruncatedFile
from .numerics import Tensor
from .tokenizer import ImageBatch, TokenBatch, embed_tokens, patchify


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 12
    width: int = 768
    heads: int = 12
    patch: int = 16
    image_h: int = 224
    image_w: int = 224
    classes: int = 1000
    channels: int = 3
    mlp_ratio: int = 4
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.width % self.heads:
            raise ShapeMismatch(f"width {self.width} not divisible by {self.heads} heads")
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ShapeMismatch(f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch}")
        for f in ("depth", "width", "heads", "patch", "classes", "channels", "mlp_ratio"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // self.patch, self.image_w // self.patch

    @property
    def num_patches(self) -> int:
        r, c = self.grid
        return r * c

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


VARIANTS = {
    "tiny": dict(width=192, heads=3, depth=12),
    "small": dict(width=384, heads=6, depth=12),
    "base": dict(width=768, heads=12, depth=12),
    "large": dict(width=1024, heads=16, depth=24),
}


def variant(name: str, image: int = 224, patch: int = 16, classes: int = 1000, channels: int = 3, **overrides) -> ModelConfig:
    try:
        dims = dict(VARIANTS[name.lower()])
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None
    dims.update(overrides)
    return ModelConfig(patch=patch, image_h=image, image_w=image, classes=classes, channels=channels, **dims)


# --------------------------------------------------------------------------
# parameters

ViTParams = dict  # name -> Tensor, insertion order is the canonical order


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, hid = cfg.width, cfg.width * cfg.mlp_ratio
    shapes = {
        "patch_proj": (cfg.patch_dim, d),
        "pos": (cfg.num_patches + 1, d),
        "cls": (d,),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes.update(
            {
                p + "ln1.gain": (d,),
                p + "ln1.bias": (d,),
                p + "qkv.weight": (d, 3 * d),
                p + "qkv.bias": (3 * d,),
                p + "proj.weight": (d, d),
                p + "proj.bias": (d,),
                p + "ln2.gain": (d,),
                p + "ln2.bias": (d,),
                p + "fc1.weight": (d, hid),
                p + "fc1.bias": (hid,),
                p + "fc2.weight": (hid, d),
                p + "fc2.bias": (d,),
            }
        )
    shapes.update({"norm.gain": (d,), "norm.bias": (d,), "head.weight": (d, cfg.classes), "head.bias": (cfg.classes,)})
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(cfg: ModelConfig, seed: int = 0, meta: bool = False, init_std: float = 0.02) -> ViTParams:
    """Truncated-normal(0, init_std) matrices and positions; zero biases and CLS; unit norm gains."""
    rng = np.random.default_rng(seed)
    params: ViTParams = {}
    for name, shape in param_shapes(cfg).items():
        if meta:
            data = nx._meta_array(shape)
        elif name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith(".bias") or name == "cls":
            data = np.zeros(shape)
        else:
            data = _trunc_normal(rng, shape, init_std)
        params[name] = Tensor(data, requires_grad=not meta, name=name)
    return params


# --------------------------------------------------------------------------
# forward


def attention(x: Tensor, params: ViTParams, prefix: str, heads: int) -> Tensor:
    """Multi-head self-attention, scale 1/sqrt(d/h).

    MACs per sample: 3Td^2 (qkv) + 2T^2d (scores, mixing) + Td^2 (output).
    """
    B, T, d = x.shape
    dh = d // heads
    qkv = nx.add(nx.matmul(x, params[prefix + "qkv.weight"]), params[prefix + "qkv.bias"])
    qkv = nx.transpose(nx.reshape(qkv, (B, T, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = (nx.select(qkv, i, 0) for i in range(3))
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = nx.softmax(scores, axis=-1)
    mixed = nx.matmul(weights, v)
    mixed = nx.reshape(nx.transpose(mixed, (0, 2, 1, 3)), (B, T, d))
    return nx.add(nx.matmul(mixed, params[prefix + "proj.weight"]), params[prefix + "proj.bias"])


def mlp(x: Tensor, params: ViTParams, prefix: str) -> Tensor:
    h = nx.gelu(nx.add(nx.matmul(x, params[prefix + "fc1.weight"]), params[prefix + "fc1.bias"]))
    return nx.add(nx.matmul(h, params[prefix + "fc2.weight"]), params[prefix + "fc2.bias"])


def forward(params: ViTParams, tokens: TokenBatch | Tensor, cfg: ModelConfig) -> Tensor:
    """Logits ``[B, K]`` for a token batch of any sequence length."""
    x = tokens.tokens if isinstance(tokens, TokenBatch) else tokens
    if x.ndim != 3 or x.shape[-1] != cfg.width:
        raise ShapeMismatch(f"tokens {x.shape} do not match width {cfg.width}")
    eps = cfg.ln_eps
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        x = nx.add(x, attention(nx.layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"], eps), params, p, cfg.heads))
        x = nx.add(x, mlp(nx.layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"], eps), params, p))
    cls = nx.select(nx.layer_norm(x, params["norm.gain"], params["norm.bias"], eps), 0, 1)
    return nx.add(nx.matmul(cls, params["head.weight"]), params["head.bias"])


def embed_images(params: ViTParams, images: ImageBatch | Tensor, cfg: ModelConfig) -> TokenBatch:
    patches = patchify(images, cfg.patch)
    return embed_tokens(patches, params["patch_proj"], params["pos"], params["cls"], grid=cfg.grid)


def predict(
    params: ViTParams,
    images: ImageBatch | Tensor,
    cfg: ModelConfig,
    eval_keep_rate: float | None = None,
    seed: int = 0,
    offset: int = 0,
) -> Tensor:
    """Class probabilities. All tokens are used unless ``eval_keep_rate`` is given.

    With a reduced rate each image gets its own Random keep set, keyed by
    ``(seed, offset + position in batch)``.
    """
    from .sampler import _check_rate, apply_dropout, eval_keep_sets

    with nx.no_grad():
        tokens = embed_images(params, images, cfg)
        if eval_keep_rate is not None:
            rate = _check_rate(eval_keep_rate)
            if rate < 1.0:
                rows, cols = cfg.grid
                sets = eval_keep_sets(rate, rows, cols, seed, tokens.tokens.shape[0], offset)
                tokens = apply_dropout(tokens, sets)
        return nx.softmax(forward(params, tokens, cfg), axis=-1)


# --------------------------------------------------------------------------
# checkpoint I/O

MAGIC = b"PDVT"
FORMAT_VERSION = 1


def dump_checkpoint(cfg: ModelConfig, params: ViTParams) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    meta = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    for name, t in params.items():
        raw = name.encode()
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def load_checkpoint_bytes(blob: bytes) -> tuple[ModelConfig, ViTParams]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedFile(f"checkpoint ends at byte {len(view)}, needed {pos + n}")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(view[:4]) != MAGIC:
        raise BadMagic("not a PDVT checkpoint")
    take(4)
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise BadMagic(f"unsupported checkpoint version {version}")
    (n_meta,) = struct.unpack("<I", take(4))
    cfg = ModelConfig.from_dict(json.loads(bytes(take(n_meta)).decode()))
    params: ViTParams = {}
    while pos < len(view):
        (n_name,) = struct.unpack("<I", take(4))
        name = bytes(take(n_name)).decode()
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = math.prod(shape)
        data = np.frombuffer(bytes(take(8 * count)), dtype="<f8").astype(np.float64).reshape(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return cfg, params


def save_checkpoint(path, cfg: ModelConfig, params: ViTParams) -> None:
    Path(path).write_bytes(dump_checkpoint(cfg, params))


def load_checkpoint(path) -> tuple[ModelConfig, ViTParams]:
    return load_checkpoint_bytes(Path(path).read_bytes())
