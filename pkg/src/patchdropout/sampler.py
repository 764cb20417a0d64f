"""Which patches survive a training step.

Every draw is a pure function of ``(seed, step, sample)``: the generator is
rebuilt from those keys each time, so runs can be resumed at any step without
carrying RNG state around.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .errors import DoubleDropout, IntervalInactive, InvalidRate, ShapeMismatch
from .tokenizer import TokenBatch

STRATEGIES = ("random", "uniform", "structured", "cropping")

# stream tags keep the rate draw and the index draws independent
_KEEP_STREAM = 0
_RATE_STREAM = 1
_EVAL_STREAM = 2


def _check_rate(r: float) -> float:
    r = float(r)
    if not (0.0 < r <= 1.0) or math.isnan(r):
        raise InvalidRate(f"keep rate must lie in (0, 1], got {r}")
    return r


def kept_count(rate: float, n: int) -> int:
    """max(1, floor(rate * n)); the epsilon absorbs products like 0.29 * 100."""
    return max(1, math.floor(_check_rate(rate) * n + 1e-9))


@dataclass(frozen=True)
class SamplingSpec:
    strategy: str = "random"
    keep_rate: float | None = 1.0
    rate_interval: tuple[float, float] | None = None
    seed: int = 0
    grid_rows: int = 1
    grid_cols: int = 1
    per_sample: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if (self.keep_rate is None) == (self.rate_interval is None):
            raise ValueError("exactly one of keep_rate and rate_interval must be set")
        if self.keep_rate is not None:
            _check_rate(self.keep_rate)
        else:
            lo, hi = self.rate_interval
            _check_rate(lo)
            _check_rate(hi)
            if lo > hi:
                raise InvalidRate(f"rate interval [{lo}, {hi}] has lo > hi")
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ValueError("grid extents must be positive")

    @property
    def num_patches(self) -> int:
        return self.grid_rows * self.grid_cols

    def with_grid(self, rows: int, cols: int) -> "SamplingSpec":
        return replace(self, grid_rows=rows, grid_cols=cols)


@dataclass(frozen=True)
class KeepSet:
    indices: np.ndarray = field(repr=False)
    num_patches: int = 1

    @property
    def effective_rate(self) -> float:
        return len(self.indices) / self.num_patches

    def __len__(self) -> int:
        return len(self.indices)


def _rng(seed: int, step: int, sample: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(step), int(sample), stream])


def draw_rate(spec: SamplingSpec, step: int) -> float:
    """Keep rate for ``step`` drawn uniformly from ``spec.rate_interval``."""
    if spec.rate_interval is None:
        raise IntervalInactive("draw_rate needs an active rate_interval")
    lo, hi = spec.rate_interval
    if lo == hi:
        return float(lo)
    return float(_rng(spec.seed, step, 0, _RATE_STREAM).uniform(lo, hi))


def step_rate(spec: SamplingSpec, step: int) -> float:
    """The keep rate in force at ``step`` for either mode."""
    return float(spec.keep_rate) if spec.rate_interval is None else draw_rate(spec, step)


# --------------------------------------------------------------------------
# strategies


def _random(rng, rows, cols, k):
    return rng.choice(rows * cols, size=k, replace=False)


def _even_positions(count: int, extent: int, phase: float) -> np.ndarray:
    # distinct because extent / count >= 1
    return np.floor((np.arange(count) + phase) * extent / count).astype(np.int64)


def _lattice_shape(k: int, rows: int, cols: int, rate: float) -> tuple[int, int]:
    a = min(rows, max(1, math.ceil(math.sqrt(rate) * rows - 1e-9)))
    while math.ceil(k / a) > cols:
        a += 1
    return a, math.ceil(k / a)


def _thin(cells: np.ndarray, k: int) -> np.ndarray:
    """Deterministically keep k of the given cells, spread evenly."""
    if len(cells) == k:
        return cells
    pick = np.floor(np.arange(k) * len(cells) / k).astype(np.int64)
    return cells[pick]


def _uniform(rng, rows, cols, k, rate):
    a, b = _lattice_shape(k, rows, cols, rate)
    r_idx = _even_positions(a, rows, rng.uniform())
    c_idx = _even_positions(b, cols, rng.uniform())
    cells = (r_idx[:, None] * cols + c_idx[None, :]).ravel()
    return _thin(cells, k)


def _structured(rng, rows, cols, k, rate):
    a, b = _lattice_shape(k, rows, cols, rate)
    r_idx = np.sort(rng.choice(rows, size=a, replace=False))
    c_idx = np.sort(rng.choice(cols, size=b, replace=False))
    cells = (r_idx[:, None] * cols + c_idx[None, :]).ravel()
    if len(cells) > k:
        cells = rng.choice(cells, size=k, replace=False)
    return cells


def _cropping(rng, rows, cols, k):
    h = min(rows, max(1, math.ceil(math.sqrt(k) - 1e-9)))
    while math.ceil(k / h) > cols:
        h += 1
    w = math.ceil(k / h)
    top = int(rng.integers(0, rows - h + 1))
    left = int(rng.integers(0, cols - w + 1))
    r_idx = np.arange(top, top + h)
    c_idx = np.arange(left, left + w)
    # row-major fill: the last row of the rectangle is partial when h*w > k
    return (r_idx[:, None] * cols + c_idx[None, :]).ravel()[:k]


def draw_keep_set(spec: SamplingSpec, step: int, sample: int = 0, rate: float | None = None) -> KeepSet:
    """Kept patch indices for one image at one step.

    ``rate`` overrides ``spec.keep_rate`` (used with interval mode, where the
    rate is drawn once per step and shared by the batch).
    """
    n = spec.num_patches
    if rate is None:
        rate = step_rate(spec, step)
    k = kept_count(rate, n)
    if k == n:
        return KeepSet(np.arange(n), n)
    rng = _rng(spec.seed, step, sample, _KEEP_STREAM)
    rows, cols = spec.grid_rows, spec.grid_cols
    if spec.strategy == "random":
        idx = _random(rng, rows, cols, k)
    elif spec.strategy == "uniform":
        idx = _uniform(rng, rows, cols, k, rate)
    elif spec.strategy == "structured":
        idx = _structured(rng, rows, cols, k, rate)
    else:
        idx = _cropping(rng, rows, cols, k)
    return KeepSet(np.sort(np.asarray(idx, dtype=np.int64)), n)


def draw_batch(spec: SamplingSpec, step: int, batch: int, rate: float | None = None) -> list[KeepSet]:
    """One KeepSet per image, or one shared set when ``spec.per_sample`` is off."""
    if rate is None:
        rate = step_rate(spec, step)
    if not spec.per_sample:
        shared = draw_keep_set(spec, step, 0, rate)
        return [shared] * batch
    return [draw_keep_set(spec, step, i, rate) for i in range(batch)]


def eval_keep_sets(rate: float, rows: int, cols: int, seed: int, batch: int, offset: int = 0) -> list[KeepSet]:
    """Random keep sets for reduced-token evaluation, one per image."""
    n = rows * cols
    k = kept_count(rate, n)
    out = []
    for i in range(batch):
        if k == n:
            out.append(KeepSet(np.arange(n), n))
            continue
        rng = _rng(seed, offset + i, 0, _EVAL_STREAM)
        out.append(KeepSet(np.sort(rng.choice(n, size=k, replace=False)), n))
    return out


def apply_dropout(tokens: TokenBatch, keep: KeepSet | list[KeepSet]) -> TokenBatch:
    """Keep the CLS token plus the selected patch tokens, in ascending order."""
    if tokens.kept_indices is not None:
        raise DoubleDropout("tokens have already been subsampled")
    if not tokens.has_cls:
        raise ShapeMismatch("apply_dropout expects a CLS token in slot 0")
    B = tokens.tokens.shape[0]
    sets = [keep] * B if isinstance(keep, KeepSet) else list(keep)
    if len(sets) != B:
        raise ShapeMismatch(f"{len(sets)} keep sets for a batch of {B}")
    lengths = {len(s) for s in sets}
    if len(lengths) != 1:
        raise ShapeMismatch("keep sets within one batch must have equal size")
    kept = np.stack([np.asarray(s.indices, dtype=np.int64) for s in sets])
    rows = np.concatenate([np.zeros((B, 1), dtype=np.int64), kept + 1], axis=1)
    if all(s is sets[0] for s in sets):
        rows = rows[0]
    out = nx.gather_rows(tokens.tokens, rows)
    return TokenBatch(out, tokens.grid_rows, tokens.grid_cols, True, kept)
