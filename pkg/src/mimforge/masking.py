"""Blockwise masking over a patch grid, its random baseline, and mask application."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class BlockMaskConfig:
    ratio: float = 0.4
    min_block: int = 16
    aspect: tuple[float, float] = (0.3, 1.0 / 0.3)
    cap: int | None = None  # hard upper bound on |M|; disabled by default

    def __post_init__(self):
        # ratio 0 is a boundary used by the predict-all-positions ablation:
        # it produces an empty mask set
        if not 0 <= self.ratio < 1:
            raise ValueError(f"ratio must be in [0, 1), got {self.ratio}")
        lo, hi = self.aspect
        if not math.isclose(lo * hi, 1.0, rel_tol=1e-9):
            raise ValueError(f"aspect bounds must be reciprocal-symmetric, got {self.aspect}")
        if self.min_block < 1:
            raise ValueError(f"min_block must be >= 1, got {self.min_block}")
        if self.cap is not None and self.cap < 1:
            raise ValueError(f"cap must be >= 1 when set, got {self.cap}")


@dataclass
class MaskSet:
    h: int
    w: int
    flat: np.ndarray  # sorted unique flat indices (i * w + j)

    def __post_init__(self):
        self.flat = np.unique(np.asarray(self.flat, dtype=np.int64))
        if self.flat.size and (self.flat[0] < 0 or self.flat[-1] >= self.h * self.w):
            raise ValueError(f"mask positions out of range for a {self.h}x{self.w} grid")

    def __len__(self) -> int:
        return int(self.flat.size)

    @property
    def positions(self) -> np.ndarray:
        """(count, 2) array of (i, j) grid coordinates."""
        return np.stack([self.flat // self.w, self.flat % self.w], axis=1)

    def indicator(self) -> np.ndarray:
        """Float vector of length h*w with 1.0 at masked positions."""
        ind = np.zeros(self.h * self.w, dtype=np.float32)
        ind[self.flat] = 1.0
        return ind

    def bool_grid(self) -> np.ndarray:
        return self.indicator().reshape(self.h, self.w).astype(bool)


@dataclass(frozen=True)
class BlockDraw:
    """Provenance of one drawn block, for statistical verification."""

    size: int
    ratio: float
    a: int  # rows after rounding and clamping
    b: int  # cols after rounding and clamping
    top: int
    left: int


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def block_dims(size: int, ratio: float, h: int, w: int) -> tuple[int, int]:
    """Block height/width for a drawn (size, aspect) pair: a = round(sqrt(s*r))."""
    a = min(max(_round_half_up(math.sqrt(size * ratio)), 1), h)
    b = min(max(_round_half_up(math.sqrt(size / ratio)), 1), w)
    return a, b


def blockwise_mask(
    h: int,
    w: int,
    cfg: BlockMaskConfig,
    rng: np.random.Generator,
    return_blocks: bool = False,
):
    """Union random rectangles until the target mask ratio is met.

    Block sizes are drawn uniformly from [min_block, remaining budget] (the
    bounds collapse to min_block once the budget dips below it), aspect ratios
    uniformly from the configured real interval. An optional hard cap trims the
    final block, in reverse row-major order, so |M| never exceeds it.
    """
    n = h * w
    target = math.ceil(cfg.ratio * n)
    if cfg.cap is not None:
        target = min(target, cfg.cap)
    masked = np.zeros((h, w), dtype=bool)
    count = 0
    blocks: list[BlockDraw] = []
    while count < target:
        budget = cfg.ratio * n - count
        s_hi = max(cfg.min_block, math.floor(budget))
        s = int(rng.integers(cfg.min_block, s_hi + 1))
        r = float(rng.uniform(cfg.aspect[0], cfg.aspect[1]))
        a, b = block_dims(s, r, h, w)
        top = int(rng.integers(0, h - a + 1))
        left = int(rng.integers(0, w - b + 1))
        fresh = ~masked[top : top + a, left : left + b]
        masked[top : top + a, left : left + b] = True
        count += int(fresh.sum())
        blocks.append(BlockDraw(size=s, ratio=r, a=a, b=b, top=top, left=left))
        if cfg.cap is not None and count > cfg.cap:
            # un-mask the newest cells (reverse row-major) down to the cap
            ii, jj = np.nonzero(fresh)
            over = count - cfg.cap
            masked[top + ii[-over:], left + jj[-over:]] = False
            count = cfg.cap
    mask = MaskSet(h=h, w=w, flat=np.flatnonzero(masked.reshape(-1)))
    return (mask, blocks) if return_blocks else mask


def random_mask(
    n: int, count: int, rng: np.random.Generator, grid: tuple[int, int] | None = None
) -> MaskSet:
    """Uniform sample of `count` positions without replacement."""
    if count > n:
        raise ValueError(f"cannot mask {count} of {n} positions")
    h, w = grid if grid is not None else (1, n)
    if h * w != n:
        raise ValueError(f"grid {h}x{w} does not hold {n} positions")
    flat = rng.choice(n, size=count, replace=False)
    return MaskSet(h=h, w=w, flat=flat)


def apply_mask(embeddings: T.Tensor, mask: MaskSet, e_mask: T.Tensor) -> T.Tensor:
    """Replace masked rows of an (N, D) sequence with the mask embedding."""
    n, d = embeddings.shape
    if mask.h * mask.w != n:
        raise ValueError(f"mask covers {mask.h * mask.w} positions but sequence has {n}")
    if e_mask.shape != (d,):
        raise ValueError(f"mask embedding has shape {e_mask.shape}, expected ({d},)")
    ind = T.Tensor(mask.indicator().astype(embeddings.dtype).reshape(n, 1))
    keep = T.Tensor((1.0 - ind.data).astype(embeddings.dtype))
    replaced = T.mul(T.broadcast_to(T.reshape(e_mask, (1, d)), (n, d)), ind)
    return T.add(T.mul(embeddings, keep), replaced)
