"""Vision Transformer backbone: patch embedding with mask substitution, pre-norm
encoder blocks with stochastic depth, token/class/segmentation heads, and
attention-map extraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import PatchGrid
from .masking import MaskSet


@dataclass
class BackboneConfig:
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    ffn: int = 512
    patch: int = 4
    drop_path: float = 0.1
    resolution: int = 32
    channels: int = 3

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if self.resolution % self.patch != 0:
            raise ValueError(f"resolution {self.resolution} not divisible by patch {self.patch}")

    @property
    def grid(self) -> int:
        return self.resolution // self.patch

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


@dataclass
class BackboneWeights:
    cfg: BackboneConfig
    params: dict[str, T.Tensor]

    def param_list(self) -> list[T.Tensor]:
        return list(self.params.values())

    def freeze(self) -> "BackboneWeights":
        for p in self.params.values():
            p.requires_grad = False
        return self


@dataclass
class MimHead:
    w: T.Tensor  # (D, |V|)
    b: T.Tensor  # (|V|,)


@dataclass
class ClsHead:
    w: T.Tensor  # (D, num_classes)
    b: T.Tensor


@dataclass
class SegHead:
    w: T.Tensor  # (D, num_seg_classes), applied per patch then upsampled
    b: T.Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal samples re-drawn until within 2 standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float32) -> BackboneWeights:
    d = cfg.hidden

    def proj(*shape):
        return T.Tensor(trunc_normal(rng, shape, dtype=dtype), requires_grad=True)

    def zeros(*shape):
        return T.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(*shape):
        return T.Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    params: dict[str, T.Tensor] = {
        "embed.patch": proj(cfg.patch_dim, d),
        "embed.pos": proj(cfg.num_patches, d),
        "embed.cls": proj(d),
        "embed.mask": proj(d),
    }
    for i in range(cfg.layers):
        pre = f"block{i}"
        params[f"{pre}.ln1.g"] = ones(d)
        params[f"{pre}.ln1.b"] = zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            params[f"{pre}.attn.{name}"] = proj(d, d)
        for name in ("bq", "bk", "bv", "bo"):
            params[f"{pre}.attn.{name}"] = zeros(d)
        params[f"{pre}.ln2.g"] = ones(d)
        params[f"{pre}.ln2.b"] = zeros(d)
        params[f"{pre}.ffn.w1"] = proj(d, cfg.ffn)
        params[f"{pre}.ffn.b1"] = zeros(cfg.ffn)
        params[f"{pre}.ffn.w2"] = proj(cfg.ffn, d)
        params[f"{pre}.ffn.b2"] = zeros(d)
    params["final_norm.g"] = ones(d)
    params["final_norm.b"] = zeros(d)
    return BackboneWeights(cfg=cfg, params=params)


def init_mim_head(cfg: BackboneConfig, vocab_size: int, dtype=np.float32) -> MimHead:
    return MimHead(
        w=T.Tensor(np.zeros((cfg.hidden, vocab_size), dtype=dtype), requires_grad=True),
        b=T.Tensor(np.zeros(vocab_size, dtype=dtype), requires_grad=True),
    )


def init_cls_head(cfg: BackboneConfig, num_classes: int, dtype=np.float32) -> ClsHead:
    return ClsHead(
        w=T.Tensor(np.zeros((cfg.hidden, num_classes), dtype=dtype), requires_grad=True),
        b=T.Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True),
    )


def init_seg_head(cfg: BackboneConfig, num_classes: int, dtype=np.float32) -> SegHead:
    return SegHead(
        w=T.Tensor(np.zeros((cfg.hidden, num_classes), dtype=dtype), requires_grad=True),
        b=T.Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True),
    )


def param_depth(name: str, layers: int) -> int:
    """Depth-group index for layer-wise lr decay: 0 embeddings, 1..L blocks, L+1 head."""
    if name.startswith("embed."):
        return 0
    if name.startswith("block"):
        return int(name[len("block") : name.index(".")]) + 1
    return layers + 1  # final norm and task heads


def _linear(x: T.Tensor, w: T.Tensor, b: T.Tensor | None) -> T.Tensor:
    shape = x.shape
    flat = T.reshape(x, (-1, shape[-1]))
    out = T.matmul(flat, w)
    if b is not None:
        out = T.add(out, b)
    return T.reshape(out, shape[:-1] + (w.shape[-1],))


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------


def embed_batch(
    patches: np.ndarray,
    w: BackboneWeights,
    masks: list[MaskSet | None] | None = None,
) -> T.Tensor:
    """Project (B, N, P^2*C) patches, substitute the mask embedding, prepend the
    sequence-start slot, and add position embeddings to patch rows."""
    cfg = w.cfg
    b, n, pd = patches.shape
    if n != cfg.num_patches or pd != cfg.patch_dim:
        raise ValueError(
            f"patch array {patches.shape} does not match {cfg.num_patches} patches "
            f"of dim {cfg.patch_dim}"
        )
    dt = np.dtype(w.params["embed.patch"].dtype)
    emb = _linear(T.Tensor(patches.astype(dt)), w.params["embed.patch"], None)
    if masks is not None:
        ind = np.zeros((b, n, 1), dtype=dt)
        for bi, mask in enumerate(masks):
            if mask is None:
                continue
            if mask.h * mask.w != n:
                raise ValueError(f"mask covers {mask.h * mask.w} positions, expected {n}")
            ind[bi, mask.flat, 0] = 1.0
        mask_rows = T.broadcast_to(T.reshape(w.params["embed.mask"], (1, 1, cfg.hidden)), emb.shape)
        emb = T.add(T.mul(emb, T.Tensor(1.0 - ind)), T.mul(mask_rows, T.Tensor(ind)))
    emb = T.add(emb, w.params["embed.pos"])
    cls_row = T.broadcast_to(T.reshape(w.params["embed.cls"], (1, 1, cfg.hidden)), (b, 1, cfg.hidden))
    return T.concat([cls_row, emb], axis=1)


def embed_sequence(grid: PatchGrid, w: BackboneWeights, mask: MaskSet | None = None) -> T.Tensor:
    """Single-image view of embed_batch; returns (N+1, D)."""
    out = embed_batch(grid.patches[None], w, [mask] if mask is not None else None)
    return T.reshape(out, out.shape[1:])


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


def encode(
    seq: T.Tensor,
    w: BackboneWeights,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    collect_attention: bool = False,
):
    """Run L pre-norm blocks plus the final norm.

    Train mode drops each residual branch per sample with the configured
    stochastic-depth rate and rescales survivors by 1/(1-p).
    Returns the encoded sequence, or (sequence, [per-layer attention arrays])
    when collect_attention is set.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and w.cfg.drop_path > 0 and rng is None:
        raise ValueError("train mode with stochastic depth needs an rng")
    squeeze = len(seq.shape) == 2
    x = T.reshape(seq, (1,) + seq.shape) if squeeze else seq
    cfg = w.cfg
    b, s, d = x.shape
    nh, hd = cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(hd)
    p = w.params
    attention: list[np.ndarray] = []

    def branch_gate() -> T.Tensor | None:
        if mode != "train" or cfg.drop_path <= 0:
            return None
        keep = (rng.random(b) >= cfg.drop_path).astype(np.dtype(x.dtype))
        return T.Tensor((keep / (1.0 - cfg.drop_path)).reshape(b, 1, 1))

    def residual(base: T.Tensor, delta: T.Tensor) -> T.Tensor:
        gate = branch_gate()
        if gate is not None:
            delta = T.mul(delta, gate)
        return T.add(base, delta)

    for i in range(cfg.layers):
        pre = f"block{i}"
        h = T.layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        q = _linear(h, p[f"{pre}.attn.wq"], p[f"{pre}.attn.bq"])
        k = _linear(h, p[f"{pre}.attn.wk"], p[f"{pre}.attn.bk"])
        v = _linear(h, p[f"{pre}.attn.wv"], p[f"{pre}.attn.bv"])
        q = T.transpose(T.reshape(q, (b, s, nh, hd)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(k, (b, s, nh, hd)), (0, 2, 1, 3))
        v = T.transpose(T.reshape(v, (b, s, nh, hd)), (0, 2, 1, 3))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale)
        probs = T.softmax(scores, axis=-1)
        if collect_attention:
            attention.append(probs.data.copy())
        ctx = T.matmul(probs, v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, s, d))
        x = residual(x, _linear(ctx, p[f"{pre}.attn.wo"], p[f"{pre}.attn.bo"]))
        h = T.layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        h = T.gelu(_linear(h, p[f"{pre}.ffn.w1"], p[f"{pre}.ffn.b1"]))
        x = residual(x, _linear(h, p[f"{pre}.ffn.w2"], p[f"{pre}.ffn.b2"]))
    x = T.layer_norm(x, p["final_norm.g"], p["final_norm.b"])
    if squeeze:
        x = T.reshape(x, x.shape[1:])
    return (x, attention) if collect_attention else x


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------


def mim_logits(h_last: T.Tensor, head: MimHead, positions: MaskSet) -> T.Tensor:
    """Token logits for each masked patch of a single (N+1, D) sequence."""
    s, _ = h_last.shape
    if positions.flat.size and positions.flat.max() + 1 >= s:
        raise IndexError(f"masked position {positions.flat.max()} out of range for {s - 1} patches")
    rows = T.take_rows(h_last, positions.flat + 1)  # +1 skips the sequence-start slot
    return T.add(T.matmul(rows, head.w), head.b)


def classify(h_last: T.Tensor, head: ClsHead) -> T.Tensor:
    """Mean-pool patch rows (excluding the start slot), project, softmax."""
    squeeze = len(h_last.shape) == 2
    x = T.reshape(h_last, (1,) + h_last.shape) if squeeze else h_last
    pooled = T.narrow(x, 1, 1, x.shape[1] - 1).mean(axis=1)
    probs = T.softmax(T.add(T.matmul(pooled, head.w), head.b), axis=-1)
    return T.reshape(probs, probs.shape[1:]) if squeeze else probs


def segment(h_last: T.Tensor, head: SegHead, out_dims: tuple[int, int]) -> T.Tensor:
    """Per-patch logits bilinearly upsampled to (H, W) per-pixel logits."""
    squeeze = len(h_last.shape) == 2
    x = T.reshape(h_last, (1,) + h_last.shape) if squeeze else h_last
    b, s, d = x.shape
    n = s - 1
    g = int(math.isqrt(n))
    if g * g != n:
        raise ValueError(f"{n} patches do not form a square grid")
    out_h, out_w = out_dims
    if out_h % g or out_w % g:
        raise ValueError(f"output dims {out_dims} not divisible by the {g}x{g} patch grid")
    patch_logits = T.add(T.matmul(T.reshape(T.narrow(x, 1, 1, n), (b * n, d)), head.w), head.b)
    grid = T.reshape(patch_logits, (b, g, g, head.w.shape[-1]))
    up = T.bilinear_upsample(grid, (out_h, out_w))
    return T.reshape(up, up.shape[1:]) if squeeze else up


def attention_maps(img: np.ndarray, w: BackboneWeights, layer: int) -> np.ndarray:
    """Post-softmax attention of one layer (1-indexed) in eval mode: (heads, N+1, N+1)."""
    cfg = w.cfg
    if not 1 <= layer <= cfg.layers:
        raise IndexError(f"layer must be in [1, {cfg.layers}], got {layer}")
    from .data import patchify

    grid = patchify(np.asarray(img, dtype=np.float32), cfg.patch)
    seq = embed_batch(grid.patches[None], w, None)
    _, attn = encode(seq, w, mode="eval", collect_attention=True)
    return attn[layer - 1][0]
