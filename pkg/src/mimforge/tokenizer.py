"""Discrete VAE image tokenizer: conv encoder to per-cell code logits, code
embedding decoder back to pixels, Gumbel-softmax relaxation for training, and
hard argmax tokenization for downstream targets.

One token cell corresponds to one backbone patch: the encoder's middle conv
uses kernel = stride = patch size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .optim import AdamState, adam_step
from .store import Checkpoint


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TemperatureSchedule:
    start: float = 1.0
    end: float = 0.0625
    steps: int = 2000

    def __post_init__(self):
        if not 0 < self.end <= self.start:
            raise ValueError(f"need start >= end > 0, got {self.start}, {self.end}")

    def value(self, step: int) -> float:
        """Exponential anneal from start to end over `steps`."""
        if self.steps <= 0:
            return self.end
        u = min(step, self.steps) / self.steps
        return self.start * (self.end / self.start) ** u


@dataclass
class TokenizerTrainConfig:
    vocab_size: int = 128
    code_dim: int = 64
    channels: tuple[int, int] = (32, 64)
    patch: int = 4
    image_size: int = 32
    image_channels: int = 3
    steps: int = 2000
    batch_size: int = 32
    lr: float = 3e-3
    kl_weight: float = 0.01
    kl_ramp_frac: float = 0.1
    temperature: TemperatureSchedule = field(default_factory=TemperatureSchedule)
    seed: int = 0


@dataclass
class TokenizerWeights:
    vocab_size: int
    code_dim: int
    channels: tuple[int, int]
    patch: int
    image_size: int
    image_channels: int
    params: dict[str, T.Tensor]

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    def param_list(self) -> list[T.Tensor]:
        return list(self.params.values())

    def freeze(self) -> "TokenizerWeights":
        for p in self.params.values():
            p.requires_grad = False
        return self


def init_tokenizer(cfg: TokenizerTrainConfig, rng: np.random.Generator) -> TokenizerWeights:
    c1, c2 = cfg.channels
    cin = cfg.image_channels
    p = cfg.patch
    v, d = cfg.vocab_size, cfg.code_dim

    def conv(kh, kw, ci, co):
        std = math.sqrt(2.0 / (kh * kw * ci))
        return T.Tensor(rng.normal(0, std, size=(kh, kw, ci, co)).astype(np.float32), requires_grad=True)

    def zeros(*shape):
        return T.Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    params = {
        "enc.conv1.w": conv(3, 3, cin, c1),
        "enc.conv1.b": zeros(c1),
        "enc.conv2.w": conv(p, p, c1, c2),
        "enc.conv2.b": zeros(c2),
        "enc.conv3.w": conv(1, 1, c2, v),
        "enc.conv3.b": zeros(v),
        "codebook": T.Tensor(rng.normal(0, 0.5, size=(v, d)).astype(np.float32), requires_grad=True),
        "dec.conv1.w": conv(3, 3, d, c2),
        "dec.conv1.b": zeros(c2),
        "dec.conv2.w": conv(3, 3, c2, c1),
        "dec.conv2.b": zeros(c1),
        "dec.out.w": conv(1, 1, c1, p * p * cin),
        "dec.out.b": zeros(p * p * cin),
    }
    return TokenizerWeights(
        vocab_size=v,
        code_dim=d,
        channels=cfg.channels,
        patch=p,
        image_size=cfg.image_size,
        image_channels=cin,
        params=params,
    )


def _as_batch(img: np.ndarray) -> tuple[np.ndarray, bool]:
    if img.ndim == 3:
        return img[None], True
    if img.ndim == 4:
        return img, False
    raise ValueError(f"expected (H, W, C) or (B, H, W, C) image array, got shape {img.shape}")


def encode_logits(img: np.ndarray, w: TokenizerWeights) -> T.Tensor:
    """Per-cell code logits on the patch-aligned grid; (h, w, V) or (B, h, w, V)."""
    batch, squeeze = _as_batch(np.asarray(img, dtype=np.float32))
    if batch.shape[1] != w.image_size or batch.shape[2] != w.image_size:
        raise ValueError(
            f"image dims {batch.shape[1]}x{batch.shape[2]} do not match the "
            f"configured {w.image_size}x{w.image_size}"
        )
    if batch.shape[3] != w.image_channels:
        raise ValueError(f"expected {w.image_channels} channels, got {batch.shape[3]}")
    p = w.params
    h = T.relu(T.conv2d(T.Tensor(batch), p["enc.conv1.w"], p["enc.conv1.b"], stride=1, padding=1))
    h = T.relu(T.conv2d(h, p["enc.conv2.w"], p["enc.conv2.b"], stride=w.patch, padding=0))
    logits = T.conv2d(h, p["enc.conv3.w"], p["enc.conv3.b"], stride=1, padding=0)
    return T.reshape(logits, logits.shape[1:]) if squeeze else logits


def gumbel_softmax(logits: T.Tensor, tau: float, rng: np.random.Generator) -> T.Tensor:
    """softmax((logits + g) / tau) with g ~ Gumbel(0, 1); differentiable in logits."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    u = rng.random(size=logits.shape, dtype=np.float64)
    noise = -np.log(-np.log(u + 1e-12) + 1e-12)
    noisy = T.add(logits, T.Tensor(noise.astype(np.dtype(logits.dtype))))
    return T.softmax(T.scale(noisy, 1.0 / tau), axis=-1)


def one_hot_codes(tokens: np.ndarray, vocab_size: int) -> np.ndarray:
    eye = np.eye(vocab_size, dtype=np.float32)
    return eye[np.asarray(tokens, dtype=np.intp)]


def decode_tensor(codes: T.Tensor, w: TokenizerWeights) -> T.Tensor:
    """Soft (or one-hot) codes (..., h, w, V) to a raw image tensor."""
    shape = codes.shape
    squeeze = len(shape) == 3
    if squeeze:
        codes = T.reshape(codes, (1,) + shape)
    b, gh, gw, v = codes.shape
    if (gh, gw) != (w.grid, w.grid) or v != w.vocab_size:
        raise ValueError(
            f"code grid {gh}x{gw}x{v} does not match the configured "
            f"{w.grid}x{w.grid}x{w.vocab_size}"
        )
    p = w.params
    emb = T.matmul(T.reshape(codes, (b * gh * gw, v)), p["codebook"])
    x = T.reshape(emb, (b, gh, gw, w.code_dim))
    x = T.relu(T.conv2d(x, p["dec.conv1.w"], p["dec.conv1.b"], stride=1, padding=1))
    x = T.relu(T.conv2d(x, p["dec.conv2.w"], p["dec.conv2.b"], stride=1, padding=1))
    x = T.conv2d(x, p["dec.out.w"], p["dec.out.b"], stride=1, padding=0)
    # depth-to-space: one cell expands to one patch
    pp = w.patch
    c = w.image_channels
    x = T.reshape(x, (b, gh, gw, pp, pp, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (b, gh * pp, gw * pp, c))
    return T.reshape(x, x.shape[1:]) if squeeze else x


def decode(codes, w: TokenizerWeights) -> np.ndarray:
    """Decode soft codes or an integer token grid to an image in [0, 1]."""
    if isinstance(codes, T.Tensor):
        soft = codes
    else:
        arr = np.asarray(codes)
        if not np.issubdtype(arr.dtype, np.integer):
            soft = T.Tensor(arr.astype(np.float32))
        else:
            soft = T.Tensor(one_hot_codes(arr, w.vocab_size))
    return np.clip(decode_tensor(soft, w).data, 0.0, 1.0)


def tokenize(img: np.ndarray, w: TokenizerWeights) -> np.ndarray:
    """Most-likely token per cell; ties break toward the lowest index."""
    logits = encode_logits(img, w)
    return np.argmax(logits.data, axis=-1).astype(np.int32)


def train_tokenizer(dataset, cfg: TokenizerTrainConfig):
    """Stage-1 training: reconstruction MSE plus a ramped KL-to-uniform penalty.

    Returns (weights, metrics) where metrics is a list of
    (step, split, name, value) records.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    rng = np.random.default_rng([cfg.seed, 101])
    weights = init_tokenizer(cfg, rng)
    params = weights.param_list()
    state = AdamState.for_params(params)
    images = np.stack([ex.image for ex in dataset]).astype(np.float32)
    log_v = math.log(cfg.vocab_size)
    ramp_steps = max(1, int(cfg.kl_ramp_frac * cfg.steps))
    metrics: list[tuple[int, str, str, float]] = []

    for step in range(cfg.steps):
        idx = rng.integers(len(dataset), size=cfg.batch_size)
        batch = images[idx]
        tau = cfg.temperature.value(step)
        kl_w = cfg.kl_weight * min(1.0, (step + 1) / ramp_steps)
        with T.Tape() as tape:
            logits = encode_logits(batch, weights)
            codes = gumbel_softmax(logits, tau, rng)
            recon = decode_tensor(codes, weights)
            diff = T.sub(recon, T.Tensor(batch))
            mse = T.mul(diff, diff).mean()
            flat = T.reshape(logits, (-1, cfg.vocab_size))
            usage = T.softmax(flat, axis=-1).mean(axis=0)
            kl = T.add(T.mul(usage, T.log(T.add(usage, 1e-12))).sum(), log_v)
            loss = T.add(mse, T.scale(kl, kl_w))
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingDiverged(f"non-finite tokenizer loss at step {step}")
            T.backward(loss, tape, params=params)
        adam_step(params, [p.grad for p in params], state, lr=cfg.lr)
        metrics.append((step, "train", "recon_mse", mse.item()))
        metrics.append((step, "train", "kl_uniform", kl.item()))
        metrics.append((step, "train", "loss", loss_val))
    return weights, metrics


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def tokenizer_to_checkpoint(w: TokenizerWeights, config: dict, seed: int, step: int) -> Checkpoint:
    arch = {
        "vocab_size": w.vocab_size,
        "code_dim": w.code_dim,
        "channels": list(w.channels),
        "patch": w.patch,
        "image_size": w.image_size,
        "image_channels": w.image_channels,
    }
    cfg = dict(config)
    cfg["tokenizer_arch"] = arch
    tensors = {name: p.data for name, p in w.params.items()}
    return Checkpoint(kind="tokenizer", config=cfg, tensors=tensors, seed=seed, step=step)


def tokenizer_from_checkpoint(ckpt: Checkpoint) -> TokenizerWeights:
    if ckpt.kind != "tokenizer":
        raise ValueError(f"expected a tokenizer checkpoint, got kind {ckpt.kind!r}")
    arch = ckpt.config["tokenizer_arch"]
    params = {name: T.Tensor(arr.copy(), requires_grad=False) for name, arr in ckpt.tensors.items()}
    return TokenizerWeights(
        vocab_size=arch["vocab_size"],
        code_dim=arch["code_dim"],
        channels=tuple(arch["channels"]),
        patch=arch["patch"],
        image_size=arch["image_size"],
        image_channels=arch["image_channels"],
        params=params,
    )
