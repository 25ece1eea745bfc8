"""Training loops and evaluation: masked-token pre-training with its two
ablation objectives, task fine-tuning with layer-wise lr decay, top-1/mIoU
evaluation, the two-term likelihood-bound report, and the five-arm ablation
harness.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import backbone as B
from . import tensor as T
from .data import AugmentConfig, augment, patchify
from .masking import BlockMaskConfig, MaskSet, blockwise_mask, random_mask
from .optim import AdamState, LrSchedule, adam_step, clip_global_norm, cosine_lr, layer_lr_multipliers
from .store import Checkpoint
from .tokenizer import TokenizerWeights, decode, tokenize
from .tokenizer import TrainingDiverged


@dataclass
class MetricsRecord:
    step: int
    split: str
    metric: str
    value: float


@dataclass
class PretrainConfig:
    backbone: B.BackboneConfig = field(default_factory=B.BackboneConfig)
    objective: str = "mim"  # mim | pixel | mim_all_positions
    steps: int = 3000
    batch_size: int = 16
    peak_lr: float = 1.5e-3
    min_lr: float = 1e-5
    warmup_frac: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    clip: float | None = 3.0
    mask_strategy: str = "blockwise"  # blockwise | random
    mask_cfg: BlockMaskConfig = field(default_factory=BlockMaskConfig)
    augment_cfg: AugmentConfig | None = field(default_factory=AugmentConfig)
    seed: int = 0

    def schedule(self) -> LrSchedule:
        warmup = min(max(1, round(self.warmup_frac * self.steps)), max(1, self.steps - 1))
        return LrSchedule(self.peak_lr, self.min_lr, warmup, max(2, self.steps))


@dataclass
class FinetuneConfig:
    task: str = "classify"  # classify | segment
    backbone: B.BackboneConfig = field(default_factory=B.BackboneConfig)  # for random init
    num_classes: int = 3
    epochs: int = 12
    batch_size: int = 32
    peak_lr: float = 1e-3
    min_lr: float = 1e-6
    warmup_epochs: int = 1
    layer_decay: float = 0.65
    label_smoothing: float = 0.1
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0


@dataclass
class ElboReport:
    stage1_term: float  # mean Gaussian reconstruction log-likelihood (-0.5 * sq err)
    stage2_term: float  # mean per-image sum of masked-token log-probs
    batch_size: int
    mim_loss_per_token: float
    mean_masked_count: float


def _patchify_batch(images: np.ndarray, patch: int) -> np.ndarray:
    b, h, w, c = images.shape
    gh, gw = h // patch, w // patch
    return (
        images.reshape(b, gh, patch, gw, patch, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, gh * gw, patch * patch * c)
    )


def _draw_masks(strategy, mask_cfg, grid, count_target, batch, rng) -> list[MaskSet]:
    if strategy == "blockwise":
        return [blockwise_mask(grid, grid, mask_cfg, rng) for _ in range(batch)]
    n = grid * grid
    return [random_mask(n, count_target, rng, grid=(grid, grid)) for _ in range(batch)]


def _gather_mask_rows(h: T.Tensor, masks: list[MaskSet]) -> tuple[T.Tensor, np.ndarray]:
    """Rows of the (B, N+1, D) output at masked patch positions, flattened."""
    b, s, d = h.shape
    flat_idx = np.concatenate([bi * s + m.flat + 1 for bi, m in enumerate(masks)])
    rows = T.take_rows(T.reshape(h, (b * s, d)), flat_idx)
    return rows, flat_idx


def _backbone_param_table(w: B.BackboneWeights, head_params: dict[str, T.Tensor]):
    names = list(w.params) + list(head_params)
    tensors = list(w.params.values()) + list(head_params.values())
    return names, tensors


def _snapshot(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _pretrain(dataset, tokenizer: TokenizerWeights | None, cfg: PretrainConfig):
    bb = cfg.backbone
    grid = bb.grid
    if tokenizer is not None and tokenizer.grid != grid:
        raise ValueError(
            f"tokenizer grid {tokenizer.grid}x{tokenizer.grid} does not align with "
            f"patch grid {grid}x{grid}"
        )
    rng = np.random.default_rng([cfg.seed, 11])
    weights = B.init_backbone(bb, rng)
    if cfg.objective == "pixel":
        head = B.init_mim_head(bb, bb.patch_dim)  # regression head, D -> P^2*C
    else:
        head = B.init_mim_head(bb, tokenizer.vocab_size)
    head_params = {"head.w": head.w, "head.b": head.b}
    names, params = _backbone_param_table(weights, head_params)
    state = AdamState.for_params(params)
    sched = cfg.schedule()
    images = np.stack([ex.image for ex in dataset]).astype(np.float32)
    n = grid * grid
    count_target = math.ceil(cfg.mask_cfg.ratio * n)
    metrics: list[MetricsRecord] = []

    for step in range(cfg.steps):
        idx = rng.integers(len(dataset), size=cfg.batch_size)
        if cfg.augment_cfg is not None:
            batch = np.stack([augment(images[i], cfg.augment_cfg, rng) for i in idx])
        else:
            batch = images[idx]
        if tokenizer is not None:
            tokens = tokenize(batch, tokenizer)  # (B, g, g), targets from the clean view
        masks = _draw_masks(cfg.mask_strategy, cfg.mask_cfg, grid, count_target, cfg.batch_size, rng)
        patches = _patchify_batch(batch, bb.patch)
        with T.Tape() as tape:
            seq = B.embed_batch(patches, weights, masks)
            h = B.encode(seq, weights, mode="train", rng=rng)
            if cfg.objective == "mim":
                rows, _ = _gather_mask_rows(h, masks)
                logits = T.add(T.matmul(rows, head.w), head.b)
                targets = np.concatenate(
                    [tokens[bi].reshape(-1)[m.flat] for bi, m in enumerate(masks)]
                )
                loss = T.cross_entropy_from_logits(logits, targets)
                top1 = float((logits.data.argmax(axis=1) == targets).mean())
            elif cfg.objective == "mim_all_positions":
                bsz, s, d = h.shape
                rows = T.reshape(T.narrow(h, 1, 1, n), (bsz * n, d))
                logits = T.add(T.matmul(rows, head.w), head.b)
                targets = tokens.reshape(-1)
                loss = T.cross_entropy_from_logits(logits, targets)
                top1 = float((logits.data.argmax(axis=1) == targets).mean())
            else:  # pixel regression on masked patches
                rows, _ = _gather_mask_rows(h, masks)
                preds = T.add(T.matmul(rows, head.w), head.b)
                targets = np.concatenate([patches[bi][m.flat] for bi, m in enumerate(masks)])
                diff = T.sub(preds, T.Tensor(targets))
                loss = T.mul(diff, diff).mean()
                top1 = float("nan")
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingDiverged(f"non-finite pre-training loss at step {step}")
            T.backward(loss, tape, params=params)
        grads = [p.grad for p in params]
        if cfg.clip is not None:
            grads = clip_global_norm(grads, cfg.clip)
        adam_step(
            params,
            grads,
            state,
            lr=cosine_lr(step + 1, sched),
            betas=cfg.betas,
            eps=cfg.eps,
            weight_decay=cfg.weight_decay,
        )
        metrics.append(MetricsRecord(step, "train", "loss", loss_val))
        if math.isfinite(top1):
            metrics.append(MetricsRecord(step, "train", "masked_top1", top1))

    tensors = {name: p.data for name, p in zip(names, params)}
    config = {
        "backbone": _snapshot(bb),
        "objective": cfg.objective,
        "vocab_size": None if tokenizer is None else tokenizer.vocab_size,
        "pretrain": {"steps": cfg.steps, "batch_size": cfg.batch_size, "seed": cfg.seed},
    }
    ckpt = Checkpoint(kind="backbone-mim", config=config, tensors=tensors, seed=cfg.seed, step=cfg.steps)
    return ckpt, metrics


def pretrain_mim(dataset, tokenizer: TokenizerWeights, cfg: PretrainConfig):
    """Predict the clean view's tokens at masked positions of the corrupted view."""
    return _pretrain(dataset, tokenizer, replace(cfg, objective="mim"))


def pretrain_pixel(dataset, cfg: PretrainConfig):
    """Ablation: regress raw patch pixel vectors at masked positions."""
    return _pretrain(dataset, None, replace(cfg, objective="pixel"))


def pretrain_all_tokens(dataset, tokenizer: TokenizerWeights, cfg: PretrainConfig):
    """Ablation: cross-entropy over every patch position, masked or not."""
    return _pretrain(dataset, tokenizer, replace(cfg, objective="mim_all_positions"))


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


def backbone_from_checkpoint(ckpt: Checkpoint) -> B.BackboneWeights:
    bb = B.BackboneConfig(**ckpt.config["backbone"])
    params = {
        name: T.Tensor(arr.copy(), requires_grad=True)
        for name, arr in ckpt.tensors.items()
        if not name.startswith("head.")
    }
    return B.BackboneWeights(cfg=bb, params=params)


def finetune(init: Checkpoint | None, dataset, cfg: FinetuneConfig, eval_dataset=None):
    """Attach a fresh zero-init task head and fine-tune everything with
    depth-decayed learning rates. ``init=None`` trains from random weights.

    The mask embedding stays frozen (nothing references it here).
    Intermediate fine-tuning is plain composition: pass a checkpoint that is
    itself a fine-tuning output.
    """
    rng = np.random.default_rng([cfg.seed, 23])
    if init is not None:
        weights = backbone_from_checkpoint(init)
        bb = weights.cfg
        if (bb.resolution, bb.patch) != (cfg.backbone.resolution, cfg.backbone.patch):
            raise ValueError(
                f"checkpoint backbone {bb.resolution}/{bb.patch} does not match "
                f"config {cfg.backbone.resolution}/{cfg.backbone.patch}"
            )
    else:
        weights = B.init_backbone(cfg.backbone, rng)
        bb = cfg.backbone
    if cfg.task == "classify":
        head = B.init_cls_head(bb, cfg.num_classes)
        kind = "backbone-classify"
        out_classes = cfg.num_classes
    elif cfg.task == "segment":
        out_classes = cfg.num_classes + 1  # background class 0
        head = B.init_seg_head(bb, out_classes)
        kind = "backbone-segment"
    else:
        raise ValueError(f"unknown task {cfg.task!r}")
    head_params = {"head.w": head.w, "head.b": head.b}
    names, params = _backbone_param_table(weights, head_params)
    # the mask embedding is unused by task heads; keep it out of the optimizer
    trainable = [(nm, p) for nm, p in zip(names, params) if nm != "embed.mask"]
    t_names = [nm for nm, _ in trainable]
    t_params = [p for _, p in trainable]
    mults = layer_lr_multipliers(bb.layers, cfg.layer_decay)
    scales = [mults[B.param_depth(nm, bb.layers)] for nm in t_names]
    state = AdamState.for_params(t_params)

    images = np.stack([ex.image for ex in dataset]).astype(np.float32)
    if cfg.task == "classify":
        labels = np.array([ex.label for ex in dataset], dtype=np.intp)
    else:
        labels = np.stack([ex.seg for ex in dataset]).astype(np.intp)
    steps_per_epoch = max(1, math.ceil(len(dataset) / cfg.batch_size))
    total_steps = max(2, cfg.epochs * steps_per_epoch)
    warmup = min(max(1, cfg.warmup_epochs * steps_per_epoch), total_steps - 1)
    sched = LrSchedule(cfg.peak_lr, cfg.min_lr, warmup, total_steps)
    metrics: list[MetricsRecord] = []
    step = 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for start in range(0, len(dataset), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = images[idx]
            patches = _patchify_batch(batch, bb.patch)
            with T.Tape() as tape:
                seq = B.embed_batch(patches, weights, None)
                h = B.encode(seq, weights, mode="train", rng=rng)
                if cfg.task == "classify":
                    pooled = T.narrow(h, 1, 1, h.shape[1] - 1).mean(axis=1)
                    logits = T.add(T.matmul(pooled, head.w), head.b)
                    loss = T.cross_entropy_from_logits(
                        logits, labels[idx], label_smoothing=cfg.label_smoothing
                    )
                else:
                    logits = B.segment(h, head, (bb.resolution, bb.resolution))
                    flat = T.reshape(logits, (-1, out_classes))
                    loss = T.cross_entropy_from_logits(flat, labels[idx].reshape(-1))
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    raise TrainingDiverged(f"non-finite fine-tuning loss at step {step}")
                T.backward(loss, tape, params=t_params)
            adam_step(
                t_params,
                [p.grad for p in t_params],
                state,
                lr=cosine_lr(step + 1, sched),
                betas=cfg.betas,
                eps=cfg.eps,
                weight_decay=cfg.weight_decay,
                lr_scales=scales,
            )
            epoch_losses.append(loss_val)
            step += 1
        metrics.append(MetricsRecord(epoch, "train", "loss", float(np.mean(epoch_losses))))
        probe = eval_dataset if eval_dataset is not None else dataset
        score = _score_task(weights, head, cfg.task, probe, out_classes)
        metric_name = "accuracy" if cfg.task == "classify" else "miou"
        metrics.append(MetricsRecord(epoch, "eval", metric_name, score))

    tensors = {nm: p.data for nm, p in zip(names, params)}
    config = {
        "backbone": _snapshot(bb),
        "task": cfg.task,
        "num_classes": out_classes if cfg.task == "segment" else cfg.num_classes,
        "init_kind": None if init is None else init.kind,
    }
    ckpt = Checkpoint(kind=kind, config=config, tensors=tensors, seed=cfg.seed, step=cfg.epochs)
    return ckpt, metrics


def _forward_eval(weights: B.BackboneWeights, images: np.ndarray, batch_size: int = 64):
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        patches = _patchify_batch(chunk, weights.cfg.patch)
        seq = B.embed_batch(patches, weights, None)
        yield B.encode(seq, weights, mode="eval")


def _score_task(weights, head, task, dataset, out_classes) -> float:
    images = np.stack([ex.image for ex in dataset]).astype(np.float32)
    if task == "classify":
        labels = np.array([ex.label for ex in dataset])
        preds = []
        for h in _forward_eval(weights, images):
            preds.append(B.classify(h, head).data.argmax(axis=1))
        return top1_accuracy(np.concatenate(preds), labels)
    labels = np.stack([ex.seg for ex in dataset])
    preds = []
    for h in _forward_eval(weights, images):
        logits = B.segment(h, head, labels.shape[1:3])
        preds.append(logits.data.argmax(axis=-1))
    return mean_iou(np.concatenate(preds), labels, out_classes)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def top1_accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    if predicted.shape != labels.shape:
        raise ValueError(f"predictions {predicted.shape} vs labels {labels.shape}")
    return float((predicted == labels).mean())


def iou_per_class(predicted: np.ndarray, labels: np.ndarray, num_classes: int) -> dict[int, float]:
    """IoU for every class present in the ground truth."""
    out = {}
    for c in range(num_classes):
        in_gt = labels == c
        if not in_gt.any():
            continue
        in_pred = predicted == c
        union = np.logical_or(in_gt, in_pred).sum()
        inter = np.logical_and(in_gt, in_pred).sum()
        out[c] = float(inter / union) if union else 0.0
    return out


def mean_iou(predicted: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    per_class = iou_per_class(predicted, labels, num_classes)
    return float(np.mean(list(per_class.values()))) if per_class else 0.0


def _head_from_checkpoint(ckpt: Checkpoint):
    w = T.Tensor(ckpt.tensors["head.w"].copy())
    b = T.Tensor(ckpt.tensors["head.b"].copy())
    if ckpt.kind == "backbone-classify":
        return B.ClsHead(w=w, b=b)
    if ckpt.kind == "backbone-segment":
        return B.SegHead(w=w, b=b)
    return B.MimHead(w=w, b=b)


def evaluate(ckpt: Checkpoint, dataset, task: str) -> list[MetricsRecord]:
    """Top-1 accuracy for classification, mIoU over present classes for segmentation."""
    kind_task = {"backbone-classify": "classify", "backbone-segment": "segment"}.get(ckpt.kind)
    if kind_task is None or task != kind_task:
        raise ValueError(
            f"task {task!r} does not match checkpoint head "
            f"{kind_task or ckpt.kind!r}"
        )
    weights = backbone_from_checkpoint(ckpt)
    weights.freeze()
    head = _head_from_checkpoint(ckpt)
    score = _score_task(weights, head, task, dataset, ckpt.config.get("num_classes"))
    name = "accuracy" if task == "classify" else "miou"
    return [MetricsRecord(ckpt.step, "eval", name, score)]


# ---------------------------------------------------------------------------
# likelihood-bound report
# ---------------------------------------------------------------------------


def evaluate_elbo(
    batch,
    tokenizer: TokenizerWeights,
    ckpt: Checkpoint,
    mask_cfg: BlockMaskConfig,
    rng: np.random.Generator,
    mask_strategy: str = "blockwise",
) -> ElboReport:
    """Two-term report: Gaussian reconstruction log-likelihood of the hard
    tokens, and the masked-token log-probability under the prediction head.
    """
    if ckpt.kind != "backbone-mim" or ckpt.config.get("objective") == "pixel":
        raise ValueError("the likelihood report needs a token-prediction checkpoint")
    weights = backbone_from_checkpoint(ckpt)
    weights.freeze()
    head = _head_from_checkpoint(ckpt)
    bb = weights.cfg
    grid = bb.grid
    n = grid * grid
    images = np.stack([ex.image for ex in batch]).astype(np.float32)
    bsz = len(images)
    tokens = tokenize(images, tokenizer)
    recon = decode(tokens, tokenizer)
    sq_err = ((images - recon) ** 2).reshape(bsz, -1).sum(axis=1, dtype=np.float64)
    stage1 = float(np.mean(-0.5 * sq_err))

    count_target = math.ceil(mask_cfg.ratio * n)
    masks = _draw_masks(mask_strategy, mask_cfg, grid, count_target, bsz, rng)
    patches = _patchify_batch(images, bb.patch)
    seq = B.embed_batch(patches, weights, masks)
    h = B.encode(seq, weights, mode="eval")
    rows, _ = _gather_mask_rows(h, masks)
    logits = (T.add(T.matmul(rows, head.w), head.b)).data.astype(np.float64)
    targets = np.concatenate([tokens[bi].reshape(-1)[m.flat] for bi, m in enumerate(masks)])
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted[np.arange(len(targets)), targets] - np.log(np.exp(shifted).sum(axis=1))
    total_masked = sum(len(m) for m in masks)
    return ElboReport(
        stage1_term=stage1,
        stage2_term=float(logp.sum() / bsz),
        batch_size=bsz,
        mim_loss_per_token=float(-logp.mean()),
        mean_masked_count=total_masked / bsz,
    )


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

ABLATION_ARMS = (
    ("full", "mim", "blockwise"),
    ("no_blockwise", "mim", "random"),
    ("pixel", "pixel", "blockwise"),
    ("pixel_no_blockwise", "pixel", "random"),
    ("all_tokens", "mim_all_positions", "blockwise"),
)


def run_ablation_suite(
    train_data,
    eval_data,
    tokenizer: TokenizerWeights,
    base_cfg: PretrainConfig,
    finetune_cfg: FinetuneConfig,
):
    """Run the five pre-training arms at one budget/seed, fine-tune each on
    both tasks, and emit (rows, per-arm loss traces). Orderings are reported,
    never asserted.
    """
    rows = []
    traces: dict[str, list[MetricsRecord]] = {}
    for arm, objective, strategy in ABLATION_ARMS:
        cfg = replace(base_cfg, objective=objective, mask_strategy=strategy)
        tok = None if objective == "pixel" else tokenizer
        ckpt, metrics = _pretrain(train_data, tok, cfg)
        traces[arm] = metrics
        losses = [m.value for m in metrics if m.metric == "loss"]
        final_loss = losses[-1] if losses else float("nan")
        cls_cfg = replace(finetune_cfg, task="classify", seed=base_cfg.seed)
        _, cls_metrics = _finetune_from(ckpt, train_data, cls_cfg, eval_data)
        seg_cfg = replace(finetune_cfg, task="segment", seed=base_cfg.seed)
        _, seg_metrics = _finetune_from(ckpt, train_data, seg_cfg, eval_data)
        rows.append(
            {
                "arm": arm,
                "pretrain_loss": final_loss,
                "classify_accuracy": _last_metric(cls_metrics, "accuracy"),
                "segment_miou": _last_metric(seg_metrics, "miou"),
            }
        )
    return rows, traces


def _finetune_from(ckpt, train_data, cfg, eval_data):
    cfg = replace(cfg, backbone=B.BackboneConfig(**ckpt.config["backbone"]))
    return finetune(ckpt, train_data, cfg, eval_data)


def _last_metric(metrics: list[MetricsRecord], name: str) -> float:
    vals = [m.value for m in metrics if m.metric == name]
    return vals[-1] if vals else float("nan")
