"""Command-line entry point: one subcommand per pipeline stage, CSV metrics,
a resolved-config run manifest per invocation, attention-map rendering to
binary PGM, and convergence reports with figures.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import plots
from .backbone import BackboneConfig, attention_maps
from .data import (
    AugmentConfig,
    BinaryLayout,
    LabeledExample,
    generate_shapes_dataset,
    read_binary_dataset,
    write_binary_dataset,
)
from .masking import BlockMaskConfig
from .pipeline import (
    FinetuneConfig,
    MetricsRecord,
    PretrainConfig,
    backbone_from_checkpoint,
    evaluate,
    evaluate_elbo,
    finetune,
    pretrain_all_tokens,
    pretrain_mim,
    pretrain_pixel,
    run_ablation_suite,
)
from .store import (
    Checkpoint,
    RunConfig,
    apply_overrides,
    config_from_dict,
    load_checkpoint,
    load_config,
    save_checkpoint,
)
from .tokenizer import (
    TemperatureSchedule,
    TokenizerTrainConfig,
    tokenizer_from_checkpoint,
    tokenizer_to_checkpoint,
    train_tokenizer,
)

EVAL_SEED_OFFSET = 7919  # eval split draws from a disjoint seed stream

COMMANDS = (
    "gen-data",
    "train-tokenizer",
    "pretrain",
    "finetune",
    "eval",
    "elbo",
    "ablate",
    "attend",
    "report",
)


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# metrics / manifest plumbing
# ---------------------------------------------------------------------------


def write_metrics_csv(records: list[MetricsRecord], path: Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "split", "metric", "value"])
        for r in records:
            writer.writerow([r.step, r.split, r.metric, repr(float(r.value))])


def read_metrics_csv(path: str | Path) -> list[MetricsRecord]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"step", "split", "metric", "value"} <= set(reader.fieldnames):
            raise CommandError(f"{path}: expected columns step,split,metric,value")
        return [
            MetricsRecord(int(row["step"]), row["split"], row["metric"], float(row["value"]))
            for row in reader
        ]


def _write_manifest(cfg: RunConfig, out: Path) -> None:
    import json

    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# dataset resolution
# ---------------------------------------------------------------------------


def _load_datasets(cfg: RunConfig, need_seg: bool = False):
    d = cfg.data
    if d.source == "shapes":
        train = generate_shapes_dataset(d.count, d.size, d.num_classes, cfg.seed)
        evald = generate_shapes_dataset(d.eval_count, d.size, d.num_classes, cfg.seed + EVAL_SEED_OFFSET)
        return train, evald
    if need_seg:
        raise CommandError("segmentation tasks need the 'shapes' source (binary records carry no masks)")
    layout = BinaryLayout(height=d.size, width=d.size, channels=d.channels, num_classes=d.num_classes)
    records = read_binary_dataset(d.path, layout)
    if len(records) <= d.eval_count:
        raise CommandError(f"{d.path}: only {len(records)} records, need more than eval_count={d.eval_count}")
    return records[: -d.eval_count], records[-d.eval_count :]


def _pretrain_config(cfg: RunConfig) -> PretrainConfig:
    p = cfg.pretrain
    return PretrainConfig(
        backbone=_backbone_config(cfg),
        objective=p.objective,
        steps=p.steps,
        batch_size=p.batch_size,
        peak_lr=p.peak_lr,
        min_lr=p.min_lr,
        warmup_frac=p.warmup_frac,
        betas=p.betas,
        eps=p.eps,
        weight_decay=p.weight_decay,
        clip=p.clip,
        mask_strategy=cfg.mask.strategy,
        mask_cfg=BlockMaskConfig(
            ratio=cfg.mask.ratio, min_block=cfg.mask.min_block, aspect=cfg.mask.aspect, cap=cfg.mask.cap
        ),
        augment_cfg=AugmentConfig(
            crop_scale=cfg.augment.crop_scale,
            crop_aspect=cfg.augment.crop_aspect,
            flip_prob=cfg.augment.flip_prob,
            jitter=cfg.augment.jitter,
        ),
        seed=cfg.seed,
    )


def _backbone_config(cfg: RunConfig) -> BackboneConfig:
    b = cfg.backbone
    if b.resolution != cfg.data.size:
        raise CommandError(
            f"backbone.resolution ({b.resolution}) must equal data.size ({cfg.data.size})"
        )
    return BackboneConfig(
        layers=b.layers,
        hidden=b.hidden,
        heads=b.heads,
        ffn=b.ffn,
        patch=b.patch,
        drop_path=b.drop_path,
        resolution=b.resolution,
        channels=cfg.data.channels,
    )


def _finetune_config(cfg: RunConfig) -> FinetuneConfig:
    f = cfg.finetune
    return FinetuneConfig(
        task=f.task,
        backbone=_backbone_config(cfg),
        num_classes=cfg.data.num_classes,
        epochs=f.epochs,
        batch_size=f.batch_size,
        peak_lr=f.peak_lr,
        min_lr=f.min_lr,
        warmup_epochs=f.warmup_epochs,
        layer_decay=f.layer_decay,
        label_smoothing=f.label_smoothing,
        weight_decay=f.weight_decay,
        seed=cfg.seed,
    )


def _tokenizer_train_config(cfg: RunConfig) -> TokenizerTrainConfig:
    t = cfg.tokenizer
    return TokenizerTrainConfig(
        vocab_size=t.vocab_size,
        code_dim=t.code_dim,
        channels=t.channels,
        patch=cfg.backbone.patch,
        image_size=cfg.data.size,
        image_channels=cfg.data.channels,
        steps=t.steps,
        batch_size=t.batch_size,
        lr=t.lr,
        kl_weight=t.kl_weight,
        kl_ramp_frac=t.kl_ramp_frac,
        temperature=TemperatureSchedule(start=t.tau_start, end=t.tau_end, steps=t.steps),
        seed=cfg.seed,
    )


def _require(path_value: str | None, key: str) -> str:
    if not path_value:
        raise CommandError(f"config key {key} is required for this command")
    return path_value


# ---------------------------------------------------------------------------
# attention rendering / convergence report (cli-owned operations)
# ---------------------------------------------------------------------------


def write_pgm(gray: np.ndarray, path: Path) -> None:
    """Binary P5 portable graymap, maxval 255."""
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(gray.astype(np.uint8).tobytes())


def render_attention(
    ckpt: Checkpoint,
    image: np.ndarray,
    reference: str | int,
    layer: int,
    out_dir: Path,
) -> list[Path]:
    """Write one PGM per (head, reference patch): the reference's attention row
    over the patch grid, min-max normalized and nearest-neighbor upscaled to
    image resolution. Constant rows render as uniform mid-gray.
    """
    weights = backbone_from_checkpoint(ckpt)
    weights.freeze()
    cfg = weights.cfg
    maps = attention_maps(image, weights, layer)
    n = cfg.num_patches
    if reference == "all":
        refs = range(n)
    else:
        ref = int(reference)
        if not 0 <= ref < n:
            raise CommandError(f"reference patch {ref} out of range [0, {n})")
        refs = [ref]
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for head in range(maps.shape[0]):
        for ref in refs:
            row = maps[head, ref + 1, 1:]  # drop the sequence-start column
            grid = row.reshape(cfg.grid, cfg.grid)
            lo, hi = float(grid.min()), float(grid.max())
            if hi - lo < 1e-12:
                gray = np.full_like(grid, 128.0)
            else:
                gray = np.round((grid - lo) / (hi - lo) * 255.0)
            up = np.repeat(np.repeat(gray, cfg.patch, axis=0), cfg.patch, axis=1)
            path = out_dir / f"attn_layer{layer}_head{head}_ref{ref:03d}.pgm"
            write_pgm(up, path)
            written.append(path)
    return written


def convergence_report(
    metrics_paths: list[str | Path],
    metric: str = "accuracy",
    split: str = "eval",
    threshold: float = 0.9,
):
    """Align per-epoch metric columns across runs and compute epochs-to-X%.

    epochs-to-X% is the first epoch (1-based count) at which a run reaches
    `threshold` times its own final value.
    """
    if not metrics_paths:
        raise CommandError("need at least one metrics file")
    series: dict[str, list[tuple[int, float]]] = {}
    for path in metrics_paths:
        path = Path(path)
        records = read_metrics_csv(path)
        points = sorted(
            [(r.step, r.value) for r in records if r.split == split and r.metric == metric]
        )
        if not points:
            raise CommandError(f"{path}: no rows with split={split!r} metric={metric!r}")
        label = path.parent.name or path.stem
        if label in series:
            label = f"{label}#{len(series)}"
        series[label] = points
    names = list(series)
    depth = max(len(v) for v in series.values())
    table_rows: list[list[str]] = [["epoch", *names]]
    for i in range(depth):
        row = [str(i)]
        for name in names:
            pts = series[name]
            row.append(repr(pts[i][1]) if i < len(pts) else "")
        table_rows.append(row)
    summary_rows: list[list[str]] = []
    pct = int(round(threshold * 100))
    epochs_to: dict[str, int] = {}
    finals: dict[str, float] = {}
    for name in names:
        values = [v for _, v in series[name]]
        final = values[-1]
        finals[name] = final
        target = threshold * final
        reached = next(i for i, v in enumerate(values) if v >= target)
        epochs_to[name] = reached + 1
    summary_rows.append([f"epochs_to_{pct}pct", *[str(epochs_to[n]) for n in names]])
    summary_rows.append(["final", *[repr(finals[n]) for n in names]])
    return table_rows, summary_rows, series, epochs_to


# ---------------------------------------------------------------------------
# command implementations
# ---------------------------------------------------------------------------


def _cmd_gen_data(cfg: RunConfig, out: Path) -> list[MetricsRecord]:
    train, evald = _load_datasets(cfg)
    write_binary_dataset(out / "train.bin", [LabeledExample(ex.image, ex.label) for ex in train])
    write_binary_dataset(out / "eval.bin", [LabeledExample(ex.image, ex.label) for ex in evald])
    plots.render_sample_grid([ex.image for ex in train[:16]], out / "samples.png")
    counts = np.bincount([ex.label for ex in train], minlength=cfg.data.num_classes)
    records = [MetricsRecord(0, "train", "count", float(len(train)))]
    records += [
        MetricsRecord(0, "train", f"class_{c}_count", float(v)) for c, v in enumerate(counts)
    ]
    records.append(MetricsRecord(0, "eval", "count", float(len(evald))))
    return records


def _cmd_train_tokenizer(cfg: RunConfig, out: Path) -> list[MetricsRecord]:
    train, _ = _load_datasets(cfg)
    weights, raw = train_tokenizer(train, _tokenizer_train_config(cfg))
    ckpt = tokenizer_to_checkpoint(weights, cfg.to_dict(), seed=cfg.seed, step=cfg.tokenizer.steps)
    save_checkpoint(ckpt, out / "tokenizer.ckpt")
    return [MetricsRecord(*r) for r in raw]


def _cmd_pretrain(cfg: RunConfig, out: Path) -> list[MetricsRecord]:
    train, _ = _load_datasets(cfg)
    pcfg = _pretrain_config(cfg)
    if cfg.pretrain.objective == "pixel":
        ckpt, metrics = pretrain_pixel(train, pcfg)
    else:
        tok_path = _require(cfg.pretrain.tokenizer_checkpoint, "pretrain.tokenizer_checkpoint")
        tok = tokenizer_from_checkpoint(load_checkpoint(tok_path))
        runner = pretrain_mim if cfg.pretrain.objective == "mim" else pretrain_all_tokens
        ckpt, metrics = runner(train, tok, pcfg)
    save_checkpoint(ckpt, out / "checkpoint.ckpt")
    return metrics


def _cmd_finetune(cfg: RunConfig, out: Path) -> list[MetricsRecord]:
    need_seg = cfg.finetune.task == "segment"
    train, evald = _load_datasets(cfg, need_seg=need_seg)
    init = None
    if cfg.finetune.init_checkpoint:
        init = load_checkpoint(cfg.finetune.init_checkpoint)
    ckpt, metrics = finetune(init, train, _finetune_config(cfg), evald)
    save_checkpoint(ckpt, out / "checkpoint.ckpt")
    return metrics


def _cmd_eval(cfg: RunConfig, out: Path) -> list[MetricsRecord]:
    ckpt = load_checkpoint(_require(cfg.eval.checkpoint, "eval.checkpoint"))
    kind_task = {"backbone-classify": "classify", "backbone-segment": "segment"}.get(ckpt.kind)
    task = cfg.eval.task or kind_task
    if task is None:
        raise CommandError(f"checkpoint kind {ckpt.kind!r} has no evaluable task head")
    need_seg = task == "segment"
    train, evald = _load_datasets(cfg, need_seg=need_seg)
    dataset = evald if cfg.eval.split == "eval" else train
    return evaluate(ckpt, dataset, task)


def _cmd_elbo(cfg: RunConfig, out: Path) -> list[MetricsRecord]:
    ckpt = load_checkpoint(_require(cfg.elbo.checkpoint, "elbo.checkpoint"))
    tok = tokenizer_from_checkpoint(
        load_checkpoint(_require(cfg.elbo.tokenizer_checkpoint, "elbo.tokenizer_checkpoint"))
    )
    _, evald = _load_datasets(cfg)
    batch = evald[: cfg.elbo.batch_size]
    mask_cfg = BlockMaskConfig(
        ratio=cfg.mask.ratio, min_block=cfg.mask.min_block, aspect=cfg.mask.aspect, cap=cfg.mask.cap
    )
    rng = np.random.default_rng([cfg.seed, 31])
    report = evaluate_elbo(batch, tok, ckpt, mask_cfg, rng, mask_strategy=cfg.mask.strategy)
    step = ckpt.step
    return [
        MetricsRecord(step, "eval", "stage1_term", report.stage1_term),
        MetricsRecord(step, "eval", "stage2_term", report.stage2_term),
        MetricsRecord(step, "eval", "mim_loss_per_token", report.mim_loss_per_token),
        MetricsRecord(step, "eval", "mean_masked_count", report.mean_masked_count),
    ]


def _cmd_ablate(cfg: RunConfig, out: Path) -> list[MetricsRecord]:
    train, evald = _load_datasets(cfg, need_seg=True)
    tok_path = _require(cfg.pretrain.tokenizer_checkpoint, "pretrain.tokenizer_checkpoint")
    tok = tokenizer_from_checkpoint(load_checkpoint(tok_path))
    base = replace(_pretrain_config(cfg), steps=cfg.ablate.steps)
    fcfg = replace(_finetune_config(cfg), epochs=cfg.ablate.finetune_epochs)
    rows, traces = run_ablation_suite(train, evald, tok, base, fcfg)
    with open(out / "ablation.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["arm", "pretrain_loss", "classify_accuracy", "segment_miou"])
        for row in rows:
            writer.writerow(
                [row["arm"], repr(row["pretrain_loss"]), repr(row["classify_accuracy"]), repr(row["segment_miou"])]
            )
    plots.render_ablation_figure(rows, out / "ablation.png")
    records = []
    for arm, arm_metrics in traces.items():
        records += [
            MetricsRecord(m.step, arm, m.metric, m.value) for m in arm_metrics if m.metric == "loss"
        ]
    return records


def _cmd_attend(cfg: RunConfig, out: Path) -> list[MetricsRecord]:
    ckpt = load_checkpoint(_require(cfg.attend.checkpoint, "attend.checkpoint"))
    _, evald = _load_datasets(cfg)
    if cfg.attend.image_index >= len(evald):
        raise CommandError(f"attend.image_index {cfg.attend.image_index} >= eval size {len(evald)}")
    image = evald[cfg.attend.image_index].image
    layer = cfg.attend.layer if cfg.attend.layer is not None else ckpt.config["backbone"]["layers"]
    written = render_attention(ckpt, image, cfg.attend.reference, layer, out)
    return [MetricsRecord(0, "eval", "maps_written", float(len(written)))]


def _cmd_report(cfg: RunConfig, out: Path) -> list[MetricsRecord]:
    if not cfg.report.inputs:
        raise CommandError("config key report.inputs must list at least one metrics.csv")
    table_rows, summary_rows, series, epochs_to = convergence_report(
        list(cfg.report.inputs), cfg.report.metric, cfg.report.split, cfg.report.threshold
    )
    with open(out / "report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerows(table_rows)
        writer.writerows(summary_rows)
    plots.render_convergence_figure(series, cfg.report.metric, out / "convergence.png")
    return [
        MetricsRecord(0, "report", f"epochs_to_{int(round(cfg.report.threshold * 100))}pct_{name}", float(v))
        for name, v in epochs_to.items()
    ]


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train-tokenizer": _cmd_train_tokenizer,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "elbo": _cmd_elbo,
    "ablate": _cmd_ablate,
    "attend": _cmd_attend,
    "report": _cmd_report,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mimforge",
        description="Desk-scale masked-image-modeling pre-training toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", help="strict-JSON run config (defaults apply when omitted)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="dotted config override, e.g. mask.ratio=0.4 (repeatable)",
        )
    return parser


def run(argv: list[str]) -> int:
    """Execute one command; returns the process exit status."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints usage; exit 2 on bad flags
        return int(exc.code or 0)
    try:
        if args.config:
            import json

            with open(args.config, "r", encoding="utf-8") as f:
                text = f.read()
            document = json.loads(text) if text.strip() else {}
        else:
            document = {}
        document = apply_overrides(document, args.overrides)
        cfg = config_from_dict(document)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        records = _HANDLERS[args.command](cfg, out)
        write_metrics_csv(records, out / "metrics.csv")
        _write_manifest(cfg, out)
    except Exception as exc:
        print(f"mimforge {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
