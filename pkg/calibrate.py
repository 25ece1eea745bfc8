"""Calibration run mirroring the acceptance flow; prints numbers + timings."""
import time

import numpy as np

from mimforge.backbone import BackboneConfig
from mimforge.data import generate_shapes_dataset
from mimforge.masking import BlockMaskConfig
from mimforge.pipeline import (
    FinetuneConfig, PretrainConfig, evaluate_elbo, finetune, pretrain_mim,
)
from mimforge.store import save_checkpoint
from mimforge.tokenizer import (
    TemperatureSchedule, TokenizerTrainConfig, tokenize, train_tokenizer,
)

t_all = time.perf_counter()
train = generate_shapes_dataset(512, 32, 3, 0)
evald = generate_shapes_dataset(128, 32, 3, 7919)
print(f"data: {time.perf_counter()-t_all:.1f}s")

# --- criterion 4: tokenizer stage 1 -----------------------------------------
t0 = time.perf_counter()
tok_cfg = TokenizerTrainConfig(seed=0)
tok, tok_metrics = train_tokenizer(train, tok_cfg)
tok.freeze()
t_tok = time.perf_counter() - t0
mses = [v for (_, _, n, v) in tok_metrics if n == "recon_mse"]
eval_imgs = np.stack([ex.image for ex in evald])
tokens = tokenize(eval_imgs, tok)
usage = np.unique(tokens).size
print(f"TOKENIZER: {t_tok/60:.1f} min; mse step0={mses[0]:.4f} last={mses[-1]:.4f} "
      f"ratio={mses[-1]/mses[0]:.3f}; codebook usage={usage}/128 ({usage/128:.0%})")

# --- criterion 5: MIM pre-training ------------------------------------------
pre_cfg = PretrainConfig(seed=0)
ckpt0, _ = pretrain_mim(train, tok, PretrainConfig(seed=0, steps=0))
t0 = time.perf_counter()
ckpt, metrics = pretrain_mim(train, tok, pre_cfg)
t_mim = time.perf_counter() - t0
losses = [m.value for m in metrics if m.metric == "loss"]
accs = [m.value for m in metrics if m.metric == "masked_top1"]
print(f"MIM: {t_mim/60:.1f} min; step0 loss={losses[0]:.4f} (ln128={np.log(128):.4f}); "
      f"final loss={np.mean(losses[-20:]):.4f}; top1 last20={np.mean(accs[-20:]):.4f} "
      f"(chance={1/128:.4f}, 10x={10/128:.4f})")
save_checkpoint(ckpt, "/tmp/mim.ckpt")
save_checkpoint(ckpt0, "/tmp/mim0.ckpt")

# --- criterion 7: elbo improvement ------------------------------------------
rep0 = evaluate_elbo(evald[:32], tok, ckpt0, BlockMaskConfig(), np.random.default_rng(5))
rep1 = evaluate_elbo(evald[:32], tok, ckpt, BlockMaskConfig(), np.random.default_rng(5))
print(f"ELBO: stage2 step0={rep0.stage2_term:.2f} step3k={rep1.stage2_term:.2f} "
      f"(improved={rep1.stage2_term > rep0.stage2_term}); stage1={rep1.stage1_term:.2f}")
cons = abs(rep1.stage2_term + rep1.mim_loss_per_token * rep1.mean_masked_count)
print(f"ELBO consistency |diff|={cons:.2e} rel={cons/abs(rep1.stage2_term):.2e}")

# --- criterion 6: fine-tune advantage ---------------------------------------
bb = BackboneConfig()
results = {}
t0 = time.perf_counter()
for arm, init in (("pretrained", ckpt), ("random", None)):
    results[arm] = []
    for seed in (0, 1, 2):
        cfg = FinetuneConfig(backbone=bb, num_classes=3, seed=seed)
        _, m = finetune(init, train, cfg, evald)
        acc = [r.value for r in m if r.metric == "accuracy"]
        final = acc[-1]
        epochs90 = next(i for i, v in enumerate(acc) if v >= 0.9 * final) + 1
        results[arm].append((epochs90, final))
        print(f"  {arm} seed {seed}: accs={[f'{v:.3f}' for v in acc]} -> epochs90={epochs90} final={final:.3f}")
t_ft = time.perf_counter() - t0
pre_e = np.mean([e for e, _ in results["pretrained"]])
rnd_e = np.mean([e for e, _ in results["random"]])
pre_f = np.mean([f for _, f in results["pretrained"]])
rnd_f = np.mean([f for _, f in results["random"]])
print(f"FINETUNE: {t_ft/60:.1f} min; epochs90 pre={pre_e:.2f} rand={rnd_e:.2f} "
      f"(need pre <= 0.5*rand={0.5*rnd_e:.2f}); final pre={pre_f:.3f} rand={rnd_f:.3f} "
      f"(need pre >= rand-0.01={rnd_f-0.01:.3f})")
print(f"TOTAL: {(time.perf_counter()-t_all)/60:.1f} min")
