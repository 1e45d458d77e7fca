"""
Pretraining on other prompts
============================

With few in-domain essays, the model first learns from every essay of the
other prompts, with labels scaled to [0, 1] and plain MSE, then fine-tunes
on the target prompt. The synthetic source and target prompts share the
marker rule but use different filler words.

Takes about two minutes on one CPU core.
"""

import numpy as np

from msaes.corpus import out_of_domain_pool
from msaes.encoder import EncoderConfig
from msaes.multiscale import MultiScaleConfig
from msaes.synthetic import synthetic_vocab, transfer_corpus
from msaes.trainer import ModelFactory, TrainingConfig, encode_set, fit_fold, predict_normalized, pretrain

vocab = synthetic_vocab()
essays, specs = transfer_corpus(n_source=160, n_target=48, seed=0)
ms_cfg = MultiScaleConfig(scales=(20,), n_p=128, doc_len=64)
enc_cfg = EncoderConfig(len(vocab), d=32, n_layers=2, n_heads=4, dropout_rate=0.1)
cfg = TrainingConfig(learning_rate=1e-3, rdrop_coeff=0.0, freeze="none", epochs=15, pretrain_epochs=40)

pool = out_of_domain_pool(essays, target_prompt=2, prompt_specs=specs)
pool_set = encode_set([e for e, _ in pool], vocab, ms_cfg, specs, labels=[y for _, y in pool])
target = encode_set([e for e in essays if e.prompt_id == 2], vocab, ms_cfg, specs)
train, dev = target.take(range(24)), target.take(range(24, 48))
print(f"{len(pool_set)} out-of-domain essays, {len(train)} in-domain training essays")

for staged in (False, True):
    model = ModelFactory(enc_cfg, ms_cfg, seed=0, freeze="none")()
    if staged:
        losses = pretrain(model, pool_set, cfg, vocab.pad_id)
        print(f"pretraining loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    result = fit_fold(model, train, dev, None, specs[2], cfg, vocab.pad_id)
    mse = float(np.mean((predict_normalized(model, dev, vocab.pad_id) - dev.labels) ** 2))
    label = "pretrain + fine-tune" if staged else "fine-tune only"
    print(f"{label:22s} dev MSE {mse:.4f}, dev QWK {result.dev_best:.3f}")
