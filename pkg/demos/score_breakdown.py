"""
Where a score comes from
========================

The predicted score is a plain sum: one term from the document and token
representations, plus one term per segment scale. This demo builds a small
untrained model, scores three synthetic essays and shows the parts adding
up to the total.
"""

import numpy as np

from msaes.encoder import EncoderConfig
from msaes.multiscale import MultiScaleConfig, MultiScaleModel, encode_essays
from msaes.synthetic import planted_corpus, synthetic_vocab
from msaes.tokenizer import wordpiece_tokenize

vocab = synthetic_vocab()
essays, spec = planted_corpus(3, seed=4)

enc_cfg = EncoderConfig(len(vocab), d=32, n_layers=2, n_heads=4, dropout_rate=0.0, init_std=0.2)
ms_cfg = MultiScaleConfig(scales=(20, 50), n_p=128, doc_len=64)
model = MultiScaleModel(enc_cfg, ms_cfg, seed=0)

n_params = sum(p.size for p in model.parameters())
print(f"{n_params} parameters: two encoders (document, shared segment) plus the heads")

batch = encode_essays([wordpiece_tokenize(e.text, vocab) for e in essays], vocab, ms_cfg)
for scale, (full, last) in batch.segments.items():
    n_full = 0 if full is None else full.shape[1]
    print(f"scale {scale}: {n_full} full chunks of width {scale + 2} and a final chunk of width {last.shape[1]}")

###############################################################################
# Each breakdown lists y_doc_tok, every y_k, and their float32 sum.

for essay, sb in zip(essays, model.predict(batch, vocab.pad_id)):
    parts = " + ".join(f"{v:+.4f} (k={k})" for k, v in sb.per_scale.items())
    print(f"{essay.essay_id}: {sb.y_doc_tok:+.4f} (doc+tok) + {parts} = {sb.y_total:+.4f}")
    assert np.float32(sb.y_total) == np.float32(sb.recomposed())
