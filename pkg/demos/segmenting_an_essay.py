"""
Reading one essay at several scales
===================================

An essay enters the model three ways: as one document sequence, as the
same sequence seen token by token, and as chunks of ``k`` tokens for each
segment scale. This walk-through tokenizes a short essay and prints what
each view looks like.
"""

from msaes.tokenizer import (build_doc_sequence, build_segments, segment_count, train_vocab,
                             wordpiece_pieces, wordpiece_tokenize)

essay = ("Computers help people in many ways. They let families keep in touch, "
         "students research faraway places, and workers finish tasks quickly. "
         "Still, spending every evening online can crowd out exercise and sleep.")

# A tiny vocabulary trained on the essay itself; unseen words fall back to pieces.
vocab = train_vocab([essay], size=120)
print("first pieces:", wordpiece_pieces(essay, vocab)[:12])

tokens = wordpiece_tokenize(essay, vocab)
print(f"{len(tokens)} WordPiece tokens")

###############################################################################
# Document scale: ``[CLS]`` + at most L tokens + padding + ``[SEP]``.
# The attention mask is zero only at padding.

doc = build_doc_sequence(tokens, vocab, L=48)
print("doc ids   ", doc.ids[:10], "...", doc.ids[-4:])
print("doc mask  ", doc.attention_mask.sum(), "attended positions of", len(doc.ids))

###############################################################################
# Segment scales: the sequence is cut or padded to the prompt's token budget
# ``n_p`` and split into ``ceil(n_p / k)`` chunks, the last one shorter.

n_p = 40
for k in (10, 15, 40):
    segs = build_segments(tokens, n_p, k, vocab)
    widths = [len(s.ids) - 2 for s in segs.segments]
    print(f"k={k:2d}: m={segment_count(n_p, k)} chunks of sizes {widths}")
