"""Trainable post-layer-norm transformer encoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .tokenizer import TokenSequence

FREEZE_POLICIES = ("none", "last_layer", "all")


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_positions: int = 512
    ff_multiplier: int = 4
    dropout_rate: float = 0.1
    init_std: float = 0.02
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError(f"hidden size {self.d} not divisible by {self.n_heads} heads")
        if self.max_positions < 512:
            raise ValueError("max_positions must be at least 512")
        if self.n_layers < 1 or self.vocab_size < 1:
            raise ValueError("need at least one layer and a non-empty vocabulary")

    def to_dict(self) -> dict:
        return asdict(self)


def bert_base_config(vocab_size: int = 30522) -> EncoderConfig:
    return EncoderConfig(vocab_size, d=768, n_layers=12, n_heads=12, ff_multiplier=4)


@dataclass
class EncoderOutput:
    cls: Tensor  # (..., d)
    seq: Tensor  # (..., n, d)


class Encoder:
    """Embedding sum (token + segment + position) followed by ``n_layers``
    blocks of self-attention and feed-forward, each wrapped in residual +
    layer norm. The CLS output is the row at position 0."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, prefix: str = ""):
        self.cfg = cfg
        self.prefix = prefix
        d, ff = cfg.d, cfg.d * cfg.ff_multiplier
        self.params: dict[str, Tensor] = {}

        def normal(name, shape):
            self._add(name, rng.normal(0.0, cfg.init_std, shape))

        normal("emb.token", (cfg.vocab_size, d))
        normal("emb.segment", (2, d))
        normal("emb.position", (cfg.max_positions, d))
        self._add("emb.ln.gamma", np.ones(d))
        self._add("emb.ln.beta", np.zeros(d))
        for i in range(cfg.n_layers):
            p = f"layer{i}."
            for proj in ("q", "k", "v", "o"):
                normal(p + f"attn.{proj}.w", (d, d))
                self._add(p + f"attn.{proj}.b", np.zeros(d))
            self._add(p + "attn.ln.gamma", np.ones(d))
            self._add(p + "attn.ln.beta", np.zeros(d))
            normal(p + "ff.in.w", (d, ff))
            self._add(p + "ff.in.b", np.zeros(ff))
            normal(p + "ff.out.w", (ff, d))
            self._add(p + "ff.out.b", np.zeros(d))
            self._add(p + "ff.ln.gamma", np.ones(d))
            self._add(p + "ff.ln.beta", np.zeros(d))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = T.parameter(value, name=self.prefix + name)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, p in self.params.items():
            yield self.prefix + name, p

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def set_trainable(self, policy: str) -> None:
        """``"none"``: everything trains; ``"last_layer"``: only the final
        block trains; ``"all"``: everything frozen."""
        if policy not in FREEZE_POLICIES:
            raise ValueError(f"unknown freeze policy {policy!r}; expected one of {FREEZE_POLICIES}")
        last = f"layer{self.cfg.n_layers - 1}."
        for name, t in self.params.items():
            if policy == "none":
                t.requires_grad = True
            elif policy == "all":
                t.requires_grad = False
            else:
                t.requires_grad = name.startswith(last)

    def embed(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        n = ids.shape[-1]
        if n > self.cfg.max_positions:
            raise ValueError(f"sequence length {n} exceeds max_positions {self.cfg.max_positions}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ValueError(f"token id outside vocabulary of size {self.cfg.vocab_size}")
        tok = T.embedding(self.p("emb.token"), ids)
        pos = T.embedding(self.p("emb.position"), np.arange(n))
        seg = T.embedding(self.p("emb.segment"), np.zeros(n, dtype=np.int64))
        return T.add(T.add(tok, pos), seg)

    def _attention(self, x: Tensor, key_mask: np.ndarray, i: int, training: bool, rng) -> Tensor:
        cfg = self.cfg
        b, n, d = x.shape
        h, dh = cfg.n_heads, d // cfg.n_heads
        p = f"layer{i}.attn."

        def proj(name):
            y = T.add(T.matmul(x, self.p(p + name + ".w")), self.p(p + name + ".b"))
            return T.transpose(T.reshape(y, (b, n, h, dh)), (0, 2, 1, 3))

        q, k, v = proj("q"), proj("k"), proj("v")
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        probs = T.softmax(scores, axis=-1, mask=key_mask[:, None, None, :])
        probs = T.dropout(probs, cfg.dropout_rate, training, rng)
        ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, n, d))
        return T.add(T.matmul(ctx, self.p(p + "o.w")), self.p(p + "o.b"))

    def encode_batch(self, ids: np.ndarray, mask: np.ndarray, training: bool = False,
                     rng: np.random.Generator | None = None) -> EncoderOutput:
        """Encode ``(B, n)`` token ids; ``mask`` is 1 at positions that may be
        attended to."""
        cfg = self.cfg
        ids = np.asarray(ids, dtype=np.int64)
        mask = np.asarray(mask, dtype=bool)
        eps = cfg.layer_norm_eps
        x = T.layer_norm(self.embed(ids), self.p("emb.ln.gamma"), self.p("emb.ln.beta"), eps)
        x = T.dropout(x, cfg.dropout_rate, training, rng)
        for i in range(cfg.n_layers):
            p = f"layer{i}."
            attn = T.dropout(self._attention(x, mask, i, training, rng), cfg.dropout_rate, training, rng)
            x = T.layer_norm(T.add(x, attn), self.p(p + "attn.ln.gamma"), self.p(p + "attn.ln.beta"), eps)
            hidden = T.gelu(T.add(T.matmul(x, self.p(p + "ff.in.w")), self.p(p + "ff.in.b")))
            ff = T.add(T.matmul(hidden, self.p(p + "ff.out.w")), self.p(p + "ff.out.b"))
            ff = T.dropout(ff, cfg.dropout_rate, training, rng)
            x = T.layer_norm(T.add(x, ff), self.p(p + "ff.ln.gamma"), self.p(p + "ff.ln.beta"), eps)
        return EncoderOutput(cls=T.getitem(x, (slice(None), 0)), seq=x)

    def encode(self, tokens: TokenSequence, training: bool = False,
               rng: np.random.Generator | None = None) -> EncoderOutput:
        out = self.encode_batch(tokens.ids[None, :], tokens.attention_mask[None, :], training, rng)
        return EncoderOutput(cls=T.getitem(out.cls, 0), seq=T.getitem(out.seq, 0))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing weight {name!r}")
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"weight {name!r}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.data.dtype, copy=True)


def load_pretrained(encoder: Encoder, path, source_prefix: str = "") -> None:
    """Inject encoder weights from a checkpoint file.

    Tensors named ``source_prefix + <own name>`` (e.g. ``"doc." +
    "layer0.attn.q.w"``) are loaded; other tensors in the file are ignored.
    """
    from .checkpoint import load

    tensors = load(path).tensors
    state = {encoder.prefix + name[len(source_prefix):]: value
             for name, value in tensors.items() if name.startswith(source_prefix)}
    encoder.load_state(state)
