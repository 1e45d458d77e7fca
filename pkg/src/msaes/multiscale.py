"""Multi-scale scoring model.

Two encoders: one reads the document-scale sequence and supplies both the
document representation (CLS output) and the token representation (column
max over unmasked outputs); the other is shared by every segment scale. Each
segment scale runs the segment CLS vectors through an LSTM and attention
pooling, and a scalar regression head scores the pooled vector. The essay
score is the sum of the doc+token score and all segment-scale scores.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .encoder import Encoder, EncoderConfig, EncoderOutput
from .tensor import Tensor
from .tokenizer import DOC_MAX_TOKENS, SegmentBatch, Vocabulary, build_doc_sequence, fit_to_np

LSTM_GATES = ("i", "f", "c", "o")


@dataclass(frozen=True)
class MultiScaleConfig:
    scales: tuple[int, ...] = ()
    n_p: int = 512
    doc_len: int = DOC_MAX_TOKENS
    use_doc: bool = True
    use_token: bool = True

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(k) for k in self.scales))
        if len(set(self.scales)) != len(self.scales):
            raise ValueError(f"segment scales must be distinct: {self.scales}")
        for k in self.scales:
            if not 1 <= k <= self.n_p:
                raise ValueError(f"segment scale {k} outside 1..{self.n_p}")
        if not (self.use_doc or self.use_token or self.scales):
            raise ValueError("model needs at least one representation scale")
        if self.doc_len < 1:
            raise ValueError("doc_len must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d


@dataclass
class ScoreBreakdown:
    """Per-essay scores in normalized space."""

    y_doc_tok: float
    per_scale: dict[int, float]
    y_total: float

    def recomposed(self) -> float:
        """Sum of the parts in the model's own order and precision."""
        acc = np.float32(self.y_doc_tok)
        for k in self.per_scale:
            acc = np.float32(acc + np.float32(self.per_scale[k]))
        return float(acc)


@dataclass
class ScoreTensors:
    y_doc_tok: Tensor
    per_scale: dict[int, Tensor]
    total: Tensor


@dataclass
class EssayBatch:
    """Token ids for ``B`` essays, ready for the encoders.

    For each scale ``k`` the segments are stored as two groups so no padding
    is needed: the ``m - 1`` full-length chunks ``(B, m-1, k+2)`` and the final
    chunk ``(B, r+2)``.
    """

    doc_ids: np.ndarray
    doc_mask: np.ndarray
    segments: dict[int, tuple[np.ndarray | None, np.ndarray]] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.doc_ids.shape[0]

    def take(self, idx) -> "EssayBatch":
        idx = np.asarray(idx)
        segs = {k: (None if full is None else full[idx], last[idx]) for k, (full, last) in self.segments.items()}
        return EssayBatch(self.doc_ids[idx], self.doc_mask[idx], segs)


def encode_essays(token_lists: Sequence[Sequence[int]], vocab: Vocabulary,
                  cfg: MultiScaleConfig) -> EssayBatch:
    docs = [build_doc_sequence(t, vocab, cfg.doc_len) for t in token_lists]
    doc_ids = np.stack([d.ids for d in docs]) if docs else np.zeros((0, cfg.doc_len + 2), np.int64)
    doc_mask = np.stack([d.attention_mask for d in docs]) if docs else np.zeros_like(doc_ids, np.int8)
    fitted = np.array([fit_to_np(t, cfg.n_p, vocab.pad_id) for t in token_lists],
                      dtype=np.int64).reshape(len(token_lists), cfg.n_p)
    b = len(token_lists)
    segments = {}
    for k in cfg.scales:
        m_full = cfg.n_p // k if cfg.n_p % k else cfg.n_p // k - 1
        body = fitted[:, : m_full * k].reshape(b, m_full, k)
        cls = np.full((b, m_full, 1), vocab.cls_id, np.int64)
        sep = np.full((b, m_full, 1), vocab.sep_id, np.int64)
        full = np.concatenate([cls, body, sep], axis=2) if m_full else None
        tail = fitted[:, m_full * k:]
        last = np.concatenate([np.full((b, 1), vocab.cls_id, np.int64), tail,
                               np.full((b, 1), vocab.sep_id, np.int64)], axis=1)
        segments[k] = (full, last)
    return EssayBatch(doc_ids, doc_mask, segments)


def segment_batch_arrays(batch: SegmentBatch) -> list[np.ndarray]:
    return [s.ids for s in batch.segments]


# ---------------------------------------------------------------------------
# head building blocks


def lstm_over_segments(s: Tensor, params: dict[str, Tensor]) -> list[Tensor]:
    """Run the LSTM over ``s`` of shape ``(B, m, d_in)`` from zero state.

    ``params`` holds ``Q_g`` (d_in, d_h), ``U_g`` (d_h, d_h) and ``b_g`` (d_h,)
    for each gate g in i, f, c, o. Returns the m hidden states, each (B, d_h).
    """
    if s.ndim != 3 or s.shape[1] < 1:
        raise T.ShapeError(f"expected (B, m, d) with m >= 1, got {s.shape}")
    b, m, d_in = s.shape
    if params["Q_i"].shape[0] != d_in:
        raise T.ShapeError(f"LSTM input width {params['Q_i'].shape[0]} != segment width {d_in}")
    d_h = params["U_i"].shape[0]
    h = T.Tensor(np.zeros((b, d_h), dtype=s.data.dtype))
    c = T.Tensor(np.zeros((b, d_h), dtype=s.data.dtype))
    states = []
    for t in range(m):
        s_t = T.getitem(s, (slice(None), t))

        def gate(g):
            return T.add(T.add(T.matmul(s_t, params["Q_" + g]), T.matmul(h, params["U_" + g])),
                         params["b_" + g])

        i_t = T.sigmoid(gate("i"))
        f_t = T.sigmoid(gate("f"))
        c_hat = T.tanh(gate("c"))
        c = T.add(T.mul(i_t, c_hat), T.mul(f_t, c))
        o_t = T.sigmoid(gate("o"))
        h = T.mul(o_t, T.tanh(c))
        states.append(h)
    return states


def attention_pool(states: Sequence[Tensor], Q_a: Tensor, b_a: Tensor, q_a: Tensor) -> tuple[Tensor, Tensor]:
    """Attention pooling of hidden states (each ``(B, d)``).

    Returns the pooled vector ``(B, d)`` and the weights ``(B, m)``.
    """
    hs = T.stack(list(states), axis=1)  # (B, m, d)
    u = T.tanh(T.add(T.matmul(hs, Q_a), b_a))
    logits = T.sum(T.mul(u, q_a), axis=-1)  # (B, m)
    alpha = T.softmax(logits, axis=-1)
    b, m = alpha.shape
    pooled = T.sum(T.mul(T.reshape(alpha, (b, m, 1)), hs), axis=1)
    return pooled, alpha


def doc_repr(out: EncoderOutput) -> Tensor:
    return out.cls


def token_repr(out: EncoderOutput, mask: np.ndarray) -> Tensor:
    return T.max_over_rows(out.seq, mask=np.asarray(mask, dtype=bool))


class MultiScaleModel:
    def __init__(self, enc_cfg: EncoderConfig, ms_cfg: MultiScaleConfig, seed: int = 0,
                 head_dropout: float | None = None):
        self.enc_cfg = enc_cfg
        self.ms_cfg = ms_cfg
        self.head_dropout = enc_cfg.dropout_rate if head_dropout is None else head_dropout
        rng = np.random.default_rng(seed)
        self.doc_encoder = Encoder(enc_cfg, rng, prefix="doc.")
        self.seg_encoder = Encoder(enc_cfg, rng, prefix="seg.")
        d = enc_cfg.d
        std = enc_cfg.init_std
        self.head: dict[str, Tensor] = {}

        def add(name, value):
            self.head[name] = T.parameter(value, name="head." + name)

        for g in LSTM_GATES:
            add("Q_" + g, rng.normal(0, std, (d, d)))
            add("U_" + g, rng.normal(0, std, (d, d)))
            add("b_" + g, np.zeros(d))
        add("Q_a", rng.normal(0, std, (d, d)))
        add("b_a", np.zeros(d))
        add("q_a", rng.normal(0, std, d))
        add("W_seg", rng.normal(0, std, (d, 1)))
        add("b_seg", np.zeros(1))
        width = d * (int(ms_cfg.use_doc) + int(ms_cfg.use_token))
        add("W_doc_tok", rng.normal(0, std, (max(width, 1), 1)))
        add("b_doc_tok", np.zeros(1))

    # -- parameters --------------------------------------------------------

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.doc_encoder.named_parameters()
        yield from self.seg_encoder.named_parameters()
        for name, p in self.head.items():
            yield "head." + name, p

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, policy: str) -> None:
        self.doc_encoder.set_trainable(policy)
        self.seg_encoder.set_trainable(policy)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing weight {name!r}")
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"weight {name!r}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.data.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    @property
    def lstm_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.head.items() if k[:2] in ("Q_", "U_", "b_") and k[2:] in LSTM_GATES}

    # -- forward -------------------------------------------------------------

    def _regress(self, x: Tensor, w: Tensor, b: Tensor, training: bool, rng) -> Tensor:
        x = T.dropout(x, self.head_dropout, training, rng)
        y = T.add(T.matmul(x, w), b)  # (B, 1)
        return T.reshape(y, (y.shape[0],))

    def segment_cls(self, full: np.ndarray | None, last: np.ndarray, pad_id: int,
                    training: bool, rng) -> Tensor:
        """Segment CLS vectors ``(B, m, d)`` from the grouped segment ids."""
        parts = []
        b = last.shape[0]
        d = self.enc_cfg.d
        if full is not None:
            _, m_full, width = full.shape
            flat = full.reshape(b * m_full, width)
            out = self.seg_encoder.encode_batch(flat, flat != pad_id, training, rng)
            parts.append(T.reshape(out.cls, (b, m_full, d)))
        out = self.seg_encoder.encode_batch(last, last != pad_id, training, rng)
        parts.append(T.reshape(out.cls, (b, 1, d)))
        return parts[0] if len(parts) == 1 else T.concat(parts, axis=1)

    def segment_score(self, full, last, pad_id: int, training: bool = False, rng=None) -> tuple[Tensor, Tensor]:
        s = self.segment_cls(full, last, pad_id, training, rng)
        states = lstm_over_segments(s, self.lstm_params)
        o_k, _ = attention_pool(states, self.head["Q_a"], self.head["b_a"], self.head["q_a"])
        return o_k, self._regress(o_k, self.head["W_seg"], self.head["b_seg"], training, rng)

    def forward(self, batch: EssayBatch, pad_id: int, training: bool = False,
                rng: np.random.Generator | None = None) -> ScoreTensors:
        cfg = self.ms_cfg
        b = len(batch)
        if cfg.use_doc or cfg.use_token:
            out = self.doc_encoder.encode_batch(batch.doc_ids, batch.doc_mask, training, rng)
            feats = []
            if cfg.use_doc:
                feats.append(doc_repr(out))
            if cfg.use_token:
                feats.append(token_repr(out, batch.doc_mask))
            h = feats[0] if len(feats) == 1 else T.concat(feats, axis=-1)
            y_doc_tok = self._regress(h, self.head["W_doc_tok"], self.head["b_doc_tok"], training, rng)
        else:
            y_doc_tok = T.Tensor(np.zeros(b, dtype=T.default_dtype()))
        per_scale = {}
        total = y_doc_tok
        for k in cfg.scales:
            full, last = batch.segments[k]
            _, y_k = self.segment_score(full, last, pad_id, training, rng)
            per_scale[k] = y_k
            total = T.add(total, y_k)
        return ScoreTensors(y_doc_tok, per_scale, total)

    def predict(self, batch: EssayBatch, pad_id: int) -> list[ScoreBreakdown]:
        with T.no_record():
            st = self.forward(batch, pad_id, training=False)
        out = []
        for i in range(len(batch)):
            out.append(ScoreBreakdown(float(st.y_doc_tok.data[i]),
                                      {k: float(v.data[i]) for k, v in st.per_scale.items()},
                                      float(st.total.data[i])))
        return out
