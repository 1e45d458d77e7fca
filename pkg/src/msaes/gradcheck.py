"""Finite-difference verification of every analytic gradient in the model.

Three suites run in float64:

* ``tensor``: each differentiable op in isolation;
* ``losses``: MSE, SIM, MR and their combination at kink-free points;
* ``head``: the full doc + token + segment model on a small encoder,
  differentiating the MSE loss with respect to the head weights and the
  trainable encoder layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import losses as L
from . import tensor as T
from .encoder import EncoderConfig
from .multiscale import MultiScaleConfig, MultiScaleModel, encode_essays
from .tensor import Tape, Tensor, backward, parameter, precision, relative_error
from .tokenizer import SPECIAL_TOKENS, Vocabulary

OP_TOL = 1e-3
LOSS_TOL = 1e-4
HEAD_TOL = 1e-3
OP_EPS = 1e-3
HEAD_EPS = 1e-5
# structurally-zero gradients (attention key biases) leave ~1e-11 of FD noise
HEAD_FLOOR = 1e-6


@dataclass
class SuiteResult:
    name: str
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> tuple[str, float]:
        if not self.errors:
            return "", 0.0
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.errors.items() if not v < self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.failures


def _sampled_fd(fn: Callable[[], Tensor], t: Tensor, idx: np.ndarray, eps: float) -> np.ndarray:
    flat = t.data.reshape(-1)
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn().item()
        flat[i] = orig - eps
        fm = fn().item()
        flat[i] = orig
        out[j] = (fp - fm) / (2 * eps)
    return out


def check_gradients(fn: Callable[[], Tensor], tensors: dict[str, Tensor], eps: float,
                    max_coords: int | None = None, seed: int = 0, floor: float = 1e-8) -> dict[str, float]:
    """Relative error between analytic and central-difference gradients for
    each named tensor. ``max_coords`` samples that many coordinates per tensor;
    ``floor`` is the smallest gradient norm treated as signal."""
    for t in tensors.values():
        t.grad = None
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    rng = np.random.default_rng(seed)
    errors = {}
    for name, t in tensors.items():
        size = t.size
        if max_coords is None or size <= max_coords:
            idx = np.arange(size)
        else:
            idx = np.sort(rng.choice(size, max_coords, replace=False))
        analytic = np.zeros(size) if t.grad is None else t.grad.reshape(-1)[idx]
        errors[name] = relative_error(analytic, _sampled_fd(fn, t, idx, eps), floor)
    return errors


def _op_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[np.ndarray]]]:
    u = lambda *s: rng.uniform(-1, 1, s)
    pos = lambda *s: rng.uniform(0.5, 2.0, s)
    # rows spread apart so a small perturbation never changes the column argmax
    spread = np.arange(4)[:, None] * 0.5 + rng.uniform(0, 0.2, (4, 3))
    spread = spread[rng.permutation(4)]
    drop_seed = int(rng.integers(1 << 30))
    return [
        ("matmul", T.matmul, [u(3, 4), u(4, 2)]),
        ("add", T.add, [u(3, 4), u(3, 4)]),
        ("sub", T.sub, [u(3, 4), u(3, 4)]),
        ("mul", T.mul, [u(3, 4), u(3, 4)]),
        ("div", T.div, [u(3, 4), pos(3, 4)]),
        ("tanh", T.tanh, [u(3, 4)]),
        ("sigmoid", T.sigmoid, [u(3, 4)]),
        ("relu", T.relu, [pos(3, 4) * np.sign(u(3, 4))]),
        ("gelu", T.gelu, [u(3, 4)]),
        ("exp", T.exp, [u(3, 4)]),
        ("sqrt", T.sqrt, [pos(5)]),
        ("square", T.square, [u(5)]),
        ("softmax", lambda x: T.softmax(x, axis=-1), [u(3, 5)]),
        ("max_over_rows", T.max_over_rows, [spread]),
        ("layer_norm", lambda x, g, b: T.layer_norm(x, g, b, 1e-5), [u(3, 6), pos(6), u(6)]),
        ("sum", lambda x: T.sum(x, axis=1), [u(3, 4)]),
        ("concat", lambda a, b: T.concat([a, b], axis=0), [u(2, 3), u(1, 3)]),
        ("stack", lambda a, b: T.stack([a, b], axis=1), [u(2, 3), u(2, 3)]),
        ("transpose", lambda x: T.transpose(x, (2, 0, 1)), [u(2, 3, 4)]),
        ("reshape", lambda x: T.reshape(x, (6, 2)), [u(3, 4)]),
        ("getitem", lambda x: x[1:, ::2], [u(3, 4)]),
        ("embedding", lambda w: T.embedding(w, np.array([[0, 2], [2, 1]])), [u(3, 4)]),
        ("dropout", lambda x: T.dropout(x, 0.3, True, T.make_rng(drop_seed)), [u(4, 5)]),
    ]


def tensor_suite(seed: int = 0) -> SuiteResult:
    result = SuiteResult("tensor", OP_TOL)
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        for name, op, arrays in _op_cases(rng):
            inputs = [parameter(a) for a in arrays]
            probe = rng.normal(size=op(*inputs).shape)
            fn = lambda op=op, inputs=inputs, probe=probe: T.sum(T.mul(op(*inputs), probe))
            errs = check_gradients(fn, {f"{name}[{i}]": t for i, t in enumerate(inputs)}, OP_EPS)
            result.errors[name] = max(errs.values())
    return result


def loss_suite(seed: int = 0) -> SuiteResult:
    result = SuiteResult("losses", LOSS_TOL)
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        n = 8
        # well-separated predictions keep every pair off its hinge kink
        y = parameter(rng.permutation(np.arange(n) * 0.11 + 0.05))
        labels = rng.integers(0, 4, n) / 3.0
        weights = L.LossWeights(1.0, 0.8, 0.6)
        cases = {
            "mse": lambda: L.mse(y, labels),
            "sim": lambda: L.sim(y, labels),
            "mr": lambda: L.mr(y, labels),
            "combined": lambda: L.combined(y, labels, weights),
            "rdrop": lambda: L.rdrop_consistency(y, labels),
        }
        for name, fn in cases.items():
            result.errors[name] = check_gradients(fn, {name: y}, OP_EPS)[name]
    return result


def toy_model(seed: int = 0, d: int = 16, n_layers: int = 2) -> tuple[MultiScaleModel, Vocabulary, object, np.ndarray]:
    vocab = Vocabulary(list(SPECIAL_TOKENS) + [f"t{i}" for i in range(26)])
    enc = EncoderConfig(len(vocab), d=d, n_layers=n_layers, n_heads=2, dropout_rate=0.0, init_std=0.3)
    ms = MultiScaleConfig(scales=(4, 7), n_p=12, doc_len=10)
    model = MultiScaleModel(enc, ms, seed=seed)
    rng = np.random.default_rng(seed + 1)
    tokens = [list(rng.integers(4, len(vocab), n)) for n in (14, 9, 5)]
    batch = encode_essays(tokens, vocab, ms)
    labels = np.array([0.2, 0.9, 0.5])
    return model, vocab, batch, labels


def head_suite(seed: int = 0, max_coords: int = 6) -> SuiteResult:
    result = SuiteResult("head", HEAD_TOL)
    with precision(np.float64):
        model, vocab, batch, labels = toy_model(seed)
        model.set_trainable("last_layer")
        last = f"layer{model.enc_cfg.n_layers - 1}."
        targets = {name: p for name, p in model.named_parameters()
                   if name.startswith("head.") or last in name}
        fn = lambda: L.mse(model.forward(batch, vocab.pad_id).total, labels)
        result.errors.update(check_gradients(fn, targets, HEAD_EPS, max_coords=max_coords, seed=seed,
                                             floor=HEAD_FLOOR))
    return result


def run_all(seed: int = 0) -> list[SuiteResult]:
    return [tensor_suite(seed), loss_suite(seed), head_suite(seed)]
