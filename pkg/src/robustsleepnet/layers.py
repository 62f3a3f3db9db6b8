"""Neural building blocks on top of :mod:`robustsleepnet.tensor`.

Conventions shared by every layer:

* weights are drawn uniformly in ``±1/sqrt(fan_in)``, biases start at zero;
* GRUs carry separate input and recurrent biases (``2H`` bias terms per gate);
* attention scores are additive: ``e_i = u . tanh(W x_i + b)``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import (
    ContractError,
    ShapeError,
    Tensor,
    clip_min,
    concat,
    einsum,
    get_default_dtype,
    log,
    matmul,
    sigmoid,
    softmax,
    stack,
    tanh,
)

LOG_CLIP = 1e-12


class Module:
    """Parameter container; parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def count_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            raise ValueError("state dict keys do not match the module's parameters")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.shape}")
            p.data = state[name].astype(p.dtype, copy=True)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())
    return Tensor(data, requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad=True)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = _uniform(rng, (out_features, in_features), in_features)
        self.bias = _zeros((out_features,))

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    """Affine map along the last axis of ``x``."""
    if x.shape[-1] != layer.in_features:
        raise ShapeError(f"linear: input {x.shape} does not end in {layer.in_features}")
    return matmul(x, layer.weight.T) + layer.bias


# ---------------------------------------------------------------------------
# dropout


def dropout_apply(x: Tensor, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero with probability ``p`` and rescale survivors."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * Tensor(keep, dtype=x.dtype)


# ---------------------------------------------------------------------------
# GRU


class _GruDirection(Module):
    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        h = hidden_size
        # gate order in the stacked matrices: reset, update, candidate
        self.w_ih = _uniform(rng, (3 * h, input_size), input_size)
        self.w_hh = _uniform(rng, (3 * h, h), h)
        self.b_ih = _zeros((3 * h,))
        self.b_hh = _zeros((3 * h,))


class GRU(Module):
    """Single GRU layer, one or two directions."""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator, bidirectional: bool = True):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.num_directions = 2 if bidirectional else 1
        self.directions = [_GruDirection(input_size, hidden_size, rng) for _ in range(self.num_directions)]

    def __call__(self, seq: Tensor) -> Tensor:
        return gru_forward(self, seq)


def _run_direction(d: _GruDirection, seq: Tensor, hidden: int, reverse: bool) -> Tensor:
    steps, batch = seq.shape[0], seq.shape[1]
    xproj = matmul(seq, d.w_ih.T) + d.b_ih  # (len, batch, 3H)
    w_hh_t = d.w_hh.T
    h2 = 2 * hidden
    h = Tensor(np.zeros((batch, hidden), dtype=seq.dtype))
    outputs: list[Tensor] = [None] * steps  # type: ignore[list-item]
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        xt = xproj[t]
        hp = matmul(h, w_hh_t) + d.b_hh
        rz = sigmoid(xt[:, :h2] + hp[:, :h2])
        r, z = rz[:, :hidden], rz[:, hidden:]
        n = tanh(xt[:, h2:] + r * hp[:, h2:])
        h = n + z * (h - n)
        outputs[t] = h
    return stack(outputs, axis=0)


def gru_forward(
    layer: GRU,
    seq: Tensor,
    dropout_p: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Run a GRU over a time-major sequence ``(len, batch, in)``.

    Returns ``(len, batch, dirs * H)``; for two directions the forward and
    backward states are concatenated per time step. The hidden state starts
    at zero. Dropout (when ``train``) is applied to the input and to the
    output.
    """
    if seq.ndim != 3 or seq.shape[0] < 1:
        raise ContractError(f"gru_forward needs a non-empty (len, batch, in) sequence, got {seq.shape}")
    if seq.shape[2] != layer.input_size:
        raise ShapeError(f"gru: input size {seq.shape[2]} != {layer.input_size}")
    seq = dropout_apply(seq, dropout_p, train, rng)
    outs = [
        _run_direction(d, seq, layer.hidden_size, reverse=(k == 1))
        for k, d in enumerate(layer.directions)
    ]
    out = outs[0] if len(outs) == 1 else concat(outs, axis=-1)
    return dropout_apply(out, dropout_p, train, rng)


# ---------------------------------------------------------------------------
# attention


class Attention(Module):
    """Additive attention that pools a set of ``d``-dimensional items."""

    def __init__(self, input_size: int, context_size: int, rng: np.random.Generator):
        self.input_size = input_size
        self.context_size = context_size
        self.weight = _uniform(rng, (context_size, input_size), input_size)
        self.bias = _zeros((context_size,))
        self.context = _uniform(rng, (context_size,), context_size)

    def scores(self, items: Tensor) -> Tensor:
        """Unnormalised scores ``(..., n)`` for items ``(..., n, d)``."""
        hidden = tanh(matmul(items, self.weight.T) + self.bias)
        return (hidden * self.context).sum(axis=-1)

    def weights(self, items: Tensor) -> Tensor:
        return softmax(self.scores(items), axis=-1)

    def __call__(self, items: Tensor) -> tuple[Tensor, Tensor]:
        return attention_pool(self, items)


def attention_pool(layer: Attention, items: Tensor) -> tuple[Tensor, Tensor]:
    """Weighted average of ``items`` (``(..., n, d)``) with attention weights.

    Returns ``(output (..., d), weights (..., n))``.
    """
    if items.ndim < 2 or items.shape[-2] < 1:
        raise ContractError(f"attention_pool needs at least one item, got shape {items.shape}")
    w = layer.weights(items)
    out = _weighted_sum(w, items)
    return out, w


def _weighted_sum(w: Tensor, items: Tensor) -> Tensor:
    lead = "abcdefgh"[: items.ndim - 2]
    return einsum(f"{lead}n,{lead}nd->{lead}d", w, items)


# ---------------------------------------------------------------------------
# loss


def cross_entropy(probs: Tensor, labels, mask=None) -> Tensor:
    """Mean negative log-probability of the true class over valid epochs.

    ``probs`` has classes on its last axis. ``labels`` is either an integer
    array shaped like ``probs`` without the class axis (``-1`` = unscored) or
    a one-hot array shaped like ``probs``. ``mask`` optionally marks valid
    epochs (``True`` = counts). Probabilities are clipped at 1e-12 before the
    log.
    """
    labels = np.asarray(labels)
    if labels.shape == probs.shape:
        onehot = labels.astype(probs.dtype)
        valid = onehot.sum(axis=-1) > 0
    elif labels.shape == probs.shape[:-1]:
        valid = labels >= 0
        onehot = np.zeros(probs.shape, dtype=probs.dtype)
        idx = np.where(valid, labels, 0).astype(int)
        np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
        onehot *= valid[..., None]
    else:
        raise ShapeError(f"cross_entropy: labels {labels.shape} do not match probabilities {probs.shape}")
    if mask is not None:
        valid = valid & np.asarray(mask, dtype=bool)
        onehot = onehot * valid[..., None]
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ContractError("cross_entropy: every epoch is masked")
    logp = log(clip_min(probs, LOG_CLIP))
    return (logp * Tensor(onehot, dtype=probs.dtype)).sum() * (-1.0 / n_valid)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction. Gradients must be zeroed between steps."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self, self.params, [p.grad for p in self.params])


AdamState = Adam


def adam_step(state: Adam, params, grads) -> None:
    grads = list(grads)
    if any(g is None for g in grads):
        missing = [i for i, g in enumerate(grads) if g is None]
        raise ContractError(f"adam_step: parameters {missing} have no gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# serialization


def save_parameters(module: Module, path: str | Path) -> None:
    """Write ``<path>.bin`` (float32 little-endian) and ``<path>.json`` (layout)."""
    path = Path(path)
    entries, offset, chunks = [], 0, []
    for name, p in module.named_parameters():
        blob = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(blob)
        offset += len(blob)
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    header = {"dtype": "float32-le", "total_bytes": offset, "layers": entries}
    path.with_suffix(".json").write_text(json.dumps(header, indent=1))


def load_parameters(module: Module, path: str | Path) -> None:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    blob = path.with_suffix(".bin").read_bytes()
    params = dict(module.named_parameters())
    names = {e["name"] for e in header["layers"]}
    if names != set(params):
        missing = sorted(set(params) - names)
        extra = sorted(names - set(params))
        raise ValueError(f"parameter mismatch: missing={missing[:5]} unexpected={extra[:5]}")
    for e in header["layers"]:
        p = params[e["name"]]
        if tuple(e["shape"]) != p.shape:
            raise ValueError(f"shape mismatch for {e['name']}: {e['shape']} vs {list(p.shape)}")
        n = int(np.prod(e["shape"]))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"])
        p.data = arr.reshape(p.shape).astype(p.dtype)

