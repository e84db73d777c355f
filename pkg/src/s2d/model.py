"""Desk-scale models with hand-written reverse-mode gradients.

Batches hold one sample per row, so a linear layer computes ``x @ W.T + b``
with ``W`` of shape ``(out, in)``. The optional attention block sits in front of
the MLP: the input vector is split into ``tokens`` equal chunks, passed through
single-head self-attention with a residual connection and flattened back.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .quant import QuantContext, fake_quant, ste_mask

ACTIVATIONS = ("gelu", "none")
ATTN_PROJ = ("q", "k", "v", "o")
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(z: np.ndarray) -> np.ndarray:
    return 0.5 * z * (1.0 + erf(z * _INV_SQRT2))


def gelu_grad(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(z * _INV_SQRT2)) + z * _INV_SQRT2PI * np.exp(-0.5 * z * z)


@dataclass
class Linear:
    name: str
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "gelu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"{self.name}: activation must be one of {ACTIVATIONS}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"{self.name}: bias shape {self.bias.shape} != ({self.weight.shape[0]},)")


@dataclass
class Attention:
    tokens: int
    weights: dict[str, np.ndarray]  # keys q, k, v, o; each (d, d)
    name: str = "attn"

    @property
    def dim(self) -> int:
        return self.weights["q"].shape[0]


@dataclass
class ToyModel:
    layers: list[Linear]
    attention: Attention | None = None

    def __post_init__(self):
        width = self.input_dim
        for layer in self.layers:
            if layer.weight.shape[1] != width:
                raise ValueError(f"{layer.name}: expects input {layer.weight.shape[1]}, previous width is {width}")
            width = layer.weight.shape[0]
        if self.attention is not None:
            a = self.attention
            if a.tokens * a.dim != self.layers[0].weight.shape[1]:
                raise ValueError("attention tokens * dim must equal the MLP input width")

    @property
    def input_dim(self) -> int:
        if self.attention is not None:
            return self.attention.tokens * self.attention.dim
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def weight_matrices(self) -> dict[str, np.ndarray]:
        out = {}
        if self.attention is not None:
            for p in ATTN_PROJ:
                out[f"{self.attention.name}.{p}"] = self.attention.weights[p]
        for layer in self.layers:
            out[layer.name] = layer.weight
        return out

    def params(self) -> dict[str, np.ndarray]:
        """Every trainable array by name; arrays are shared, not copied."""
        out = {}
        if self.attention is not None:
            for p in ATTN_PROJ:
                out[f"{self.attention.name}.{p}.weight"] = self.attention.weights[p]
        for layer in self.layers:
            out[f"{layer.name}.weight"] = layer.weight
            out[f"{layer.name}.bias"] = layer.bias
        return out

    def quant_sites(self) -> list[str]:
        sites = []
        if self.attention is not None:
            sites += [f"{self.attention.name}.input", f"{self.attention.name}.o.input"]
        sites += [f"{layer.name}.input" for layer in self.layers]
        sites.append("output")
        return sites

    def with_weights(self, weights: dict[str, np.ndarray]) -> "ToyModel":
        clone = copy.deepcopy(self)
        for name, w in weights.items():
            if clone.attention is not None and name.startswith(clone.attention.name + "."):
                clone.attention.weights[name.split(".", 1)[1]] = np.array(w, dtype=np.float64)
            else:
                clone.layer(name).weight = np.array(w, dtype=np.float64)
        return clone

    def layer(self, name: str) -> Linear:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def copy(self) -> "ToyModel":
        return copy.deepcopy(self)


def init_model(
    dims: list[int],
    rng: np.random.Generator,
    init_scale: float = 1.0,
    attention_tokens: int | None = None,
    final_activation: str = "none",
) -> ToyModel:
    """Gaussian init with std ``init_scale / sqrt(fan_in)``; zero biases."""
    attn = None
    if attention_tokens:
        if dims[0] % attention_tokens:
            raise ValueError("input width must be divisible by attention_tokens")
        d = dims[0] // attention_tokens
        attn = Attention(
            attention_tokens,
            {p: rng.normal(0.0, init_scale / np.sqrt(d), (d, d)) for p in ATTN_PROJ},
        )
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        act = "gelu" if i < len(dims) - 2 else final_activation
        w = rng.normal(0.0, init_scale / np.sqrt(fan_in), (fan_out, fan_in))
        layers.append(Linear(f"fc{i + 1}", w, np.zeros(fan_out), act))
    return ToyModel(layers, attn)


@dataclass
class ForwardCache:
    """Intermediate values kept for the backward pass and for audits."""

    inputs: dict[str, np.ndarray] = field(default_factory=dict)  # pre-quant input per site
    used_inputs: dict[str, np.ndarray] = field(default_factory=dict)  # post-quant input per site
    masks: dict[str, np.ndarray] = field(default_factory=dict)  # STE masks per site / weight
    used_weights: dict[str, np.ndarray] = field(default_factory=dict)
    preact: dict[str, np.ndarray] = field(default_factory=dict)
    attn: dict[str, np.ndarray] = field(default_factory=dict)
    output: np.ndarray | None = None


def _q_act(x, site, quant: QuantContext | None, cache: ForwardCache):
    cache.inputs[site] = x
    if quant is None:
        cache.used_inputs[site] = x
        return x
    params = quant.activation_params(site, x)
    cache.masks[site] = ste_mask(x, params)
    xq = fake_quant(x, params)
    cache.used_inputs[site] = xq
    return xq


def _q_weight(w, name, quant: QuantContext | None, cache: ForwardCache):
    params = None if quant is None else quant.weight_params(w)
    if params is None:
        cache.used_weights[name] = w
        return w
    cache.masks[name + ".weight"] = ste_mask(w, params)
    wq = fake_quant(w, params)
    cache.used_weights[name] = wq
    return wq


def forward(model: ToyModel, batch, quant: QuantContext | None = None):
    """Run the model; returns ``(predictions, cache)``."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"batch shape {x.shape} incompatible with input width {model.input_dim}")
    cache = ForwardCache()
    if model.attention is not None:
        x = _attention_forward(model.attention, x, quant, cache)
    h = x
    for layer in model.layers:
        hq = _q_act(h, f"{layer.name}.input", quant, cache)
        w = _q_weight(layer.weight, layer.name, quant, cache)
        z = hq @ w.T + layer.bias
        cache.preact[layer.name] = z
        h = gelu(z) if layer.activation == "gelu" else z
    out = _q_act(h, "output", quant, cache)
    cache.output = out
    return out, cache


def _softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _attention_forward(a: Attention, x, quant, cache: ForwardCache):
    b = x.shape[0]
    d = a.dim
    xq = _q_act(x, f"{a.name}.input", quant, cache).reshape(b, a.tokens, d)
    w = {p: _q_weight(a.weights[p], f"{a.name}.{p}", quant, cache) for p in ATTN_PROJ}
    q = xq @ w["q"].T
    k = xq @ w["k"].T
    v = xq @ w["v"].T
    p = _softmax(q @ k.transpose(0, 2, 1) / np.sqrt(d))
    ctx = p @ v
    ctx_q = _q_act(ctx.reshape(b, -1), f"{a.name}.o.input", quant, cache).reshape(b, a.tokens, d)
    o = ctx_q @ w["o"].T
    cache.attn.update(xq=xq, q=q, k=k, v=v, p=p, ctx_q=ctx_q)
    return x + o.reshape(b, -1)


def _mask(cache: ForwardCache, key: str, grad: np.ndarray) -> np.ndarray:
    m = cache.masks.get(key)
    return grad if m is None else np.where(m, grad, 0.0)


def backward(model: ToyModel, cache: ForwardCache | None, loss_gradient) -> dict[str, np.ndarray]:
    """Exact gradients of the loss w.r.t. every parameter in ``model.params()``.

    Fake-quantized sites propagate gradients with the straight-through rule.
    The gradient w.r.t. the model input is stored under ``"input"``.
    """
    if cache is None or cache.output is None:
        raise ValueError("backward needs the cache of a preceding forward pass")
    grads: dict[str, np.ndarray] = {}
    g = _mask(cache, "output", np.asarray(loss_gradient, dtype=np.float64))
    for layer in reversed(model.layers):
        z = cache.preact[layer.name]
        if layer.activation == "gelu":
            g = g * gelu_grad(z)
        hq = cache.used_inputs[f"{layer.name}.input"]
        grads[f"{layer.name}.weight"] = _mask(cache, layer.name + ".weight", g.T @ hq)
        grads[f"{layer.name}.bias"] = g.sum(axis=0)
        g = _mask(cache, f"{layer.name}.input", g @ cache.used_weights[layer.name])
    if model.attention is not None:
        g = _attention_backward(model.attention, cache, g, grads)
    grads["input"] = g
    return grads


def _attention_backward(a: Attention, cache: ForwardCache, g: np.ndarray, grads: dict) -> np.ndarray:
    b = g.shape[0]
    d = a.dim
    c = cache.attn
    w = {p: cache.used_weights[f"{a.name}.{p}"] for p in ATTN_PROJ}
    d_o = g.reshape(b, a.tokens, d)
    grads[f"{a.name}.o.weight"] = _mask(cache, f"{a.name}.o.weight", np.einsum("bti,btj->ij", d_o, c["ctx_q"]))
    d_ctx = (d_o @ w["o"]).reshape(b, -1)
    d_ctx = _mask(cache, f"{a.name}.o.input", d_ctx).reshape(b, a.tokens, d)
    p = c["p"]
    d_p = d_ctx @ c["v"].transpose(0, 2, 1)
    d_v = p.transpose(0, 2, 1) @ d_ctx
    d_s = p * (d_p - np.sum(d_p * p, axis=-1, keepdims=True)) / np.sqrt(d)
    d_q = d_s @ c["k"]
    d_k = d_s.transpose(0, 2, 1) @ c["q"]
    xq = c["xq"]
    for name, dy in (("q", d_q), ("k", d_k), ("v", d_v)):
        grads[f"{a.name}.{name}.weight"] = _mask(cache, f"{a.name}.{name}.weight", np.einsum("bti,btj->ij", dy, xq))
    d_x = (d_q @ w["q"] + d_k @ w["k"] + d_v @ w["v"]).reshape(b, -1)
    # the residual branch bypasses the input quantizer
    return g + _mask(cache, f"{a.name}.input", d_x)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Per-sample squared error summed over outputs, averaged over the batch."""
    diff = pred - target
    b = pred.shape[0]
    return float(np.sum(diff * diff) / b), 2.0 * diff / b


def xent_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy with integer class labels, averaged over the batch."""
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    b = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -float(np.mean(logp[np.arange(b), labels]))
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


LOSSES = {"mse": mse_loss, "xent": xent_loss}


def collect_calibration(model: ToyModel, inputs) -> dict[str, np.ndarray]:
    """Full-precision values seen at every quantization site for ``inputs``."""
    _, cache = forward(model, inputs)
    return dict(cache.inputs)
