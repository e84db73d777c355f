"""Uniform affine fake quantization for PTQ and QAT.

Symmetric schemes use the code range ``[-(2**(b-1) - 1), 2**(b-1) - 1]`` and a
zero point of 0; asymmetric schemes use ``[0, 2**b - 1]``. Rounding is
half-to-even throughout. ``bits = 64`` denotes a float passthrough that leaves
values untouched, used to check that the quantized code path is exact when
disabled.
"""

from __future__ import annotations

import logging
import re
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

PASSTHROUGH_BITS = 64
SCALE_FLOOR = 1e-12
GRANULARITIES = ("per_tensor", "per_channel")
TARGETS = ("weights", "activations")


@dataclass(frozen=True)
class QuantScheme:
    bits: int
    symmetric: bool
    granularity: str = "per_tensor"
    target: str = "activations"
    percentile: float | None = None

    def __post_init__(self):
        if self.bits != PASSTHROUGH_BITS and not 2 <= self.bits <= 8:
            raise ValueError(f"bits must lie in [2, 8] (or {PASSTHROUGH_BITS} for passthrough), got {self.bits}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")
        if self.percentile is not None and not 50.0 < self.percentile <= 100.0:
            raise ValueError("percentile must lie in (50, 100]")

    @classmethod
    def for_weights(cls, bits: int) -> "QuantScheme":
        return cls(bits, symmetric=True, granularity="per_channel", target="weights")

    @classmethod
    def for_activations(cls, bits: int, percentile: float | None = None) -> "QuantScheme":
        return cls(bits, symmetric=False, granularity="per_tensor", target="activations", percentile=percentile)

    @property
    def passthrough(self) -> bool:
        return self.bits == PASSTHROUGH_BITS

    @property
    def code_range(self) -> tuple[int, int]:
        if self.symmetric:
            qmax = 2 ** (self.bits - 1) - 1
            return -qmax, qmax
        return 0, 2**self.bits - 1


@dataclass(frozen=True)
class QuantParams:
    """Scale and zero point, broadcastable against the calibrated tensor."""

    scale: np.ndarray
    zero_point: np.ndarray
    qmin: int
    qmax: int
    passthrough: bool = False

    @property
    def lower(self) -> np.ndarray:
        return (self.qmin - self.zero_point) * self.scale

    @property
    def upper(self) -> np.ndarray:
        return (self.qmax - self.zero_point) * self.scale


def _reduce_axes(values: np.ndarray, scheme: QuantScheme):
    if scheme.granularity == "per_tensor":
        return None
    # weights: one group per output row; activations: one group per feature
    channel = 0 if scheme.target == "weights" else values.ndim - 1
    return tuple(a for a in range(values.ndim) if a != channel)


def calibrate(values, scheme: QuantScheme) -> QuantParams:
    """Min-max calibration (optionally percentile-clipped)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot calibrate on an empty tensor")
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot calibrate on non-finite values")
    qmin, qmax = scheme.code_range
    if scheme.passthrough:
        one = np.ones(1)
        return QuantParams(one, np.zeros(1, dtype=np.int64), qmin, qmax, passthrough=True)
    axes = _reduce_axes(values, scheme)
    keep = axes is not None
    if scheme.percentile is None:
        hi = np.max(values, axis=axes, keepdims=keep)
        lo = np.min(values, axis=axes, keepdims=keep)
    else:
        hi = np.percentile(values, scheme.percentile, axis=axes, keepdims=keep)
        lo = np.percentile(values, 100.0 - scheme.percentile, axis=axes, keepdims=keep)
    hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
    lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
    if scheme.symmetric:
        scale = np.maximum(np.abs(hi), np.abs(lo)) / qmax
        zero_point = np.zeros(scale.shape, dtype=np.int64)
    else:
        # the range always contains 0 so that 0 is an exact code point
        lo = np.minimum(lo, 0.0)
        hi = np.maximum(hi, 0.0)
        scale = (hi - lo) / (qmax - qmin)
    if np.any(scale < SCALE_FLOOR):
        log.info("constant calibration group: scale floored at %g", SCALE_FLOOR)
        scale = np.maximum(scale, SCALE_FLOOR)
    if not scheme.symmetric:
        zero_point = np.clip(np.rint(-lo / scale), qmin, qmax).astype(np.int64)
    return QuantParams(scale, zero_point, qmin, qmax)


def fake_quant(values, params: QuantParams) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if params.passthrough:
        return values.copy()
    codes = np.clip(np.rint(values / params.scale) + params.zero_point, params.qmin, params.qmax)
    return (codes - params.zero_point) * params.scale


def ste_mask(values, params: QuantParams) -> np.ndarray:
    """True where the value lies in the representable interval (inclusive)."""
    values = np.asarray(values, dtype=np.float64)
    if params.passthrough:
        return np.ones(values.shape, dtype=bool)
    return (values >= params.lower) & (values <= params.upper)


def ste_backward(upstream_gradient, values, params: QuantParams) -> np.ndarray:
    upstream_gradient = np.asarray(upstream_gradient, dtype=np.float64)
    if upstream_gradient.shape != np.shape(values):
        raise ValueError("ste_backward: gradient and values differ in shape")
    return np.where(ste_mask(values, params), upstream_gradient, 0.0)


_BITS_RE = re.compile(r"^W(\d+)A(\d+)$")


def parse_bits(text: str) -> tuple[int, int]:
    """Parse ``"W4A4"`` into ``(4, 4)``; both widths must lie in [2, 8]."""
    m = _BITS_RE.match(text.strip().upper())
    if not m:
        raise ValueError(f"malformed bit setting {text!r}; expected e.g. 'W4A4'")
    w, a = int(m.group(1)), int(m.group(2))
    if not (2 <= w <= 8 and 2 <= a <= 8):
        raise ValueError(f"bit widths in {text!r} must lie in [2, 8]")
    return w, a


def format_bits(w_bits: int, a_bits: int) -> str:
    return f"W{w_bits}A{a_bits}"


@dataclass
class QuantContext:
    """Quantization state threaded through a forward pass.

    ``act_params`` maps site name to frozen activation parameters; when it is
    ``None`` every site is calibrated on the fly from the current batch, which
    is how QAT runs. Weights are quantized from their current values unless
    ``quantize_weights`` is off (e.g. when they were quantized ahead of time).
    """

    w_scheme: QuantScheme
    a_scheme: QuantScheme
    act_params: dict[str, QuantParams] | None = None
    quantize_weights: bool = True

    def activation_params(self, site: str, values: np.ndarray) -> QuantParams:
        if self.act_params is None:
            return calibrate(values, self.a_scheme)
        try:
            return self.act_params[site]
        except KeyError:
            raise KeyError(f"no calibration for quantization site {site!r}") from None

    def weight_params(self, w: np.ndarray) -> QuantParams | None:
        if not self.quantize_weights:
            return None
        return calibrate(w, self.w_scheme)


@dataclass
class QuantizedModel:
    model: object
    context: QuantContext
    weight_mse: dict[str, float] = field(default_factory=dict)

    def forward(self, x):
        from .model import forward

        return forward(self.model, x, self.context)[0]


def ptq_model(model, calibration_acts: Mapping[str, np.ndarray], w_bits: int, a_bits: int) -> QuantizedModel:
    """Round-to-nearest PTQ: quantize weights once and freeze activation ranges.

    ``calibration_acts`` maps every quantization site of ``model`` to the
    full-precision values observed there on a calibration batch.
    """
    w_scheme = QuantScheme.for_weights(w_bits)
    a_scheme = QuantScheme.for_activations(a_bits)
    act_params = {}
    for site in model.quant_sites():
        if site not in calibration_acts:
            raise KeyError(f"missing calibration for quantization site {site!r}")
        act_params[site] = calibrate(calibration_acts[site], a_scheme)
    qweights, mse = {}, {}
    for name, w in model.weight_matrices().items():
        wq = fake_quant(w, calibrate(w, w_scheme))
        qweights[name] = wq
        mse[name] = float(np.mean((w - wq) ** 2))
    ctx = QuantContext(w_scheme, a_scheme, act_params, quantize_weights=False)
    return QuantizedModel(model.with_weights(qweights), ctx, mse)
