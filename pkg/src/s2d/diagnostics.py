"""Principal Component Dominance Ratio (PCDR) and related spectral statistics.

PCDR_k measures how much of an activation's absolute decomposition mass comes
from the top-k singular components of the weight that produced it. An
undefined ratio (zero denominator) is reported as ``None``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import SVDFactors, as_matrix, svd


@dataclass(frozen=True)
class ActivationDecomposition:
    neuron_index: int
    sample_index: int
    terms: np.ndarray

    @property
    def total(self) -> float:
        return float(self.terms.sum())


@dataclass
class PCDRReport:
    layer_name: str
    pcdr: dict[int, float | None]
    sigma_max: float
    max_abs_activation: float
    argmax_neuron: int
    argmax_sample: int
    top_fraction_pcdr: dict[int, float | None] | None = field(default=None)

    def to_json_dict(self) -> dict:
        out = {
            "layer": self.layer_name,
            "pcdr": {str(k): v for k, v in sorted(self.pcdr.items())},
            "sigma_max": self.sigma_max,
            "max_abs_activation": self.max_abs_activation,
            "argmax_neuron": self.argmax_neuron,
            "argmax_sample": self.argmax_sample,
        }
        if self.top_fraction_pcdr is not None:
            out["pcdr_top_mean"] = {str(k): v for k, v in sorted(self.top_fraction_pcdr.items())}
        return out


def _as_vector(x, size: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != size:
        raise ValueError(f"input has length {x.shape[0]}, layer expects {size}")
    return x


def decompose_activation(
    f: SVDFactors, x, i: int, sample_index: int = 0
) -> ActivationDecomposition:
    m, n = f.shape
    x = _as_vector(x, n)
    if not 0 <= i < m:
        raise IndexError(f"neuron index {i} outside [0, {m})")
    terms = f.sigma * f.u[i] * (f.v.T @ x)
    return ActivationDecomposition(neuron_index=i, sample_index=sample_index, terms=terms)


def _ratio(mass: np.ndarray, k: int) -> float | None:
    if not 1 <= k <= mass.shape[0]:
        raise ValueError(f"k={k} outside [1, {mass.shape[0]}]")
    # cumulative sums keep the curve monotone and <= 1 in floating point
    running = np.cumsum(mass)
    total = running[-1]
    if total <= 0.0:
        return None
    return float(running[k - 1] / total)


def pcdr_activation(f: SVDFactors, x, i: int, k: int) -> float | None:
    return _ratio(np.abs(decompose_activation(f, x, i).terms), k)


def pcdr_spectral(sigma, k: int) -> float | None:
    """Activation-free proxy: share of the nuclear norm held by the top ``k`` values."""
    return _ratio(np.asarray(sigma, dtype=np.float64), k)


def _pcdr_curve(mass: np.ndarray, k_max: int) -> dict[int, float | None]:
    return {k: _ratio(mass, k) for k in range(1, min(k_max, mass.shape[0]) + 1)}


def audit_layer(
    w,
    calibration,
    k_max: int = 3,
    name: str = "layer",
    top_fraction: float | None = None,
    factors: SVDFactors | None = None,
) -> PCDRReport:
    """Spectral audit of one linear layer over a calibration batch.

    ``calibration`` holds one input sample per row. PCDR is evaluated at the
    activation with the largest magnitude over the whole batch. When
    ``top_fraction`` is given (e.g. 0.001 for the top 0.1%), the mean PCDR over
    that fraction of largest-magnitude activations is reported as well, skipping
    positions where the ratio is undefined.
    """
    w = as_matrix(w, name)
    batch = np.asarray(calibration, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch.reshape(1, -1)
    if batch.shape[0] == 0:
        raise ValueError(f"{name}: empty calibration batch")
    if batch.shape[1] != w.shape[1]:
        raise ValueError(f"{name}: calibration width {batch.shape[1]} != layer input {w.shape[1]}")
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    f = factors if factors is not None else svd(w, name)

    acts = batch @ w.T  # (samples, neurons)
    flat = int(np.argmax(np.abs(acts)))
    j_star, i_star = divmod(flat, acts.shape[1])
    # projections of every sample on every right singular vector
    proj = batch @ f.v
    mass = np.abs(f.sigma * f.u[i_star] * proj[j_star])
    report = PCDRReport(
        layer_name=name,
        pcdr=_pcdr_curve(mass, k_max),
        sigma_max=float(f.sigma[0]),
        max_abs_activation=float(np.abs(acts[j_star, i_star])),
        argmax_neuron=int(i_star),
        argmax_sample=int(j_star),
    )
    if top_fraction is not None:
        report.top_fraction_pcdr = _top_fraction_mean(acts, proj, f, k_max, top_fraction)
    return report


def _top_fraction_mean(acts, proj, f: SVDFactors, k_max: int, fraction: float):
    if not 0.0 < fraction <= 1.0:
        raise ValueError("top_fraction must lie in (0, 1]")
    count = max(1, int(np.ceil(fraction * acts.size)))
    order = np.argsort(-np.abs(acts), axis=None, kind="stable")[:count]
    sums = {k: 0.0 for k in range(1, min(k_max, f.rank_bound) + 1)}
    defined = 0
    for flat in order:
        j, i = divmod(int(flat), acts.shape[1])
        mass = np.abs(f.sigma * f.u[i] * proj[j])
        curve = _pcdr_curve(mass, k_max)
        if curve[1] is None:
            continue
        defined += 1
        for k, v in curve.items():
            sums[k] += v
    if defined == 0:
        return {k: None for k in sums}
    return {k: s / defined for k, s in sums.items()}


@dataclass(frozen=True)
class BoundCheck:
    lhs: float
    rhs: float
    holds: bool


def verify_bound(w, x, sigma_max: float | None = None) -> BoundCheck:
    """Check ``||W x|| <= sigma_max(W) ||x||`` with 1e-9 absolute slack."""
    w = as_matrix(w)
    x = _as_vector(x, w.shape[1])
    if sigma_max is None:
        sigma_max = float(svd(w).sigma[0])
    lhs = float(np.linalg.norm(w @ x))
    rhs = float(sigma_max * np.linalg.norm(x))
    return BoundCheck(lhs=lhs, rhs=rhs, holds=lhs <= rhs + 1e-9)
