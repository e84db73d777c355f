"""Selective Spectral Decay: loss, gradient, rank selection and penalty cache.

The penalty for a weight ``W = U diag(s) V^T`` is ``lam/(n+1) * sum(s**(n+1))``
with gradient ``lam * U diag(s**n) V^T``. During training only the top ``k_hat``
components of layers flagged by PCDR are penalised, and the penalty matrices
are recomputed every ``refresh_interval`` steps and reused in between.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Mapping
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import audit_layer, pcdr_spectral
from .linalg import SVDConvergenceError, SVDFactors, as_matrix, svd, truncated_reconstruct

log = logging.getLogger(__name__)

SELECTION_MODES = ("spectral", "activation")
TIE_RTOL = 1e-8


@dataclass(frozen=True)
class S2DConfig:
    power: float = 2.0
    strength: float = 5e-4
    pcdr_threshold: float = 0.95
    k_max: int = 3
    refresh_interval: int = 100
    lookahead: int = 3
    selection_mode: str = "spectral"
    pcdr_enabled: bool = True

    def __post_init__(self):
        if not self.power > 1:
            raise ValueError(f"power must be > 1, got {self.power}")
        if self.strength < 0:
            raise ValueError(f"strength must be >= 0, got {self.strength}")
        if not 0 < self.pcdr_threshold <= 1:
            raise ValueError(f"pcdr_threshold must lie in (0, 1], got {self.pcdr_threshold}")
        if self.k_max < 1:
            raise ValueError(f"k_max must be >= 1, got {self.k_max}")
        if self.refresh_interval < 1:
            raise ValueError(f"refresh_interval must be >= 1, got {self.refresh_interval}")
        if self.lookahead < 0 or self.lookahead >= self.refresh_interval:
            raise ValueError("lookahead must satisfy 0 <= lookahead < refresh_interval")
        if self.selection_mode not in SELECTION_MODES:
            raise ValueError(f"selection_mode must be one of {SELECTION_MODES}")


def l2_loss(w, lam: float) -> float:
    w = as_matrix(w)
    return 0.5 * lam * float(np.sum(w * w))


def s2d_loss(w, n: float, lam: float, k: int | None = None, factors: SVDFactors | None = None) -> float:
    """Penalty value; with ``k`` only the top-k singular values contribute."""
    f = factors if factors is not None else svd(w)
    s = f.sigma if k is None else f.sigma[:k]
    return lam / (n + 1.0) * float(np.sum(s ** (n + 1.0)))


def s2d_gradient(f: SVDFactors, n: float, lam: float, k: int | None = None) -> np.ndarray:
    return lam * truncated_reconstruct(f, f.rank_bound if k is None else k, n)


def _expand_ties(sigma: np.ndarray, k: int) -> int:
    edge = sigma[k - 1]
    while k < sigma.shape[0] and abs(sigma[k] - edge) <= TIE_RTOL * edge:
        k += 1
    return k


def select_rank(
    sigma,
    cfg: S2DConfig,
    *,
    factors: SVDFactors | None = None,
    calibration=None,
    name: str = "layer",
) -> int | None:
    """Smallest ``k <= k_max`` whose PCDR reaches the threshold, else ``None``.

    In activation mode ``factors`` and ``calibration`` (samples as rows) are
    required and PCDR is evaluated at the batch's largest activation. With
    ``pcdr_enabled`` off every component is selected.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    n_comp = sigma.shape[0]
    if not cfg.pcdr_enabled:
        return n_comp
    k_top = min(cfg.k_max, n_comp)
    if cfg.selection_mode == "spectral":
        curve = {k: pcdr_spectral(sigma, k) for k in range(1, k_top + 1)}
    else:
        if factors is None or calibration is None:
            raise ValueError("activation selection needs factors and a calibration batch")
        w = factors.reconstruct()
        curve = audit_layer(w, calibration, k_top, name=name, factors=factors).pcdr
    if curve[1] is None:
        log.info("%s: PCDR undefined, treating layer as healthy", name)
        return None
    for k in range(1, k_top + 1):
        if curve[k] >= cfg.pcdr_threshold:
            return _expand_ties(sigma, k)
    return None


@dataclass
class CacheEntry:
    g_reg: np.ndarray
    k_hat: int | None
    computed_at_step: int


@dataclass
class PenaltyCache:
    entries: dict[str, CacheEntry] = field(default_factory=dict)

    @classmethod
    def zeros(cls, shapes: Mapping[str, tuple[int, int]], step: int = 0) -> "PenaltyCache":
        return cls({k: CacheEntry(np.zeros(s), None, step) for k, s in shapes.items()})

    def __getitem__(self, name: str) -> CacheEntry:
        return self.entries[name]

    def selected(self) -> dict[str, int]:
        return {k: e.k_hat for k, e in self.entries.items() if e.k_hat is not None}


def penalty_entry(w, cfg: S2DConfig, step: int, calibration=None, name: str = "layer") -> CacheEntry:
    f = svd(w, name)
    k_hat = select_rank(f.sigma, cfg, factors=f, calibration=calibration, name=name)
    if k_hat is None:
        return CacheEntry(np.zeros(f.shape), None, step)
    return CacheEntry(truncated_reconstruct(f, k_hat, cfg.power), k_hat, step)


def refresh_cache(
    layers,
    cfg: S2DConfig,
    step: int,
    previous: PenaltyCache | None = None,
    calibration: Mapping[str, np.ndarray] | None = None,
) -> PenaltyCache:
    """Recompute every layer's penalty matrix from the given weights.

    ``layers`` is a mapping name -> weight (a plain sequence is named
    ``layer0``, ``layer1``, ...). A layer whose SVD fails keeps its previous
    entry.
    """
    if not isinstance(layers, Mapping):
        layers = {f"layer{i}": w for i, w in enumerate(layers)}
    out = PenaltyCache()
    for name, w in layers.items():
        calib = None if calibration is None else calibration.get(name)
        try:
            out.entries[name] = penalty_entry(w, cfg, step, calib, name)
        except SVDConvergenceError as exc:
            log.warning("%s: keeping stale penalty (%s)", name, exc)
            if previous is not None and name in previous.entries:
                out.entries[name] = previous.entries[name]
            else:
                out.entries[name] = CacheEntry(np.zeros(np.shape(w)), None, step)
    return out


def apply_penalty(task_gradient: np.ndarray, entry: CacheEntry, lam: float) -> np.ndarray:
    if np.shape(task_gradient) != entry.g_reg.shape:
        raise ValueError(f"shape mismatch: gradient {np.shape(task_gradient)} vs penalty {entry.g_reg.shape}")
    if entry.k_hat is None or lam == 0.0:
        return task_gradient
    return task_gradient + lam * entry.g_reg


def staleness_similarity(cached, fresh) -> float | None:
    """Cosine similarity of two flattened matrices; ``None`` if both are zero."""
    a = np.asarray(cached, dtype=np.float64).ravel()
    b = np.asarray(fresh, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("staleness_similarity needs equally shaped inputs")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 and nb == 0.0:
        return None
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


Snapshot = Callable[[], tuple[dict[str, np.ndarray], dict[str, np.ndarray] | None]]


class PenaltyScheduler:
    """Drives cache refreshes on the ``step % refresh_interval == 0`` grid.

    With ``lookahead = L`` the refresh due at step ``t`` is computed from the
    weights seen at step ``t - L`` and installed when step ``t`` begins. In
    threaded mode the computation runs on a worker thread; inline mode does it
    synchronously from the same snapshot, so both yield identical caches.
    """

    def __init__(self, cfg: S2DConfig, shapes: Mapping[str, tuple[int, int]], threaded: bool = False):
        self.cfg = cfg
        self.cache = PenaltyCache.zeros(shapes)
        self.threaded = threaded
        self._pool = ThreadPoolExecutor(max_workers=1) if threaded else None
        self._pending: dict[int, Future | PenaltyCache] = {}

    def _compute(self, snapshot, due: int, previous: PenaltyCache) -> PenaltyCache:
        weights, calib = snapshot
        return refresh_cache(weights, self.cfg, due, previous, calib)

    def before_step(self, step: int, snapshot: Snapshot) -> PenaltyCache:
        m, lead = self.cfg.refresh_interval, self.cfg.lookahead
        ahead = step + lead
        if lead > 0 and ahead % m == 0 and ahead not in self._pending and ahead > 0:
            snap = snapshot()
            if self._pool is not None:
                self._pending[ahead] = self._pool.submit(self._compute, snap, ahead, self.cache)
            else:
                self._pending[ahead] = self._compute(snap, ahead, self.cache)
        if step % m == 0:
            pending = self._pending.pop(step, None)
            if pending is None:
                pending = self._compute(snapshot(), step, self.cache)
            elif isinstance(pending, Future):
                pending = pending.result()
            self.cache = pending
        return self.cache

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None
