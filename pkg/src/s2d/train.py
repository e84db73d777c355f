"""Training regimes: baseline, S2D, QAT and QAT+S2D.

The S2D regimes follow the amortised loop: penalty matrices are refreshed on
the ``refresh_interval`` grid and, at every step, ``strength * G_reg`` is added
to each weight's task gradient before the AdamW update.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .diagnostics import audit_layer, pcdr_spectral
from .linalg import svd
from .model import LOSSES, ToyModel, backward, collect_calibration, forward, init_model
from .optim import AdamWState, adamw_step
from .quant import QuantContext, QuantScheme, parse_bits, ptq_model
from .regularizer import PenaltyCache, PenaltyScheduler, apply_penalty, penalty_entry, s2d_loss, staleness_similarity
from .tasks import SpikedTask, make_spiked_task

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


StepHook = Callable[[int, ToyModel, "PenaltyCache | None"], None]


@dataclass
class TrainResult:
    model: ToyModel
    initial_model: ToyModel
    log: list[dict] = field(default_factory=list)
    staleness: list[dict] = field(default_factory=list)
    cache: PenaltyCache | None = None


def build_model(cfg: ExperimentConfig) -> ToyModel:
    rng = np.random.default_rng([cfg.seed, 1])
    return init_model(cfg.dims(), rng, cfg.model.init_scale, cfg.model.attention_tokens or None)


def layer_metrics(model: ToyModel, calib_x: np.ndarray, k_max: int = 3) -> dict[str, dict]:
    """sigma_max, spectral and activation PCDR for k = 1..k_max, and max |W x| per weight matrix."""
    inputs = collect_calibration(model, calib_x)
    out = {}
    for name, w in model.weight_matrices().items():
        f = svd(w, name)
        x = inputs[_input_site(model, name)]
        if model.attention is not None and name.startswith(model.attention.name + "."):
            x = x.reshape(-1, model.attention.dim)
        rep = audit_layer(w, x, k_max, name=name, factors=f)
        ks = range(1, min(k_max, f.rank_bound) + 1)
        out[name] = {
            "sigma_max": float(f.sigma[0]),
            "pcdr_spectral": {str(k): pcdr_spectral(f.sigma, k) for k in ks},
            "pcdr_activation": {str(k): v for k, v in rep.pcdr.items()},
            "max_abs_activation": rep.max_abs_activation,
        }
    return out


def _input_site(model: ToyModel, name: str) -> str:
    if model.attention is not None and name.startswith(model.attention.name + "."):
        proj = name.split(".", 1)[1]
        return f"{model.attention.name}.o.input" if proj == "o" else f"{model.attention.name}.input"
    return f"{name}.input"


def targets_for(loss: str, y: np.ndarray) -> np.ndarray:
    """Regression targets, or their argmax as class labels for cross-entropy."""
    return np.argmax(y, axis=1) if loss == "xent" else y


def evaluate(model: ToyModel, data: tuple[np.ndarray, np.ndarray], loss: str = "mse", quant=None) -> float:
    x, y = data
    y = targets_for(loss, y)
    pred = forward(model, x, quant)[0] if quant is None or isinstance(quant, QuantContext) else quant.forward(x)
    return LOSSES[loss](pred, y)[0]


def quantized_eval(model: ToyModel, task: SpikedTask, calib_x: np.ndarray, bits: str, data, loss: str = "mse"):
    w_bits, a_bits = parse_bits(bits)
    qm = ptq_model(model, collect_calibration(model, calib_x), w_bits, a_bits)
    x, y = data
    return LOSSES[loss](qm.forward(x), targets_for(loss, y))[0], qm


def train(
    cfg: ExperimentConfig,
    on_step: StepHook | None = None,
    threaded_refresh: bool = False,
    task_weight: float = 1.0,
) -> TrainResult:
    """Run one training regime to completion.

    ``on_step(step, model, cache)`` is invoked after every optimizer update.
    ``task_weight`` scales the task-loss gradient (0 gives a pure-penalty run).
    Raises ``DivergenceError`` when the task loss becomes non-finite.
    """
    task = make_spiked_task(cfg.resolved_task())
    model = build_model(cfg)
    initial = model.copy()
    params = model.params()
    weights = model.weight_matrices()
    weight_param = {name: f"{name}.weight" for name in weights}
    o = cfg.optim
    opt = AdamWState(lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps, weight_decay=o.weight_decay)
    loss_fn = LOSSES[cfg.model.loss]
    stream = task.stream(cfg.task_seed, o.batch_size)
    calib_x = task.calibration(cfg.calibration_seed, cfg.quant.calibration_size)

    scheduler = None
    if cfg.uses_s2d:
        shapes = {name: w.shape for name, w in weights.items()}
        scheduler = PenaltyScheduler(cfg.s2d, shapes, threaded=threaded_refresh)
    qat_ctx = None
    if cfg.uses_qat:
        qat_ctx = QuantContext(QuantScheme.for_weights(cfg.quant.w_bits), QuantScheme.for_activations(cfg.quant.a_bits))

    def snapshot():
        return {n: w.copy() for n, w in model.weight_matrices().items()}, _selection_calibration(cfg, model, calib_x)

    result = TrainResult(model=model, initial_model=initial)
    cache = None
    interval_loss = 0.0
    try:
        for step in range(cfg.steps):
            if scheduler is not None:
                cache = scheduler.before_step(step, snapshot)
            x, y = next(stream)
            quant = qat_ctx if qat_ctx is not None and step >= cfg.quant.warmup_steps else None
            pred, fwd = forward(model, x, quant)
            loss, dloss = loss_fn(pred, targets_for(cfg.model.loss, y))
            if not np.isfinite(loss):
                raise DivergenceError(step, loss)
            grads = backward(model, fwd, dloss if task_weight == 1.0 else task_weight * dloss)
            if cache is not None:
                for name, pname in weight_param.items():
                    grads[pname] = apply_penalty(grads[pname], cache[name], cfg.s2d.strength)
            adamw_step(opt, params, grads)
            interval_loss += loss
            if on_step is not None:
                on_step(step, model, cache)
            if (step + 1) % cfg.log_interval == 0:
                entry = _log_entry(cfg, model, calib_x, step + 1, interval_loss / cfg.log_interval, cache)
                result.log.append(entry)
                result.staleness.append(_staleness(cfg, model, calib_x, cache, step + 1))
                interval_loss = 0.0
    finally:
        if scheduler is not None:
            scheduler.close()
    result.cache = cache
    return result


def evaluate_run(cfg: ExperimentConfig, model: ToyModel, cache: PenaltyCache | None = None) -> tuple[dict, dict]:
    """Final metrics (fp and per-bit-setting quantized eval loss) and per-layer statistics."""
    task = make_spiked_task(cfg.resolved_task())
    data = task.eval_set()
    calib_x = task.calibration(cfg.calibration_seed, cfg.quant.calibration_size)
    final = {
        "fp_eval_loss": evaluate(model, data, cfg.model.loss),
        "quant_eval_loss": {b: quantized_eval(model, task, calib_x, b, data, cfg.model.loss)[0] for b in cfg.quant.eval_bits},
    }
    layers = layer_metrics(model, calib_x, cfg.s2d.k_max)
    for name, m in layers.items():
        m["k_hat"] = None if cache is None else cache[name].k_hat
    return final, layers


def _selection_calibration(cfg: ExperimentConfig, model: ToyModel, calib_x: np.ndarray):
    if cfg.s2d.selection_mode != "activation":
        return None
    inputs = collect_calibration(model, calib_x)
    out = {}
    for name in model.weight_matrices():
        x = inputs[_input_site(model, name)]
        if model.attention is not None and name.startswith(model.attention.name + "."):
            x = x.reshape(-1, model.attention.dim)
        out[name] = x
    return out


def _log_entry(cfg, model, calib_x, step, task_loss, cache) -> dict:
    layers = layer_metrics(model, calib_x, cfg.s2d.k_max)
    for name, metrics in layers.items():
        penalty = 0.0
        if cache is not None and cache[name].k_hat is not None:
            penalty = s2d_loss(None, cfg.s2d.power, cfg.s2d.strength, cache[name].k_hat, svd(model.weight_matrices()[name]))
        metrics["s2d_penalty"] = penalty
        metrics["k_hat"] = None if cache is None else cache[name].k_hat
    return {"step": step, "task_loss": task_loss, "layers": layers}


def _staleness(cfg, model, calib_x, cache: PenaltyCache | None, step: int) -> dict:
    """Cosine similarity between each cached penalty and a freshly computed one."""
    out = {}
    if cache is None:
        return {"step": step, "cosine": out}
    calib = _selection_calibration(cfg, model, calib_x)
    for name, w in model.weight_matrices().items():
        entry = cache[name]
        if entry.k_hat is None:
            continue
        fresh = penalty_entry(w, cfg.s2d, step, None if calib is None else calib.get(name), name)
        out[name] = staleness_similarity(entry.g_reg, fresh.g_reg)
    return {"step": step, "cosine": out}
