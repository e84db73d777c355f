"""Run reports, deterministic JSON output and pairwise comparison."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_from_dict, flatten

SCHEMA_NAME = "run_report.schema.json"
REPORT_VERSION = 1


# ---------------------------------------------------------------- JSON output


def _encode(obj, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError(f"non-finite number {x!r} cannot be written")
        text = format(x, ".17g")
        if "e" not in text and "." not in text and "n" not in text:
            text += ".0"
        return text
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = sorted(obj.items(), key=lambda kv: str(kv[0]))
        body = [f"{pad}{json.dumps(str(k), ensure_ascii=False)}: {_encode(v, indent, level + 1)}" for k, v in items]
        return "{\n" + ",\n".join(body) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        body = [pad + _encode(v, indent, level + 1) for v in seq]
        return "[\n" + ",\n".join(body) + "\n" + end + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(obj, indent: int = 2) -> str:
    """JSON with sorted keys and every real written with 17 significant digits."""
    return _encode(obj, indent, 0) + "\n"


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def read_json(path: str | Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- run reports


def load_schema() -> dict:
    text = resources.files("s2d").joinpath("schemas", SCHEMA_NAME).read_text(encoding="utf-8")
    return json.loads(text)


def validate_report(report: dict) -> None:
    """Raise ``jsonschema.ValidationError`` if ``report`` does not match the checked-in schema."""
    import jsonschema

    jsonschema.validate(report, load_schema())
    _check_finite(report, "report")


def _check_finite(obj, where: str) -> None:
    if isinstance(obj, float) and not math.isfinite(obj):
        raise ValueError(f"{where}: non-finite value")
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{where}.{k}")
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            _check_finite(v, f"{where}[{i}]")


def run_experiment(cfg: ExperimentConfig, threaded_refresh: bool = False):
    """Train ``cfg`` to completion and return ``(TrainResult, RunReport dict)``."""
    from .train import evaluate_run, train

    result = train(cfg, threaded_refresh=threaded_refresh)
    final, layers = evaluate_run(cfg, result.model, result.cache)
    return result, build_run_report(cfg, final, layers, result.log, result.staleness)


def build_run_report(cfg: ExperimentConfig, final: dict, layers: dict, series: list, staleness: list) -> dict:
    return {
        "report_version": REPORT_VERSION,
        "config": cfg.to_dict(),
        "final": final,
        "layers": layers,
        "series": series,
        "staleness": staleness,
    }


# ---------------------------------------------------------------- comparison

# Fields that must agree for two reports to be comparable.
_MATCH_PREFIXES = ("seed", "steps", "log_interval", "task.", "model.", "optim.", "quant.eval_bits", "quant.calibration_")


class IncompatibleReports(ValueError):
    def __init__(self, fields: list[str]):
        self.fields = fields
        super().__init__("reports are not comparable; mismatched fields: " + ", ".join(fields))


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


@dataclass
class Comparison:
    # delta = A - B; every tracked metric is lower-is-better, so positive means B is better
    deltas: dict[str, float]
    values_a: dict[str, float]
    values_b: dict[str, float]
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_json_dict(self) -> dict:
        return {
            "deltas": self.deltas,
            "a": self.values_a,
            "b": self.values_b,
            "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in self.checks],
            "passed": self.passed,
        }

    def to_text(self) -> str:
        names = sorted(self.deltas)
        width = max([len(n) for n in names] + [6])
        lines = [f"{'metric':<{width}}  {'A':>14}  {'B':>14}  {'A-B':>14}"]
        for n in names:
            lines.append(f"{n:<{width}}  {self.values_a[n]:>14.6g}  {self.values_b[n]:>14.6g}  {self.deltas[n]:>+14.6g}")
        for c in self.checks:
            lines.append(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
        return "\n".join(lines)


def metric_values(report: dict) -> dict[str, float]:
    out = {"fp_eval_loss": report["final"]["fp_eval_loss"]}
    for bits, loss in report["final"]["quant_eval_loss"].items():
        out[f"quant_eval_loss.{bits}"] = loss
    for name, m in report["layers"].items():
        out[f"{name}.sigma_max"] = m["sigma_max"]
        out[f"{name}.max_abs_activation"] = m["max_abs_activation"]
        for k, v in m["pcdr_spectral"].items():
            if v is not None:
                out[f"{name}.pcdr{k}_spectral"] = v
    return out


def mismatched_fields(a: dict, b: dict) -> list[str]:
    fa = flatten(config_from_dict(a["config"]))
    fb = flatten(config_from_dict(b["config"]))
    keys = sorted(set(fa) | set(fb))
    return [k for k in keys if k.startswith(_MATCH_PREFIXES) and fa.get(k) != fb.get(k)]


def compare(a: dict, b: dict, fp_tolerance: float = 0.05, w8_tolerance: float = 0.01) -> Comparison:
    """Deltas A - B plus the directional checks that apply to the pair.

    Checks only apply when B is the S2D twin of A (same regime family with the
    regularizer switched on); otherwise the list is empty and the comparison
    passes vacuously.
    """
    bad = mismatched_fields(a, b)
    if bad:
        raise IncompatibleReports(bad)
    va, vb = metric_values(a), metric_values(b)
    common = sorted(set(va) & set(vb))
    cmp = Comparison({k: va[k] - vb[k] for k in common}, {k: va[k] for k in common}, {k: vb[k] for k in common})
    ra, rb = a["config"]["regime"], b["config"]["regime"]
    twin = {"baseline": "s2d", "qat": "qat_s2d"}
    if twin.get(ra) == rb:
        cmp.checks = _direction_checks(a, b, fp_tolerance, w8_tolerance, ptq=ra == "baseline")
    return cmp


def _direction_checks(a: dict, b: dict, fp_tol: float, w8_tol: float, ptq: bool) -> list[Check]:
    checks = []
    fa, fb = a["final"]["fp_eval_loss"], b["final"]["fp_eval_loss"]
    checks.append(Check("fp_preserved", abs(fb - fa) <= fp_tol * fa, f"fp {fa:.6g} -> {fb:.6g} (limit {fp_tol:.0%})"))
    for name, lb in b["layers"].items():
        if lb.get("k_hat") is None:
            continue
        la = a["layers"][name]
        cut = 1.0 - lb["sigma_max"] / la["sigma_max"] if la["sigma_max"] > 0 else 0.0
        checks.append(Check(f"{name}.sigma_max_reduced", cut >= 0.2, f"reduction {cut:.1%} (need >= 20%)"))
        pa, pb = la["pcdr_spectral"].get("1"), lb["pcdr_spectral"].get("1")
        ok = pa is not None and pb is not None and pb < pa
        checks.append(Check(f"{name}.pcdr1_lower", ok, f"PCDR1 {pa} -> {pb}"))
    qa, qb = a["final"]["quant_eval_loss"], b["final"]["quant_eval_loss"]
    if "W4A4" in qa and "W4A4" in qb:
        checks.append(Check("w4a4_improved", qb["W4A4"] < qa["W4A4"], f"W4A4 {qa['W4A4']:.6g} -> {qb['W4A4']:.6g}"))
    if ptq and "W8A8" in qa and "W8A8" in qb:
        for tag, rep in (("a", a), ("b", b)):
            fp, w8 = rep["final"]["fp_eval_loss"], rep["final"]["quant_eval_loss"]["W8A8"]
            rel = abs(w8 - fp) / fp if fp > 0 else abs(w8 - fp)
            checks.append(Check(f"w8a8_close_{tag}", rel <= w8_tol, f"W8A8 {w8:.6g} vs fp {fp:.6g} ({rel:.2%})"))
    return checks
