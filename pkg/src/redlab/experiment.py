"""Experiment orchestration shared by the ``train``, ``grad-check`` and ``ablate`` commands."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import tensor as T
from .audit import HostDescriptor, count
from .config import ExperimentConfig, from_dict
from .model import init_model
from .peft import PeftSpec, attach_peft, save_peft
from .tasks import generate
from .train import grad_check, perturb_registry, train

GRAD_TOL = 1e-4

ABLATION_SUITES = {
    "components": [
        PeftSpec("red", component_mask="both"),
        PeftSpec("red", component_mask="scaling_only"),
        PeftSpec("red", component_mask="bias_only"),
    ],
    "positions": [
        PeftSpec("red", positions="ffn"),
        PeftSpec("red", positions="attn"),
        PeftSpec("red", positions="both"),
    ],
    "rank1": [
        PeftSpec("red"),
        PeftSpec("lora", rank=1, alpha=1),
        PeftSpec("adapter", rank=1),
        PeftSpec("adapter_ffn", rank=1),
    ],
}


def build(cfg: ExperimentConfig):
    """Fresh model + attached PEFT for ``cfg`` at the current precision."""
    model = init_model(cfg.model, seed=cfg.seed)
    hooks, registry = attach_peft(model, cfg.peft, seed=cfg.seed)
    return model, hooks, registry


def run_training(cfg: ExperimentConfig, out_dir=None, precision: str = "train"):
    """Train one config; when ``out_dir`` is given write the report files and checkpoints there."""
    with T.precision(precision):
        splits = generate(cfg.task)
        model, hooks, registry = build(cfg)
        report = train(model, cfg.peft, splits, cfg.train, hooks=hooks, registry=registry)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
        (out / "steps.csv").write_text(report.steps_csv(), encoding="utf-8")
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (out / "meta.json").write_text(json.dumps(report.meta(), indent=2) + "\n", encoding="utf-8")
        model.save(out / "base.npz")
        save_peft(out / "peft_best.npz", cfg.peft, registry)
    return report


@dataclass
class GradCheckResult:
    method: str
    errors: dict  # registry name -> max relative error

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= GRAD_TOL


def run_grad_check(cfg: ExperimentConfig, batch_size: int = 4, max_elements: int | None = 48) -> GradCheckResult:
    """Float64 finite-difference check of every registry tensor of ``cfg.peft``.

    Trainable tensors are first moved off their identity initialisation so
    that, e.g., LoRA down-projections receive non-zero gradients.
    """
    with T.precision("verify"):
        train_split, _, _ = generate(cfg.task)
        model, hooks, registry = build(cfg)
        perturb_registry(registry, cfg.seed)
        tokens = train_split.tokens[:batch_size]
        labels = train_split.labels[:batch_size]
        errors = grad_check(model, hooks, registry, tokens, labels, max_elements=max_elements, seed=cfg.seed)
    return GradCheckResult(cfg.peft.label(), errors)


def _ablation_row(cfg_dict: dict) -> dict:
    cfg = from_dict(cfg_dict)
    report = run_training(cfg)
    return {
        "method": cfg.peft.label(),
        "trainable": report.trainable_params,
        "formula": count(cfg.peft, HostDescriptor.from_config(cfg.model)),
        "best_valid_acc": report.best_valid_acc,
        "test_acc": report.test_acc,
        "best_epoch": report.best_epoch,
    }


def run_ablation(suite: str, base: ExperimentConfig, jobs: int = 1) -> list:
    """Train each row of ``suite`` on ``base``; rows differ only in the PEFT spec."""
    if suite not in ABLATION_SUITES:
        raise ValueError(f"unknown ablation suite {suite!r}; expected one of {sorted(ABLATION_SUITES)}")
    cfgs = [base.with_peft(spec).to_dict() for spec in ABLATION_SUITES[suite]]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_ablation_row, cfgs))
    return [_ablation_row(c) for c in cfgs]


def ablation_table(suite: str, rows: list) -> str:
    header = f"{'method':<26}{'# params':>10}{'formula':>10}{'valid acc':>11}{'test acc':>10}"
    lines = [f"ablation: {suite}", header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r['method']:<26}{r['trainable']:>10}{r['formula']:>10}"
                     f"{r['best_valid_acc']:>11.3f}{r['test_acc']:>10.3f}")
    if suite == "components":
        by = {r["method"]: r for r in rows}
        s_only, b_only = by.get("red/ffn/scaling_only"), by.get("red/ffn/bias_only")
        if s_only and b_only:
            gap = b_only["best_valid_acc"] - s_only["best_valid_acc"]
            lines.append("")
            lines.append(f"bias_only - scaling_only valid acc: {gap:+.3f} "
                         f"({'bias vector contributes more' if gap > 0 else 'scaling vector contributes at least as much'})")
    return "\n".join(lines) + "\n"
