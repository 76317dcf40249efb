"""AdamW, the linear warmup/decay schedule, the training loop and gradient checking."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .peft import PeftSpec, attach_peft, count_trainable, frozen_digest
from .rng import stream
from .tasks import Split, evaluate


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    warmup_ratio: float = 0.06
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    schedule: str = "linear"
    max_grad_norm: float | None = None
    eval_batch_size: int = 512

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError(f"warmup_ratio must lie in [0, 1], got {self.warmup_ratio}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not isinstance(self.epochs, int) or self.epochs < 0:
            raise ValueError(f"epochs must be a non-negative int, got {self.epochs!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ValueError(f"batch_size must be a positive int, got {self.batch_size!r}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.schedule != "linear":
            raise ValueError(f"unsupported schedule {self.schedule!r}")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ValueError("max_grad_norm must be positive when set")

    def warmup_steps(self, total: int) -> int:
        return int(round(self.warmup_ratio * total))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(t: int, total: int, cfg: TrainConfig) -> float:
    """Linear ramp from 0 to ``cfg.lr`` over the warmup steps, then linear decay to 0 at ``total``."""
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    warmup = cfg.warmup_steps(total)
    if t < warmup:
        return cfg.lr * t / warmup
    if total == warmup:
        return cfg.lr if t < total else 0.0
    return cfg.lr * (total - t) / (total - warmup)


class AdamW:
    """Adam with decoupled weight decay; state exists only for registry parameters."""

    def __init__(self, registry, cfg: TrainConfig):
        self.params = OrderedDict(registry)
        self.cfg = cfg
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def state_size(self) -> int:
        return sum(a.size for a in self.m.values()) + sum(a.size for a in self.v.values())

    def step(self, lr: float) -> None:
        cfg = self.cfg
        b1, b2 = cfg.betas
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in parameter {name}")
            grads[name] = g
        if cfg.max_grad_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
            if norm > cfg.max_grad_norm:
                factor = cfg.max_grad_norm / (norm + 1e-6)
                grads = {n: g * g.dtype.type(factor) for n, g in grads.items()}
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            dt = p.data.dtype.type
            m = self.m[name] = dt(b1) * self.m[name] + dt(1 - b1) * g
            v = self.v[name] = dt(b2) * self.v[name] + dt(1 - b2) * g * g
            data = p.data
            if cfg.weight_decay:
                data = data - dt(lr * cfg.weight_decay) * data
            mhat = m / dt(c1)
            vhat = v / dt(c2)
            p.data = data - dt(lr) * mhat / (np.sqrt(vhat) + dt(cfg.adam_eps))
            p.grad = None


def adamw_step(optimizer: AdamW, lr: float) -> None:
    optimizer.step(lr)


@dataclass
class TrainReport:
    method: str
    steps: list = field(default_factory=list)  # (step, lr, loss)
    epochs: list = field(default_factory=list)  # {"epoch", "train_loss", "valid_acc"}
    best_epoch: int = 0
    best_valid_acc: float = 0.0
    test_acc: float = 0.0
    trainable_params: int = 0
    total_params: int = 0
    frozen_digest_before: str = ""
    frozen_digest_after: str = ""
    wall_clock: float = 0.0

    @property
    def losses(self) -> list:
        return [s[2] for s in self.steps]

    def to_json(self) -> str:
        """Deterministic JSON; wall-clock time is left out on purpose (see ``meta``)."""
        d = {
            "method": self.method,
            "best_epoch": self.best_epoch,
            "best_valid_acc": self.best_valid_acc,
            "test_acc": self.test_acc,
            "trainable_params": self.trainable_params,
            "total_params": self.total_params,
            "frozen_digest_before": self.frozen_digest_before,
            "frozen_digest_after": self.frozen_digest_after,
            "epochs": self.epochs,
            "final_loss": self.steps[-1][2] if self.steps else None,
            "n_steps": len(self.steps),
        }
        return json.dumps(d, indent=2, sort_keys=True)

    def meta(self) -> dict:
        return {"wall_clock_seconds": self.wall_clock, "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z")}

    def steps_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "lr", "loss", "epoch", "valid_acc"])
        by_step = {e["end_step"]: e for e in self.epochs if e["epoch"] > 0}
        for step, lr, loss in self.steps:
            e = by_step.get(step)
            w.writerow([step, repr(lr), repr(loss), e["epoch"] if e else "", repr(e["valid_acc"]) if e else ""])
        return buf.getvalue()


class Trainer:
    """Stateful loop over registry parameters; ``run`` may be called repeatedly."""

    def __init__(self, model, hooks, registry, train_split: Split, cfg: TrainConfig, total_steps=None):
        self.model, self.hooks, self.registry = model, hooks, registry
        self.data = train_split
        self.cfg = cfg
        self.steps_per_epoch = math.ceil(len(train_split) / cfg.batch_size) if len(train_split) else 0
        self.total_steps = cfg.epochs * self.steps_per_epoch if total_steps is None else total_steps
        self.optimizer = AdamW(registry, cfg)
        self.step = 0
        self.history = []
        self._perm, self._perm_epoch = None, None

    def loss_on(self, idx) -> T.Tensor:
        logits = self.model(self.data.tokens[idx], hooks=self.hooks)
        return T.cross_entropy(logits, self.data.labels[idx])

    def _batch_indices(self, step: int) -> np.ndarray:
        epoch, within = divmod(step, self.steps_per_epoch)
        if self._perm_epoch != epoch:
            self._perm = stream(self.cfg.seed, "shuffle", epoch).permutation(len(self.data))
            self._perm_epoch = epoch
        bs = self.cfg.batch_size
        return self._perm[within * bs:(within + 1) * bs]

    def run(self, n_steps: int) -> list:
        """Take up to ``n_steps`` optimizer steps; returns the new (step, lr, loss) rows."""
        out = []
        for _ in range(n_steps):
            if self.step >= self.total_steps:
                break
            idx = self._batch_indices(self.step)
            lr = lr_at(self.step, self.total_steps, self.cfg)
            loss = self.loss_on(idx)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at step {self.step + 1}")
            T.backward(loss)
            self.optimizer.step(lr)
            self.model.zero_grad()
            self.step += 1
            row = (self.step, lr, value)
            out.append(row)
            self.history.append(row)
        return out


def train(model, spec: PeftSpec, task_splits, cfg: TrainConfig, hooks=None, registry=None, peft_seed=None) -> TrainReport:
    """Train ``spec`` on the splits and restore the best-validation registry state.

    ``task_splits`` is ``(train, valid, test)``.  Validation runs before the
    first step (epoch 0) and after every epoch; ties keep the earlier epoch.
    """
    start = time.perf_counter()
    train_split, valid_split, test_split = task_splits
    if hooks is None or registry is None:
        hooks, registry = attach_peft(model, spec, seed=cfg.seed if peft_seed is None else peft_seed)
    report = TrainReport(method=spec.label())
    report.trainable_params = count_trainable(registry)
    report.total_params = model.num_parameters() + sum(
        t.size for name, t in registry.items() if name not in model.params)
    report.frozen_digest_before = frozen_digest(model)

    def snapshot():
        return {n: t.data.copy() for n, t in registry.items()}

    valid0 = evaluate(model, valid_split, hooks=hooks, batch_size=cfg.eval_batch_size)
    report.epochs.append({"epoch": 0, "end_step": 0, "train_loss": None, "valid_acc": valid0})
    best_acc, best_epoch, best_state = valid0, 0, snapshot()

    trainer = Trainer(model, hooks, registry, train_split, cfg)
    for epoch in range(1, cfg.epochs + 1):
        try:
            rows = trainer.run(trainer.steps_per_epoch)
        except DivergenceError as exc:
            report.steps = list(trainer.history)
            report.wall_clock = time.perf_counter() - start
            exc.report = report
            raise
        acc = evaluate(model, valid_split, hooks=hooks, batch_size=cfg.eval_batch_size)
        mean_loss = float(np.mean([r[2] for r in rows])) if rows else None
        report.epochs.append({"epoch": epoch, "end_step": trainer.step, "train_loss": mean_loss, "valid_acc": acc})
        if acc > best_acc:
            best_acc, best_epoch, best_state = acc, epoch, snapshot()

    report.steps = list(trainer.history)
    for n, t in registry.items():
        t.data = best_state[n]
    report.best_epoch = best_epoch
    report.best_valid_acc = best_acc
    report.test_acc = evaluate(model, test_split, hooks=hooks, batch_size=cfg.eval_batch_size)
    report.frozen_digest_after = frozen_digest(model)
    report.wall_clock = time.perf_counter() - start
    return report


# ---------------------------------------------------------------------------
# gradient checking


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps gradients that are analytically zero (e.g. attention key
    biases, which softmax ignores) from turning finite-difference roundoff
    into a relative error of 1.
    """
    diff = np.abs(analytic - numeric)
    return diff / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(model, hooks, registry, tokens, labels, step: float = 1e-5, max_elements=None, seed: int = 0):
    """Compare backprop grads of the mean cross-entropy with central differences.

    Returns an ordered map ``registry name -> max relative error``.  Only the
    registry is checked; frozen parameters carry no grads and are absent.
    ``max_elements`` subsamples large tensors (seeded) to bound runtime.
    """
    for name, t in registry.items():
        if t.dtype != np.float64:
            raise ValueError(f"grad_check needs verification precision (float64); {name} is {t.dtype}")

    def loss_value():
        with T.no_grad():
            return float(T.cross_entropy(model(tokens, hooks=hooks), labels).data)

    for t in registry.values():
        t.grad = None
    loss = T.cross_entropy(model(tokens, hooks=hooks), labels)
    T.backward(loss)
    analytic = {n: t.grad.copy() for n, t in registry.items()}
    for t in registry.values():
        t.grad = None
    model.zero_grad()

    rng = np.random.default_rng(seed)
    report = OrderedDict()
    for name, t in registry.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            h = step * max(1.0, abs(orig))
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            down = loss_value()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * h)
        rel = relative_errors(analytic[name].reshape(-1)[idx], numeric)
        report[name] = float(rel.max()) if rel.size else 0.0
    return report


def perturb_registry(registry, seed: int, scale: float = 0.1) -> None:
    """Move every trainable tensor off its identity init so all grads are informative."""
    rng = stream(seed, "perturb")
    for t in registry.values():
        t.data = t.data + (scale * rng.standard_normal(t.shape)).astype(t.dtype)
