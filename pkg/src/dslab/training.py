"""Composite deep-supervision loss, optimizers, the training loop and awakening instrumentation."""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data import BatchStream, Dataset, Normalizer, eval_batches
from .layers import Parameter
from .models import ModelGraph, Outputs

PSEUDO_EPOCH_STEPS = 390  # 50,000 / 128


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    batch_size: int = 128
    aux_weight: float = 0.3
    max_steps: int = 3000
    convergence_threshold: float = 0.70
    optimizer: str = "adamw"
    warmup_steps: int | None = None  # explicit linear aux-weight ramp; None = off
    accuracy_window: int = 100
    log_every: int = 10
    ratio_every: int = 10
    stop_at_threshold: bool = False

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.aux_weight < 0:
            raise ValueError(f"aux_weight must be >= 0, got {self.aux_weight}")
        if not 0 < self.convergence_threshold < 1:
            raise ValueError(f"convergence_threshold must be in (0, 1), got {self.convergence_threshold}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"optimizer must be 'adamw' or 'sgd', got {self.optimizer!r}")
        if self.warmup_steps is not None and self.warmup_steps < 1:
            raise ValueError(f"warmup_steps must be >= 1 when set, got {self.warmup_steps}")


# ------------------------------------------------------------------- loss


def effective_aux_weight(alpha: float, step: int, warmup_steps: int | None) -> float:
    if warmup_steps is None:
        return alpha
    return alpha * min(1.0, step / warmup_steps)


@dataclass
class LossParts:
    total: T.Tensor
    main: T.Tensor
    aux: list[T.Tensor]
    aux_sum: T.Tensor | None
    alpha: float


def composite_loss(outputs: Outputs, labels, alpha: float, step: int = 0,
                   warmup_steps: int | None = None) -> LossParts:
    """``CE(main) + alpha_eff * sum_k CE(aux_k)``."""
    main = T.softmax_cross_entropy(outputs.main, labels)
    aux = [T.softmax_cross_entropy(a, labels) for a in outputs.aux]
    a_eff = effective_aux_weight(alpha, step, warmup_steps)
    aux_sum = None
    for term in aux:
        aux_sum = term if aux_sum is None else T.add(aux_sum, term)
    total = main if (aux_sum is None or a_eff == 0.0) else T.add(main, T.scalar_mul(aux_sum, a_eff))
    return LossParts(total, main, aux, aux_sum, a_eff)


# -------------------------------------------------------------- gradients


def grads_of(model: ModelGraph, loss: T.Tensor) -> dict[str, np.ndarray]:
    """Fresh gradients of ``loss`` for every parameter (zeros where unreachable)."""
    model.zero_grad()
    if loss.requires_grad:
        T.backward(loss)
    return {p.name: (np.zeros_like(p.data) if p.grad is None else p.grad) for p in model.parameters()}


def decomposed_gradients(model: ModelGraph, parts: LossParts):
    """Separate gradients of the main loss and of the summed aux losses (two backward passes)."""
    g_main = grads_of(model, parts.main)
    g_aux = grads_of(model, parts.aux_sum) if parts.aux_sum is not None else {
        k: np.zeros_like(v) for k, v in g_main.items()
    }
    return g_main, g_aux


def norm_over(grads: dict[str, np.ndarray], params: list[Parameter]) -> float:
    return math.sqrt(sum(float(np.sum(grads[p.name] ** 2)) for p in params))


def param_norm(params: list[Parameter]) -> float:
    return math.sqrt(sum(float(np.sum(p.data**2)) for p in params))


# -------------------------------------------------------------- optimizers


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: list[Parameter]) -> None:
        for p in params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


class AdamW:
    """Adam with decoupled weight decay on ``weight`` parameters only."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.05):
        self.lr, self.eps, self.weight_decay = lr, eps, weight_decay
        self.b1, self.b2 = betas
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: list[Parameter]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p in params:
            if p.grad is None:
                continue
            if p.decays and self.weight_decay:
                p.data *= 1 - self.lr * self.weight_decay
            m = self.m.setdefault(p.name, np.zeros_like(p.data))
            v = self.v.setdefault(p.name, np.zeros_like(p.data))
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad**2
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(config.lr)
    return AdamW(config.lr, config.betas, config.eps, config.weight_decay)


# ----------------------------------------------------------------- metrics


@dataclass
class StepRecord:
    step: int
    loss_main: float
    loss_aux: list[float]
    loss_total: float
    alpha_eff: float
    batch_acc: float
    running_acc: float
    grad_ratio: float | None = None
    backbone_grad_main: float | None = None
    backbone_grad_aux: float | None = None
    aux_weight_norms: list[float] | None = None
    aux_grad_norms: list[float] | None = None  # C_k estimate: |dL/dW_aux_k| at this step

    @property
    def pseudo_epoch(self) -> float:
        return self.step / PSEUDO_EPOCH_STEPS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["record"] = "step"
        return d


@dataclass
class RunMetrics:
    records: list[StepRecord] = field(default_factory=list)
    steps_to_threshold: int | None = None
    steps_run: int = 0
    wall_time: float = 0.0
    final_train_acc: float | None = None
    final_val_acc: float | None = None

    def summary(self) -> dict:
        return {
            "record": "summary",
            "steps_to_threshold": self.steps_to_threshold,
            "steps_run": self.steps_run,
            "wall_time": self.wall_time,
            "final_train_acc": self.final_train_acc,
            "final_val_acc": self.final_val_acc,
        }

    def ratio_series(self) -> list[tuple[int, float]]:
        return [(r.step, r.grad_ratio) for r in self.records if r.grad_ratio is not None]


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, metrics: RunMetrics):
        self.step = step
        self.metrics = metrics
        super().__init__(f"non-finite loss at step {step}")


def accuracy(logits: T.Tensor, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits.data, axis=1) == labels))


def evaluate(model: ModelGraph, dataset: Dataset, normalizer: Normalizer | None) -> float:
    prev = model.training
    model.eval()
    correct = 0
    try:
        with T.no_grad():
            for batch in eval_batches(dataset, normalizer):
                out = model(batch.inputs)
                correct += int(np.sum(np.argmax(out.main.data, axis=1) == batch.labels))
    finally:
        model.train(prev)
    return correct / len(dataset)


def train(
    model: ModelGraph,
    dataset: Dataset,
    config: TrainConfig,
    seed: int,
    val: Dataset | None = None,
    normalizer: Normalizer | None = None,
    on_record: Callable[[StepRecord], None] | None = None,
) -> RunMetrics:
    """Train an initialized model; deterministic given (model state, dataset, config, seed).

    ``steps_to_threshold`` is the number of optimizer steps taken when the
    running training accuracy (mean batch accuracy over the last
    ``accuracy_window`` steps) first reaches the threshold.
    """
    start = time.perf_counter()
    metrics = RunMetrics()
    stream = iter(BatchStream(dataset, config.batch_size, seed, normalizer))
    opt = make_optimizer(config)
    params = model.parameters()
    backbone = model.backbone_parameters()
    window: deque[float] = deque(maxlen=config.accuracy_window)
    model.train()

    for step in range(config.max_steps):
        batch = next(stream)
        out = model(batch.inputs)
        parts = composite_loss(out, batch.labels, config.aux_weight, step, config.warmup_steps)
        if not np.isfinite(parts.total.data):
            metrics.steps_run = step
            metrics.wall_time = time.perf_counter() - start
            raise TrainingDiverged(step, metrics)

        with_ratio = bool(config.ratio_every) and step % config.ratio_every == 0
        log = with_ratio or (bool(config.log_every) and step % config.log_every == 0)
        rec_extra = {}
        if with_ratio:
            g_main, g_aux = decomposed_gradients(model, parts)
            for p in params:
                p.grad = g_main[p.name] + parts.alpha * g_aux[p.name]
            bm, ba = norm_over(g_main, backbone), norm_over(g_aux, backbone)
            rec_extra = {
                "grad_ratio": ba / bm if bm > 0 else math.inf,
                "backbone_grad_main": bm,
                "backbone_grad_aux": ba,
                "aux_grad_norms": [
                    math.sqrt(sum(float(np.sum(p.grad**2)) for p in model.aux_head_weights(k)))
                    for k in range(1, model.num_aux + 1)
                ],
            }
        else:
            model.zero_grad()
            T.backward(parts.total)

        acc = accuracy(out.main, batch.labels)
        window.append(acc)
        running = float(np.mean(window))
        if metrics.steps_to_threshold is None and running >= config.convergence_threshold:
            metrics.steps_to_threshold = step + 1

        if log:
            rec = StepRecord(
                step=step,
                loss_main=float(parts.main.data),
                loss_aux=[float(a.data) for a in parts.aux],
                loss_total=float(parts.total.data),
                alpha_eff=parts.alpha,
                batch_acc=acc,
                running_acc=running,
                aux_weight_norms=[param_norm(model.aux_head_weights(k)) for k in range(1, model.num_aux + 1)],
                **rec_extra,
            )
            metrics.records.append(rec)
            if on_record is not None:
                on_record(rec)

        opt.step(params)
        metrics.steps_run = step + 1
        metrics.final_train_acc = running
        if config.stop_at_threshold and metrics.steps_to_threshold is not None:
            break

    model.zero_grad()
    if val is not None:
        metrics.final_val_acc = evaluate(model, val, normalizer)
    metrics.wall_time = time.perf_counter() - start
    return metrics


# --------------------------------------------------------------- awakening


@dataclass
class AwakeningRecord:
    lr: float
    steps: np.ndarray
    aux_weight_norm: np.ndarray  # |W_aux(t)| over all aux classifier heads
    backbone_aux_grad: np.ndarray  # |grad_backbone sum_k L_aux(t)|
    head_grad_norm: np.ndarray  # |grad_{W_aux} L(t)|
    per_head_weight_norm: np.ndarray  # (steps + 1, K)

    @property
    def growth_constant(self) -> float:
        """C: the aux-weight gradient norm of the optimized loss at t = 0."""
        return float(self.head_grad_norm[0])

    def linear_fit_r2(self, upto: int = 10) -> float:
        t = self.steps[: upto + 1].astype(float)
        y = self.aux_weight_norm[: upto + 1]
        return r_squared(t, y)

    def proportionality_spread(self, lo: int = 2, hi: int = 10) -> float:
        """max/min - 1 of |grad_backbone L_aux| / |W_aux| over t in [lo, hi]."""
        ratio = self.backbone_aux_grad[lo : hi + 1] / self.aux_weight_norm[lo : hi + 1]
        return float(ratio.max() / ratio.min() - 1.0)


def r_squared(x: np.ndarray, y: np.ndarray) -> float:
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0


class AwakeningUndefined(ValueError):
    pass


def measure_awakening(model: ModelGraph, dataset: Dataset, steps: int = 10, lr: float = 1e-3,
                      batch_size: int = 128, aux_weight: float = 0.3,
                      normalizer: Normalizer | None = None) -> AwakeningRecord:
    """Plain SGD on one fixed batch from zero-initialized aux heads, recording growth for t = 0..steps."""
    aux_w = [p for k in range(1, model.num_aux + 1) for p in model.aux_head_weights(k)]
    if not aux_w or any(np.any(p.data != 0) for p in model.aux_parameters()):
        raise AwakeningUndefined("aux heads must be zero-initialized to measure awakening")
    x = dataset.inputs[:batch_size]
    y = dataset.labels[:batch_size]
    if normalizer is not None:
        x = normalizer(x)
    opt = SGD(lr)
    params = model.parameters()
    backbone = model.backbone_parameters()
    wn, bg, hg, per_head = [], [], [], []
    model.train()
    for t in range(steps + 1):
        parts = composite_loss(model(x), y, aux_weight)
        g_main, g_aux = decomposed_gradients(model, parts)
        for p in params:
            p.grad = g_main[p.name] + parts.alpha * g_aux[p.name]
        wn.append(param_norm(aux_w))
        per_head.append([param_norm(model.aux_head_weights(k)) for k in range(1, model.num_aux + 1)])
        bg.append(norm_over(g_aux, backbone))
        hg.append(math.sqrt(sum(float(np.sum(p.grad**2)) for p in aux_w)))
        if t < steps:
            opt.step(params)
    model.zero_grad()
    return AwakeningRecord(lr, np.arange(steps + 1), np.array(wn), np.array(bg), np.array(hg), np.array(per_head))
