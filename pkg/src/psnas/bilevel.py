"""Alternating weight / architecture optimization with Adam.

A search problem exposes two parameter groups (weights and architecture),
the mutable buffers its forward pass touches, and a scalar loss per batch.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Protocol, Sequence

import numpy as np

from .autodiff import Tensor, backward, no_record, record

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e4


class NonFiniteGradient(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Loss went non-finite or above the guard; carries the last good snapshot."""

    def __init__(self, message: str, last_good: dict[str, Any] | None = None):
        super().__init__(message)
        self.last_good = last_good


class SearchProblem(Protocol):
    def weight_params(self) -> list[Tensor]: ...

    def arch_params(self) -> list[Tensor]: ...

    def buffers(self) -> list[np.ndarray]: ...

    def loss(self, batch) -> Tensor: ...


# ------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}.m.{i}"] = m
            out[f"{prefix}.v.{i}"] = v
        return out

    def load_arrays(self, prefix: str, arrays: dict[str, np.ndarray], step: int) -> None:
        count = sum(1 for k in arrays if k.startswith(f"{prefix}.m."))
        self.m = [np.array(arrays[f"{prefix}.m.{i}"]) for i in range(count)]
        self.v = [np.array(arrays[f"{prefix}.v.{i}"]) for i in range(count)]
        self.step = step


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """In-place Adam update; weight decay is added to the gradient before the moments."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ValueError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"gradient {i} (shape {g.shape}) is not finite")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(p.dtype, copy=False)
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -------------------------------------------------------------- gradients

def loss_and_grads(problem: SearchProblem, batch, wrt: Sequence[Tensor]) -> tuple[float, list[np.ndarray]]:
    with record():
        loss = problem.loss(batch)
        backward(loss)
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in wrt]
    for p in [*problem.weight_params(), *problem.arch_params()]:
        p.grad = None
    return float(loss.data), grads


def eval_loss(problem: SearchProblem, batches: Iterable) -> float:
    """Mean loss over batches without recording; buffers are left untouched."""
    saved = _snapshot_buffers(problem)
    try:
        with no_record():
            values = [float(problem.loss(b).data) for b in batches]
    finally:
        _restore_buffers(problem, saved)
    if not values:
        raise ValueError("no batches to evaluate")
    return float(np.mean(values))


def _snapshot_buffers(problem: SearchProblem) -> list[np.ndarray]:
    return [b.copy() for b in problem.buffers()]


def _restore_buffers(problem: SearchProblem, saved: list[np.ndarray]) -> None:
    for b, s in zip(problem.buffers(), saved):
        b[...] = s


def weight_step(problem: SearchProblem, batch, state: AdamState) -> float:
    weights = problem.weight_params()
    loss, grads = loss_and_grads(problem, batch, weights)
    adam_step(weights, grads, state)
    return loss


def first_order_arch_grad(problem: SearchProblem, val_batch) -> tuple[float, list[np.ndarray]]:
    saved = _snapshot_buffers(problem)
    try:
        return loss_and_grads(problem, val_batch, problem.arch_params())
    finally:
        _restore_buffers(problem, saved)


def first_order_arch_step(problem: SearchProblem, val_batch, state: AdamState) -> float:
    """Adam step on alpha along the validation gradient at the current weights."""
    loss, grads = first_order_arch_grad(problem, val_batch)
    adam_step(problem.arch_params(), grads, state)
    return loss


@dataclass
class SecondOrderInfo:
    val_loss: float
    fell_back: bool
    grads: list[np.ndarray]


def second_order_arch_grad(problem: SearchProblem, train_batch, val_batch, xi: float,
                           fd_scale: float = 0.01) -> SecondOrderInfo:
    """Alpha gradient through one virtual weight step, Hessian term by central differences."""
    if xi < 0:
        raise ValueError("xi must be >= 0")
    weights, alphas = problem.weight_params(), problem.arch_params()
    original = [w.data for w in weights]
    saved = _snapshot_buffers(problem)
    try:
        _, g_train = loss_and_grads(problem, train_batch, weights)
        for w, w0, g in zip(weights, original, g_train):
            w.data = w0 - xi * g
        val_loss, grads = loss_and_grads(problem, val_batch, [*weights, *alphas])
        dw, da = grads[:len(weights)], grads[len(weights):]
        norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in dw))
        if norm == 0.0:
            log.warning("validation gradient w.r.t. virtual weights is zero; using first-order step")
            for w, w0 in zip(weights, original):
                w.data = w0
            _restore_buffers(problem, saved)
            val_loss, da = loss_and_grads(problem, val_batch, alphas)
            return SecondOrderInfo(val_loss, True, da)
        r = fd_scale / norm
        for w, w0, g in zip(weights, original, dw):
            w.data = w0 + r * g
        _, g_plus = loss_and_grads(problem, train_batch, alphas)
        for w, w0, g in zip(weights, original, dw):
            w.data = w0 - r * g
        _, g_minus = loss_and_grads(problem, train_batch, alphas)
        out = [a - xi * (gp - gm) / (2.0 * r) for a, gp, gm in zip(da, g_plus, g_minus)]
        out = [o.astype(a.dtype, copy=False) for o, a in zip(out, da)]
        return SecondOrderInfo(val_loss, False, out)
    finally:
        for w, w0 in zip(weights, original):
            w.data = w0
        _restore_buffers(problem, saved)


def second_order_arch_step(problem: SearchProblem, train_batch, val_batch, xi: float,
                           state: AdamState, fd_scale: float = 0.01) -> SecondOrderInfo:
    info = second_order_arch_grad(problem, train_batch, val_batch, xi, fd_scale)
    adam_step(problem.arch_params(), info.grads, state)
    return info


# ------------------------------------------------------------------ loop

@dataclass
class SearchConfig:
    epochs: int = 3
    order: str = "first"
    xi: float | None = None  # None: use the weight learning rate
    fd_scale: float = 0.01
    weight_lr: float = 3e-4
    weight_decay: float = 1e-3
    betas: tuple[float, float] = (0.5, 0.999)
    arch_lr: float = 3e-4
    arch_betas: tuple[float, float] = (0.5, 0.999)
    arch_weight_decay: float = 1e-3

    def __post_init__(self):
        if self.order not in ("first", "second"):
            raise ValueError(f"order must be 'first' or 'second', got {self.order!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.xi is not None and self.xi < 0:
            raise ValueError("xi must be >= 0")

    @property
    def effective_xi(self) -> float:
        if self.order == "first":
            return 0.0
        return self.weight_lr if self.xi is None else self.xi

    def weight_state(self) -> AdamState:
        return AdamState(self.weight_lr, self.betas, self.weight_decay)

    def arch_state(self) -> AdamState:
        return AdamState(self.arch_lr, self.arch_betas, self.arch_weight_decay)


@dataclass
class StepRecord:
    epoch: int
    step: int
    train_loss: float
    val_loss: float


def snapshot(problem: SearchProblem) -> dict[str, list[np.ndarray]]:
    return {"weights": [w.data.copy() for w in problem.weight_params()],
            "arch": [a.data.copy() for a in problem.arch_params()],
            "buffers": _snapshot_buffers(problem)}


def _check_loss(value: float, what: str, step: int, last_good) -> None:
    if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
        raise DivergenceError(f"{what} loss {value} at step {step} exceeds the divergence guard",
                              last_good)


def search_loop(problem: SearchProblem, train_batches: Callable[[int], Iterable],
                val_batches: Callable[[int], Iterable], config: SearchConfig,
                weight_state: AdamState | None = None, arch_state: AdamState | None = None,
                on_step: Callable[[StepRecord], None] | None = None,
                on_epoch: Callable[[int], None] | None = None) -> list[StepRecord]:
    """Strict alternation: one weight step on a train batch, then one alpha step on a val batch.

    ``train_batches(epoch)`` and ``val_batches(epoch)`` return the epoch's batches;
    validation batches are cycled if there are fewer than training batches.
    """
    weight_state = weight_state or config.weight_state()
    arch_state = arch_state or config.arch_state()
    xi = config.effective_xi
    history: list[StepRecord] = []
    step = 0
    last_good = snapshot(problem)
    for epoch in range(config.epochs):
        val = list(val_batches(epoch))
        if not val:
            raise ValueError("search needs at least one validation batch")
        for i, batch in enumerate(train_batches(epoch)):
            vbatch = val[i % len(val)]
            try:
                train_loss = weight_step(problem, batch, weight_state)
                _check_loss(train_loss, "training", step, last_good)
                if config.order == "second":
                    val_loss = second_order_arch_step(problem, batch, vbatch, xi, arch_state,
                                                      config.fd_scale).val_loss
                else:
                    val_loss = first_order_arch_step(problem, vbatch, arch_state)
                _check_loss(val_loss, "validation", step, last_good)
            except NonFiniteGradient as exc:
                raise DivergenceError(f"step {step}: {exc}", last_good) from exc
            record_ = StepRecord(epoch, step, train_loss, val_loss)
            history.append(record_)
            if on_step:
                on_step(record_)
            step += 1
        last_good = snapshot(problem)
        if on_epoch:
            on_epoch(epoch)
    return history
