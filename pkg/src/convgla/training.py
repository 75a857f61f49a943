"""Optimization for the three stages: teacher pretraining (answer-span CE),
attention distillation (layer-wise MSE against teacher attention outputs),
and LoRA finetuning (answer-span CE again, low-rank adapters + attention
internals trainable).

Distillation is teacher-forced: every student attention block consumes the
*teacher's* post-norm attention input for that layer, so layer ℓ's loss is
independent of how well layers < ℓ have converged.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .model import LoraSet, Model, forward, _student_attention
from .tensor import Tensor

STAGES = ("teacher", "distill", "finetune")
SCHEDULES = ("cosine", "reduce_on_plateau")
# stage-appropriate step sizes: distillation tolerates (and needs) large
# steps because the loss is a smooth MSE over attention internals only
STAGE_DEFAULT_LR = {"teacher": 1e-3, "distill": 0.1, "finetune": 1e-4}


@dataclass
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class TrainConfig:
    stage: str
    lr: Optional[float] = None  # None -> stage default
    schedule: str = "cosine"
    plateau_patience: int = 20
    plateau_factor: float = 0.5
    batch_size: int = 8
    max_steps: int = 200
    seed: int = 0
    max_grad_norm: Optional[float] = 1.0
    adamw: AdamWConfig = field(default_factory=AdamWConfig)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage {self.stage!r} not in {STAGES}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule {self.schedule!r} not in {SCHEDULES}")
        if self.lr is None:
            self.lr = STAGE_DEFAULT_LR[self.stage]
        if self.lr <= 0 or self.batch_size <= 0 or self.max_steps <= 0:
            raise ConfigError("lr, batch_size and max_steps must be positive")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")


class AdamW:
    """Decoupled weight decay; a step with no accumulated gradients leaves
    every parameter bit-identical (state is only advanced for live grads)."""

    def __init__(self, params: dict[str, Tensor], cfg: AdamWConfig):
        self.params = dict(params)
        self.cfg = cfg
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._t = {k: 0 for k in self.params}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        c = self.cfg
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self._t[k] += 1
            t = self._t[k]
            m = self._m[k] = c.beta1 * self._m[k] + (1 - c.beta1) * g
            v = self._v[k] = c.beta2 * self._v[k] + (1 - c.beta2) * g * g
            mhat = m / (1 - c.beta1 ** t)
            vhat = v / (1 - c.beta2 ** t)
            if c.weight_decay:
                p.data *= 1.0 - lr * c.weight_decay
            p.data -= lr * mhat / (np.sqrt(vhat) + c.eps)


class Plateau:
    """reduce-on-plateau bookkeeping: multiply lr by `factor` once the
    observed metric has failed to improve for more than `patience` checks."""

    def __init__(self, lr: float, patience: int, factor: float):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.bad = 0

    def observe(self, metric: float) -> float:
        if metric < self.best - 1e-12:
            self.best = metric
            self.bad = 0
        else:
            self.bad += 1
            if self.bad > self.patience:
                self.lr *= self.factor
                self.bad = 0
        return self.lr


def schedule_lr(cfg: TrainConfig, step: int, plateau: Optional[Plateau] = None) -> float:
    """Learning rate for `step` (0-based). Cosine decays to zero at
    max_steps; reduce_on_plateau holds the plateau controller's current lr."""
    if step < 0 or step >= cfg.max_steps:
        raise ConfigError(f"step {step} outside [0, {cfg.max_steps})")
    if cfg.schedule == "cosine":
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / cfg.max_steps))
    if plateau is None:
        raise ConfigError("reduce_on_plateau needs a Plateau controller")
    return plateau.lr


def clip_global_norm(params: Iterable[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm > 0:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


# ---------------------------------------------------------------------------
# losses


def answer_span_ce(model: Model, tokens: np.ndarray, spans: np.ndarray,
                   lora: Optional[LoraSet] = None, mode: str = "chunked",
                   chunk: int = 16) -> Tensor:
    """Cross-entropy restricted to the answer tokens.

    tokens [B, N] int, spans [B, 2] half-open [start, end) into the token
    axis. Position t is scored from logits at t-1, so start must be >= 1.
    """
    tokens = np.asarray(tokens)
    spans = np.asarray(spans)
    if tokens.ndim != 2 or spans.shape != (tokens.shape[0], 2):
        raise DataError(f"expected tokens [B,N] and spans [B,2], got {tokens.shape} / {spans.shape}")
    b, n = tokens.shape
    w = np.zeros((b, n - 1))
    for i, (s, e) in enumerate(spans):
        if not 1 <= s < e <= n:
            raise DataError(f"answer span [{s}, {e}) invalid for length {n}")
        w[i, s - 1 : e - 1] = 1.0
    logits, _ = forward(model, tokens, mode=mode, chunk=chunk, lora=lora)
    logp = T.log_softmax(logits)
    picked = T.gather_last(logp[..., :-1, :], tokens[:, 1:])
    return -(picked * Tensor(w)).sum() / float(w.sum())


def distill_step(teacher: Model, student: Model, tokens: np.ndarray,
                 mode: str = "chunked", chunk: int = 16) -> Tensor:
    """Layer-wise attention-matching MSE, teacher-forced.

    Returns the loss tensor (mean over layers of per-layer elementwise MSE);
    the caller owns backward/step. Gradients reach only the student's
    attention parameters because every input is a teacher constant.
    """
    if len(teacher.blocks) != len(student.blocks):
        raise ConfigError(
            f"layer count mismatch: teacher {len(teacher.blocks)}, student {len(student.blocks)}"
        )
    if not student.blocks:
        raise ConfigError("cannot distill a zero-layer model")
    with T.no_grad():
        _, t_outs, t_ins = forward(teacher, tokens, want_attn_inputs=True)
    loss = None
    for blk, y, target in zip(student.blocks, t_ins, t_outs):
        a = _student_attention(Tensor(y.data), blk.attn, mode, chunk)
        diff = a - Tensor(target.data)
        mse = (diff * diff).mean()
        loss = mse if loss is None else loss + mse
    return loss / float(len(student.blocks))


def finetune_step(model: Model, lora: LoraSet, tokens: np.ndarray,
                  spans: np.ndarray, mode: str = "chunked", chunk: int = 16) -> Tensor:
    """Answer-span CE with adapters engaged. Base projections receive no
    update (they are absent from the finetune parameter set)."""
    return answer_span_ce(model, tokens, spans, lora=lora, mode=mode, chunk=chunk)


def finetune_parameters(model: Model, lora: LoraSet) -> dict[str, Tensor]:
    from .model import lora_parameters

    out = lora_parameters(lora)
    out.update(model.attention_internals())
    return out


# ---------------------------------------------------------------------------
# the loop


def train_loop(
    loss_fn: Callable[[object], Tensor],
    params: dict[str, Tensor],
    cfg: TrainConfig,
    batches: Iterator[object],
    log_path=None,
    on_step: Optional[Callable[[dict], None]] = None,
) -> list[dict]:
    """Generic optimization loop. Yields one JSONL record per step with
    keys (step, stage, loss, lr, seed, elapsed_s); elapsed_s is the only
    field exempt from run-to-run bitwise comparison."""
    opt = AdamW(params, cfg.adamw)
    plateau = Plateau(cfg.lr, cfg.plateau_patience, cfg.plateau_factor) if cfg.schedule == "reduce_on_plateau" else None
    t0 = time.monotonic()
    records = []
    fh = open(log_path, "a") if log_path is not None else None
    try:
        for step in range(cfg.max_steps):
            batch = next(batches)
            lr = schedule_lr(cfg, step, plateau)
            loss = loss_fn(batch)
            opt.zero_grad()
            loss.backward()
            if cfg.max_grad_norm is not None:
                clip_global_norm(params.values(), cfg.max_grad_norm)
            opt.step(lr)
            val = float(loss.data)
            if plateau is not None:
                plateau.observe(val)
            rec = {
                "step": step,
                "stage": cfg.stage,
                "loss": val,
                "lr": lr,
                "seed": cfg.seed,
                "elapsed_s": time.monotonic() - t0,
            }
            records.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(rec)
    finally:
        if fh is not None:
            fh.close()
    return records


def strip_volatile(records: list[dict]) -> list[dict]:
    """Drop wall-clock fields so two runs can be compared bitwise."""
    return [{k: v for k, v in r.items() if k != "elapsed_s"} for r in records]
