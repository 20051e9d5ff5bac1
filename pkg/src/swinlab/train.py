"""Supervised training loop with divergence detection, activation
checkpointing, and the window-size transfer workflow.

Training is deterministic for a fixed seed: batch order comes from one
seeded generator, every op is f64 with a fixed reduction order, and the
optimizer touches parameters in insertion order.  Two runs from the same
seed produce bit-identical weights and reports; checkpointed and plain
runs of the same seed do too.

Divergence (non-finite anywhere in the forward/backward, a non-finite
loss, or a pre-clip gradient norm above 1e6) sets a flag and halts the
run gracefully with the partial report instead of raising.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .bias import ParamTable, bicubic_transfer
from .blocks import Model, ModelConfig, build_model
from .errors import ConfigError, GeometryError, NumericsError
from .optim import OptimState, Schedule, adamw_step, clip_grad_norm, lr_at
from .tensor import Tape, Tensor

GRAD_NORM_DIVERGENCE = 1e6


@dataclass
class StepRecord:
    step: int
    loss: float
    grad_norm: float
    lr: float
    flag: str = ""


@dataclass
class RunReport:
    steps: list[StepRecord] = field(default_factory=list)
    diverged: bool = False
    final_train_acc: float | None = None

    def to_csv(self) -> str:
        lines = ["step,loss,grad_norm,lr,flag"]
        for r in self.steps:
            lines.append(f"{r.step},{r.loss!r},{r.grad_norm!r},{r.lr!r},{r.flag}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_frac: float = 0.1
    clip_norm: float = 5.0
    seed: int = 0
    segment_size: int | None = None
    sequential: bool = False


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy from raw logits, computed via logsumexp."""
    lse = T.logsumexp_lastdim(logits)
    picked = T.pick_lastdim(logits, labels)
    return T.reduce_mean(T.sub(lse, picked))


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 64, sequential: bool = False) -> float:
    """Top-1 accuracy, evaluated off-tape in minibatches."""
    hits = 0
    with T.no_tape():
        for i in range(0, len(images), batch_size):
            x = Tensor(images[i:i + batch_size])
            logits = model.forward(x, sequential=sequential)
            hits += int((logits.data.argmax(axis=1) == labels[i:i + batch_size]).sum())
    return hits / len(images)


def train(model: Model, images: np.ndarray, labels: np.ndarray,
          tc: TrainConfig) -> tuple[RunReport, OptimState]:
    """Train in place; returns the report and final optimizer state."""
    if len(images) == 0:
        raise ConfigError("dataset is empty")
    if labels.min() < 0 or labels.max() >= model.cfg.num_classes:
        raise ConfigError(
            f"labels outside [0, {model.cfg.num_classes}): "
            f"[{labels.min()}, {labels.max()}]"
        )
    n = len(images)
    rng = np.random.default_rng(tc.seed)
    state = OptimState(lr=tc.lr, weight_decay=tc.weight_decay)
    warmup = int(round(tc.steps * tc.warmup_frac))
    sched = Schedule(base_lr=tc.lr, warmup_steps=warmup, total_steps=tc.steps)
    report = RunReport()
    order = rng.permutation(n)
    cursor = 0
    for step in range(tc.steps):
        if cursor + tc.batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + tc.batch_size]
        cursor += tc.batch_size
        lr_now = lr_at(sched, step + 1)

        model.zero_grad()
        try:
            with Tape() as tape:
                logits = model.forward(Tensor(images[idx]),
                                       segment_size=tc.segment_size,
                                       sequential=tc.sequential)
                loss = cross_entropy(logits, labels[idx])
            loss_val = loss.item()
            tape.backward(loss)
        except NumericsError:
            report.steps.append(StepRecord(step, float("nan"), float("nan"),
                                           lr_now, "divergence"))
            report.diverged = True
            break
        gnorm = clip_grad_norm(model.params, tc.clip_norm)
        if not np.isfinite(loss_val) or gnorm > GRAD_NORM_DIVERGENCE:
            report.steps.append(StepRecord(step, loss_val, gnorm, lr_now,
                                           "divergence"))
            report.diverged = True
            break
        adamw_step(model.params, state, lr=lr_now)
        report.steps.append(StepRecord(step, loss_val, gnorm, lr_now))
    return report, state


def checkpointed_forward(model: Model, x: Tensor, segment_size: int) -> Tensor:
    """Forward pass recomputing activations segment by segment in backward."""
    return model.forward(x, segment_size=segment_size)


def transfer_window(model: Model, M_new: int, img_new: int | None = None) -> Model:
    """Re-target a trained model to a new window size without fine-tuning.

    Input resolution scales with the window (so the window-grid layout is
    preserved) unless ``img_new`` is given.  Learned bias tables are resampled
    bicubically to the new per-stage window sizes; coordinate-MLP bias weights
    copy verbatim, keeping their coordinates normalized by the *source*
    training window, which is where extrapolation enters.  All other weights
    copy unchanged.
    """
    cfg = model.cfg
    if M_new < 1:
        raise GeometryError(f"target window must be >= 1, got {M_new}")
    if img_new is None:
        if (cfg.img_size * M_new) % cfg.window:
            raise GeometryError(
                f"cannot scale resolution {cfg.img_size} by window "
                f"{cfg.window}->{M_new} evenly"
            )
        img_new = cfg.img_size * M_new // cfg.window
    anchors = tuple(cfg.stage_anchor(s) for s in range(4))
    try:
        cfg2 = replace(cfg, window=M_new, img_size=img_new, bias_anchor=anchors)
    except ConfigError as e:
        raise GeometryError(str(e)) from e
    target = build_model(cfg2, seed=model.seed)
    for name, p in model.params.items():
        if name.endswith("bias.table"):
            stage = int(name.split(".", 1)[0].removeprefix("stage"))
            m_old = cfg.stage_window(stage)
            m_tgt = cfg2.stage_window(stage)
            src = ParamTable(table=Tensor(p.data.copy()), M=m_old)
            resampled = src if m_tgt == m_old else bicubic_transfer(src, m_tgt)
            target.params[name].data[...] = resampled.table.data
        else:
            target.params[name].data[...] = p.data
    return target
