"""Teacher-forced NLL training: loss, parameter-grouped Adam, cosine-annealing
schedule with linear warmup, and the seeded epoch loop with freezing support.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from . import tokenizer as tok
from .model import ModelBundle
from .nnet import RunCtx
from .tensorcore import Tensor


class DivergenceError(ArithmeticError):
    def __init__(self, step: int, message: str = ""):
        super().__init__(f"training diverged at step {step}: {message}")
        self.step = step


@dataclass
class TrainingLoss:
    value: Tensor
    token_count: int


def nll_teacher_forcing_loss(logits: Tensor, targets: np.ndarray,
                             pad_mask: np.ndarray | None = None) -> TrainingLoss:
    """Mean cross-entropy of logits[..., i, :] against targets[..., i+1].

    logits: (B, L, V) over prefix positions targets[..., :-1];
    targets: (B, L+1) BOS...EOS id rows, PAD-suffixed.
    Normalized by the non-PAD label count.
    """
    targets = np.asarray(targets)
    labels = targets[..., 1:]
    if logits.shape[:-1] != labels.shape:
        raise tc.DimensionError(
            f"logits rows {logits.shape[:-1]} do not align with labels {labels.shape}"
        )
    if pad_mask is None:
        pad_mask = labels != tok.PAD_ID
    logp = tc.log_softmax(logits, axis=-1)
    picked = tc.gather_last(logp, labels)
    masked = tc.mul(picked, Tensor(pad_mask.astype(logits.data.dtype)))
    n = int(pad_mask.sum())
    if n == 0:
        raise tc.DimensionError("loss: no unmasked target positions")
    loss = tc.mul(tc.tsum(masked), -1.0 / n)
    return TrainingLoss(loss, n)


@dataclass
class ScheduleConfig:
    peak_lr_enc: float = 2e-4
    peak_lr_dec: float = 3e-4
    warmup_steps: int = 2000
    total_steps: int = 100000
    min_lr: float = 0.0

    def __post_init__(self):
        # desk runs are short; keep roughly the published warmup:total ratio
        if self.total_steps < 2000 and self.warmup_steps >= self.total_steps:
            self.warmup_steps = max(1, self.total_steps // 10)
        if self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps must be < total_steps")
        if min(self.peak_lr_enc, self.peak_lr_dec) <= 0:
            raise ValueError("peak learning rates must be > 0")


def _lr_one(step: int, peak: float, sc: ScheduleConfig) -> float:
    if step <= sc.warmup_steps:
        return peak * step / sc.warmup_steps
    if step >= sc.total_steps:
        return sc.min_lr
    progress = (step - sc.warmup_steps) / (sc.total_steps - sc.warmup_steps)
    return sc.min_lr + (peak - sc.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def lr_at(step: int, sc: ScheduleConfig) -> tuple[float, float]:
    """(encoder lr, decoder lr): linear 0->peak over warmup, cosine to min_lr
    at total_steps, clamped at min_lr beyond."""
    return _lr_one(step, sc.peak_lr_enc, sc), _lr_one(step, sc.peak_lr_dec, sc)


@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], trainable: dict[str, bool],
              state: OptimState, lrs: dict[str, float]) -> None:
    """One bias-corrected Adam update; frozen parameters are skipped entirely."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        if not trainable.get(name, True):
            continue
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise DivergenceError(t, f"NaN/Inf gradient in {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * (g * g)
        mhat = state.m[name] / (1 - b1 ** t)
        vhat = state.v[name] / (1 - b2 ** t)
        p.data = p.data - lrs[name] * mhat / (np.sqrt(vhat) + state.eps)


def clip_grad_norm(params: dict[str, Tensor], trainable: dict[str, bool],
                   max_norm: float = 5.0) -> float:
    sq = 0.0
    grads = [p.grad for n, p in params.items() if trainable.get(n, True) and p.grad is not None]
    for g in grads:
        sq += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(sq)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def lr_group(name: str) -> str:
    """Encoder group gets the encoder lr; adapters train with the decoder lr."""
    if name.startswith("encoder.") and ".adapter" not in name:
        return "enc"
    return "dec"


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    seed: int = 0
    grad_clip: float = 5.0


@dataclass
class EpochLog:
    epoch: int
    step: int
    lr_enc: float
    lr_dec: float
    train_loss: float
    dev_intent_acc: float | None = None
    dev_f1: float | None = None


def _collate(batch, feat_dim: int, is_text: bool):
    """Pad a list of (input, target ids) into dense arrays with masks."""
    targets = [np.asarray(t, dtype=np.int64) for _, t in batch]
    lmax = max(len(t) for t in targets)
    tgt = np.full((len(batch), lmax), tok.PAD_ID, dtype=np.int64)
    for i, t in enumerate(targets):
        tgt[i, : len(t)] = t
    if is_text:
        srcs = [np.asarray(x, dtype=np.int64) for x, _ in batch]
        smax = max(len(s) for s in srcs)
        src = np.full((len(batch), smax), tok.PAD_ID, dtype=np.int64)
        valid = np.zeros(len(batch), dtype=np.int64)
        for i, s in enumerate(srcs):
            src[i, : len(s)] = s
            valid[i] = len(s)
        return src, valid, tgt
    feats = [x for x, _ in batch]
    tmax = max(f.shape[0] for f in feats)
    src = np.zeros((len(batch), tmax, feat_dim), dtype=np.float32)
    valid = np.zeros(len(batch), dtype=np.int64)
    for i, f in enumerate(feats):
        src[i, : f.shape[0]] = f
        valid[i] = f.shape[0]
    return src, valid, tgt


def train(m: ModelBundle, dataset: list, tcfg: TrainConfig, sched: ScheduleConfig,
          log_path: str | None = None, eval_fn=None, eval_every: int = 0) -> list[EpochLog]:
    """Seeded mini-batch training; `dataset` is a list of (input, target ids).

    Inputs are (T, feat_dim) float arrays for e2e models or token id lists for
    NLU models. `eval_fn(m) -> (intent_acc, f1)` runs every `eval_every` epochs
    when provided.
    """
    if not dataset:
        raise ValueError("train: empty dataset")
    rng = np.random.default_rng(tcfg.seed)
    drop_rng = np.random.default_rng(tcfg.seed + 1)
    state = OptimState()
    params = m.params()
    logs: list[EpochLog] = []
    is_text = m.kind == "nlu"
    step = 0
    groups = {name: lr_group(name) for name in params}

    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(dataset), tcfg.batch_size):
            batch = [dataset[i] for i in order[start : start + tcfg.batch_size]]
            src, valid, tgt = _collate(batch, m.cfg.feat_dim, is_text)
            ctx = RunCtx(training=m.cfg.dropout > 0.0, rng=drop_rng)
            enc = m.encode(src, valid, ctx)
            logits = m.decode_logits(tgt[:, :-1], enc, ctx)
            loss = nll_teacher_forcing_loss(logits, tgt)
            lv = loss.value.item()
            step += 1
            if not math.isfinite(lv):
                raise DivergenceError(step, f"loss = {lv}")
            for p in params.values():
                p.grad = None
            tc.backward(loss.value)
            clip_grad_norm(params, m.trainable, tcfg.grad_clip)
            lr_enc, lr_dec = lr_at(step, sched)
            lrs = {n: (lr_enc if groups[n] == "enc" else lr_dec) for n in params}
            adam_step(params, m.trainable, state, lrs)
            losses.append(lv)
        lr_enc, lr_dec = lr_at(step, sched)
        log = EpochLog(epoch, step, lr_enc, lr_dec, float(np.mean(losses)))
        if eval_fn is not None and eval_every > 0 and (epoch % eval_every == 0 or epoch == tcfg.epochs):
            log.dev_intent_acc, log.dev_f1 = eval_fn(m)
        logs.append(log)

    if log_path:
        write_log(logs, log_path)
    return logs


def write_log(logs: list[EpochLog], path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "step", "lr_enc", "lr_dec", "train_loss",
                    "dev_intent_acc", "dev_f1"])
        for log in logs:
            w.writerow([log.epoch, log.step, f"{log.lr_enc:.8g}", f"{log.lr_dec:.8g}",
                        f"{log.train_loss:.8g}",
                        "" if log.dev_intent_acc is None else f"{log.dev_intent_acc:.6g}",
                        "" if log.dev_f1 is None else f"{log.dev_f1:.6g}"])
