"""QAT training loop, layer kurtosis probe and the quantization-error probe."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from qsl.errors import ConfigError, NonFiniteGradient, NonFiniteLoss
from qsl.quant import LAYER_KINDS, QuantPlan
from qsl.stats import kurtosis
from qsl.toy.model import (
    ToyModel,
    ToyModelConfig,
    backward,
    build_model,
    forward,
    init_quant_state,
)

log = logging.getLogger(__name__)

EMA_DECAY = 0.99


@dataclass(frozen=True)
class TrainConfig:
    max_lr: float = 3e-3
    min_lr: float | None = None  # defaults to 0.1 * max_lr
    warmup_steps: int = 20
    weight_decay: float = 0.1
    grad_clip_norm: float = 1.0
    batch: int = 8
    steps: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8

    def __post_init__(self):
        if self.warmup_steps >= self.steps:
            raise ConfigError("warmup_steps must be smaller than steps")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive")
        if self.max_lr < 0 or self.batch < 1:
            raise ConfigError("invalid learning rate or batch size")

    @property
    def final_lr(self) -> float:
        return 0.1 * self.max_lr if self.min_lr is None else self.min_lr

    def lr_at(self, step: int) -> float:
        """Linear warmup then cosine decay to ``final_lr`` at the last step."""
        if step < self.warmup_steps:
            return self.max_lr * (step + 1) / self.warmup_steps
        span = max(self.steps - 1 - self.warmup_steps, 1)
        frac = min((step - self.warmup_steps) / span, 1.0)
        lo = self.final_lr
        return lo + 0.5 * (self.max_lr - lo) * (1.0 + math.cos(math.pi * frac))


@dataclass
class LossCurve:
    raw: list = field(default_factory=list)
    smoothed: list = field(default_factory=list)
    decay: float = EMA_DECAY

    def append(self, loss: float) -> None:
        prev = self.smoothed[-1] if self.smoothed else loss
        self.raw.append(loss)
        self.smoothed.append(self.decay * prev + (1.0 - self.decay) * loss)

    @property
    def final(self) -> float:
        return self.smoothed[-1]

    def write_csv(self, fh) -> None:
        w = csv.writer(fh)
        w.writerow(["step", "raw_loss", "smoothed_loss"])
        for i, (r, s) in enumerate(zip(self.raw, self.smoothed)):
            w.writerow([i, repr(r), repr(s)])


def batch_at(corpus: np.ndarray, step: int, batch: int, length: int, seed: int) -> np.ndarray:
    """Deterministic batch of ``length``-token windows; wraps around the corpus."""
    rng = np.random.default_rng([seed, step])
    starts = rng.integers(0, corpus.size, size=batch)
    idx = starts[:, None] + np.arange(length)[None, :]
    return np.take(corpus, idx, mode="wrap")


def train(
    model: ToyModel,
    corpus,
    tc: TrainConfig,
    plan: QuantPlan | None = None,
    on_step=None,
) -> LossCurve:
    """AdamW training with warmup, cosine decay and global gradient-norm clipping.

    Mutates ``model`` in place. Quantizer state (LWC/LAC clipping factors,
    LSQ scales) is created from ``plan`` and trained alongside the weights
    without weight decay.
    """
    plan = plan or QuantPlan.uniform()
    corpus = np.asarray(corpus, dtype=np.int64)
    init_quant_state(model, plan)
    kinds = {}
    for key in model.qstate:
        _, i, kind, role = key.split(".")
        kinds[key] = plan[(kind, role)].quantizer
    length = model.cfg.seq_len + 1

    tensors = {**{("p", k): v for k, v in model.params.items()},
               **{("q", k): v for k, v in model.qstate.items()}}
    m1 = {k: np.zeros_like(v) for k, v in tensors.items()}
    m2 = {k: np.zeros_like(v) for k, v in tensors.items()}
    curve = LossCurve()

    for step in range(tc.steps):
        tokens = batch_at(corpus, step, tc.batch, length, tc.seed)
        try:
            # overflow is reported as NonFiniteLoss below, not as a warning
            with np.errstate(over="ignore", invalid="ignore"):
                fwd = forward(model, tokens, plan)
                grads, qgrads = backward(model, fwd)
        except (NonFiniteLoss, NonFiniteGradient) as e:
            raise NonFiniteLoss(f"{e} at step {step}", step=step) from None
        curve.append(fwd.loss)

        g_all = {**{("p", k): v for k, v in grads.items()},
                 **{("q", k): v for k, v in qgrads.items()}}
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in g_all.values()))
        clip = min(1.0, tc.grad_clip_norm / (norm + 1e-12))
        lr = tc.lr_at(step)
        bc1 = 1.0 - tc.beta1 ** (step + 1)
        bc2 = 1.0 - tc.beta2 ** (step + 1)
        for key, w in tensors.items():
            g = g_all[key] * clip
            m1[key] *= tc.beta1
            m1[key] += (1.0 - tc.beta1) * g
            m2[key] *= tc.beta2
            m2[key] += (1.0 - tc.beta2) * g * g
            if key[0] == "p" and w.ndim == 2:
                w *= 1.0 - lr * tc.weight_decay
            w -= lr * (m1[key] / bc1) / (np.sqrt(m2[key] / bc2) + tc.eps)
            if key[0] == "q":
                if kinds[key[1]] == "lsq":
                    np.maximum(w, 1e-8, out=w)
                else:
                    np.clip(w, 0.05, 1.0, out=w)
        if on_step is not None:
            on_step(step, fwd.loss)
    return curve


def layer_taps(model: ToyModel, tokens, plan: QuantPlan | None = None) -> dict:
    """Input activations of each linear-layer kind, pooled over blocks."""
    taps = forward(model, tokens, plan).taps
    return {kind: np.concatenate([taps[f"blocks.{i}.{kind}"].ravel()
                                  for i in range(model.cfg.layers)])
            for kind in LAYER_KINDS}


def measure_layer_kurtosis(model: ToyModel, tokens, plan: QuantPlan | None = None) -> dict:
    """Pearson kurtosis of the flattened input activations of QKV, O, FC1 and FC2."""
    return {kind: kurtosis(v) for kind, v in layer_taps(model, tokens, plan).items()}


@dataclass
class ProbeRun:
    curve: LossCurve
    model: ToyModel
    delta: float = 0.0


def delta_probe(
    cfg: ToyModelConfig,
    tc: TrainConfig,
    corpus,
    plans: dict,
    model_seed: int = 0,
) -> dict:
    """Train one model per plan from identical init and data order.

    ``plans`` maps a name to a QuantPlan and must contain ``"bf16"``; each
    run's delta is its final smoothed loss minus the bf16 run's.
    """
    if "bf16" not in plans:
        raise ConfigError("delta probe needs a bf16 baseline plan")
    runs = {}
    for name, plan in plans.items():
        cfg.check_plan(plan)
        model = build_model(cfg, model_seed)
        log.info("training plan %s", name)
        runs[name] = ProbeRun(train(model, corpus, tc, plan), model)
    base = runs["bf16"].curve.final
    for run in runs.values():
        run.delta = run.curve.final - base
    return runs
