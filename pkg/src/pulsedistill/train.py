"""Self-distillation pretraining on quality-contrast segment pairs.

Each pair contributes three loss terms: cross-entropy between the
teacher's distribution over the high-quality segment and the student's
over the low-quality one; and squared errors between the student's
reconstructed amplitude/phase spectra and the spectra of the high-quality
segment.  The student trains by backprop; the teacher is an exponential
moving average of the student with a cosine momentum schedule.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import spectral
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .model import ModelConfig, clone_params, encode, init_params, reconstruct_spectra


@dataclass
class PretrainConfig:
    student_temperature: float = 0.1
    teacher_temperature: float = 0.04
    lambda_amp: float = 0.5
    lambda_phase: float = 0.5
    lr: float = 1e-4
    weight_decay: float = 0.04
    beta1: float = 0.7
    beta2: float = 0.999
    batch_size: int = 16
    epochs: int = 10
    momentum_start: float = 0.996
    momentum_end: float = 1.0
    seed: int = 0
    center_teacher: bool = False

    def __post_init__(self):
        if self.student_temperature <= 0 or self.teacher_temperature <= 0:
            raise ConfigError("temperatures must be > 0")
        if not self.momentum_start <= self.momentum_end <= 1.0:
            raise ConfigError("momentum schedule must satisfy start <= end <= 1")


@dataclass
class TrainState:
    config: ModelConfig
    student: dict
    teacher: dict
    step: int
    total_steps: int
    opt_m: dict = field(default_factory=dict)
    opt_v: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, config: ModelConfig, total_steps, seed=0):
        """Student from random init; teacher starts as a copy of it."""
        student = init_params(config, seed=seed)
        return cls(
            config=config,
            student=student,
            teacher=clone_params(student, requires_grad=False),
            step=0,
            total_steps=total_steps,
        )


def soft_distribution(logits, temperature):
    """Temperature softmax over the last axis."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    return ad.softmax(ad.as_tensor(logits), axis=-1, temperature=temperature)


def distillation_loss(teacher_logits, student_logits, teacher_temperature,
                      student_temperature):
    """Cross-entropy between teacher and student distributions.

    The teacher branch is detached: gradients flow only into the student.
    Returns the mean over pairs (rows).
    """
    t = ad.as_tensor(teacher_logits)
    s = ad.as_tensor(student_logits)
    if t.shape[-1] != s.shape[-1]:
        raise ContractError(f"logit widths differ: {t.shape} vs {s.shape}")
    teacher_probs = ad.softmax(t.detach(), axis=-1, temperature=teacher_temperature)
    student_logp = ad.log_softmax(s, axis=-1, temperature=student_temperature)
    return ad.cross_entropy(teacher_probs.data, student_logp, axis=-1, reduction="mean")


def ema_momentum(step, total_steps, start=0.996, end=1.0):
    """Cosine momentum schedule from `start` at step 0 to `end` at the end."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return end
    return end - (end - start) * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def ema_update(teacher, student, momentum):
    """In-place convex update: teacher <- m * teacher + (1 - m) * student."""
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise ContractError(f"shape mismatch for {name}: {t.shape} vs {s.shape}")
        t.data *= momentum
        t.data += (1.0 - momentum) * s.data


def spectral_targets(segments, eps=spectral.PHASE_EPSILON):
    """Amplitude/phase targets and phase mask for (B, C, N) segments."""
    target = spectral.segment_spectra(segments)
    return target.amplitude, target.phase, spectral.phase_mask(target, eps)


def composite_loss(high_batch, low_batch, state: TrainState, config: PretrainConfig):
    """Total pretraining loss for one batch of (high, low) segment pairs.

    The teacher encodes the high-quality segments (no gradients); the
    student encodes the low-quality ones and reconstructs the spectra of
    the high-quality partners.  Phase error is measured only on bins whose
    target amplitude is above the spectral epsilon.  Each component is a
    mean over its pairs/bins.

    Returns (total loss Tensor, dict of float components).
    """
    high = np.asarray(high_batch, dtype=np.float64)
    low = np.asarray(low_batch, dtype=np.float64)
    if high.shape != low.shape:
        raise ContractError(f"pair batch shapes differ: {high.shape} vs {low.shape}")
    _, teacher_logits = encode(state.teacher, state.config, high)
    features, student_logits = encode(state.student, state.config, low)
    loss_distill = distillation_loss(
        teacher_logits, student_logits,
        config.teacher_temperature, config.student_temperature,
    )
    amp_target, phase_target, mask = spectral_targets(high)
    amp_hat, phase_hat = reconstruct_spectra(state.student, state.config, features)
    loss_amp = ad.mse(amp_hat, amp_target)
    loss_phase = ad.mse(phase_hat, phase_target, mask=mask)
    total = ad.add(
        loss_distill,
        ad.add(ad.mul(loss_amp, config.lambda_amp), ad.mul(loss_phase, config.lambda_phase)),
    )
    components = {
        "loss_distill": float(loss_distill.data),
        "loss_amp": float(loss_amp.data),
        "loss_phase": float(loss_phase.data),
        "loss_total": float(total.data),
    }
    return total, components


def cosine_lr(step, total_steps, base_lr):
    if total_steps == 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def adam_step(state: TrainState, config: PretrainConfig, lr):
    """Decoupled-weight-decay Adam update on the student parameters."""
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    for name, p in state.student.items():
        g = p.grad
        if g is None:
            continue
        if name not in state.opt_m:
            state.opt_m[name] = np.zeros_like(p.data)
            state.opt_v[name] = np.zeros_like(p.data)
        m, v = state.opt_m[name], state.opt_v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + 1e-8) + config.weight_decay * p.data)


def _pair_arrays(pairs):
    high = np.stack([p.high.channels for p in pairs])
    low = np.stack([p.low.channels for p in pairs])
    return high, low


def pretrain(pairs, model_config: ModelConfig, config: PretrainConfig,
             steps=None, log_fn=None):
    """Run the pretraining loop; returns (TrainState, history).

    `pairs` may be QualityPair objects or raw (high, low) array tuples.
    Pairs are sampled without replacement each epoch with a seeded shuffle.
    One history row per step: losses, EMA momentum, and learning rate.
    """
    if len(pairs) == 0:
        raise ContractError("pretrain requires a non-empty pair set")
    if hasattr(pairs[0], "high"):
        high_all, low_all = _pair_arrays(pairs)
    else:
        high_all = np.stack([np.asarray(h, dtype=np.float64) for h, _ in pairs])
        low_all = np.stack([np.asarray(l, dtype=np.float64) for _, l in pairs])
    n = len(high_all)
    batch = min(config.batch_size, n)
    steps_per_epoch = max(1, n // batch)
    total_steps = steps if steps is not None else config.epochs * steps_per_epoch
    state = TrainState.fresh(model_config, total_steps, seed=config.seed)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=config.seed)))
    history = []
    order = rng.permutation(n)
    cursor = 0
    while state.step < total_steps:
        if cursor + batch > n:
            order = rng.permutation(n)
            cursor = 0
        sel = order[cursor : cursor + batch]
        cursor += batch
        loss, components = composite_loss(high_all[sel], low_all[sel], state, config)
        if not math.isfinite(components["loss_total"]):
            bad = [k for k, v in components.items() if not math.isfinite(v)]
            raise RuntimeError(f"non-finite loss component(s): {', '.join(bad)}")
        for p in state.student.values():
            p.zero_grad()
        loss.backward()
        lr = cosine_lr(state.step, total_steps, config.lr)
        adam_step(state, config, lr)
        momentum = ema_momentum(
            state.step, total_steps, config.momentum_start, config.momentum_end
        )
        ema_update(state.teacher, state.student, momentum)
        row = {
            "step": state.step,
            **components,
            "ema_momentum": momentum,
            "lr": lr,
        }
        history.append(row)
        if log_fn is not None:
            log_fn(row)
        state.step += 1
    return state, history


def write_history_jsonl(history, path):
    with open(path, "w") as fh:
        for row in history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
