"""Optimization loop: plain SGD with decoupled weight decay and step
decay, Fourier-based amplitude mixing for the teacher input, an EMA
teacher updated once per optimizer step, temperature-softened KL
distillation with a sigmoid ramp-up, and the combined objective
loss_all = loss_c + rampup * lambda_md * loss_md.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from . import tensor as tc
from .data import batch_iter
from .fft import fft2_array, ifft2_array
from .tensor import Tensor, backward, no_grad

LOG_HEADER = "epoch,step,lr,loss_c,loss_md,loss_all,acc_train"


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 0.001
    lr_decay_epoch: int = 40
    lr_decay_factor: float = 0.1
    weight_decay: float = 5e-4
    eta: float = 0.9995
    tau_md: float = 10.0
    lambda_md: float = 2.0
    rampup_epochs: int = 5
    aug_strength: float = 1.0
    seed: int = 0
    train_fraction: float = 0.9
    mus_enabled: bool = True
    augment_student: bool = False
    standard_aug: bool = True
    ckpt_interval: int = 0  # epochs between checkpoints; 0 = final only

    def validate(self):
        positive = (
            "epochs",
            "batch_size",
            "lr",
            "lr_decay_epoch",
            "lr_decay_factor",
            "tau_md",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must be in [0, 1]")
        if not 0.0 <= self.aug_strength <= 1.0:
            raise ValueError("aug_strength must be in [0, 1]")
        if self.weight_decay < 0 or self.lambda_md < 0 or self.rampup_epochs < 0:
            raise ValueError("weight_decay, lambda_md, rampup_epochs must be nonnegative")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must be in (0, 1]")
        return self


# ---------------------------------------------------------------------
# teacher state
# ---------------------------------------------------------------------


@dataclass
class TeacherState:
    """Frozen model whose parameters track an exponential moving average
    of the student's."""

    model: object
    eta: float
    step: int = 0

    @classmethod
    def from_student(cls, student, eta):
        return cls(model=student.copy(requires_grad=False), eta=eta, step=0)

    @property
    def parameters(self):
        return self.model.named_parameters()


def ema_update(teacher, student_params):
    """teacher <- eta * teacher + (1 - eta) * student, elementwise."""
    tparams = teacher.parameters
    if list(tparams) != list(student_params):
        raise ValueError("teacher/student parameter names do not match")
    eta = teacher.eta
    for name, tp in tparams.items():
        sp = student_params[name]
        if tp.data.shape != sp.data.shape:
            raise ValueError(f"teacher/student shape mismatch for {name}")
        tp.data = eta * tp.data + (1.0 - eta) * sp.data
    teacher.step += 1
    return teacher


# ---------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------


def _bilinear_resize(img, out_h, out_w):
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def standard_augment(image, rng):
    """Random resized crop, horizontal flip, and brightness/contrast
    jitter on a [c, H, W] image in [0, 1]."""
    c, h, w = image.shape
    area = rng.uniform(0.6, 1.0)
    aspect = rng.uniform(0.8, 1.25)
    ch = min(h, max(4, int(round(np.sqrt(area * h * w / aspect)))))
    cw = min(w, max(4, int(round(np.sqrt(area * h * w * aspect)))))
    top = rng.integers(0, h - ch + 1)
    left = rng.integers(0, w - cw + 1)
    out = _bilinear_resize(image[:, top : top + ch, left : left + cw], h, w)
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    brightness = rng.uniform(0.85, 1.15)
    contrast = rng.uniform(0.85, 1.15)
    out = out * brightness
    mean = out.mean()
    out = (out - mean) * contrast + mean
    return np.clip(out, 0.0, 1.0)


def _amplitude_mix(base, other, lam):
    fx = fft2_array(base)
    fo = fft2_array(other)
    mixed_amp = (1.0 - lam) * np.abs(fx) + lam * np.abs(fo)
    mixed = mixed_amp * np.exp(1j * np.angle(fx))
    return ifft2_array(mixed).real


def fourier_augment(x, x_other, strength, rng, apply_standard=True):
    """Blend the amplitude spectrum of ``x`` toward ``x_other`` by a random
    factor in [0, strength], keeping the phase of ``x``.  The standard
    augmentation protocol runs on both images before mixing."""
    if x.shape != x_other.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {x_other.shape}")
    if not 0.0 <= strength <= 1.0:
        raise ValueError("strength must be in [0, 1]")
    base = standard_augment(x, rng) if apply_standard else np.array(x, copy=True)
    other = standard_augment(x_other, rng) if apply_standard else x_other
    lam = rng.uniform(0.0, strength) if strength > 0 else 0.0
    if lam == 0.0:
        return base
    return _amplitude_mix(base, other, lam)


def _fourier_augment_batch(images, partners, strength, rng, apply_standard):
    """Batched equivalent of mapping fourier_augment over (image, partner)
    pairs: per-sample draws happen in the same order, the transforms run
    once over the stacked batch."""
    bases, others, lams = [], [], []
    for img, partner in zip(images, partners):
        bases.append(standard_augment(img, rng) if apply_standard else img)
        others.append(standard_augment(partner, rng) if apply_standard else partner)
        lams.append(rng.uniform(0.0, strength) if strength > 0 else 0.0)
    base = np.stack(bases)
    lam = np.array(lams).reshape((-1,) + (1,) * (base.ndim - 1))
    if (lam == 0.0).all():
        return base
    mixed = _amplitude_mix(base, np.stack(others), lam)
    return np.where(lam == 0.0, base, mixed)


# ---------------------------------------------------------------------
# schedules and losses
# ---------------------------------------------------------------------


def rampup_weight(epoch, rampup_epochs):
    """exp(-5 (1 - t)^2) sigmoid ramp-up, 1 from rampup_epochs onward."""
    if rampup_epochs <= 0 or epoch >= rampup_epochs:
        return 1.0
    t = epoch / rampup_epochs
    return float(np.exp(-5.0 * (1.0 - t) ** 2))


def lr_at(epoch, cfg):
    return cfg.lr * (cfg.lr_decay_factor if epoch >= cfg.lr_decay_epoch else 1.0)


def distill_loss(student_logits, teacher_logits, tau_md):
    """KL(student || teacher) between temperature-softened distributions.

    The teacher side enters as constants (detached); both log-probability
    vectors come from the same softmax kernel so identical logits give an
    exact zero.
    """
    if tau_md <= 0:
        raise ValueError("tau_md must be positive")
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(
            f"logit shapes differ: {student_logits.shape} vs {teacher_logits.shape}"
        )
    q = tc.softmax(student_logits, temperature=tau_md)
    p = tc.softmax(teacher_logits.detach(), temperature=tau_md)
    with np.errstate(divide="ignore"):
        p_log = Tensor(np.log(p.data))
    return tc.kl_divergence(p_log, q)


def _decay_applies(name):
    return ".ln" not in name and "w_filter" not in name


def sgd_step(model, lr, weight_decay):
    """Plain SGD with decoupled L2 decay; norm affines and the frequency
    filter are excluded from decay."""
    for name, p in model.named_parameters().items():
        if p.grad is None:
            continue
        if weight_decay and _decay_applies(name):
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * p.grad


# ---------------------------------------------------------------------
# steps and loop
# ---------------------------------------------------------------------


def _pick_partner(i, domains, rng):
    other_domain = [j for j, d in enumerate(domains) if d != domains[i]]
    pool = other_domain or [j for j in range(len(domains)) if j != i] or [i]
    return pool[int(rng.integers(0, len(pool)))]


def train_step(model, teacher, batch, cfg, rng, epoch):
    """One optimizer step; returns the three loss values and batch accuracy."""
    images, labels, domains = batch
    if len(labels) == 0:
        raise ValueError("empty batch")

    if cfg.augment_student:
        partners = [images[_pick_partner(i, domains, rng)] for i in range(len(labels))]
        student_in = _fourier_augment_batch(
            images, partners, cfg.aug_strength, rng, cfg.standard_aug
        )
    elif cfg.standard_aug:
        student_in = np.stack([standard_augment(img, rng) for img in images])
    else:
        student_in = images

    logits_s = model.forward(Tensor(student_in))
    loss_c = tc.cross_entropy(logits_s, labels)

    loss_md_val = 0.0
    if teacher is not None:
        partners = [images[_pick_partner(i, domains, rng)] for i in range(len(labels))]
        teacher_in = _fourier_augment_batch(
            images, partners, cfg.aug_strength, rng, cfg.standard_aug
        )
        with no_grad():
            logits_t = teacher.model.forward(Tensor(teacher_in))
        loss_md = distill_loss(logits_s, logits_t, cfg.tau_md)
        loss_md_val = float(loss_md.data)
        loss_all = loss_c + loss_md * (rampup_weight(epoch, cfg.rampup_epochs) * cfg.lambda_md)
    else:
        loss_all = loss_c

    model.zero_grad()
    backward(loss_all)
    sgd_step(model, lr_at(epoch, cfg), cfg.weight_decay)
    if teacher is not None:
        ema_update(teacher, model.named_parameters())

    acc = float((logits_s.data.argmax(axis=1) == np.asarray(labels)).mean())
    return {
        "loss_c": float(loss_c.data),
        "loss_md": loss_md_val,
        "loss_all": float(loss_all.data),
        "acc": acc,
    }


def train_model(model, train_samples, cfg, log_rows=None, epoch_hook=None):
    """Full training loop; returns (model, teacher).  Appends one log dict
    per step to ``log_rows`` when given; ``epoch_hook(epoch, model)`` runs
    after each epoch."""
    cfg.validate()
    teacher = TeacherState.from_student(model, cfg.eta) if cfg.mus_enabled else None
    step = 0
    for epoch in range(cfg.epochs):
        aug_rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 401, epoch]))
        for batch in batch_iter(train_samples, cfg.batch_size, [int(cfg.seed), 499, epoch]):
            report = train_step(model, teacher, batch, cfg, aug_rng, epoch)
            if log_rows is not None:
                log_rows.append(
                    {
                        "epoch": epoch,
                        "step": step,
                        "lr": lr_at(epoch, cfg),
                        "loss_c": report["loss_c"],
                        "loss_md": report["loss_md"],
                        "loss_all": report["loss_all"],
                        "acc_train": report["acc"],
                    }
                )
            step += 1
        if epoch_hook is not None:
            epoch_hook(epoch, model)
    return model, teacher


def evaluate(model, samples, batch_size=64):
    """Accuracy of the frozen model over a sample list."""
    if not samples:
        return 0.0
    hits = 0
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            images = np.stack([s.image for s in chunk])
            labels = np.array([s.label for s in chunk])
            logits = model.forward(Tensor(images))
            hits += int((logits.data.argmax(axis=1) == labels).sum())
    return hits / len(samples)


def evaluate_by_domain(model, dataset, batch_size=64):
    return {name: evaluate(model, samples, batch_size) for name, samples in dataset.domains.items()}


def format_log_row(row):
    return (
        f"{row['epoch']},{row['step']},{row['lr']:.9g},{row['loss_c']:.9g},"
        f"{row['loss_md']:.9g},{row['loss_all']:.9g},{row['acc_train']:.9g}"
    )
