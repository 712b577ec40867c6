"""Synthetic multi-domain dataset, on-disk format, and the
leave-one-domain-out split.

Classes are parametric 2-D patterns (oriented gratings, rings, checker
lattices) rendered on the integer lattice under a Gaussian window, so
each class has a distinctive amplitude-spectrum signature.  Domains are
fixed spectral styles applied after rendering: identity, Gaussian
low-pass, high-frequency emphasis, and per-image random phase noise.
The same base draw is shared across domains for a given (class, sample)
pair, so domains differ in style only.

All randomness derives from seed sequences keyed by (seed, class,
sample) for content and (seed, domain, class, sample) for style, which
makes regeneration deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fft import fft2_array, ifft2_array
from .tensor import Tensor, load_tensor, read_tensor_from, write_tensor_to

DOMAINS = ("clean", "lowpass", "highpass", "phasejitter")

_LOWPASS_SIGMA = 0.70
_HIGHPASS_GAIN = 1.6
_PHASE_NOISE = 2.5
_NOISE_STD = 0.05
# class-irrelevant fine texture: carrier frequencies sit above every
# class pattern's band so filtering can separate them
_DISTRACTOR_AMP = 0.30
_DISTRACTOR_FREQS = (11, 12, 13, 14)


@dataclass
class DomainSample:
    image: np.ndarray  # [c, H, W] in [0, 1]
    label: int
    domain: str


@dataclass
class MultiDomainDataset:
    domains: dict[str, list[DomainSample]]
    num_classes: int
    geometry: tuple  # (channels, H, W)

    @property
    def domain_names(self):
        return list(self.domains)

    def all_samples(self):
        out = []
        for samples in self.domains.values():
            out.extend(samples)
        return out

    def summary(self):
        lines = [
            f"geometry: {self.geometry[0]}x{self.geometry[1]}x{self.geometry[2]}",
            f"classes: {self.num_classes}",
        ]
        for name, samples in self.domains.items():
            counts = np.bincount([s.label for s in samples], minlength=self.num_classes)
            lines.append(f"domain {name}: {len(samples)} samples, per-class {counts.tolist()}")
        return "\n".join(lines)


@dataclass
class SplitSpec:
    held_out_domain: str
    train_fraction: float = 0.9
    seed: int = 0


# ---------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------


def _radial_grid(h, w):
    fy = np.minimum(np.arange(h), h - np.arange(h)) / max(h / 2.0, 1.0)
    fx = np.minimum(np.arange(w), w - np.arange(w)) / max(w / 2.0, 1.0)
    return np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2) / np.sqrt(2.0)


def _render_base(class_idx, h, w, rng):
    """One windowed carrier pattern; family and parameters derive from the
    class index, per-sample phase/position jitter from the rng (quantized)."""
    family = class_idx % 3
    variant = class_idx // 3
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    phase = rng.integers(0, 64) * (2.0 * np.pi / 64.0)
    cy = (rng.integers(0, 16) - 8) * (h / 32.0) + h / 2.0
    cx = (rng.integers(0, 16) - 8) * (w / 32.0) + w / 2.0

    if family == 0:  # oriented grating
        angle = variant * np.pi / 5.0 + np.pi / 12.0
        freq = 4.0 + variant
        axis = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
        carrier = np.sin(2.0 * np.pi * freq * axis / h + phase)
    elif family == 1:  # concentric rings
        freq = 3.0 + 2.0 * variant
        r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        carrier = np.sin(2.0 * np.pi * freq * r / h + phase)
    else:  # checker lattice
        freq = 3.0 + variant
        phase2 = rng.integers(0, 64) * (2.0 * np.pi / 64.0)
        carrier = np.sin(2.0 * np.pi * freq * (xx - cx) / w + phase) * np.sin(
            2.0 * np.pi * freq * (yy - cy) / h + phase2
        )

    sigma = 0.30 * h
    window = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma * sigma)))
    img = 0.5 + 0.45 * window * carrier

    # fine-grained texture distractor, independent of the class
    d_freq = float(_DISTRACTOR_FREQS[rng.integers(0, len(_DISTRACTOR_FREQS))])
    d_angle = rng.integers(0, 12) * np.pi / 12.0
    d_phase = rng.integers(0, 64) * (2.0 * np.pi / 64.0)
    d_axis = xx * np.cos(d_angle) + yy * np.sin(d_angle)
    img += _DISTRACTOR_AMP * np.sin(2.0 * np.pi * d_freq * d_axis / h + d_phase)

    img += _NOISE_STD * rng.standard_normal((h, w))
    return np.clip(img, 0.0, 1.0)


def _apply_domain(image, domain, rng):
    """Fixed spectral style transform on a [c, H, W] image."""
    if domain == "clean":
        return image
    c, h, w = image.shape
    spec = fft2_array(image)
    rho = _radial_grid(h, w)
    if domain == "lowpass":
        spec = spec * np.exp(-((rho / _LOWPASS_SIGMA) ** 2))
    elif domain == "highpass":
        spec = spec * (1.0 + _HIGHPASS_GAIN * rho)
    elif domain == "phasejitter":
        raw = rng.uniform(-1.0, 1.0, size=(h, w))
        anti = 0.5 * (raw - raw[(-np.arange(h)) % h][:, (-np.arange(w)) % w])
        spec = spec * np.exp(1j * _PHASE_NOISE * anti)
    else:
        raise ValueError(f"unknown domain {domain!r}")
    return np.clip(ifft2_array(spec).real, 0.0, 1.0)


def generate_synthetic(num_classes, per_domain_per_class, geometry=(1, 32, 32), seed=1):
    """Four spectral-style domains over shared class content."""
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if per_domain_per_class < 1:
        raise ValueError("need at least 1 sample per domain per class")
    c, h, w = geometry
    if c < 1 or h < 4 or w < 4:
        raise ValueError(f"degenerate geometry {geometry}")

    domains = {}
    for d_idx, domain in enumerate(DOMAINS):
        samples = []
        for cls in range(num_classes):
            for s_idx in range(per_domain_per_class):
                content = np.random.default_rng(
                    np.random.SeedSequence([int(seed), 101, cls, s_idx])
                )
                base = np.stack([_render_base(cls, h, w, content) for _ in range(c)])
                style = np.random.default_rng(
                    np.random.SeedSequence([int(seed), 211, d_idx, cls, s_idx])
                )
                samples.append(DomainSample(_apply_domain(base, domain, style), cls, domain))
        domains[domain] = samples
    return MultiDomainDataset(domains, num_classes, (c, h, w))


# ---------------------------------------------------------------------
# splits and batching
# ---------------------------------------------------------------------


def leave_one_domain_out(ds, spec):
    """Hold out one full domain as the test set; stratified train/val
    split of the remaining domains."""
    if spec.held_out_domain not in ds.domains:
        raise ValueError(f"unknown domain {spec.held_out_domain!r}; have {ds.domain_names}")
    if not 0.0 < spec.train_fraction <= 1.0:
        raise ValueError("train_fraction must be in (0, 1]")
    test = list(ds.domains[spec.held_out_domain])
    train, val = [], []
    for d_idx, (name, samples) in enumerate(ds.domains.items()):
        if name == spec.held_out_domain:
            continue
        by_class = {}
        for s in samples:
            by_class.setdefault(s.label, []).append(s)
        for cls in sorted(by_class):
            group = by_class[cls]
            rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 307, d_idx, cls]))
            order = rng.permutation(len(group))
            cut = int(round(spec.train_fraction * len(group)))
            train.extend(group[i] for i in order[:cut])
            val.extend(group[i] for i in order[cut:])
    return train, val, test


def batch_iter(samples, batch_size, seed):
    """Deterministically shuffled batches covering every sample once; the
    final short batch is kept.  Yields (images, labels, domains)."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    order = rng.permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        chunk = [samples[i] for i in order[start : start + batch_size]]
        images = np.stack([s.image for s in chunk])
        labels = np.array([s.label for s in chunk], dtype=np.int64)
        yield images, labels, [s.domain for s in chunk]


# ---------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------


def save_dataset(ds, out_dir):
    """Manifest plus one tensor file per domain (labels appended as u32)."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    c, h, w = ds.geometry
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        f.write(f"channels = {c}\nheight = {h}\nwidth = {w}\n")
        f.write(f"num_classes = {ds.num_classes}\n")
        f.write(f"domains = {','.join(ds.domain_names)}\n")
    for name, samples in ds.domains.items():
        stack = np.stack([s.image for s in samples])
        labels = np.array([s.label for s in samples], dtype="<u4")
        with open(os.path.join(out_dir, f"{name}.bin"), "wb") as f:
            write_tensor_to(f, Tensor(stack))
            f.write(labels.tobytes())


def load_dataset(data_dir):
    import os

    manifest = os.path.join(data_dir, "manifest.txt")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    meta = {}
    with open(manifest) as f:
        for line in f:
            key, _, value = line.partition("=")
            if value:
                meta[key.strip()] = value.strip()
    c, h, w = int(meta["channels"]), int(meta["height"]), int(meta["width"])
    num_classes = int(meta["num_classes"])
    names = [d for d in meta["domains"].split(",") if d]
    domains = {}
    for name in names:
        with open(os.path.join(data_dir, f"{name}.bin"), "rb") as f:
            stack = read_tensor_from(f).data
            if stack.shape[1:] != (c, h, w):
                raise ValueError(f"domain {name}: tensor shape {stack.shape} != manifest geometry")
            raw = f.read(4 * stack.shape[0])
            labels = np.frombuffer(raw, dtype="<u4")
        if len(labels) != stack.shape[0]:
            raise ValueError(f"domain {name}: {len(labels)} labels for {stack.shape[0]} images")
        domains[name] = [
            DomainSample(stack[i], int(labels[i]), name) for i in range(stack.shape[0])
        ]
    return MultiDomainDataset(domains, num_classes, (c, h, w))


def import_tensor_tree(root):
    """Generic importer: <root>/<domain>/<class index>/*.famt raw tensors."""
    import os

    domains = {}
    geometry = None
    num_classes = 0
    for domain in sorted(os.listdir(root)):
        dpath = os.path.join(root, domain)
        if not os.path.isdir(dpath):
            continue
        samples = []
        for cls_name in sorted(os.listdir(dpath)):
            cpath = os.path.join(dpath, cls_name)
            if not os.path.isdir(cpath):
                continue
            cls = int(cls_name)
            num_classes = max(num_classes, cls + 1)
            for fname in sorted(os.listdir(cpath)):
                img = load_tensor(os.path.join(cpath, fname)).data
                if geometry is None:
                    geometry = img.shape
                elif img.shape != geometry:
                    raise ValueError(f"inconsistent geometry {img.shape} vs {geometry}")
                samples.append(DomainSample(img, cls, domain))
        if samples:
            domains[domain] = samples
    if not domains:
        raise ValueError(f"no domain directories under {root}")
    return MultiDomainDataset(domains, num_classes, geometry)
