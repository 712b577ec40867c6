"""Frequency diagnostics: mean amplitude spectra at layer probe points
and per-domain radial suppression curves (amplitude before a layer's
filter minus after), exported as CSV.

Radial frequency on the [channels, tokens] spectrum is the normalized
wrap-around distance from the DC bin, partitioned into fixed shells.
"""

from __future__ import annotations

import numpy as np

from .fft import fft2_array
from .tensor import Tensor, no_grad

N_RADIAL_BINS = 16

PROBE_POINTS = ("before", "after_aff", "after_mixer")


def radial_bin_indices(c, t, n_bins=N_RADIAL_BINS):
    """Shell index per (u, v) frequency bin; every bin lands in exactly
    one shell."""
    fu = np.minimum(np.arange(c), c - np.arange(c)) / max(c / 2.0, 1.0)
    fv = np.minimum(np.arange(t), t - np.arange(t)) / max(t / 2.0, 1.0)
    rho = np.sqrt(fu[:, None] ** 2 + fv[None, :] ** 2) / np.sqrt(2.0)
    return np.minimum((rho * n_bins).astype(int), n_bins - 1)


def radial_profile(amp, n_bins=N_RADIAL_BINS):
    """Mean amplitude per radial shell (empty shells report zero)."""
    c, t = amp.shape
    idx = radial_bin_indices(c, t, n_bins).ravel()
    sums = np.bincount(idx, weights=amp.ravel(), minlength=n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    return np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)


def _probe_amplitude(model, images, layer_index, probe):
    if probe not in PROBE_POINTS:
        raise ValueError(f"unknown probe point {probe!r}; expected one of {PROBE_POINTS}")
    if len(images) == 0:
        raise ValueError("empty image set")
    with no_grad():
        feats = model.forward_collect(Tensor(np.stack(images)), layer_index)[probe]
    freq = fft2_array(np.swapaxes(feats.data, -1, -2))  # [B, C, T]
    return np.abs(freq)


def layer_amplitude(model, images, layer_index, probe):
    """Mean amplitude spectrum [C, T] of the features at a probe point."""
    return Tensor(_probe_amplitude(model, images, layer_index, probe).mean(axis=0))


def delta_amplitude(model, images_by_domain, layer_index, n_bins=N_RADIAL_BINS):
    """Per-domain radial curves of the amplitude suppressed by the
    filter layer: before minus after, positive = suppression."""
    if not images_by_domain:
        raise ValueError("need at least one domain")
    curves = {}
    for domain, images in images_by_domain.items():
        if len(images) == 0:
            raise ValueError(f"domain {domain!r} has no images")
        before = _probe_amplitude(model, images, layer_index, "before").mean(axis=0)
        after = _probe_amplitude(model, images, layer_index, "after_aff").mean(axis=0)
        curves[domain] = radial_profile(before, n_bins) - radial_profile(after, n_bins)
    return curves


def per_sample_delta(model, images, layer_index, n_bins=N_RADIAL_BINS):
    """One suppression curve per image (no averaging)."""
    before = _probe_amplitude(model, images, layer_index, "before")
    after = _probe_amplitude(model, images, layer_index, "after_aff")
    return np.stack(
        [radial_profile(b, n_bins) - radial_profile(a, n_bins) for b, a in zip(before, after)]
    )


def export_csv(curves, path):
    """Write curves as domain,radial_bin,delta_amplitude rows in domain
    insertion order, 9 significant digits."""
    with open(path, "w") as f:
        f.write("domain,radial_bin,delta_amplitude\n")
        for domain, curve in curves.items():
            for i, value in enumerate(np.asarray(curve, dtype=np.float64)):
                f.write(f"{domain},{i},{value:.9g}\n")


def read_csv(path):
    curves = {}
    with open(path) as f:
        header = f.readline().strip()
        if header != "domain,radial_bin,delta_amplitude":
            raise ValueError(f"unexpected curve CSV header: {header!r}")
        for line in f:
            domain, idx, value = line.strip().split(",")
            curves.setdefault(domain, []).append((int(idx), float(value)))
    return {d: np.array([v for _, v in sorted(rows)]) for d, rows in curves.items()}
