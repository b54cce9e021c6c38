"""Domain-randomized synthetic training data.

Pipeline mirrors label-to-image synthesis: a procedural base labelmap of
nested elliptical structures is deformed by a random smooth diffeomorphic
warp, each group draws one set of per-structure mean intensities, and each
member is corrupted by a multiplicative bias field, a global gamma
exponent, and per-voxel Gaussian noise (in that fixed order).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .data import GroupBatch, GroupMember
from .fields import integrate_svf, warp_seg


@dataclass
class SynthConfig:
    grid: tuple[int, ...] = (64, 64)
    num_classes: int = 6  # background included
    intensity_jitter: float = 0.02
    bias_sigma: float = 12.0
    bias_amplitude: float = 0.3
    log_gamma_range: float = 0.3
    noise_sigma: float = 0.02
    warp_amplitude: float = 3.0
    warp_sigma: float = 6.0

    def __post_init__(self):
        self.grid = tuple(self.grid)
        if self.num_classes < 2:
            raise ValueError("need at least background + one structure")
        for name in ("intensity_jitter", "bias_sigma", "bias_amplitude",
                     "log_gamma_range", "noise_sigma", "warp_amplitude", "warp_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def seed_rng(root_seed, *indices):
    """Deterministic child stream: numpy SeedSequence keyed by the
    derivation path (root, i0, i1, ...)."""
    return np.random.default_rng(np.random.SeedSequence(int(root_seed), spawn_key=tuple(int(i) for i in indices)))


def _base_labelmap(config):
    """Nested elliptical shells: one integer label per voxel, 0 background."""
    shape = config.grid
    k_fg = config.num_classes - 1
    axes = [np.arange(n, dtype=np.float64) - (n - 1) / 2.0 for n in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    # mildly anisotropic normalized radius in [0, ~1.4]
    scales = [0.95, 0.78, 0.85][: len(shape)]
    r2 = sum((m / (s * (n - 1) / 2.0)) ** 2 for m, s, n in zip(mesh, scales, shape))
    r = np.sqrt(r2)
    # shell radii chosen so every structure keeps >= 1% occupancy after warping
    radii = np.linspace(0.92, 0.30, k_fg)
    labels = np.zeros(shape, dtype=np.int64)
    for k, rk in enumerate(radii, start=1):
        labels[r < rk] = k
    return labels


def _onehot(labels, num_classes):
    out = np.zeros((num_classes,) + labels.shape, dtype=np.float32)
    for k in range(num_classes):
        out[k] = labels == k
    return out


def smooth_noise_field(shape, sigma, amplitude, rng):
    """d-channel Gaussian-smoothed noise, rescaled to the given max-abs
    amplitude per channel (zero field when amplitude is 0)."""
    d = len(shape)
    out = np.zeros((d,) + tuple(shape), dtype=np.float64)
    for c in range(d):
        noise = rng.standard_normal(shape)
        smoothed = gaussian_filter(noise, sigma=sigma) if sigma > 0 else noise
        peak = np.abs(smoothed).max()
        if peak > 0 and amplitude > 0:
            out[c] = smoothed / peak * amplitude
    return out


def gen_labelmap(config, seed):
    """One-hot ProbSeg (K, *grid): base template deformed by a random
    smooth diffeomorphic warp."""
    rng = seed_rng(seed, 0)
    labels = _base_labelmap(config)
    onehot = _onehot(labels, config.num_classes)
    if config.warp_amplitude > 0:
        v = smooth_noise_field(config.grid, config.warp_sigma, config.warp_amplitude, rng)
        u = integrate_svf(torch.as_tensor(v, dtype=torch.float32))
        warped = warp_seg(torch.as_tensor(onehot), u)
        labels = warped.argmax(dim=0).numpy()
        onehot = _onehot(labels, config.num_classes)
    return torch.as_tensor(onehot)


def corrupt_image(x, config, seed):
    """Acquisition-artifact corruption of an image in [0, 1].

    Fixed order: multiplicative exp(bias) with smoothed-noise bias,
    global exponentiation x**gamma with log gamma ~ U(-r, r), additive
    Gaussian noise, clamp back to [0, 1].
    """
    rng = seed_rng(seed, 1)
    out = np.asarray(x, dtype=np.float64).copy()
    shape = out.shape
    if config.bias_amplitude > 0:
        bias = gaussian_filter(rng.standard_normal(shape), sigma=config.bias_sigma)
        peak = np.abs(bias).max()
        if peak > 0:
            out = out * np.exp(bias / peak * config.bias_amplitude)
    gamma = 1.0
    if config.log_gamma_range > 0:
        gamma = np.exp(rng.uniform(-config.log_gamma_range, config.log_gamma_range))
    out = np.clip(out, 0.0, 1.0) ** gamma
    if config.noise_sigma > 0:
        out = out + rng.normal(0.0, config.noise_sigma, size=shape)
    out = np.clip(out, 0.0, 1.0)
    return torch.as_tensor(out, dtype=torch.float32)


def synth_group(labelmaps, config, seed):
    """GroupBatch from one-hot labelmaps sharing a grid.

    The group draws one K-vector of class mean intensities uniformly in
    [0, 1]; member voxels get mean[label] plus within-group jitter, then
    corruption.  Segs (the labelmaps) are attached to every member.
    """
    if not labelmaps:
        raise ValueError("need at least one labelmap")
    shape = tuple(labelmaps[0].shape)
    for s in labelmaps:
        if tuple(s.shape) != shape:
            raise ValueError("labelmap grid mismatch")
    rng = seed_rng(seed, 2)
    means = rng.uniform(0.0, 1.0, size=config.num_classes)
    members = []
    for i, onehot in enumerate(labelmaps):
        labels = onehot.argmax(dim=0).numpy()
        img = means[labels]
        if config.intensity_jitter > 0:
            img = img + rng.normal(0.0, config.intensity_jitter, size=labels.shape)
        img = np.clip(img, 0.0, 1.0)
        image = corrupt_image(img, config, _derive(seed, 3, i))
        members.append(
            GroupMember(image=image, seg=onehot.to(torch.float32),
                        meta={"id": f"synth_{seed}_{i}", "modality": "synthetic", "synthetic": True})
        )
    return GroupBatch(members)


def _derive(seed, *indices):
    """64-bit child seed along a derivation path."""
    return int(seed_rng(seed, *indices).integers(0, 2 ** 63 - 1))


def make_group(config, m, seed):
    """Convenience: m fresh labelmaps + one synth group, fully seeded."""
    labelmaps = [gen_labelmap(config, _derive(seed, 4, i)) for i in range(m)]
    return synth_group(labelmaps, config, _derive(seed, 5))
