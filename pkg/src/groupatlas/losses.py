"""Group-registration loss terms: windowed squared-LNCC similarity,
displacement smoothness, soft Dice, and their per-group aggregation.

All terms are differentiable torch expressions so the same code serves the
network trainer, the iterative baseline, and finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .fields import warp_image_batch, warp_seg_batch


@dataclass
class LossWeights:
    lambda_reg: float = 1.0
    gamma_seg: float = 0.5
    lncc_window: int = 9
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.lncc_window < 3 or self.lncc_window % 2 == 0:
            raise ValueError("lncc_window must be odd and >= 3")
        if self.lambda_reg < 0 or self.gamma_seg < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def _window_sums(x, window):
    """Sliding-window sums over full (valid) windows; x is (B, 1, *spatial)."""
    d = x.ndim - 2
    pool = F.avg_pool2d if d == 2 else F.avg_pool3d
    n = window ** d
    return pool(x, kernel_size=window, stride=1) * n


def lncc_terms(a, b, window=9, eps=1e-5):
    """Per-item squared-LNCC loss for batched image pairs (B, 1, *spatial).

    For every window fully inside the grid, computes the local correlation
    from window sums (the usual sum-form stabilization: squared covariance
    sum over the product of variance sums plus eps) and returns
    1 - mean(ncc^2) per batch item.
    """
    if a.shape != b.shape:
        raise ValueError(f"grid mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if any(n < window for n in a.shape[2:]):
        raise ValueError(f"grid {tuple(a.shape[2:])} smaller than window {window}")
    d = a.ndim - 2
    n = window ** d
    sa = _window_sums(a, window)
    sb = _window_sums(b, window)
    saa = _window_sums(a * a, window)
    sbb = _window_sums(b * b, window)
    sab = _window_sums(a * b, window)
    cov = sab - sa * sb / n
    var_a = (saa - sa * sa / n).clamp_min(0.0)
    var_b = (sbb - sb * sb / n).clamp_min(0.0)
    ncc2 = cov * cov / (var_a * var_b + eps)
    return 1.0 - ncc2.reshape(a.shape[0], -1).mean(dim=1)


def lncc_similarity(a, b, window=9, eps=1e-5):
    """Windowed squared-LNCC loss in [0, 1] between two images (*spatial)."""
    return lncc_terms(
        a.reshape(1, 1, *a.shape), b.reshape(1, 1, *b.shape), window=window, eps=eps
    )[0]


def grad_penalty_terms(u):
    """Per-item smoothness penalty for batched displacements (B, d, *spatial):
    mean squared forward difference, averaged over channels and axes."""
    d = u.shape[1]
    total = None
    for axis in range(d):
        sq = u.diff(dim=2 + axis) ** 2
        term = sq.reshape(u.shape[0], -1).mean(dim=1)
        total = term if total is None else total + term
    # each diff already averages over the d channels; divide by the d axes
    return total / d


def grad_penalty(u):
    """Smoothness of a displacement (d, *spatial): mean over voxels,
    channels, and spatial axes of squared forward differences of u."""
    return grad_penalty_terms(u.unsqueeze(0))[0]


def soft_dice_terms(p, q, eps=1e-5):
    """Per-item soft-Dice loss for batched segs (B, K, *spatial); channel 0
    (background) is excluded from the average."""
    if p.shape != q.shape:
        raise ValueError(f"seg shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    if p.shape[1] < 2:
        raise ValueError("need at least one foreground channel")
    pf = p[:, 1:].reshape(p.shape[0], p.shape[1] - 1, -1)
    qf = q[:, 1:].reshape(q.shape[0], q.shape[1] - 1, -1)
    inter = (pf * qf).sum(dim=2)
    denom = (pf * pf).sum(dim=2) + (qf * qf).sum(dim=2)
    dice = (2.0 * inter + eps) / (denom + eps)
    return 1.0 - dice.mean(dim=1)


def soft_dice_loss(p, q, eps=1e-5):
    """Soft-Dice loss in [0, 1] between two probability segs (K, *spatial)."""
    return soft_dice_terms(p.unsqueeze(0), q.unsqueeze(0), eps=eps)[0]


def group_loss(t, seg_t, group, disp_fields, w=None):
    """Eq.-style group objective against a constructed template.

    total = (1/m) sum_i [ lncc(t, x_i o phi_i) + lambda * grad_penalty(u_i)
                          + gamma * soft_dice(seg_t, seg_i o phi_i) ]

    ``disp_fields`` is an (m, d, *spatial) tensor (or list) of displacements.
    The seg term covers only members carrying a segmentation, and only when
    ``seg_t`` is given.  Returns (total, components) with components holding
    the three unweighted means (seg averaged over all m, absent terms as 0).
    """
    w = w or LossWeights()
    if not isinstance(disp_fields, torch.Tensor):
        disp_fields = torch.stack(list(disp_fields))
    m = len(group)
    if disp_fields.shape[0] != m:
        raise ValueError(f"{disp_fields.shape[0]} fields for {m} members")
    images = group.images().to(disp_fields.dtype)
    warped = warp_image_batch(images, disp_fields)
    sim = lncc_terms(
        t.reshape(1, 1, *t.shape).expand(m, 1, *t.shape),
        warped,
        window=w.lncc_window,
        eps=w.epsilon,
    ).mean()
    reg = grad_penalty_terms(disp_fields).mean()
    seg = torch.zeros((), dtype=disp_fields.dtype)
    if seg_t is not None:
        segs, idx = group.segs()
        if idx:
            warped_segs = warp_seg_batch(segs.to(disp_fields.dtype), disp_fields[idx])
            seg_losses = soft_dice_terms(
                seg_t.unsqueeze(0).expand(len(idx), *seg_t.shape).to(disp_fields.dtype),
                warped_segs,
                eps=w.epsilon,
            )
            seg = seg_losses.sum() / m
    total = sim + w.lambda_reg * reg + w.gamma_seg * seg
    return total, {"sim": sim, "reg": reg, "seg": seg}
