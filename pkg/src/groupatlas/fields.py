"""Deformation-field core: SVF integration, warping, Jacobian analysis.

Displacement semantics: a field ``u`` of shape ``(d, *spatial)`` encodes
the map ``phi(p) = p + u(p)`` in voxel units, so the identity map is the
zero tensor.  All interpolation is multilinear with clamp-to-edge
handling outside the grid.
"""

from __future__ import annotations

import itertools

import torch

from .data import check_field, check_image


def identity_coords(spatial_shape, dtype=torch.float32, device=None):
    """Voxel-coordinate mesh of shape (d, *spatial)."""
    axes = [torch.arange(n, dtype=dtype, device=device) for n in spatial_shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


# optional list collecting interpolation cell indices and clamp masks per
# sample_at call; lets a finite-difference oracle reject probe steps that
# cross an interpolation breakpoint (where the loss is only C^0)
BREAKPOINT_TRACE = None


def sample_at(values, coords):
    """Multilinearly sample ``values`` (B, C, *spatial) at absolute voxel
    ``coords`` (B, d, *spatial); clamp-to-edge beyond the grid."""
    spatial = values.shape[2:]
    d = len(spatial)
    batch, chans = values.shape[:2]
    clamped = [coords[:, a].clamp(0, spatial[a] - 1) for a in range(d)]
    base = [c.floor().long().clamp(0, spatial[a] - 2) for a, c in enumerate(clamped)]
    if BREAKPOINT_TRACE is not None:
        BREAKPOINT_TRACE.append(torch.stack([b.flatten() for b in base]))
        BREAKPOINT_TRACE.append(
            torch.stack([(coords[:, a] != clamped[a]).flatten().long() for a in range(d)])
        )
    frac = [clamped[a] - base[a].to(values.dtype) for a in range(d)]
    flat_values = values.reshape(batch, chans, -1)
    out = None
    for corner in itertools.product((0, 1), repeat=d):
        weight = None
        flat_idx = None
        for a in range(d):
            w_a = frac[a] if corner[a] else 1.0 - frac[a]
            weight = w_a if weight is None else weight * w_a
            idx_a = base[a] + corner[a]
            flat_idx = idx_a if flat_idx is None else flat_idx * spatial[a] + idx_a
        gathered = flat_values.gather(
            2, flat_idx.reshape(batch, 1, -1).expand(batch, chans, -1)
        ).reshape(batch, chans, *spatial)
        term = gathered * weight.unsqueeze(1)
        out = term if out is None else out + term
    return out


def _sample_field_at_displaced(field, disp):
    """Sample a batched field (B, d, *sp) at p + disp."""
    coords = identity_coords(field.shape[2:], dtype=field.dtype, device=field.device)
    return sample_at(field, coords.unsqueeze(0) + disp)


def compose_batch(a, b):
    """u(p) = b(p) + a(p + b(p)) for batched fields (B, d, *spatial)."""
    return b + _sample_field_at_displaced(a, b)


def integrate_svf_batch(v, steps=7):
    """Scaling-and-squaring flow of batched stationary velocities (B, d, *sp)."""
    u = v / (2.0 ** steps)
    for _ in range(steps):
        u = compose_batch(u, u)
    return u


def integrate_svf(v, steps=7):
    """Integrate a stationary velocity field (d, *spatial) for unit time.

    Scales the field by 1/2**steps, then squares (self-composes) ``steps``
    times; returns the displacement of the resulting diffeomorphism.
    """
    check_field(v, "velocity")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return integrate_svf_batch(v.unsqueeze(0), steps=steps).squeeze(0)


def compose(a, b):
    """Displacement of (p + a) o (p + b): sample a at p + b(p), add b."""
    check_field(a, "a")
    check_field(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"grid mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return compose_batch(a.unsqueeze(0), b.unsqueeze(0)).squeeze(0)


def warp_image(x, u):
    """Pull back image x (*spatial) through phi = p + u: out(p) = x(p + u(p))."""
    check_image(x, "image")
    d = check_field(u, "displacement")
    if x.shape != u.shape[1:]:
        raise ValueError(f"grid mismatch: image {tuple(x.shape)} vs field {tuple(u.shape)}")
    coords = identity_coords(x.shape, dtype=u.dtype, device=u.device) + u
    return sample_at(x.reshape(1, 1, *x.shape).to(u.dtype), coords.unsqueeze(0))[0, 0]


def warp_seg(s, u, renorm_floor=1e-6):
    """Warp each probability channel of s (K, *spatial), then renormalize
    the per-voxel channel sums back to one."""
    d = check_field(u, "displacement")
    if s.shape[1:] != u.shape[1:]:
        raise ValueError(f"grid mismatch: seg {tuple(s.shape)} vs field {tuple(u.shape)}")
    coords = identity_coords(s.shape[1:], dtype=u.dtype, device=u.device) + u
    warped = sample_at(s.unsqueeze(0).to(u.dtype), coords.unsqueeze(0))[0]
    total = warped.sum(dim=0, keepdim=True).clamp_min(renorm_floor)
    return warped / total


def warp_seg_batch(s, u, renorm_floor=1e-6):
    """Batched warp_seg: s (B, K, *sp), u (B, d, *sp)."""
    warped = sample_at(s, identity_coords(s.shape[2:], dtype=u.dtype, device=u.device) + u)
    total = warped.sum(dim=1, keepdim=True).clamp_min(renorm_floor)
    return warped / total


def warp_image_batch(x, u):
    """Batched pullback: x (B, C, *sp), u (B, d, *sp)."""
    coords = identity_coords(x.shape[2:], dtype=u.dtype, device=u.device)
    return sample_at(x.to(u.dtype), coords.unsqueeze(0) + u)


def jacobian_det(u):
    """Per-voxel det(I + grad u): central differences in the interior,
    one-sided at the boundary.  Grid extents must be >= 3."""
    d = check_field(u, "displacement")
    if any(n < 3 for n in u.shape[1:]):
        raise ValueError("jacobian_det needs extents >= 3 per axis")
    # J[c][a] = d(phi_c)/d(x_a) = delta_ca + d(u_c)/d(x_a)
    J = [[None] * d for _ in range(d)]
    for c in range(d):
        grads = torch.gradient(u[c], dim=tuple(range(d)))
        for a in range(d):
            J[c][a] = grads[a] + (1.0 if a == c else 0.0)
    if d == 2:
        return J[0][0] * J[1][1] - J[0][1] * J[1][0]
    return (
        J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1])
        - J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0])
        + J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0])
    )


def count_folds(u):
    """Number of voxels (boundaries included) where det J_phi <= 0."""
    return int((jacobian_det(u) <= 0).sum().item())


def centrality(us):
    """Per-voxel mean of the squared norm of the group-mean displacement:
    (1/|Omega|) sum_p || (1/m) sum_i u_i(p) ||^2, in voxel units."""
    if len(us) == 0:
        raise ValueError("need at least one field")
    shape = us[0].shape
    for u in us:
        if u.shape != shape:
            raise ValueError("grid mismatch in field list")
    ubar = torch.stack(list(us)).mean(dim=0)
    return float((ubar ** 2).sum(dim=0).mean().item())
