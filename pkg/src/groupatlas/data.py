"""Core in-memory data types and validation helpers.

Tensor conventions (torch tensors, float32 unless stated otherwise):

* image: ``(*spatial)`` scalar intensities in [0, 1]
* segmentation: ``(K, *spatial)`` per-voxel class probabilities, channel 0
  is background, channels sum to 1
* velocity / displacement field: ``(d, *spatial)`` with channel ``c`` the
  component along spatial axis ``c``, in voxel units

``spatial`` has d in {2, 3} axes, every extent >= 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class Grid:
    """Spatial domain: extents in voxels plus per-axis spacing in mm."""

    extents: tuple[int, ...]
    spacing: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(self.extents) not in (2, 3):
            raise ValueError(f"grid must be 2-d or 3-d, got {len(self.extents)} axes")
        if any(e < 2 for e in self.extents):
            raise ValueError(f"grid extents must be >= 2, got {self.extents}")
        if self.spacing is None:
            object.__setattr__(self, "spacing", (1.0,) * len(self.extents))

    @property
    def ndim(self):
        return len(self.extents)


@dataclass
class GroupMember:
    """One subject in a group: image, optional probabilistic seg, metadata."""

    image: torch.Tensor
    seg: torch.Tensor | None = None
    meta: dict = field(default_factory=dict)


@dataclass
class GroupBatch:
    """An ordered set of members sharing one grid (and modality, if real)."""

    members: list[GroupMember]

    def __post_init__(self):
        if not self.members:
            raise ValueError("group must have at least one member")
        shape = self.members[0].image.shape
        for i, m in enumerate(self.members):
            if m.image.shape != shape:
                raise ValueError(f"member {i} grid {tuple(m.image.shape)} != {tuple(shape)}")
            if m.seg is not None and m.seg.shape[1:] != shape:
                raise ValueError(f"member {i} seg grid mismatch")

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    @property
    def spatial_shape(self):
        return tuple(self.members[0].image.shape)

    def images(self):
        """Stacked images as (m, 1, *spatial)."""
        return torch.stack([m.image for m in self.members]).unsqueeze(1)

    def segs(self):
        """Stacked segs (m, K, *spatial) over members that have one, with indices."""
        idx = [i for i, m in enumerate(self.members) if m.seg is not None]
        if not idx:
            return None, []
        return torch.stack([self.members[i].seg for i in idx]), idx

    def ids(self):
        return [m.meta.get("id", str(i)) for i, m in enumerate(self.members)]

    def permuted(self, order):
        return GroupBatch([self.members[i] for i in order])


def as_tensor(x, dtype=torch.float32):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def check_field(u, name="field"):
    """Validate a (d, *spatial) vector field; returns d."""
    u = as_tensor(u, u.dtype if isinstance(u, torch.Tensor) else torch.float32)
    d = u.shape[0]
    if d not in (2, 3) or u.ndim != d + 1:
        raise ValueError(f"{name}: expected (d, *spatial) with d in {{2,3}}, got {tuple(u.shape)}")
    if not torch.all(torch.isfinite(u)):
        raise ValueError(f"{name}: non-finite values")
    return d


def check_same_grid(a, b, name="operands"):
    if a.shape[-len(b.shape[-2:]):] != b.shape[-len(b.shape[-2:]):]:
        raise ValueError(f"{name}: grid mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def check_image(x, name="image"):
    x = as_tensor(x)
    if x.ndim not in (2, 3):
        raise ValueError(f"{name}: expected (*spatial) scalar grid, got {tuple(x.shape)}")
    if not torch.all(torch.isfinite(x)):
        raise ValueError(f"{name}: non-finite values")
    return x


def normalize_intensity(x):
    """Rescale an array to [0, 1] (constant images map to zero)."""
    x = as_tensor(x)
    lo, hi = x.min(), x.max()
    if hi - lo < 1e-12:
        return torch.zeros_like(x)
    return (x - lo) / (hi - lo)
