"""On-demand atlas construction and subgroup selection.

The atlas is the arithmetic mean of the group members warped into the
central space by the network's (already centered) velocity fields; the
atlas segmentation is the renormalized mean of whichever warped member
segmentations exist.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import torch

from . import tensorio
from .data import GroupBatch, GroupMember, as_tensor, normalize_intensity
from .fields import integrate_svf_batch, warp_image_batch, warp_seg_batch


@dataclass
class AtlasResult:
    atlas: torch.Tensor                      # (*spatial)
    atlas_seg: torch.Tensor | None           # (K, *spatial) or None
    velocities: torch.Tensor                 # (m, d, *spatial)
    displacements: torch.Tensor              # (m, d, *spatial)
    warped_images: torch.Tensor              # (m, *spatial)
    group_ids: list[str] = field(default_factory=list)
    wall_time_s: float = 0.0
    objective_trace: list[tuple[int, float]] = field(default_factory=list)


@dataclass
class SubgroupFilter:
    modality: str | None = None
    age_min: float | None = None
    age_max: float | None = None
    diagnosis: str | None = None
    ids: list[str] | None = None
    max_size: int | None = None

    def __post_init__(self):
        if all(
            v is None
            for v in (self.modality, self.age_min, self.age_max, self.diagnosis, self.ids, self.max_size)
        ):
            raise ValueError("subgroup filter needs at least one criterion")

    def matches(self, rec):
        if self.modality is not None and rec.modality != self.modality:
            return False
        if self.age_min is not None or self.age_max is not None:
            if rec.age is None:
                raise ValueError(f"record {rec.id}: age filter set but age missing")
            if self.age_min is not None and rec.age < self.age_min:
                return False
            if self.age_max is not None and rec.age >= self.age_max:
                return False
        if self.diagnosis is not None and rec.diagnosis != self.diagnosis:
            return False
        if self.ids is not None and rec.id not in self.ids:
            return False
        return True


def build_atlas_seg(warped_segs):
    """Voxelwise mean of warped probability maps, renormalized to sum to 1."""
    if len(warped_segs) == 0:
        raise ValueError("need at least one warped segmentation")
    mean = torch.stack(list(warped_segs)).mean(dim=0)
    return mean / mean.sum(dim=0, keepdim=True).clamp_min(1e-6)


@torch.no_grad()
def build_atlas(net, group: GroupBatch) -> AtlasResult:
    """Single forward pass: velocities, integration, warping, aggregation."""
    start = time.perf_counter()
    images = group.images()
    v = net(images)
    u = integrate_svf_batch(v, steps=net.config.integration_steps)
    if net.config.use_centrality:
        # velocity centering only zeroes the mean displacement to first
        # order; remove the residual so the atlas space is exactly the
        # group barycenter in deformation space
        u = u - u.mean(dim=0, keepdim=True)
    warped = warp_image_batch(images, u)[:, 0]
    atlas = warped.mean(dim=0)
    segs, idx = group.segs()
    atlas_seg = None
    if idx:
        warped_segs = warp_seg_batch(segs, u[idx])
        atlas_seg = build_atlas_seg(list(warped_segs))
    return AtlasResult(
        atlas=atlas,
        atlas_seg=atlas_seg,
        velocities=v,
        displacements=u,
        warped_images=warped,
        group_ids=group.ids(),
        wall_time_s=time.perf_counter() - start,
    )


def subgroup_select(manifest, flt: SubgroupFilter, device=None) -> GroupBatch:
    """Deterministic, manifest-order selection of members matching every
    set criterion; loads images (normalized to [0,1]) and segs from disk."""
    chosen = [rec for rec in manifest.records if flt.matches(rec)]
    if flt.max_size is not None:
        chosen = chosen[: flt.max_size]
    if not chosen:
        raise ValueError("subgroup filter selected no members")
    members = []
    for rec in chosen:
        values, _ = tensorio.read_tensor(manifest.resolve(rec.image_path))
        image = normalize_intensity(as_tensor(values))
        seg = None
        if rec.seg_path is not None:
            seg_values, _ = tensorio.read_tensor(manifest.resolve(rec.seg_path))
            seg = as_tensor(seg_values)
        members.append(
            GroupMember(
                image=image,
                seg=seg,
                meta={"id": rec.id, "modality": rec.modality, "age": rec.age,
                      "diagnosis": rec.diagnosis},
            )
        )
    return GroupBatch(members)


def save_atlas_result(result: AtlasResult, out_dir):
    """Persist atlas, seg, and per-member fields as tensor containers."""
    import json
    import os

    os.makedirs(out_dir, exist_ok=True)
    tensorio.write_tensor(os.path.join(out_dir, "atlas.bin"), result.atlas.numpy())
    if result.atlas_seg is not None:
        tensorio.write_tensor(os.path.join(out_dir, "atlas_seg.bin"), result.atlas_seg.numpy())
    tensorio.write_tensor(os.path.join(out_dir, "velocities.bin"), result.velocities.numpy())
    tensorio.write_tensor(os.path.join(out_dir, "displacements.bin"), result.displacements.numpy())
    tensorio.write_tensor(os.path.join(out_dir, "warped_images.bin"), result.warped_images.numpy())
    sidecar = {
        "group_ids": result.group_ids,
        "wall_time_s": result.wall_time_s,
        "objective_trace": result.objective_trace,
    }
    with open(os.path.join(out_dir, "metrics.json"), "w") as f:
        json.dump(sidecar, f, indent=1)
