import numpy as np
import pytest
import torch

from groupatlas.data import GroupBatch, GroupMember


def gaussian_blob(cx, cy, n=64, r=10.0):
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return np.exp(-((ii - cx) ** 2 + (jj - cy) ** 2) / (2 * (r / 2) ** 2)).astype(
        np.float32
    )


def smooth_field(shape, sigma, amplitude, rng):
    """Gaussian-smoothed noise velocity field of shape (d, *shape),
    rescaled so max |v| == amplitude."""
    from scipy.ndimage import gaussian_filter

    d = len(shape)
    out = np.stack(
        [gaussian_filter(rng.standard_normal(shape), sigma=sigma) for _ in range(d)]
    )
    peak = np.abs(out).max()
    if peak > 0:
        out *= amplitude / peak
    return torch.as_tensor(out, dtype=torch.float32)


def toy_group(m=3, n=16, seed=0, with_segs=False, k=3):
    """Random m-member group of smooth images (optionally with one-hot segs)."""
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    members = []
    for _ in range(m):
        img = gaussian_filter(rng.random((n, n)), sigma=2).astype(np.float32)
        img = (img - img.min()) / (img.max() - img.min() + 1e-12)
        seg = None
        if with_segs:
            labels = np.minimum((img * k).astype(np.int64), k - 1)
            seg = np.eye(k, dtype=np.float32)[labels].transpose(2, 0, 1)
            seg = torch.from_numpy(seg)
        members.append(GroupMember(torch.from_numpy(img), seg))
    return GroupBatch(members)


@pytest.fixture
def blob_pair():
    return GroupBatch(
        [
            GroupMember(torch.from_numpy(gaussian_blob(29, 32))),
            GroupMember(torch.from_numpy(gaussian_blob(35, 32))),
        ]
    )
