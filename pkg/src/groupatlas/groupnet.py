"""Set-equivariant registration network.

A residual UNet whose convolution blocks concatenate a groupwise summary
statistic onto every member's features before a shared convolution, so one
parameter set serves any group size.  The head emits one stationary
velocity field per member; a final projection subtracts the group-mean
velocity so the predicted fields average to zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

_STATS = ("mean", "max", "var")


@dataclass
class NetConfig:
    dims: int = 2
    enc_widths: tuple[int, ...] = (16, 32, 32, 32)
    dec_widths: tuple[int, ...] = (32, 32, 32, 16)
    post_widths: tuple[int, ...] = (16, 16)
    statistic: str = "mean"
    use_group_block: bool = True
    use_centrality: bool = True
    activation_slope: float = 0.2
    head_init_scale: float = 1e-5
    integration_steps: int = 7

    def __post_init__(self):
        self.enc_widths = tuple(self.enc_widths)
        self.dec_widths = tuple(self.dec_widths)
        self.post_widths = tuple(self.post_widths)
        if self.dims not in (2, 3):
            raise ValueError("dims must be 2 or 3")
        if len(self.enc_widths) != len(self.dec_widths):
            raise ValueError("encoder/decoder depths must match")
        if any(w <= 0 for w in self.enc_widths + self.dec_widths + self.post_widths):
            raise ValueError("widths must be positive")
        if self.statistic not in _STATS:
            raise ValueError(f"statistic must be one of {_STATS}")

    @property
    def depth(self):
        return len(self.enc_widths)

    @property
    def divisor(self):
        """Grid extents must be divisible by this (2**(depth-1))."""
        return 2 ** (self.depth - 1)

    def to_json(self):
        return json.dumps(asdict(self))

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def group_summary(features, statistic="mean"):
    """Reduce feature maps (m, C, *spatial) over the group axis.

    Variance uses the biased (divide-by-m) estimator so m=1 gives zeros.
    """
    if statistic == "mean":
        return features.mean(dim=0, keepdim=True)
    if statistic == "max":
        return features.max(dim=0, keepdim=True).values
    if statistic == "var":
        return features.var(dim=0, keepdim=True, unbiased=False)
    raise ValueError(f"unknown statistic {statistic!r}")


def centrality_project(vs):
    """Subtract the group-mean velocity: v_i <- v_i - mean_j v_j.

    Accepts a stacked (m, d, *spatial) tensor or a list of fields, and
    returns the same kind.  The output's group mean is the zero field up
    to float summation error.
    """
    if isinstance(vs, torch.Tensor):
        return vs - vs.mean(dim=0, keepdim=True)
    stacked = torch.stack(list(vs))
    centered = stacked - stacked.mean(dim=0, keepdim=True)
    return [centered[i] for i in range(centered.shape[0])]


class GroupBlock(nn.Module):
    """Shared convolution over [member features || group summary], with
    leaky-ReLU activation and a residual connection when widths match."""

    def __init__(self, in_ch, out_ch, config, stride=1):
        super().__init__()
        self.use_summary = config.use_group_block
        self.statistic = config.statistic
        self.slope = config.activation_slope
        self.residual = stride == 1 and in_ch == out_ch
        conv_cls = nn.Conv2d if config.dims == 2 else nn.Conv3d
        conv_in = in_ch * 2 if self.use_summary else in_ch
        self.conv = conv_cls(conv_in, out_ch, kernel_size=3, stride=stride, padding=1)

    def forward(self, x):
        if self.use_summary:
            summary = group_summary(x, self.statistic).expand_as(x)
            x_in = torch.cat([x, summary], dim=1)
        else:
            x_in = x
        out = F.leaky_relu(self.conv(x_in), negative_slope=self.slope)
        if self.residual:
            out = out + x
        return out


class GroupNet(nn.Module):
    """Multi-scale residual UNet over a group axis, one SVF per member.

    Input: stacked group images (m, 1, *spatial); output (m, d, *spatial)
    velocities.  Downsampling is by stride-2 convolution, upsampling by
    nearest-neighbor interpolation; skip features are concatenated.
    """

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        enc, dec, post = config.enc_widths, config.dec_widths, config.post_widths
        conv_cls = nn.Conv2d if config.dims == 2 else nn.Conv3d

        self.encoder = nn.ModuleList()
        in_ch = 1
        for level, width in enumerate(enc):
            stride = 1 if level == 0 else 2
            self.encoder.append(GroupBlock(in_ch, width, config, stride=stride))
            in_ch = width

        self.decoder = nn.ModuleList()
        for level, width in enumerate(dec):
            self.decoder.append(GroupBlock(in_ch, width, config))
            in_ch = width
            if level < len(dec) - 1:
                in_ch += enc[len(enc) - 2 - level]  # skip concat after upsample

        self.post = nn.ModuleList()
        for width in post:
            self.post.append(GroupBlock(in_ch, width, config))
            in_ch = width

        self.head = conv_cls(in_ch, config.dims, kernel_size=3, padding=1)

    def forward(self, x):
        cfg = self.config
        if any(n % cfg.divisor for n in x.shape[2:]):
            raise ValueError(
                f"grid extents {tuple(x.shape[2:])} must be divisible by {cfg.divisor}"
            )
        skips = []
        for level, block in enumerate(self.encoder):
            x = block(x)
            if level < len(self.encoder) - 1:
                skips.append(x)
        for level, block in enumerate(self.decoder):
            x = block(x)
            if level < len(self.decoder) - 1:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
                x = torch.cat([x, skips.pop()], dim=1)
        for block in self.post:
            x = block(x)
        v = self.head(x)
        if cfg.use_centrality:
            v = centrality_project(v)
        return v


def init_params(config: NetConfig, seed: int) -> GroupNet:
    """Deterministically initialized network: fan-in-scaled uniform hidden
    kernels, near-zero Gaussian head (sd = head_init_scale), zero biases."""
    gen = torch.Generator().manual_seed(int(seed))
    net = GroupNet(config)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.startswith("head."):
                if p.ndim > 1:
                    p.copy_(torch.randn(p.shape, generator=gen) * config.head_init_scale)
                else:
                    p.zero_()
            elif p.ndim > 1:
                fan_in = p[0].numel()
                bound = (1.0 / fan_in) ** 0.5
                p.copy_((torch.rand(p.shape, generator=gen) * 2 - 1) * bound)
            else:
                p.zero_()
    return net


def params_index(net):
    """Deterministic name -> shape map; independent of group size by
    construction (the group axis is the batch axis)."""
    return {name: tuple(p.shape) for name, p in net.named_parameters()}


def state_to_arrays(net):
    return {name: p.detach().cpu().numpy() for name, p in net.named_parameters()}


def arrays_to_state(net, arrays):
    with torch.no_grad():
        for name, p in net.named_parameters():
            p.copy_(torch.as_tensor(arrays[name]))
    return net
