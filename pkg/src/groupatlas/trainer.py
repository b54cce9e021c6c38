"""Desk-scale training loop and gradient verification.

Each iteration samples a group (synthetic or real-with-augmentation),
runs the network, integrates the velocities, rebuilds the atlas and its
segmentation from the current fields, and takes an Adam step on the group
loss.  Sampling is stateless in the iteration index, so resumed runs
reproduce the uninterrupted loss log.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import synthgen, tensorio
from .atlas import build_atlas_seg
from .data import GroupBatch, GroupMember
from .fields import integrate_svf_batch, warp_image_batch, warp_seg_batch
from .groupnet import GroupNet, NetConfig, init_params, params_index
from .losses import LossWeights, group_loss
from .synthgen import SynthConfig, seed_rng

LOG_COLUMNS = ("iteration", "total", "sim", "reg", "seg", "m", "synthetic_flag")


@dataclass
class TrainConfig:
    iterations: int = 5000
    # desk-scale default; the full-scale preset uses 1e-4 over 80k iterations
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    m_lo: int = 2
    m_hi: int = 6
    synth_fraction: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_interval: int = 1000
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if not (1 <= self.m_lo <= self.m_hi):
            raise ValueError("need 1 <= m_lo <= m_hi")
        if not (0.0 <= self.synth_fraction <= 1.0):
            raise ValueError("synth_fraction must lie in [0, 1]")

    @classmethod
    def paper_preset(cls, **overrides):
        """Full-scale settings (long): 80k iterations, group sizes 2..12."""
        base = dict(iterations=80_000, learning_rate=1e-4, m_lo=2, m_hi=12)
        base.update(overrides)
        return cls(**base)


def sample_group(manifest, synth_config, train_config, seed, iteration):
    """Draw one training group for the given iteration (stateless).

    Group size is uniform on [m_lo, m_hi].  With probability
    ``synth_fraction`` (always, when no manifest is given) the group is
    synthesized; otherwise m distinct same-modality train-split members are
    drawn and pushed through the same corruption model as augmentation.
    """
    rng = seed_rng(seed, 100, iteration)
    m = int(rng.integers(train_config.m_lo, train_config.m_hi + 1))
    synthetic = manifest is None or rng.uniform() < train_config.synth_fraction
    if synthetic:
        group = synthgen.make_group(synth_config, m, synthgen._derive(seed, 101, iteration))
        return group
    train_recs = [r for r in manifest.records if r.split == "train"]
    by_modality = {}
    for r in train_recs:
        by_modality.setdefault(r.modality, []).append(r)
    eligible = sorted(k for k, v in by_modality.items() if len(v) >= m)
    if not eligible:
        raise ValueError(f"no modality has {m} train members")
    modality = eligible[int(rng.integers(len(eligible)))]
    recs = list(by_modality[modality])
    picks = rng.choice(len(recs), size=m, replace=False)
    members = []
    for j, pi in enumerate(picks):
        rec = recs[int(pi)]
        values, _ = tensorio.read_tensor(manifest.resolve(rec.image_path))
        from .data import as_tensor, normalize_intensity

        image = normalize_intensity(as_tensor(values))
        image = synthgen.corrupt_image(
            image.numpy(), synth_config, synthgen._derive(seed, 102, iteration, j)
        )
        seg = None
        if rec.seg_path is not None:
            seg_values, _ = tensorio.read_tensor(manifest.resolve(rec.seg_path))
            seg = as_tensor(seg_values)
        members.append(GroupMember(image=image, seg=seg,
                                   meta={"id": rec.id, "modality": modality, "synthetic": False}))
    return GroupBatch(members)


def training_step(net, group, weights, integration_steps):
    """Forward, integrate, rebuild atlas in-graph, and return the loss."""
    images = group.images()
    v = net(images)
    u = integrate_svf_batch(v, steps=integration_steps)
    warped = warp_image_batch(images, u)
    t = warped.mean(dim=0)[0]
    seg_t = None
    if weights.gamma_seg > 0:
        segs, idx = group.segs()
        if idx:
            warped_segs = warp_seg_batch(segs, u[idx])
            seg_t = build_atlas_seg(list(warped_segs))
    return group_loss(t, seg_t, group, u, weights)


def _optimizer_arrays(opt, net):
    arrays = {}
    lookup = {p: name for name, p in net.named_parameters()}
    for p, state in opt.state.items():
        name = lookup[p]
        for key in ("exp_avg", "exp_avg_sq"):
            if key in state:
                arrays[f"{name}/{key}"] = state[key].detach().cpu().numpy()
        if "step" in state:
            arrays[f"{name}/step"] = np.asarray([float(state["step"])], dtype=np.float32)
    return arrays


def _restore_optimizer(opt, net, arrays):
    for name, p in net.named_parameters():
        key = f"{name}/exp_avg"
        if key not in arrays:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(arrays[f"{name}/step"][0])),
            "exp_avg": torch.as_tensor(arrays[f"{name}/exp_avg"]),
            "exp_avg_sq": torch.as_tensor(arrays[f"{name}/exp_avg_sq"]),
        }


def save_training_checkpoint(ckpt_dir, net, opt, iteration, train_config):
    from .groupnet import state_to_arrays

    config = {"net": asdict(net.config), "train": asdict(train_config)}
    tensorio.save_checkpoint(
        ckpt_dir,
        state_to_arrays(net),
        config,
        iteration,
        optimizer_state=_optimizer_arrays(opt, net) if opt is not None else None,
    )


def load_training_checkpoint(ckpt_dir):
    from .groupnet import arrays_to_state

    params, config, iteration, opt_arrays = tensorio.load_checkpoint(ckpt_dir)
    net_config = NetConfig.from_dict(config["net"])
    train_config = TrainConfig(**config["train"])
    net = GroupNet(net_config)
    arrays_to_state(net, params)
    return net, train_config, iteration, opt_arrays


def train(train_config, net_config, out_dir, manifest=None, synth_config=None,
          resume_from=None, log_every=1):
    """Run the training loop; returns the final checkpoint directory.

    Writes ``loss_log.csv`` (iteration, total, sim, reg, seg, m,
    synthetic_flag) and periodic checkpoints under ``out_dir``.  A
    non-finite loss aborts with the last good checkpoint retained.
    """
    os.makedirs(out_dir, exist_ok=True)
    synth_config = synth_config or SynthConfig()
    opt_arrays = None
    start_iter = 0
    if resume_from is not None:
        net, _, start_iter, opt_arrays = load_training_checkpoint(resume_from)
    else:
        net = init_params(net_config, train_config.seed)
    opt = torch.optim.Adam(
        net.parameters(),
        lr=train_config.learning_rate,
        betas=(train_config.beta1, train_config.beta2),
    )
    if opt_arrays:
        _restore_optimizer(opt, net, opt_arrays)

    log_path = os.path.join(out_dir, "loss_log.csv")
    mode = "a" if (resume_from is not None and os.path.exists(log_path)) else "w"
    final_dir = os.path.join(out_dir, "checkpoint_final")
    index0 = params_index(net)
    with open(log_path, mode, newline="") as log_file:
        writer = csv.writer(log_file)
        if mode == "w":
            writer.writerow(LOG_COLUMNS)
        for it in range(start_iter, train_config.iterations):
            group = sample_group(manifest, synth_config, train_config, train_config.seed, it)
            total, comps = training_step(
                net, group, train_config.weights, net_config.integration_steps
            )
            if not torch.isfinite(total):
                save_training_checkpoint(
                    os.path.join(out_dir, "checkpoint_abort"), net, opt, it, train_config
                )
                raise RuntimeError(f"non-finite loss at iteration {it}; last checkpoint retained")
            opt.zero_grad()
            total.backward()
            opt.step()
            if params_index(net) != index0:
                raise RuntimeError("parameter index drifted during training")
            if it % log_every == 0 or it == train_config.iterations - 1:
                writer.writerow([
                    it,
                    f"{float(total.detach()):.8f}",
                    f"{float(comps['sim'].detach()):.8f}",
                    f"{float(comps['reg'].detach()):.8f}",
                    f"{float(comps['seg'].detach()):.8f}",
                    len(group),
                    int(bool(group.members[0].meta.get("synthetic"))),
                ])
            if train_config.checkpoint_interval and (it + 1) % train_config.checkpoint_interval == 0:
                save_training_checkpoint(
                    os.path.join(out_dir, f"checkpoint_{it + 1:06d}"), net, opt, it + 1, train_config
                )
    save_training_checkpoint(final_dir, net, opt, train_config.iterations, train_config)
    return final_dir


def gradcheck(net_config=None, seed=0, num_params=50, step=1e-3):
    """End-to-end finite-difference check of the group-loss gradient.

    Builds a tiny float64 instance (8x8 grid, m=2, single-level net with a
    boosted head so displacements sit away from interpolation breakpoints),
    compares autograd parameter gradients against central differences on a
    random subset of parameters, and returns the max relative error.
    """
    net_config = net_config or NetConfig(
        dims=2, enc_widths=(4,), dec_widths=(4,), post_widths=(4,), head_init_scale=1e-5
    )
    weights = LossWeights(lncc_window=5)
    rng = seed_rng(seed, 200)
    net = init_params(net_config, seed).double()
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.startswith("head.") and p.ndim > 1:
                p.add_(torch.as_tensor(rng.normal(0.0, 0.08, size=tuple(p.shape))))

    shape = (8, 8)
    members = []
    for i in range(2):
        from scipy.ndimage import gaussian_filter

        img = gaussian_filter(rng.uniform(0, 1, size=shape), sigma=1.0)
        img = (img - img.min()) / (img.max() - img.min() + 1e-12)
        logits = rng.normal(0, 1, size=(3,) + shape)
        seg = np.exp(logits) / np.exp(logits).sum(axis=0, keepdims=True)
        members.append(GroupMember(
            image=torch.as_tensor(img, dtype=torch.float64),
            seg=torch.as_tensor(seg, dtype=torch.float64),
        ))
    group = GroupBatch(members)

    # central differences are only a valid oracle where the loss is
    # differentiable; track leaky-ReLU preactivation signs and interpolation
    # cell indices so probes whose +-step interval crosses a kink are rejected
    from . import fields as _fields

    signs = []
    hooks = []
    for module in net.modules():
        if isinstance(module, (torch.nn.Conv2d, torch.nn.Conv3d)):
            hooks.append(module.register_forward_hook(
                lambda _m, _inp, out: signs.append(torch.sign(out).flatten())
            ))

    def loss_value():
        signs.clear()
        _fields.BREAKPOINT_TRACE = trace = []
        try:
            total, _ = training_step(net, group, weights, net_config.integration_steps)
        finally:
            _fields.BREAKPOINT_TRACE = None
        witness = torch.cat([torch.cat(signs), torch.cat([t.flatten().double() for t in trace])])
        return total, witness

    total, base_signs = loss_value()
    params = list(net.parameters())
    grads = torch.autograd.grad(total, params)

    flat = [(ti, j) for ti, p in enumerate(params) for j in range(p.numel())]
    order = rng.permutation(len(flat))
    max_rel = 0.0
    checked = 0
    with torch.no_grad():
        for pick in order:
            if checked >= num_params:
                break
            ti, j = flat[int(pick)]
            p = params[ti].reshape(-1)
            orig = p[j].item()
            p[j] = orig + step
            hi, hi_signs = loss_value()
            p[j] = orig - step
            lo, lo_signs = loss_value()
            p[j] = orig
            if not (torch.equal(hi_signs, base_signs) and torch.equal(lo_signs, base_signs)):
                continue
            fd = (float(hi) - float(lo)) / (2 * step)
            an = float(grads[ti].reshape(-1)[j])
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            max_rel = max(max_rel, rel)
            checked += 1
    for h in hooks:
        h.remove()
    if checked < num_params:
        raise RuntimeError(f"only {checked} kink-free probes found (wanted {num_params})")
    return max_rel
