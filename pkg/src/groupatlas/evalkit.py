"""Evaluation harness: overlap metrics, the split-half segmentation
transfer protocol, the ablation runner, and hyperparameter sweeps.

Transfer protocol: the group is split into halves A and B; the atlas and
its segmentation are built from A only, B is mapped to atlas space by
running the full group through the model and reusing B's fields, and the
atlas labels reach each B member through the inverse displacement
(integration of the negated velocity).  B's own segmentations are only
ever touched as ground truth.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .atlas import build_atlas, build_atlas_seg
from .data import GroupBatch
from .fields import centrality, count_folds, integrate_svf_batch, warp_seg_batch
from .groupnet import NetConfig
from .losses import LossWeights
from .synthgen import SynthConfig, make_group, seed_rng
from .trainer import TrainConfig, load_training_checkpoint, train

ABLATION_VARIANTS = {
    "no_cl_gb_mean": dict(use_centrality=False, use_group_block=True, statistic="mean", gamma=0.0),
    "cl_no_gb": dict(use_centrality=True, use_group_block=False, statistic="mean", gamma=0.0),
    "cl_gb_var": dict(use_centrality=True, use_group_block=True, statistic="var", gamma=0.0),
    "cl_gb_max": dict(use_centrality=True, use_group_block=True, statistic="max", gamma=0.0),
    "cl_gb_mean": dict(use_centrality=True, use_group_block=True, statistic="mean", gamma=0.0),
    "cl_gb_mean_dice": dict(use_centrality=True, use_group_block=True, statistic="mean", gamma=0.5),
}


@dataclass
class MetricsReport:
    per_member_dice: list[float]
    mean_dice: float
    per_member_folds: list[int]
    total_folds: int
    centrality: float
    wall_time_s: float
    group_size: int
    config_fingerprint: str = ""


@dataclass
class SweepSpec:
    parameter: str  # "lambda_reg" or "gamma_seg"
    values: tuple[float, ...] = ()
    iterations: int = 1000
    seed: int = 0

    LAMBDA_PRESET = (0.25, 0.5, 1.0, 2.0, 4.0)
    GAMMA_PRESET = (0.0, 0.1, 0.3, 0.5, 0.7, 1.0)

    def __post_init__(self):
        if self.parameter not in ("lambda_reg", "gamma_seg"):
            raise ValueError("parameter must be lambda_reg or gamma_seg")
        if not self.values:
            self.values = self.LAMBDA_PRESET if self.parameter == "lambda_reg" else self.GAMMA_PRESET
        self.values = tuple(float(v) for v in self.values)
        if len(self.values) < 2:
            raise ValueError("sweep needs at least 2 values")


def _fingerprint(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


def hard_dice(a, b):
    """Hard-label Dice per foreground structure plus their mean.

    Both maps are argmaxed (ties to the lowest channel); structures absent
    from both score 1; background (channel 0) is excluded from the mean.
    """
    if a.shape != b.shape:
        raise ValueError(f"seg shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    K = a.shape[0]
    la = np.argmax(np.asarray(a), axis=0)
    lb = np.argmax(np.asarray(b), axis=0)
    scores = []
    for k in range(1, K):
        na = int((la == k).sum())
        nb = int((lb == k).sum())
        if na + nb == 0:
            scores.append(1.0)
            continue
        inter = int(((la == k) & (lb == k)).sum())
        scores.append(2.0 * inter / (na + nb))
    return scores, float(np.mean(scores))


def evaluate_atlas(result, group) -> MetricsReport:
    """Aggregate hard Dice of each warped member seg against the atlas seg,
    folds, and centrality for a finished atlas."""
    dices = []
    if result.atlas_seg is not None:
        segs, idx = group.segs()
        if idx:
            warped = warp_seg_batch(segs, result.displacements[idx])
            for i in range(len(idx)):
                _, mean_d = hard_dice(warped[i], result.atlas_seg)
                dices.append(mean_d)
    folds = [count_folds(result.displacements[i]) for i in range(len(group))]
    cent = centrality(list(result.displacements))
    return MetricsReport(
        per_member_dice=dices,
        mean_dice=float(np.mean(dices)) if dices else float("nan"),
        per_member_folds=folds,
        total_folds=int(sum(folds)),
        centrality=cent,
        wall_time_s=result.wall_time_s,
        group_size=len(group),
    )


def split_halves(m, seed):
    """Seeded random half split; odd groups put the extra member in A."""
    order = seed_rng(seed, 300).permutation(m)
    half = (m + 1) // 2
    return sorted(int(i) for i in order[:half]), sorted(int(i) for i in order[half:])


@torch.no_grad()
def dice_transfer(net, group: GroupBatch, seed=0) -> MetricsReport:
    """Split-half segmentation transfer; see module docstring."""
    m = len(group)
    if m < 2:
        raise ValueError("transfer needs m >= 2")
    for i, member in enumerate(group):
        if member.seg is None:
            raise ValueError(f"member {i} lacks a segmentation")
    a_idx, b_idx = split_halves(m, seed)

    group_a = GroupBatch([group.members[i] for i in a_idx])
    result_a = build_atlas(net, group_a)
    if result_a.atlas_seg is None:
        raise ValueError("atlas-half members lack segmentations")
    seg_t = result_a.atlas_seg

    v_full = net(group.images())
    u_full = integrate_svf_batch(v_full, steps=net.config.integration_steps)
    if net.config.use_centrality:
        # mirror build_atlas: remove the residual mean displacement
        u_full = u_full - u_full.mean(dim=0, keepdim=True)
    v_b = v_full[b_idx]
    u_inv = integrate_svf_batch(-v_b, steps=net.config.integration_steps)

    transferred = warp_seg_batch(seg_t.unsqueeze(0).expand(len(b_idx), *seg_t.shape), u_inv)
    dices = []
    for j, i in enumerate(b_idx):
        _, mean_d = hard_dice(transferred[j], group.members[i].seg)
        dices.append(mean_d)
    folds = [count_folds(u_full[i]) for i in range(m)]
    return MetricsReport(
        per_member_dice=dices,
        mean_dice=float(np.mean(dices)),
        per_member_folds=folds,
        total_folds=int(sum(folds)),
        centrality=centrality(list(u_full)),
        wall_time_s=result_a.wall_time_s,
        group_size=m,
        config_fingerprint=_fingerprint(asdict(net.config)),
    )


def unregistered_baseline(group: GroupBatch, seed=0):
    """Transfer Dice with all fields held at identity, on the same split:
    the unwarped mean of A's segs scored against each B member's seg."""
    m = len(group)
    a_idx, b_idx = split_halves(m, seed)
    seg_t = build_atlas_seg([group.members[i].seg for i in a_idx])
    dices = []
    for i in b_idx:
        _, mean_d = hard_dice(seg_t, group.members[i].seg)
        dices.append(mean_d)
    return float(np.mean(dices))


def make_eval_groups(n_groups, m, synth_config=None, seed=777):
    synth_config = synth_config or SynthConfig()
    return [make_group(synth_config, m, seed + 1000 * g) for g in range(n_groups)]


def _evaluate_checkpoint(ckpt_dir, eval_groups, seed):
    net, _, _, _ = load_training_checkpoint(ckpt_dir)
    net.eval()
    reports = [dice_transfer(net, g, seed=seed + gi) for gi, g in enumerate(eval_groups)]
    return {
        "dice_mean": float(np.mean([r.mean_dice for r in reports])),
        "dice_std": float(np.std([r.mean_dice for r in reports])),
        "folds_mean": float(np.mean([r.total_folds for r in reports])),
        "folds_std": float(np.std([r.total_folds for r in reports])),
        "centrality_mean": float(np.mean([r.centrality for r in reports])),
        "centrality_std": float(np.std([r.centrality for r in reports])),
    }


def _train_variant(out_dir, net_config, iterations, gamma, lambda_reg, seed, synth_config):
    cfg = TrainConfig(
        iterations=iterations,
        weights=LossWeights(lambda_reg=lambda_reg, gamma_seg=gamma),
        seed=seed,
        checkpoint_interval=0,
    )
    return train(cfg, net_config, out_dir, synth_config=synth_config, log_every=10)


def run_ablations(variants, out_dir, iterations=1500, seed=0, synth_config=None,
                  eval_groups=None, lambda_reg=1.0):
    """Train each named variant under identical seed/budget and score it on
    a fixed held-out set; writes one CSV row per variant."""
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise ValueError(f"unknown variant(s): {unknown}")
    synth_config = synth_config or SynthConfig()
    if eval_groups is None:
        eval_groups = make_eval_groups(5, 8, synth_config, seed=9000 + seed)
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for name in variants:
        spec = ABLATION_VARIANTS[name]
        net_config = NetConfig(
            use_centrality=spec["use_centrality"],
            use_group_block=spec["use_group_block"],
            statistic=spec["statistic"],
        )
        ckpt = _train_variant(
            os.path.join(out_dir, name), net_config, iterations, spec["gamma"],
            lambda_reg, seed, synth_config,
        )
        metrics = _evaluate_checkpoint(ckpt, eval_groups, seed)
        rows.append({"variant": name, **metrics})
    csv_path = os.path.join(out_dir, "ablations.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return csv_path


def run_sweep(spec: SweepSpec, out_dir, synth_config=None, eval_groups=None):
    """One training + evaluation per sweep value; emits a CSV and line
    plots (mean with a shaded deviation band) regenerated purely from it."""
    synth_config = synth_config or SynthConfig()
    if eval_groups is None:
        eval_groups = make_eval_groups(5, 8, synth_config, seed=9500 + spec.seed)
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for value in spec.values:
        lam = value if spec.parameter == "lambda_reg" else 1.0
        gam = value if spec.parameter == "gamma_seg" else 0.0
        row = {"value": value}
        try:
            ckpt = _train_variant(
                os.path.join(out_dir, f"{spec.parameter}_{value:g}"),
                NetConfig(), spec.iterations, gam, lam, spec.seed, synth_config,
            )
            row.update(_evaluate_checkpoint(ckpt, eval_groups, spec.seed))
            row["error"] = ""
        except Exception as e:  # record failed points, keep sweeping
            row.update({k: float("nan") for k in (
                "dice_mean", "dice_std", "folds_mean", "folds_std",
                "centrality_mean", "centrality_std")})
            row["error"] = str(e)
        rows.append(row)
    csv_path = os.path.join(out_dir, f"sweep_{spec.parameter}.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    plot_paths = plot_sweep(csv_path, out_dir)
    return csv_path, plot_paths


def plot_sweep(csv_path, out_dir):
    """Render sweep plots as PNGs; a pure function of the CSV contents so
    regeneration is bit-identical."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(csv_path, newline="") as f:
        rows = [r for r in csv.DictReader(f) if not r.get("error")]
    parameter = os.path.basename(csv_path).replace("sweep_", "").replace(".csv", "")
    values = np.array([float(r["value"]) for r in rows])
    paths = []
    for metric in ("dice", "folds", "centrality"):
        mean = np.array([float(r[f"{metric}_mean"]) for r in rows])
        std = np.array([float(r[f"{metric}_std"]) for r in rows])
        fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
        ax.plot(values, mean, marker="o")
        ax.fill_between(values, mean - std, mean + std, alpha=0.3)
        ax.set_xlabel(parameter)
        ax.set_ylabel(metric)
        fig.tight_layout()
        path = os.path.join(out_dir, f"sweep_{parameter}_{metric}.png")
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths
