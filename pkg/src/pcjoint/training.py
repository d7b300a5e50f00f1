"""Training loop for the joint codec.

Each step runs the noise-quantized pipeline end to end, sums rate and the
two weighted distortions, backpropagates, clips the global gradient norm
and applies Adam under the step-decay schedule. The decoder is driven with
the ground-truth coordinate set at every scale during training (teacher
forcing), while occupancy probabilities stay fully learned; this mirrors
the transmitted per-scale counts and keeps the loss maps defined on every
candidate voxel.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .conditioning import WeightTransform, loss_weight_map, weight_transform
from .data import TrainSample, augment, fresh_quality_map, load_ply_dir, synth_dataset
from .entropy import gaussian_likelihood_t, quantize
from .errors import TrainingAbort
from .losses import attribute_loss, multiscale_geometry_loss, rate_loss, total_loss
from .model import CodecModel, ModelConfig
from .nn import AdamState, clip_grad_norm, lr_schedule
from .voxels import lookup_rows

METRICS_FIELDS = ("epoch", "step", "rate_bits", "d_geo", "d_attr", "total", "lr",
                  "grad_norm")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    base_lr: float = 1e-3
    clip_threshold: float = 1.0
    seed: int = 0
    dataset_size: int = 500
    edge: int = 32
    data: str = "synthetic"  # or a PLY directory
    out_path: str = "model.ckpt"
    metrics_path: str = ""
    checkpoint_every: int = 10
    resample_qmaps: bool = True
    augment: bool = True


def weight_transforms(cfg: ModelConfig):
    wt_g = WeightTransform(*cfg.geometry_lambda, exponent=cfg.quality_exponent)
    wt_a = WeightTransform(*cfg.attribute_lambda, exponent=cfg.quality_exponent)
    return wt_g, wt_a


def forward_training(model: CodecModel, sample: TrainSample, rng):
    """Noise-quantized forward pass; returns loss Tensors and diagnostics."""
    cfg = model.config
    cloud, qmap = sample.cloud, sample.qmap
    pyramid = model.coordinate_pyramid(cloud.coords)
    k_latent = cfg.latent_scales

    from .conditioning import quality_pyramid

    qmaps = quality_pyramid(qmap, k_latent)
    latent_coords, y = model.analysis.apply(
        cloud.coords, ad.constant(cloud.attrs), [m.values for m in qmaps]
    )
    z_coords, z = model.hyper_analysis.apply(latent_coords, y)
    z_noisy = quantize(z, "noise", rng)
    mu, sigma, trunk = model.hyper_synthesis.apply(
        z_coords, z_noisy, latent_coords, cloud.resolution
    )
    y_noisy = quantize(y, "noise", rng)
    y_lik = gaussian_likelihood_t(y_noisy, mu, sigma)
    z_liks = [
        model.prior.likelihood_t(ad.cols(z_noisy, c, c + 1), c)
        for c in range(cfg.z_channels)
    ]
    qhat = model.surrogate.apply(latent_coords, trunk, y_noisy)

    teacher_sets = [pyramid[s] for s in range(k_latent - 1, -1, -1)]
    recon_coords, recon_attrs, predictions = model.synthesis.apply(
        latent_coords, y_noisy, qhat, cloud.resolution, teacher_sets=teacher_sets
    )

    wt_g, wt_a = weight_transforms(cfg)
    weight_maps = [
        loss_weight_map(qmap, wt_g, scale, cand_coords, modality="qg")
        for scale, (cand_coords, _) in zip(range(k_latent - 1, -1, -1), predictions)
    ]
    truth_sets = [pyramid[s] for s in range(k_latent - 1, -1, -1)]
    d_geo = multiscale_geometry_loss(
        [(c, logit) for c, logit in predictions], truth_sets, weight_maps,
        gamma=cfg.focal_gamma,
    )
    attr_weights = weight_transform(qmap.qa, wt_a)
    d_attr = attribute_loss(recon_coords, recon_attrs, cloud.coords, cloud.attrs,
                            attr_weights)
    rate = rate_loss(y_lik, *z_liks)
    loss = total_loss(rate, d_attr, d_geo)

    occ_hits = 0
    occ_total = 0
    for (cand, logits), truth in zip(predictions, truth_sets):
        pred_occ = logits.data.reshape(-1) > 0
        true_occ = lookup_rows(truth, cand) >= 0
        occ_hits += int(np.sum(pred_occ == true_occ))
        occ_total += len(cand)
    diag = {
        "rate_bits": float(rate.data),
        "d_geo": float(d_geo.data),
        "d_attr": float(d_attr.data),
        "total": float(loss.data),
        "occ_accuracy": occ_hits / max(occ_total, 1),
        "qhat": qhat.data.copy(),
        "points": len(cloud),
    }
    return loss, diag


def _load_dataset(tc: TrainConfig):
    if tc.data == "synthetic":
        return synth_dataset(tc.dataset_size, tc.edge, tc.seed)
    return load_ply_dir(tc.data)


def train(tc: TrainConfig, model: CodecModel = None, resume_optimizer=None,
          start_epoch=0, log=None):
    """Run the training loop; returns (model, metrics rows).

    Checkpoints are written to ``tc.out_path`` at the end and every
    ``checkpoint_every`` epochs; a non-finite loss aborts with the last
    checkpoint retained on disk.
    """
    if model is None:
        model = CodecModel(ModelConfig(), seed=tc.seed)
    dataset = _load_dataset(tc)
    params = model.parameters()
    opt = AdamState(params, learning_rate=tc.base_lr, clip_threshold=tc.clip_threshold)
    if resume_optimizer is not None:
        opt.load_state(resume_optimizer)

    metrics_path = tc.metrics_path or (os.path.splitext(tc.out_path)[0] + "_metrics.csv")
    rows = []
    t_start = time.time()
    write_header = not (start_epoch and os.path.exists(metrics_path))
    metrics_file = open(metrics_path, "a" if start_epoch else "w", newline="")
    writer = csv.DictWriter(metrics_file, fieldnames=METRICS_FIELDS)
    if write_header:
        writer.writeheader()

    try:
        for epoch in range(start_epoch, tc.epochs):
            lr = lr_schedule(epoch, tc.base_lr)
            opt.learning_rate = lr
            order_rng = np.random.default_rng([tc.seed, epoch, 0xC0FFEE])
            order = order_rng.permutation(len(dataset))
            epoch_losses = []
            for step, batch_start in enumerate(range(0, len(order), tc.batch_size)):
                batch = order[batch_start : batch_start + tc.batch_size]
                model.store.zero_grad()
                batch_diag = {"rate_bits": 0.0, "d_geo": 0.0, "d_attr": 0.0,
                              "total": 0.0}
                for j, sample_idx in enumerate(batch):
                    rng = np.random.default_rng([tc.seed, epoch, step, j])
                    sample = dataset[sample_idx]
                    if tc.resample_qmaps:
                        sample = TrainSample(
                            sample.cloud,
                            fresh_quality_map(sample.cloud.coords, rng),
                            sample.seed,
                        )
                    if tc.augment:
                        sample = augment(sample, rng)
                    loss, diag = forward_training(model, sample, rng)
                    if not np.isfinite(loss.data):
                        _abort(model, tc, opt, epoch, diag)
                    scaled = loss * (1.0 / len(batch))
                    scaled.backward()
                    for key in batch_diag:
                        batch_diag[key] += diag[key] / len(batch)
                grad_norm_factor = clip_grad_norm(params, tc.clip_threshold)
                opt.step(params)
                row = {
                    "epoch": epoch,
                    "step": step,
                    "rate_bits": round(batch_diag["rate_bits"], 4),
                    "d_geo": round(batch_diag["d_geo"], 4),
                    "d_attr": round(batch_diag["d_attr"], 4),
                    "total": round(batch_diag["total"], 4),
                    "lr": lr,
                    "grad_norm": round(grad_norm_factor, 6),
                }
                writer.writerow(row)
                rows.append(row)
                epoch_losses.append(batch_diag["total"])
            if log:
                log(f"epoch {epoch}: mean loss {np.mean(epoch_losses):.2f} lr {lr:g}")
            if tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0:
                model.save(tc.out_path, optimizer_arrays=opt.state_arrays(),
                           meta={"epoch": epoch + 1, "seed": tc.seed})
    finally:
        metrics_file.close()
    model.save(
        tc.out_path,
        optimizer_arrays=opt.state_arrays(),
        meta={
            "epoch": tc.epochs,
            "seed": tc.seed,
            "train_seconds": round(time.time() - t_start, 1),
        },
    )
    return model, rows


def _abort(model, tc, opt, epoch, diag):
    if not os.path.exists(tc.out_path):
        model.save(tc.out_path, optimizer_arrays=opt.state_arrays(),
                   meta={"epoch": epoch, "aborted": True})
    raise TrainingAbort(
        f"non-finite loss at epoch {epoch}: rate={diag['rate_bits']}, "
        f"d_geo={diag['d_geo']}, d_attr={diag['d_attr']}"
    )
