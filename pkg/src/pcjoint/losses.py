"""Rate and distortion objectives.

Geometry distortion is a focal loss over the per-scale candidate sets,
attribute distortion a weighted squared error on the geometry
intersection, and the rate term the cross entropy of the noise-quantized
latents under the learned likelihood models. The total objective is their
plain sum; all locality weighting lives inside the distortion terms.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .voxels import lookup_rows

PROB_EPS = 1e-6


def focal_geometry_loss(occupancy_logits, candidate_coords, truth_coords, weights,
                        gamma=2.0):
    """Weighted focal loss for one scale of occupancy classification.

    ``occupancy_logits`` is a Tensor (N,) or (N, 1) over the candidate
    set; truth membership flips the probability for unoccupied voxels.
    Natural log; gamma = 0 reduces to weighted binary cross entropy.
    """
    logits = occupancy_logits
    if logits.data.ndim == 2:
        logits = ad.reshape(logits, (-1,))
    if len(candidate_coords) != logits.data.shape[0]:
        raise ContractError("logit count differs from the candidate set")
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(weights) != len(candidate_coords):
        raise ContractError("weight map does not cover the candidate set")
    occupied = (lookup_rows(truth_coords, candidate_coords) >= 0).astype(np.float64)
    p = ad.sigmoid(logits)
    # p if occupied else 1 - p, in one affine step
    p_correct = ad.constant(1.0 - occupied) + p * ad.constant(2.0 * occupied - 1.0)
    p_correct = ad.clamp(p_correct, PROB_EPS, 1.0 - PROB_EPS)
    focal = ad.power(1.0 - p_correct, gamma) if gamma != 0.0 else ad.constant(
        np.ones_like(occupied)
    )
    terms = ad.constant(weights) * focal * ad.log(p_correct)
    return -ad.sum_(terms)


def multiscale_geometry_loss(scale_predictions, truth_pyramid, weight_maps, gamma=2.0):
    """Sum of per-scale focal terms, finest scale first."""
    total = ad.constant(0.0)
    for (coords, logits), truth, weights in zip(scale_predictions, truth_pyramid,
                                                weight_maps):
        total = total + focal_geometry_loss(logits, coords, truth, weights, gamma)
    return total


def attribute_loss(recon_coords, recon_attrs, truth_coords, truth_attrs, weights):
    """Weighted squared error over the coordinate intersection.

    ``recon_attrs`` may be a Tensor; weights live on the truth geometry.
    Points present on only one side contribute nothing.
    """
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(weights) != len(truth_coords):
        raise ContractError("weight map does not cover the truth geometry")
    idx_in_truth = lookup_rows(truth_coords, recon_coords)
    recon_rows = np.nonzero(idx_in_truth >= 0)[0]
    if len(recon_rows) == 0:
        return ad.constant(0.0)
    truth_rows = idx_in_truth[recon_rows]
    recon = recon_attrs if isinstance(recon_attrs, ad.Tensor) else ad.constant(recon_attrs)
    diff = ad.gather_rows(recon, recon_rows, unique=True) - ad.constant(
        np.asarray(truth_attrs, dtype=np.float64)[truth_rows]
    )
    per_point = ad.sum_(diff * diff, axis=1)
    return ad.sum_(ad.constant(weights[truth_rows]) * per_point)


def rate_loss(*likelihood_tensors):
    """Total rate in bits: -sum log2 of every supplied likelihood tensor."""
    total = ad.constant(0.0)
    inv_ln2 = 1.0 / np.log(2.0)
    for lk in likelihood_tensors:
        if lk is None:
            continue
        lk = ad.as_tensor(lk)
        total = total - ad.sum_(ad.log(lk)) * inv_ln2
    return total


def total_loss(rate, d_attr, d_geo):
    """Plain sum of the three components (weights live inside them)."""
    out = ad.as_tensor(rate) + ad.as_tensor(d_attr) + ad.as_tensor(d_geo)
    return out
