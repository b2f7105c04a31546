"""AWing heatmap loss, per-landmark capacity balancing, and batch aggregation.

The per-pixel loss is logarithmic near the target and linear far from it,
with continuity constants A and C that depend on the ground-truth pixel
value y. Per-landmark losses are the pixel mean over the plane, scaled by
the inverse effective capacity of the landmark's unified id; per-sample
losses are averaged over the dataset's visible landmark count, and the
batch total is the mean over samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import heatmap as hm
from .protocol import _name_of


@dataclass(frozen=True)
class AWingParams:
    omega: float = 14.0
    theta: float = 0.5
    alpha: float = 2.1
    epsilon: float = 1.0


def _linear_coeffs(y, params):
    """Continuity constants A(y), C(y) of the linear branch."""
    w, th, al, ep = params.omega, params.theta, params.alpha, params.epsilon
    t = th / ep
    a = al - y
    A = w * (1.0 / (1.0 + t ** a)) * a * t ** (a - 1.0) / ep
    C = th * A - w * np.log1p(t ** a)
    return A, C


def awing_pixel(y, y_hat, params=AWingParams()):
    """Per-pixel AWing loss; y is ground truth in [0, 1], y_hat the prediction."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    diff = np.abs(y - y_hat)
    small = diff < params.theta
    A, C = _linear_coeffs(y, params)
    nonlinear = params.omega * np.log1p(
        (diff / params.epsilon) ** (params.alpha - y)
    )
    linear = A * diff - C
    out = np.where(small, nonlinear, linear)
    if out.ndim == 0:
        return float(out)
    return out


def awing_pixel_grad(y, y_hat, params=AWingParams()):
    """Analytic d(awing)/d(y_hat); the |y - y_hat| = theta boundary takes
    the linear branch."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    delta = y - y_hat
    diff = np.abs(delta)
    sgn = np.sign(delta)
    small = diff < params.theta
    a = params.alpha - y
    t = diff / params.epsilon
    with np.errstate(divide="ignore", invalid="ignore"):
        # d/d(diff) of omega*log(1 + t^a), times d(diff)/d(y_hat) = -sgn
        dnl = params.omega * a * t ** (a - 1.0) / (params.epsilon * (1.0 + t ** a))
    dnl = np.where(diff == 0.0, 0.0, dnl)  # a > 1 so the limit at 0 is 0
    A, _ = _linear_coeffs(y, params)
    dlin = A
    out = np.where(small, dnl, dlin) * (-sgn)
    if out.ndim == 0:
        return float(out)
    return out


def balanced_landmark_loss(pred_map, gt_map, weight, params=AWingParams()):
    """Inverse-capacity-weighted pixel mean of the AWing loss over one plane."""
    pred_map = np.asarray(pred_map, dtype=np.float64)
    gt_map = np.asarray(gt_map, dtype=np.float64)
    if pred_map.shape != gt_map.shape:
        raise ValueError(
            f"plane shape mismatch: pred {pred_map.shape} vs gt {gt_map.shape}"
        )
    return weight * float(np.mean(awing_pixel(gt_map, pred_map, params)))


@dataclass
class LossBreakdown:
    """Batch loss with per-dataset and per-unified-landmark attribution."""

    total: float
    per_dataset: dict            # dataset name -> summed per-sample losses
    per_unified_landmark: dict   # uid -> [raw_sum, weighted_sum, pixel_count]
    num_samples: int

    def recompute_total(self):
        if self.num_samples == 0:
            return 0.0
        return sum(self.per_dataset.values()) / self.num_samples


def balanced_batch_loss_from_stacks(dataset_tags, gt_stacks, pred_stacks, table,
                               weights, params=AWingParams()):
    """Aggregate the balanced loss over a batch of (gt, pred) heatmap stacks.

    Only planes present in a sample's ground-truth stack (its dataset's
    visible landmarks) contribute; the per-sample normalizer is the visible
    landmark count. Returns a LossBreakdown.
    """
    if not (len(dataset_tags) == len(gt_stacks) == len(pred_stacks)):
        raise ValueError("dataset_tags, gt_stacks, pred_stacks length mismatch")
    per_dataset = {}
    per_uid = {}
    n = len(dataset_tags)
    for ds, gt, pred in zip(dataset_tags, gt_stacks, pred_stacks):
        name = _name_of(ds)
        if name not in table.dataset_sizes:
            raise ValueError(f"sample tagged with unknown dataset {name!r}")
        if pred.planes.shape != gt.planes.shape:
            raise ValueError(
                f"prediction stack shape {pred.planes.shape} does not match "
                f"ground truth {gt.planes.shape}"
            )
        dataset_uids = set(table.forward[name])
        sample_sum = 0.0
        n_visible = 0
        for p in range(gt.num_planes):
            if not gt.present[p]:
                continue
            if p not in dataset_uids:
                raise ValueError(
                    f"present plane {p} is not in the forward image of {name}"
                )
            pixel = awing_pixel(gt.planes[p], pred.planes[p], params)
            raw = float(np.mean(pixel))
            weighted = weights.weight[p] * raw
            sample_sum += weighted
            n_visible += 1
            acc = per_uid.setdefault(p, [0.0, 0.0, 0])
            acc[0] += raw
            acc[1] += weighted
            acc[2] += pixel.size
        if n_visible > 0:
            per_dataset[name] = per_dataset.get(name, 0.0) + sample_sum / n_visible
        else:
            per_dataset.setdefault(name, 0.0)
    total = sum(per_dataset.values()) / n if n else 0.0
    return LossBreakdown(total=total, per_dataset=per_dataset,
                         per_unified_landmark=per_uid, num_samples=n)


def balanced_batch_loss(batch, pred_stacks, table, weights, params=AWingParams(),
                   kernel_sigma=1.5):
    """Balanced loss for a MixedBatch against predicted heatmap stacks.

    Ground-truth stacks are rendered at the prediction stride from each
    sample's landmarks.
    """
    gt_stacks = []
    tags = []
    for sample, pred in zip(batch.samples, pred_stacks):
        H = pred.grid_shape[0] * pred.stride
        W = pred.grid_shape[1] * pred.stride
        gt_stacks.append(
            hm.encode(sample.landmarks, table, (H, W), stride=pred.stride,
                      kernel_sigma=kernel_sigma)
        )
        tags.append(sample.dataset)
    return balanced_batch_loss_from_stacks(tags, gt_stacks, pred_stacks, table,
                                      weights, params)


def balanced_batch_loss_grad_from_stacks(dataset_tags, gt_stacks, pred_stacks,
                                    table, weights, params=AWingParams()):
    """d(total)/d(pred planes) for each sample, matching
    balanced_batch_loss_from_stacks. Returns a list of (P, h, w) arrays."""
    n = len(dataset_tags)
    grads = []
    for ds, gt, pred in zip(dataset_tags, gt_stacks, pred_stacks):
        name = _name_of(ds)
        g = np.zeros_like(pred.planes)
        n_visible = int(np.sum(gt.present))
        if n_visible > 0:
            npix = gt.planes.shape[1] * gt.planes.shape[2]
            for p in range(gt.num_planes):
                if not gt.present[p]:
                    continue
                scale = weights.weight[p] / (n * n_visible * npix)
                g[p] = scale * awing_pixel_grad(gt.planes[p], pred.planes[p],
                                                params)
        grads.append(g)
    return grads
