"""NME under the per-dataset normalizations and failure rate at threshold tau.

Normalizers: inter-ocular (outer eye corners) for 300W and WFLW,
inter-pupil for COFW, and face size (geometric mean of the ground-truth
box width and height) for AFLW.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NormalizationRule:
    kind: str                   # 'inter_ocular', 'inter_pupil', 'face_diag'
    anchors: tuple = None       # (i, j) local landmark indices, point rules only

    def __post_init__(self):
        if self.kind not in ("inter_ocular", "inter_pupil", "face_diag"):
            raise ValueError(f"unknown normalization kind {self.kind!r}")
        if self.kind != "face_diag" and (
            self.anchors is None or len(self.anchors) != 2
        ):
            raise ValueError(f"{self.kind} requires two anchor indices")


# Default rules in each dataset's local indexing (COFW/AFLW orders follow
# the shipped protocol file's conventions).
DEFAULT_RULES = {
    "300W": NormalizationRule("inter_ocular", (36, 45)),
    "WFLW": NormalizationRule("inter_ocular", (60, 72)),
    "COFW": NormalizationRule("inter_pupil", (12, 17)),
    "AFLW": NormalizationRule("face_diag"),
}


def normalizer(rule, gt, box=None):
    """Resolve the normalization distance d for one ground-truth set."""
    if rule.kind == "face_diag":
        if box is None:
            raise ValueError("face_diag normalization requires a face box")
        x0, y0, x1, y1 = box
        w, h = x1 - x0, y1 - y0
        if w <= 0 or h <= 0:
            raise ValueError(f"degenerate face box {box}")
        return float(np.sqrt(w * h))
    i, j = rule.anchors
    d = float(np.linalg.norm(gt.coords[i] - gt.coords[j]))
    if d <= 0:
        raise ValueError("normalization anchors coincide; d must be > 0")
    return d


def nme(gt, pred, rule, box=None):
    """Mean per-landmark Euclidean error over visible landmarks, divided
    by the normalization distance."""
    if len(gt) != len(pred):
        raise ValueError(
            f"landmark count mismatch: gt {len(gt)} vs pred {len(pred)}"
        )
    d = normalizer(rule, gt, box=box)
    vis = gt.visible
    if not np.any(vis):
        raise ValueError("no visible landmarks to evaluate")
    err = np.linalg.norm(gt.coords[vis] - pred.coords[vis], axis=1)
    return float(np.mean(err) / d)


def failure_rate(per_image_nmes, tau=0.10):
    """Fraction of images whose NME exceeds tau (strict)."""
    nmes = np.asarray(list(per_image_nmes), dtype=np.float64)
    if nmes.size == 0:
        raise ValueError("failure_rate requires a non-empty NME list")
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    return float(np.mean(nmes > tau))
