"""Gaussian heatmap rendering and argmax decoding.

Coordinates live in input-image pixels; heatmap cell (r, c) corresponds to
input position (c * stride, r * stride). Encoding renders a peak-normalized
Gaussian per visible landmark into the plane selected by the protocol's
forward map; decoding takes the argmax cell plus a quarter-cell shift toward
the larger immediate neighbor on each axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .protocol import _name_of


@dataclass
class LandmarkSet:
    """Per-dataset landmark coordinates in input-image pixels."""

    coords: np.ndarray          # (N, 2) float, (x, y)
    visible: np.ndarray         # (N,) bool
    dataset: str

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.visible is None:
            self.visible = np.ones(len(self.coords), dtype=bool)
        self.visible = np.asarray(self.visible, dtype=bool)
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ValueError(f"coords must be (N, 2), got {self.coords.shape}")
        if len(self.visible) != len(self.coords):
            raise ValueError("visible mask length must match coords")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("landmark coordinates must be finite")
        self.dataset = _name_of(self.dataset)

    def __len__(self):
        return len(self.coords)


@dataclass
class HeatmapStack:
    """One plane per unified landmark at a fixed stride."""

    stride: int
    planes: np.ndarray          # (num_planes, h, w)
    present: np.ndarray         # (num_planes,) bool
    clipped: np.ndarray = None  # (num_planes,) bool, peak fell outside grid

    def __post_init__(self):
        self.planes = np.asarray(self.planes, dtype=np.float64)
        self.present = np.asarray(self.present, dtype=bool)
        if self.clipped is None:
            self.clipped = np.zeros(len(self.present), dtype=bool)
        if self.planes.ndim != 3:
            raise ValueError(f"planes must be (P, h, w), got {self.planes.shape}")
        if len(self.present) != self.planes.shape[0]:
            raise ValueError("present mask must match plane count")

    @property
    def num_planes(self):
        return self.planes.shape[0]

    @property
    def grid_shape(self):
        return self.planes.shape[1:]


def encode(lms, table, image_hw, stride=4, kernel_sigma=1.5):
    """Render a HeatmapStack from a LandmarkSet.

    Each visible landmark renders a Gaussian centered at its continuous
    heatmap position, rescaled so the peak cell is exactly 1. Landmarks
    whose peak cell falls outside the grid are rendered clipped (plane max
    below 1) and flagged.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if kernel_sigma <= 0:
        raise ValueError(f"kernel_sigma must be > 0, got {kernel_sigma}")
    H, W = image_hw
    h, w = H // stride, W // stride
    planes = np.zeros((table.num_unified, h, w), dtype=np.float64)
    present = np.zeros(table.num_unified, dtype=bool)
    clipped = np.zeros(table.num_unified, dtype=bool)
    cols = np.arange(w, dtype=np.float64)
    rows = np.arange(h, dtype=np.float64)
    for local in range(len(lms)):
        if not lms.visible[local]:
            continue
        p = table.map_forward(lms.dataset, local)
        cx = lms.coords[local, 0] / stride
        cy = lms.coords[local, 1] / stride
        gx = np.exp(-((cols - cx) ** 2) / (2.0 * kernel_sigma ** 2))
        gy = np.exp(-((rows - cy) ** 2) / (2.0 * kernel_sigma ** 2))
        plane = np.outer(gy, gx)
        peak_r, peak_c = int(round(cy)), int(round(cx))
        if 0 <= peak_r < h and 0 <= peak_c < w:
            planes[p] = plane / plane[peak_r, peak_c]
        else:
            # Peak off-grid: keep the clipped tail, normalized against the
            # true (off-grid) peak value of 1.
            planes[p] = plane
            clipped[p] = True
        present[p] = True
    return HeatmapStack(stride=stride, planes=planes, present=present,
                        clipped=clipped)


def _refine_axis(plane, r, c, axis):
    """Quarter-cell shift toward the larger immediate neighbor."""
    h, w = plane.shape
    if axis == 0:
        lo = plane[r - 1, c] if r > 0 else -np.inf
        hi = plane[r + 1, c] if r < h - 1 else -np.inf
    else:
        lo = plane[r, c - 1] if c > 0 else -np.inf
        hi = plane[r, c + 1] if c < w - 1 else -np.inf
    if hi > lo:
        return 0.25
    if lo > hi:
        return -0.25
    return 0.0


def decode(stack):
    """Decode a HeatmapStack back to unified-landmark coordinates.

    Returns (coords, present, low_confidence): coords is (P, 2) in input
    pixels; all-zero planes decode to the grid center and are flagged.
    Ties at the argmax break toward the lower row, then lower column.
    """
    if not np.any(stack.present):
        raise ValueError("decode requires at least one present plane")
    P = stack.num_planes
    h, w = stack.grid_shape
    coords = np.zeros((P, 2), dtype=np.float64)
    low_confidence = np.zeros(P, dtype=bool)
    for p in range(P):
        if not stack.present[p]:
            continue
        plane = stack.planes[p]
        if not np.any(plane > 0):
            coords[p] = ((w - 1) / 2.0 * stack.stride,
                         (h - 1) / 2.0 * stack.stride)
            low_confidence[p] = True
            continue
        flat = int(np.argmax(plane))  # first occurrence = lowest row, column
        r, c = divmod(flat, w)
        x = c + _refine_axis(plane, r, c, axis=1)
        y = r + _refine_axis(plane, r, c, axis=0)
        coords[p] = (x * stack.stride, y * stack.stride)
    return coords, stack.present.copy(), low_confidence
