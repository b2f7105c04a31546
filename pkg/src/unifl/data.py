"""Annotation parsing, geometric augmentation, and mixed-batch sampling.

File conventions (all whitespace-separated UTF-8):
  pts (300W):  `version: 1`, `n_points: <k>`, `{`, k lines `x y`, `}`.
  WFLW list:   196 coords + 4 box (x0 y0 x1 y1) + 6 attrs + image path.
  COFW list:   58 coords + 29 visibility bits + image path.
  AFLW list:   38 coords + 19 visibility bits + 4 box + image path.
Images are binary PGM (P5) or PPM (P6).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .heatmap import LandmarkSet
from .protocol import _name_of

DATASET_ORDER = ("AFLW", "WFLW", "COFW", "300W")


@dataclass
class Sample:
    image: np.ndarray           # (H, W) or (H, W, 3) float32 in [0, 1]
    landmarks: LandmarkSet
    dataset: str
    source_id: str
    box: tuple = None           # (x0, y0, x1, y1) in current image coords


@dataclass
class MixedBatch:
    samples: list

    @property
    def composition(self):
        comp = {}
        for s in self.samples:
            comp[s.dataset] = comp.get(s.dataset, 0) + 1
        return comp


# ---------------------------------------------------------------------------
# PGM / PPM image IO

def write_pnm(path, array):
    """Write a uint8 array as binary PGM (2D) or PPM (H, W, 3)."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError(f"PNM output requires uint8, got {arr.dtype}")
    if arr.ndim == 2:
        header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n"
    else:
        raise ValueError(f"unsupported PNM shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(arr.tobytes())


def read_pnm(path):
    """Read a binary PGM/PPM file to a uint8 array."""
    data = Path(path).read_bytes()
    m = re.match(rb"(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    channels = 1 if magic == b"P5" else 3
    if len(data) - m.end() < h * w * channels:
        raise ValueError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(data, dtype=np.uint8, offset=m.end(),
                           count=h * w * channels)
    if channels == 1:
        return pixels.reshape(h, w).copy()
    return pixels.reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# Annotation parsers

def parse_pts(text):
    """Parse a standard pts annotation (1-based file coords -> 0-based)."""
    lines = text.splitlines()
    idx = 0
    n_points = None
    coords = []
    state = "header"
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if state == "header":
            if line.startswith("version:"):
                continue
            if line.startswith("n_points:"):
                try:
                    n_points = int(line.split(":", 1)[1])
                except ValueError:
                    raise ValueError(f"line {lineno}: bad n_points in {line!r}")
                continue
            if line == "{":
                if n_points is None:
                    raise ValueError(f"line {lineno}: '{{' before n_points")
                state = "points"
                continue
            raise ValueError(f"line {lineno}: unexpected header line {line!r}")
        if state == "points":
            if line == "}":
                state = "done"
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"line {lineno}: malformed coordinate {line!r}")
            try:
                coords.append((float(parts[0]) - 1.0, float(parts[1]) - 1.0))
            except ValueError:
                raise ValueError(f"line {lineno}: non-numeric coordinate {line!r}")
            continue
        raise ValueError(f"line {lineno}: trailing content {line!r} after '}}'")
    if state != "done":
        raise ValueError("unterminated pts file (missing '}')")
    if len(coords) != n_points:
        raise ValueError(
            f"n_points declares {n_points} but {len(coords)} coordinates found"
        )
    return LandmarkSet(coords=np.array(coords, dtype=np.float64),
                       visible=np.ones(n_points, dtype=bool),
                       dataset="300W")


def write_pts(lms):
    """Serialize a LandmarkSet in pts format (0-based -> 1-based)."""
    lines = ["version: 1", f"n_points: {len(lms)}", "{"]
    for x, y in lms.coords:
        lines.append(f"{x + 1.0:.6f} {y + 1.0:.6f}")
    lines.append("}")
    return "\n".join(lines) + "\n"


_TABULAR_SCHEMA = {
    # dataset -> (n_landmarks, n_visibility, n_box, n_attrs)
    "WFLW": (98, 0, 4, 6),
    "COFW": (29, 29, 0, 0),
    "AFLW": (19, 19, 4, 0),
}


def parse_tabular(text, ds):
    """Parse a WFLW/COFW/AFLW list file to (image path, LandmarkSet, box)."""
    name = _name_of(ds)
    if name not in _TABULAR_SCHEMA:
        raise ValueError(f"no tabular schema for dataset {name!r}")
    n_lm, n_vis, n_box, n_attr = _TABULAR_SCHEMA[name]
    expected = 2 * n_lm + n_vis + n_box + n_attr + 1
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != expected:
            raise ValueError(
                f"line {lineno}: expected {expected} fields for {name}, "
                f"got {len(parts)}"
            )
        try:
            values = [float(v) for v in parts[:-1]]
        except ValueError:
            raise ValueError(f"line {lineno}: non-numeric field")
        pos = 0
        coords = np.array(values[pos:pos + 2 * n_lm]).reshape(n_lm, 2)
        pos += 2 * n_lm
        if n_vis:
            visible = np.array(values[pos:pos + n_vis]) > 0.5
            pos += n_vis
        else:
            visible = np.ones(n_lm, dtype=bool)
        if n_box:
            box = tuple(values[pos:pos + n_box])
            pos += n_box
        else:
            box = _landmark_box(coords)
        entries.append(
            (parts[-1],
             LandmarkSet(coords=coords, visible=visible, dataset=name),
             box)
        )
    return entries


def _landmark_box(coords):
    return (float(np.min(coords[:, 0])), float(np.min(coords[:, 1])),
            float(np.max(coords[:, 0])), float(np.max(coords[:, 1])))


def format_tabular_line(lms, box, image_path):
    """Inverse of parse_tabular for one entry."""
    name = lms.dataset
    n_lm, n_vis, n_box, n_attr = _TABULAR_SCHEMA[name]
    fields = [f"{v:.4f}" for v in lms.coords.reshape(-1)]
    if n_vis:
        fields += [str(int(v)) for v in lms.visible]
    if n_box:
        fields += [f"{v:.4f}" for v in box]
    fields += ["0"] * n_attr
    fields.append(str(image_path))
    return " ".join(fields)


# ---------------------------------------------------------------------------
# Geometry: face crop and augmentation

def _apply_affine(sample, M, out_size):
    """Warp image and landmark coordinates by one 2x3 affine map."""
    image = cv2.warpAffine(
        sample.image, M, (out_size, out_size),
        flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0,
    )
    ones = np.ones((len(sample.landmarks), 1))
    pts = np.hstack([sample.landmarks.coords, ones]) @ M.T
    box = None
    if sample.box is not None:
        corners = np.array([[sample.box[0], sample.box[1], 1.0],
                            [sample.box[2], sample.box[3], 1.0]]) @ M.T
        box = (corners[0, 0], corners[0, 1], corners[1, 0], corners[1, 1])
    return Sample(
        image=np.ascontiguousarray(image, dtype=np.float32),
        landmarks=LandmarkSet(coords=pts, visible=sample.landmarks.visible.copy(),
                              dataset=sample.dataset),
        dataset=sample.dataset, source_id=sample.source_id, box=box,
    )


def crop_to_face(sample, out_size=480, margin=0.25):
    """Crop the face box expanded by `margin` and resize to out_size square."""
    x0, y0, x1, y1 = sample.box if sample.box is not None else _landmark_box(
        sample.landmarks.coords
    )
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    side = max(x1 - x0, y1 - y0) * (1.0 + margin)
    if side <= 0:
        raise ValueError("degenerate face box")
    s = out_size / side
    M = np.array([[s, 0.0, out_size / 2.0 - s * cx],
                  [0.0, s, out_size / 2.0 - s * cy]], dtype=np.float64)
    out = _apply_affine(sample, M, out_size)
    out.box = (0.0, 0.0, float(out_size), float(out_size))
    return out


def augment(sample, rng, table, scale_range=(1.0, 1.25), rotate_prob=0.6,
            max_rotate_deg=30.0, flip_prob=0.5, force=None):
    """Seeded geometric augmentation of a square, pre-cropped sample.

    Scale is always applied; rotation and horizontal flip are applied with
    their configured probabilities. `force` optionally pins the draws for
    tests: a dict with any of scale / angle / flip.
    """
    force = force or {}
    size = sample.image.shape[0]
    if sample.image.shape[1] != size:
        raise ValueError("augment expects a square, pre-cropped sample")

    scale = force.get("scale", float(rng.uniform(*scale_range)))
    if "angle" in force:
        angle = force["angle"]
    else:
        angle = 0.0
        if rng.uniform() < rotate_prob:
            angle = float(rng.uniform(-max_rotate_deg, max_rotate_deg))
    do_flip = force.get("flip", bool(rng.uniform() < flip_prob))

    center = ((size - 1) / 2.0, (size - 1) / 2.0)
    M = cv2.getRotationMatrix2D(center, angle, scale)
    out = _apply_affine(sample, M, size)
    if do_flip:
        out = flip_horizontal(out, table)
    return out


def flip_horizontal(sample, table):
    """Mirror image and coordinates; reorder landmarks by the protocol's
    flip permutation."""
    size = sample.image.shape[1]
    image = np.ascontiguousarray(sample.image[:, ::-1])
    perm = table.flip_permutation[sample.dataset]
    coords = sample.landmarks.coords.copy()
    coords[:, 0] = (size - 1) - coords[:, 0]
    coords = coords[list(perm)]
    visible = sample.landmarks.visible[list(perm)]
    box = sample.box
    if box is not None:
        box = ((size - 1) - box[2], box[1], (size - 1) - box[0], box[3])
    return Sample(
        image=image,
        landmarks=LandmarkSet(coords=coords, visible=visible,
                              dataset=sample.dataset),
        dataset=sample.dataset, source_id=sample.source_id, box=box,
    )


# ---------------------------------------------------------------------------
# Mixed-batch sampler

class MixedBatchSampler:
    """Draws a fixed quota per dataset, without replacement within an epoch.

    Each dataset has an independent RNG stream split from the root seed,
    so per-dataset shuffles never interact.
    """

    def __init__(self, datasets, seed=0, per_dataset=2):
        missing = [n for n in DATASET_ORDER if n not in datasets]
        if missing:
            raise ValueError(f"datasets not registered: {missing}")
        for name in DATASET_ORDER:
            if len(datasets[name]) == 0:
                raise ValueError(f"dataset {name} is empty")
        self.datasets = {n: list(datasets[n]) for n in DATASET_ORDER}
        self.per_dataset = per_dataset
        self._rngs = {
            name: np.random.default_rng([seed, k])
            for k, name in enumerate(DATASET_ORDER)
        }
        self._queues = {name: [] for name in DATASET_ORDER}

    def _refill(self, name):
        order = self._rngs[name].permutation(len(self.datasets[name]))
        self._queues[name] = list(order)

    def next_batch(self):
        samples = []
        for name in DATASET_ORDER:
            for _ in range(self.per_dataset):
                if not self._queues[name]:
                    self._refill(name)
                idx = self._queues[name].pop(0)
                samples.append(self.datasets[name][idx])
        return MixedBatch(samples=samples)


# ---------------------------------------------------------------------------
# Synthetic desk-scale datasets

def canonical_unified_points(num_unified=124, seed=124):
    """Fixed pseudo-face layout of the unified set in the unit square."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.12, 0.88, size=(num_unified, 2))
    return pts


def _render_sample(coords, visible, size):
    """Small bright blobs at the visible landmark positions."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size), dtype=np.float64)
    sig = max(1.0, size / 48.0)
    for (x, y), vis in zip(coords, visible):
        if not vis:
            continue
        img += np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2.0 * sig ** 2))
    img /= max(1.0, img.max())
    return img.astype(np.float32)


def make_synthetic_dataset(root, table, seed=0, per_dataset=8, image_size=96,
                           visibility_prob=0.9):
    """Write desk-scale stand-in datasets under `root` in the real formats.

    Every dataset's local coordinates are projections of one canonical
    unified layout through the protocol's forward map, so cross-dataset
    semantics are consistent. Returns the root path.
    """
    root = Path(root)
    canon = canonical_unified_points(table.num_unified)
    rng = np.random.default_rng(seed)
    for name in DATASET_ORDER:
        ds_dir = root / name
        img_dir = ds_dir / "images"
        img_dir.mkdir(parents=True, exist_ok=True)
        lines = []
        for k in range(per_dataset):
            # per-sample jitter: translate/scale the canonical layout
            s = rng.uniform(0.7, 0.95) * image_size
            off = rng.uniform(0.0, image_size - s, size=2)
            jitter = rng.normal(0.0, image_size * 0.004,
                                size=(table.num_unified, 2))
            unified_xy = canon * s + off + jitter
            fwd = table.forward[name]
            coords = unified_xy[list(fwd)]
            if name in ("AFLW", "COFW"):
                visible = rng.uniform(size=len(fwd)) < visibility_prob
                if not visible.any():
                    visible[0] = True
            else:
                visible = np.ones(len(fwd), dtype=bool)
            lms = LandmarkSet(coords=coords, visible=visible, dataset=name)
            img = _render_sample(coords, visible, image_size)
            img_path = img_dir / f"{k:03d}.pgm"
            write_pnm(img_path, np.clip(img * 255.0, 0, 255).astype(np.uint8))
            rel = img_path.relative_to(ds_dir)
            if name == "300W":
                (img_dir / f"{k:03d}.pts").write_text(write_pts(lms))
                lines.append(str(rel))
            else:
                lines.append(format_tabular_line(lms, _landmark_box(coords), rel))
        (ds_dir / "list.txt").write_text("\n".join(lines) + "\n")
    return root


def load_dataset(root, name):
    """Load one dataset written by make_synthetic_dataset (or any data in
    the same layout) into a list of Samples."""
    ds_dir = Path(root) / name
    list_text = (ds_dir / "list.txt").read_text()
    samples = []
    if name == "300W":
        for line in list_text.splitlines():
            line = line.strip()
            if not line:
                continue
            img_path = ds_dir / line
            lms = parse_pts(img_path.with_suffix(".pts").read_text())
            img = read_pnm(img_path).astype(np.float32) / 255.0
            samples.append(Sample(image=img, landmarks=lms, dataset=name,
                                  source_id=img_path.stem,
                                  box=_landmark_box(lms.coords)))
    else:
        for img_rel, lms, box in parse_tabular(list_text, name):
            img_path = ds_dir / img_rel
            img = read_pnm(img_path).astype(np.float32) / 255.0
            samples.append(Sample(image=img, landmarks=lms, dataset=name,
                                  source_id=Path(img_rel).stem, box=box))
    return samples


def load_all_datasets(root, crop_size=None):
    """Load all four datasets; optionally crop every sample to a square."""
    out = {}
    for name in DATASET_ORDER:
        samples = load_dataset(root, name)
        if crop_size is not None:
            samples = [crop_to_face(s, out_size=crop_size) for s in samples]
        out[name] = samples
    return out
