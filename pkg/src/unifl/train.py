"""Training loop, Adam optimizer, learning-rate schedule, and binary
checkpoint / heatmap-dump formats.

Everything is seeded and single threaded, so two runs with the same seed
produce byte-identical checkpoints. The optimizer keeps its own first and
second moment estimates per parameter; the learning rate decays by a fixed
factor at fractional milestones of the iteration budget.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .capacity import build_weight_table
from .data import MixedBatchSampler
from .heatmap import HeatmapStack, LandmarkSet, decode, encode
from .losses import (AWingParams, balanced_batch_loss_from_stacks,
                     balanced_batch_loss_grad_from_stacks)
from .metrics import DEFAULT_RULES, failure_rate, nme
from .network import LandmarkNet, NetConfig
from .protocol import load_default_protocol


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    iterations: int = 200
    lr: float = 2.5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    milestones: tuple = (0.4, 0.7, 0.9)
    lr_decay: float = 0.8
    capacity_beta: float = 0.9
    image_size: int = 64
    stride: int = 4
    kernel_sigma: float = 1.5
    prompt_width: int = 4
    hf_sigma: float = 20.0
    weight_decay: float = 0.0
    grad_clip: float = 0.0       # max global gradient norm; 0 disables
    log_every: int = 10

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if any(not 0 < m < 1 for m in self.milestones):
            raise ValueError("milestones must be fractions in (0, 1)")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ValueError("weight_decay and grad_clip must be >= 0")


def scheduled_lr(config, iteration):
    """Learning rate at a given iteration (0-based): the base rate decays
    by lr_decay at each fractional milestone of the budget."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    passed = sum(
        iteration >= int(m * config.iterations) for m in config.milestones
    )
    return config.lr * config.lr_decay ** passed


class AdamOptimizer:
    """Adam with bias correction over a dict of named numpy arrays."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads, lr):
        """Update params in place from grads; both are name -> array."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name in sorted(params):
            g = np.asarray(grads[name], dtype=np.float32)
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            params[name] -= update.astype(params[name].dtype)

    def state_arrays(self):
        out = {"adam/step": np.array([self.step_count], dtype=np.float32)}
        for name in sorted(self.m):
            out[f"adam/m/{name}"] = self.m[name]
            out[f"adam/v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays):
        self.step_count = int(arrays["adam/step"][0])
        self.m = {}
        self.v = {}
        for key, arr in arrays.items():
            if key.startswith("adam/m/"):
                self.m[key[len("adam/m/"):]] = np.array(arr, dtype=np.float32)
            elif key.startswith("adam/v/"):
                self.v[key[len("adam/v/"):]] = np.array(arr, dtype=np.float32)


def clip_gradients(grads, max_norm):
    """Scale the gradient dict in place so its global L2 norm is at most
    max_norm; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(np.square(g.astype(np.float64))))
                              for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = np.float32(max_norm / total)
        for g in grads.values():
            g *= scale
    return total


class TrainDiverged(RuntimeError):
    """Raised when the loss becomes non-finite; records the iteration."""

    def __init__(self, iteration, value):
        super().__init__(
            f"non-finite loss {value!r} at iteration {iteration}; aborting"
        )
        self.iteration = iteration


# -- binary containers --------------------------------------------------------

_CKPT_MAGIC = b"UFLC"
_CKPT_VERSION = 1
_HMAP_MAGIC = b"UHMP"


def dump_arrays(arrays):
    """Serialize name -> array to the versioned checkpoint container.
    Tensors are stored sorted by name as little-endian float32."""
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<II", _CKPT_VERSION, len(arrays)))
    for name in sorted(arrays):
        # order="C" keeps 0-dim arrays 0-dim; ascontiguousarray would not
        arr = np.asarray(arrays[name], dtype="<f4", order="C")
        enc = name.encode("utf-8")
        buf.write(struct.pack("<I", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def parse_arrays(blob):
    buf = io.BytesIO(blob)
    if buf.read(4) != _CKPT_MAGIC:
        raise ValueError("not a checkpoint container (bad magic)")
    version, count = struct.unpack("<II", buf.read(8))
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", buf.read(4))
        name = buf.read(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", buf.read(4))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = buf.read(4 * n)
        if len(data) != 4 * n:
            raise ValueError(f"truncated tensor data for {name!r}")
        out[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    if buf.read(1):
        raise ValueError("trailing bytes after last tensor")
    return out


def save_checkpoint(path, model, optimizer, iteration):
    arrays = {"meta/iteration": np.array([iteration], dtype=np.float32)}
    arrays.update(model.state_arrays())
    arrays.update(optimizer.state_arrays())
    with open(path, "wb") as f:
        f.write(dump_arrays(arrays))


def load_checkpoint(path, model, optimizer=None):
    """Restore model (and optionally optimizer) state; returns iteration."""
    with open(path, "rb") as f:
        arrays = parse_arrays(f.read())
    iteration = int(arrays.pop("meta/iteration")[0])
    adam_keys = {k for k in arrays if k.startswith("adam/")}
    if optimizer is not None:
        optimizer.load_state_arrays({k: arrays[k] for k in adam_keys})
    model.load_state_arrays({k: v for k, v in arrays.items()
                             if k not in adam_keys})
    return iteration


def dump_heatmaps(planes):
    """Serialize a (P, H, W) heatmap array: 16-byte header (magic, plane
    count, height, width) followed by little-endian float32 planes."""
    arr = np.ascontiguousarray(planes, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError(f"expected (P, H, W) planes, got shape {arr.shape}")
    header = _HMAP_MAGIC + struct.pack("<III", *arr.shape)
    return header + arr.tobytes()


def parse_heatmaps(blob):
    if blob[:4] != _HMAP_MAGIC:
        raise ValueError("not a heatmap dump (bad magic)")
    p, h, w = struct.unpack("<III", blob[4:16])
    data = blob[16:]
    if len(data) != 4 * p * h * w:
        raise ValueError("heatmap dump size does not match header")
    return np.frombuffer(data, dtype="<f4").reshape(p, h, w).copy()


# -- training -----------------------------------------------------------------

@dataclass
class TrainLogRecord:
    iteration: int
    lr: float
    loss: float
    per_dataset: dict


def write_log_csv(path, records):
    names = sorted({k for r in records for k in r.per_dataset})
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "lr", "loss"] + [f"loss_{n}" for n in names])
        for r in records:
            w.writerow([r.iteration, f"{r.lr:.8g}", f"{r.loss:.8g}"]
                       + [f"{r.per_dataset.get(n, 0.0):.8g}" for n in names])


@dataclass
class TrainResult:
    model: LandmarkNet
    optimizer: AdamOptimizer
    records: list
    final_loss: float


def batch_to_tensors(samples, table, config):
    """Images as (B, 1, S, S) float32 plus per-sample ground-truth stacks."""
    images = []
    gt_stacks = []
    size = config.image_size
    for s in samples:
        img = s.image
        if img.ndim == 3:
            img = img.mean(axis=2)
        if img.shape != (size, size):
            raise ValueError(
                f"sample image shape {img.shape} does not match the "
                f"configured size {size}"
            )
        images.append(img[None].astype(np.float32))
        gt_stacks.append(encode(s.landmarks, table, (size, size),
                                stride=config.stride,
                                kernel_sigma=config.kernel_sigma))
    return np.stack(images), gt_stacks


def train(datasets, config=TrainConfig(), table=None, params=AWingParams(),
          checkpoint_path=None, log_path=None):
    """Run the mixed-batch training loop over pre-cropped samples.

    datasets maps dataset name to a list of Sample objects whose images are
    already config.image_size squares.
    """
    torch.set_num_threads(1)
    if table is None:
        table = load_default_protocol()
    weights = build_weight_table(table, config.capacity_beta)
    net_cfg = NetConfig(image_size=config.image_size,
                        prompt_width=config.prompt_width,
                        hf_sigma=config.hf_sigma)
    model = LandmarkNet(net_cfg, seed=config.seed)
    model.train()
    optimizer = AdamOptimizer(config.adam_beta1, config.adam_beta2,
                              config.adam_eps)
    sampler = MixedBatchSampler(datasets, seed=config.seed)
    torch_params = dict(model.named_parameters())

    records = []
    last_loss = float("nan")
    for it in range(config.iterations):
        batch = sampler.next_batch()
        images, gt_stacks = batch_to_tensors(batch.samples, table, config)
        pred = model.run_forward(images, record=True)
        pred_stacks = [
            HeatmapStack(stride=config.stride, planes=pred[i],
                         present=np.ones(pred.shape[1], bool))
            for i in range(pred.shape[0])
        ]
        tags = [s.dataset for s in batch.samples]
        loss = balanced_batch_loss_from_stacks(tags, gt_stacks, pred_stacks,
                                          table, weights, params)
        if not np.isfinite(loss.total):
            raise TrainDiverged(it, loss.total)
        loss_grads = balanced_batch_loss_grad_from_stacks(
            tags, gt_stacks, pred_stacks, table, weights, params)
        grads = model.run_backward(np.stack(loss_grads))
        if config.weight_decay > 0:
            for name, p in torch_params.items():
                grads[name] = grads[name] + \
                    np.float32(config.weight_decay) * p.detach().numpy()
        if config.grad_clip > 0:
            clip_gradients(grads, config.grad_clip)

        lr = scheduled_lr(config, it)
        # detach().numpy() shares storage with the torch parameters, so the
        # in-place Adam update writes straight into the model
        np_params = {n: p.detach().numpy() for n, p in torch_params.items()}
        optimizer.step(np_params, grads, lr)

        last_loss = loss.total
        if it % config.log_every == 0 or it == config.iterations - 1:
            records.append(TrainLogRecord(iteration=it, lr=lr,
                                          loss=loss.total,
                                          per_dataset=dict(loss.per_dataset)))

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, optimizer, config.iterations)
    if log_path is not None:
        write_log_csv(log_path, records)
    return TrainResult(model=model, optimizer=optimizer, records=records,
                       final_loss=last_loss)


def evaluate(model, datasets, table, config):
    """Per-dataset mean normalized error and failure rate on decoded peaks."""
    model.eval()
    results = {}
    for name, samples in datasets.items():
        per_image = []
        for s in samples:
            images, _ = batch_to_tensors([s], table, config)
            pred = model.run_forward(images)
            stack = HeatmapStack(stride=config.stride, planes=pred[0],
                                 present=np.ones(pred.shape[1], bool))
            coords, _, _ = decode(stack)
            local = np.array([
                coords[table.map_forward(name, j)]
                for j in range(table.dataset_sizes[name])
            ])
            pred_lms = LandmarkSet(coords=local,
                                   visible=s.landmarks.visible.copy(),
                                   dataset=name)
            per_image.append(nme(s.landmarks, pred_lms, DEFAULT_RULES[name],
                                 box=s.box))
        results[name] = {
            "nme": float(np.mean(per_image)),
            "fr": failure_rate(per_image),
            "images": len(per_image),
        }
    return results
