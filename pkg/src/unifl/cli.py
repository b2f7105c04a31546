"""Command-line interface.

Subcommands cover protocol validation, balance-weight export, synthetic
data generation, high-frequency image extraction, loss inspection,
training, evaluation, and a finite-difference gradient check. The UNIFL_SEED
environment variable overrides the seed for any subcommand that takes one.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .capacity import build_weight_table
from .data import (MixedBatchSampler, load_all_datasets,
                   make_synthetic_dataset, read_pnm, write_pnm)
from .frequency import extract_hf, normalize_display
from .heatmap import HeatmapStack
from .losses import balanced_batch_loss
from .network import LandmarkNet, NetConfig
from .protocol import ProtocolError, load_default_protocol, load_protocol
from .train import (TrainConfig, batch_to_tensors,
                    dump_heatmaps, evaluate, load_checkpoint, train)


def _load_table(args):
    if getattr(args, "map", None):
        return load_protocol(Path(args.map).read_text())
    return load_default_protocol()


def _seed(args):
    env = os.environ.get("UNIFL_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise SystemExit(f"UNIFL_SEED must be an integer, got {env!r}")
    return args.seed


def parse_train_config(text):
    """Line-oriented key=value training configuration; # starts a comment."""
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in fields:
            raise ValueError(f"line {lineno}: unknown option {key!r}")
        try:
            if key == "milestones":
                out[key] = tuple(float(v) for v in value.split(","))
            elif fields[key] in ("int", int):
                out[key] = int(value)
            else:
                out[key] = float(value)
        except ValueError:
            raise ValueError(f"line {lineno}: bad value {value!r} for {key}")
    return out


def _build_train_config(args):
    opts = {}
    if args.config:
        opts.update(parse_train_config(Path(args.config).read_text()))
    for key in ("iterations", "lr", "image_size", "prompt_width",
                "capacity_beta", "weight_decay", "grad_clip", "log_every"):
        val = getattr(args, key, None)
        if val is not None:
            opts[key] = val
    opts["seed"] = _seed(args) if args.seed is not None or \
        os.environ.get("UNIFL_SEED") else opts.get("seed", 0)
    return TrainConfig(**opts)


# -- subcommand handlers -------------------------------------------------------

def cmd_protocol_check(args):
    try:
        table = _load_table(args)
    except ProtocolError as e:
        print(f"invalid protocol: {e}", file=sys.stderr)
        return 1
    total = sum(table.dataset_sizes.values())
    print(f"datasets: {len(table.dataset_sizes)}")
    for name, size in table.dataset_sizes.items():
        print(f"  {name}: {size} landmarks")
    print(f"unified landmarks: {table.num_unified}")
    print(f"total local landmarks: {total}")
    print("ok")
    return 0


def cmd_weights(args):
    table = _load_table(args)
    wt = build_weight_table(table, args.beta)
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["unified_id", "count", "capacity", "weight"])
        for p in range(table.num_unified):
            w.writerow([p, table.count(p), f"{wt.capacity[p]:.12g}",
                        f"{wt.weight[p]:.12g}"])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_synth(args):
    table = _load_table(args)
    make_synthetic_dataset(Path(args.out), table, seed=_seed(args),
                           per_dataset=args.per_dataset,
                           image_size=args.image_size)
    print(f"wrote {4 * args.per_dataset} samples under {args.out}")
    return 0


def cmd_hf(args):
    img = read_pnm(args.input).astype(np.float64)
    hf = extract_hf(img, sigma=args.sigma)
    write_pnm(args.output,
              np.rint(normalize_display(hf)).astype(np.uint8))
    print(f"wrote {args.output}")
    return 0


def cmd_loss(args):
    table = _load_table(args)
    datasets = load_all_datasets(Path(args.data), crop_size=args.image_size)
    cfg = TrainConfig(seed=_seed(args), image_size=args.image_size,
                      capacity_beta=args.beta,
                      prompt_width=args.prompt_width)
    weights = build_weight_table(table, cfg.capacity_beta)
    model = LandmarkNet(NetConfig(image_size=cfg.image_size,
                                  prompt_width=cfg.prompt_width),
                        seed=cfg.seed)
    if args.checkpoint:
        load_checkpoint(args.checkpoint, model)
    model.eval()
    sampler = MixedBatchSampler(datasets, seed=cfg.seed)
    batch = sampler.next_batch()
    images, _ = batch_to_tensors(batch.samples, table, cfg)
    pred = model.run_forward(images)
    pred_stacks = [HeatmapStack(stride=cfg.stride, planes=pred[i],
                                present=np.ones(pred.shape[1], bool))
                   for i in range(pred.shape[0])]
    breakdown = balanced_batch_loss(batch, pred_stacks, table, weights)
    print(f"total,{breakdown.total:.8g}")
    for name in sorted(breakdown.per_dataset):
        print(f"{name},{breakdown.per_dataset[name]:.8g}")
    return 0


def cmd_train(args):
    table = _load_table(args)
    cfg = _build_train_config(args)
    datasets = load_all_datasets(Path(args.data), crop_size=cfg.image_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(datasets, cfg, table=table,
                   checkpoint_path=out / "checkpoint.ckpt",
                   log_path=out / "log.csv")
    print(f"final loss: {result.final_loss:.8g}")
    print(f"checkpoint: {out / 'checkpoint.ckpt'}")
    return 0


def cmd_eval(args):
    table = _load_table(args)
    cfg = TrainConfig(seed=_seed(args), image_size=args.image_size,
                      prompt_width=args.prompt_width)
    datasets = load_all_datasets(Path(args.data), crop_size=cfg.image_size)
    model = LandmarkNet(NetConfig(image_size=cfg.image_size,
                                  prompt_width=cfg.prompt_width),
                        seed=cfg.seed)
    load_checkpoint(args.checkpoint, model)
    if args.dump_dir:
        dump_dir = Path(args.dump_dir)
        dump_dir.mkdir(parents=True, exist_ok=True)
        model.eval()
        for name, samples in datasets.items():
            for i, s in enumerate(samples):
                images, _ = batch_to_tensors([s], table, cfg)
                pred = model.run_forward(images)
                path = dump_dir / f"{name}_{i:04d}.uhm"
                path.write_bytes(dump_heatmaps(pred[0]))
    stats = evaluate(model, datasets, table, cfg)
    print("dataset,nme,fr,images")
    for name in sorted(stats):
        st = stats[name]
        print(f"{name},{st['nme']:.8g},{st['fr']:.8g},{st['images']}")
    return 0


def cmd_gradcheck(args):
    import torch
    torch.set_num_threads(1)
    rng = np.random.default_rng(_seed(args))
    net = LandmarkNet(NetConfig(image_size=32, prompt_width=2), seed=0).double()
    net.eval()
    x = rng.uniform(0, 1, size=(1, 1, 32, 32))
    hf = rng.normal(scale=0.1, size=x.shape)
    out = net.run_forward(x, hf=hf, record=True)
    lw = rng.normal(size=out.shape)
    grads = net.run_backward(lw)
    params = dict(net.named_parameters())
    names = sorted(params)

    def loss_value():
        return float((net.run_forward(x, hf=hf) * lw).sum())

    worst = 0.0
    checked = 0
    while checked < args.checks:
        name = names[rng.integers(len(names))]
        flat = params[name].detach().reshape(-1)
        idx = int(rng.integers(flat.numel()))
        analytic = float(grads[name].reshape(-1)[idx])
        if abs(analytic) < 1e-4:
            continue
        # two stencil widths so a ReLU kink inside one of them does not
        # masquerade as a gradient error
        rel = float("inf")
        numeric = float("nan")
        for h in (1e-7, 1e-6):
            with torch.no_grad():
                orig = float(flat[idx])
                flat[idx] = orig + h
                fp = loss_value()
                flat[idx] = orig - h
                fm = loss_value()
                flat[idx] = orig
            cand = (fp - fm) / (2 * h)
            err = abs(cand - analytic) / max(abs(cand), abs(analytic))
            if err < rel:
                rel, numeric = err, cand
        worst = max(worst, rel)
        checked += 1
        print(f"{name}[{idx}] analytic={analytic:.6e} "
              f"numeric={numeric:.6e} rel={rel:.3e}")
    print(f"worst relative error over {checked} checks: {worst:.3e}")
    if worst >= args.tolerance:
        print("FAIL", file=sys.stderr)
        return 1
    print("ok")
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="unifl",
        description="Unified facial landmark training and evaluation tools.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(fn=fn)
        sp.add_argument("--map", help="protocol map file (default: bundled)")
        return sp

    sp = add("protocol-check", cmd_protocol_check,
             "validate a landmark protocol map")

    sp = add("weights", cmd_weights, "export per-landmark balance weights")
    sp.add_argument("--beta", type=float, default=0.9)
    sp.add_argument("-o", "--output", help="CSV path (default: stdout)")

    sp = add("synth", cmd_synth, "generate a synthetic dataset tree")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--per-dataset", type=int, default=8)
    sp.add_argument("--image-size", type=int, default=96)

    sp = add("hf", cmd_hf, "extract the high-frequency part of an image")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--sigma", type=float, default=20.0)

    sp = add("loss", cmd_loss, "balanced loss of one mixed batch")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--beta", type=float, default=0.9)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--image-size", type=int, default=64)
    sp.add_argument("--prompt-width", type=int, default=4)

    sp = add("train", cmd_train, "run the mixed-batch training loop")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", help="key=value options file")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--image-size", type=int, dest="image_size")
    sp.add_argument("--prompt-width", type=int, dest="prompt_width")
    sp.add_argument("--capacity-beta", type=float, dest="capacity_beta")
    sp.add_argument("--weight-decay", type=float, dest="weight_decay")
    sp.add_argument("--grad-clip", type=float, dest="grad_clip")
    sp.add_argument("--log-every", type=int, dest="log_every")

    sp = add("eval", cmd_eval, "evaluate a checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--image-size", type=int, dest="image_size", default=64)
    sp.add_argument("--prompt-width", type=int, dest="prompt_width", default=4)
    sp.add_argument("--dump-dir", help="write predicted heatmap dumps here")

    sp = add("gradcheck", cmd_gradcheck,
             "finite-difference check of the backward pass")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--checks", type=int, default=20)
    sp.add_argument("--tolerance", type=float, default=1e-4)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
