"""Acceptance suite: one test per shipped guarantee, each printing a
single PASS/FAIL line (run with -s or -v to see them)."""

import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from unifl.capacity import build_weight_table, effective_capacity
from unifl.data import (DATASET_ORDER, MixedBatchSampler, Sample,
                        load_all_datasets, make_synthetic_dataset)
from unifl.frequency import build_mask, extract_hf, fft2, ifft2
from unifl.heatmap import LandmarkSet, decode, encode
from unifl.losses import (AWingParams, awing_pixel, awing_pixel_grad,
                          balanced_batch_loss)
from unifl.metrics import DEFAULT_RULES, NormalizationRule, failure_rate, nme
from unifl.network import LandmarkNet, NetConfig
from unifl.protocol import load_default_protocol
from unifl.train import TrainConfig, scheduled_lr, train

torch.set_num_threads(1)


@contextmanager
def criterion(n, desc):
    try:
        yield
    except Exception:
        print(f"\nFAIL criterion {n:2d}: {desc}")
        raise
    print(f"\nPASS criterion {n:2d}: {desc}")


@pytest.fixture(scope="module")
def table():
    return load_default_protocol()


@pytest.fixture(scope="module")
def synth16(tmp_path_factory, table):
    root = tmp_path_factory.mktemp("accept_synth")
    make_synthetic_dataset(root, table, seed=3, per_dataset=4, image_size=64)
    return load_all_datasets(root)


def test_01_protocol_aggregates(table):
    with criterion(1, "default protocol has 124 unified ids covering 214 "
                      "local landmarks"):
        assert table.num_unified == 124
        assert sum(table.count(p) for p in range(124)) == 214
        assert tuple(sorted(table.dataset_sizes.values())) == (19, 29, 68, 98)


def test_02_capacity_oracle():
    with criterion(2, "effective capacity matches the geometric-series "
                      "oracle and recurrence"):
        worst = 0.0
        betas = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.999]
        for beta in betas:
            for n in range(1, 9):
                oracle = sum(beta ** k for k in range(n))
                worst = max(worst, abs(effective_capacity(beta, n) - oracle))
        assert worst < 1e-12
        for beta in betas:
            for n in range(2, 9):
                assert effective_capacity(beta, n) == \
                    1.0 + beta * effective_capacity(beta, n - 1)


def test_03_beta_endpoints(table):
    with criterion(3, "beta endpoints: beta=0 gives unit weights; near 1 "
                      "the capacity approaches the count"):
        wt = build_weight_table(table, 0.0)
        assert np.all(wt.weight == 1.0)
        for n in range(1, 5):
            assert abs(effective_capacity(0.999999, n) - n) < 1e-4


def test_04_awing_continuity_and_gradient():
    with criterion(4, "AWing branches meet at the threshold and the "
                      "analytic gradient matches finite differences"):
        params = AWingParams()
        for y in [0.0, 0.25, 0.5, 0.75, 1.0]:
            below = awing_pixel(y, y - params.theta + 1e-12, params)
            above = awing_pixel(y, y - params.theta - 1e-12, params)
            assert abs(below - above) < 1e-9
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(100):
            y = rng.uniform(0, 1)
            y_hat = rng.uniform(-1, 2)
            if abs(abs(y - y_hat) - params.theta) < 1e-3:
                y_hat += 5e-3  # keep the stencil off the kink
            h = 1e-7
            num = (awing_pixel(y, y_hat + h, params)
                   - awing_pixel(y, y_hat - h, params)) / (2 * h)
            ana = awing_pixel_grad(y, y_hat, params)
            rel = abs(num - ana) / max(abs(num), abs(ana), 1e-12)
            worst = max(worst, rel)
        assert worst < 1e-5


def _contribution_ratio(breakdown, table):
    c4 = sum(v[1] for uid, v in breakdown.per_unified_landmark.items()
             if table.count(uid) == 4)
    c1 = sum(v[1] for uid, v in breakdown.per_unified_landmark.items()
             if table.count(uid) == 1)
    return c4 / c1


def test_05_reweighting_monotone(table):
    with criterion(5, "count-4 / count-1 loss contribution ratio is "
                      "non-increasing in beta"):
        rng = np.random.default_rng(5)

        class FakeBatch:
            samples = []

        for name in DATASET_ORDER:
            n = table.dataset_sizes[name]
            coords = rng.uniform(8, 56, size=(n, 2))
            lms = LandmarkSet(coords=coords, visible=np.ones(n, bool),
                              dataset=name)
            FakeBatch.samples.append(
                Sample(image=np.zeros((64, 64), np.float32), landmarks=lms,
                       dataset=name, source_id=name, box=(0, 0, 64, 64)))
        preds = []
        for s in FakeBatch.samples:
            planes = rng.uniform(0, 1, size=(124, 16, 16))
            from unifl.heatmap import HeatmapStack
            preds.append(HeatmapStack(stride=4, planes=planes,
                                      present=np.ones(124, bool)))
        ratios = []
        for beta in [0.0, 0.3, 0.6, 0.9, 0.999]:
            wt = build_weight_table(table, beta)
            bd = balanced_batch_loss(FakeBatch, preds, table, wt)
            ratios.append(_contribution_ratio(bd, table))
        assert all(b <= a + 1e-12 for a, b in zip(ratios, ratios[1:]))


def test_06_frequency_core():
    with criterion(6, "spectral round-trip, direct DFT agreement, mask "
                      "anchor values, and constant-image suppression"):
        rng = np.random.default_rng(6)
        img = rng.uniform(0, 255, size=(64, 64))
        assert np.max(np.abs(ifft2(fft2(img)).real - img)) < 1e-9
        small = rng.uniform(0, 1, size=(8, 8))
        H, W = small.shape
        direct = np.zeros((H, W), complex)
        for u in range(H):
            for v in range(W):
                for r in range(H):
                    for c in range(W):
                        direct[u, v] += small[r, c] * np.exp(
                            -2j * np.pi * (u * r / H + v * c / W))
        direct = np.fft.fftshift(direct)
        assert np.max(np.abs(fft2(small) - direct)) < 1e-9
        mask = build_mask(64, 64, sigma=20.0)
        assert mask[32, 32] == 0.0
        assert abs(mask[32, 32 + 20] - (1 - np.exp(-0.5))) < 1e-12
        assert np.max(np.abs(extract_hf(np.full((32, 32), 7.0)))) < 1e-9


def test_07_heatmap_roundtrip(table):
    with criterion(7, "heatmap encode/decode error within three quarters "
                      "of a stride; decoding ignores positive scaling"):
        rng = np.random.default_rng(7)
        stride = 4
        worst = 0.0
        names = list(DATASET_ORDER)
        for i in range(1000):
            name = names[i % 4]
            n = table.dataset_sizes[name]
            coords = rng.uniform(6, 58, size=(n, 2))
            lms = LandmarkSet(coords=coords, visible=np.ones(n, bool),
                              dataset=name)
            stack = encode(lms, table, (64, 64), stride=stride)
            decoded, _, _ = decode(stack)
            for j in range(n):
                p = table.map_forward(name, j)
                worst = max(worst, float(np.max(np.abs(decoded[p]
                                                       - coords[j]))))
        assert worst <= 0.75 * stride
        from unifl.heatmap import HeatmapStack
        a, _, _ = decode(stack)
        b, _, _ = decode(HeatmapStack(stride=stride,
                                      planes=stack.planes * 1234.5,
                                      present=stack.present))
        assert np.array_equal(a, b)


def test_08_metrics_exact():
    with criterion(8, "hand-checked NME and failure-rate values, and "
                      "scale-invariant normalization"):
        rule = NormalizationRule("inter_ocular", (0, 1))

        def lset(c):
            return LandmarkSet(coords=np.asarray(c, float),
                               visible=np.ones(len(c), bool), dataset="300W")

        assert nme(lset([[0, 0], [10, 0]]),
                   lset([[3, 0], [10, 4]]), rule) == 0.35
        assert failure_rate([0.05, 0.12, 0.20], tau=0.10) == 2 / 3
        rng = np.random.default_rng(8)
        gt = rng.uniform(0, 100, size=(29, 2))
        pr = gt + rng.normal(0, 2, size=(29, 2))
        base = nme(LandmarkSet(gt, np.ones(29, bool), "COFW"),
                   LandmarkSet(pr, np.ones(29, bool), "COFW"),
                   DEFAULT_RULES["COFW"])
        scaled = nme(LandmarkSet(gt * 7.5, np.ones(29, bool), "COFW"),
                     LandmarkSet(pr * 7.5, np.ones(29, bool), "COFW"),
                     DEFAULT_RULES["COFW"])
        assert abs(base - scaled) < 1e-12


def test_09_sampler(synth16):
    with criterion(9, "every mixed batch draws two samples per dataset and "
                      "a fixed seed reproduces the sequence"):
        sampler = MixedBatchSampler(synth16, seed=9)
        for _ in range(1000):
            batch = sampler.next_batch()
            assert batch.composition == {n: 2 for n in DATASET_ORDER}
        a = MixedBatchSampler(synth16, seed=11)
        b = MixedBatchSampler(synth16, seed=11)
        seq_a = [s.source_id for _ in range(100)
                 for s in a.next_batch().samples]
        seq_b = [s.source_id for _ in range(100)
                 for s in b.next_batch().samples]
        assert seq_a == seq_b


def test_10_network_gradcheck():
    with criterion(10, "backward pass matches central differences on 20 "
                       "sampled parameters in double precision"):
        t0 = time.time()
        net = LandmarkNet(NetConfig(image_size=64, prompt_width=2),
                       seed=0).double()
        net.eval()
        rng = np.random.default_rng(10)
        x = rng.uniform(0, 1, size=(1, 1, 64, 64))
        hf = rng.normal(scale=0.1, size=x.shape)
        out = net.run_forward(x, hf=hf, record=True)
        lw = rng.normal(size=out.shape)
        grads = net.run_backward(lw)
        params = dict(net.named_parameters())
        names = sorted(params)
        worst = 0.0
        checked = 0
        while checked < 20:
            name = names[rng.integers(len(names))]
            flat = params[name].detach().reshape(-1)
            idx = int(rng.integers(flat.numel()))
            ana = float(grads[name].reshape(-1)[idx])
            if abs(ana) < 1e-4:
                continue  # dominated by finite-difference roundoff
            # two stencil widths so a ReLU kink inside one of them does not
            # masquerade as a gradient error
            best = np.inf
            for h in (1e-7, 1e-6):
                with torch.no_grad():
                    orig = float(flat[idx])
                    flat[idx] = orig + h
                    fp = float((net.run_forward(x, hf=hf) * lw).sum())
                    flat[idx] = orig - h
                    fm = float((net.run_forward(x, hf=hf) * lw).sum())
                    flat[idx] = orig
                num = (fp - fm) / (2 * h)
                best = min(best, abs(num - ana) / max(abs(num), abs(ana)))
            worst = max(worst, best)
            checked += 1
        assert worst < 1e-4, f"worst relative error {worst:.3e}"
        assert time.time() - t0 < 60.0


def test_11_ablation_severs_guidance():
    with criterion(11, "prompt width 0 yields byte-identical outputs for "
                       "different high-frequency inputs"):
        net = LandmarkNet(NetConfig(image_size=64, prompt_width=0), seed=0)
        net.eval()
        rng = np.random.default_rng(11)
        x = rng.uniform(0, 1, size=(2, 1, 64, 64)).astype(np.float32)
        hf_a = rng.normal(size=x.shape)
        hf_b = rng.normal(size=x.shape)
        assert hf_a.tobytes() != hf_b.tobytes()
        assert net.run_forward(x, hf=hf_a).tobytes() == \
            net.run_forward(x, hf=hf_b).tobytes()


def test_12_training_sanity(synth16, tmp_path):
    with criterion(12, "a 200-iteration overfit halves the loss, seeded "
                       "checkpoints are byte-identical, and the schedule "
                       "decays to 80% at the first milestone"):
        t0 = time.time()
        cfg = TrainConfig(seed=0, iterations=200, lr=2e-3, image_size=64,
                          prompt_width=2, log_every=10)
        res_a = train(synth16, cfg, checkpoint_path=tmp_path / "a.ckpt")
        first = res_a.records[0].loss
        assert res_a.final_loss < 0.5 * first, \
            f"loss only went {first:.4f} -> {res_a.final_loss:.4f}"
        train(synth16, cfg, checkpoint_path=tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == \
            (tmp_path / "b.ckpt").read_bytes()
        sched = TrainConfig(iterations=100)
        assert scheduled_lr(sched, 40) == pytest.approx(0.8 * sched.lr,
                                                        abs=1e-18)
        assert scheduled_lr(sched, 40) == pytest.approx(2.0e-4, abs=1e-18)
        assert time.time() - t0 < 300.0
