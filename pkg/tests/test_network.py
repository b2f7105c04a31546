import time

import numpy as np
import pytest
import torch

from unifl.network import LandmarkNet, NetConfig

torch.set_num_threads(1)


def small_config(**kw):
    base = dict(image_size=32, prompt_width=2)
    base.update(kw)
    return NetConfig(**base)


def rand_images(cfg, batch=2, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, size=(batch, cfg.in_channels, cfg.image_size,
                                   cfg.image_size)).astype(np.float32)


class TestShapesAndDeterminism:
    def test_output_shape(self):
        cfg = small_config()
        net = LandmarkNet(cfg, seed=0)
        out = net.run_forward(rand_images(cfg))
        assert out.shape == (2, 124, cfg.image_size // 4, cfg.image_size // 4)

    def test_seeded_init_reproducible(self):
        cfg = small_config()
        a = LandmarkNet(cfg, seed=3).state_arrays()
        b = LandmarkNet(cfg, seed=3).state_arrays()
        assert a.keys() == b.keys()
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()

    def test_different_seeds_differ(self):
        cfg = small_config()
        a = LandmarkNet(cfg, seed=0).state_arrays()
        b = LandmarkNet(cfg, seed=1).state_arrays()
        assert any(a[k].tobytes() != b[k].tobytes() for k in a)

    def test_forward_deterministic(self):
        cfg = small_config()
        net = LandmarkNet(cfg, seed=0)
        x = rand_images(cfg)
        assert net.run_forward(x).tobytes() == net.run_forward(x).tobytes()

    def test_state_roundtrip(self):
        cfg = small_config()
        a = LandmarkNet(cfg, seed=0)
        b = LandmarkNet(cfg, seed=5)
        x = rand_images(cfg)
        assert a.run_forward(x).tobytes() != b.run_forward(x).tobytes()
        b.load_state_arrays(a.state_arrays())
        assert a.run_forward(x).tobytes() == b.run_forward(x).tobytes()

    def test_wrong_input_size_rejected(self):
        cfg = small_config()
        net = LandmarkNet(cfg, seed=0)
        with pytest.raises(ValueError):
            net.run_forward(np.zeros((1, 1, 48, 48), np.float32))

    def test_bad_image_size_rejected(self):
        with pytest.raises(ValueError):
            NetConfig(image_size=48)


class TestStructureGuidance:
    def test_prompt_width_zero_ignores_hf(self):
        cfg = small_config(prompt_width=0)
        net = LandmarkNet(cfg, seed=0)
        x = rand_images(cfg)
        rng = np.random.default_rng(9)
        hf_a = rng.normal(size=x.shape)
        hf_b = rng.normal(size=x.shape)
        assert hf_a.tobytes() != hf_b.tobytes()
        out_a = net.run_forward(x, hf=hf_a)
        out_b = net.run_forward(x, hf=hf_b)
        assert out_a.tobytes() == out_b.tobytes()

    def test_prompt_width_zero_drops_guidance_parameters(self):
        names = LandmarkNet(small_config(prompt_width=0), seed=0).state_arrays()
        assert not any("refine" in n or "regular" in n for n in names)

    def test_enabled_guidance_reacts_to_hf(self):
        cfg = small_config()
        net = LandmarkNet(cfg, seed=0)
        net.eval()
        x = rand_images(cfg)
        rng = np.random.default_rng(9)
        out_a = net.run_forward(x, hf=rng.normal(size=x.shape))
        out_b = net.run_forward(x, hf=rng.normal(size=x.shape))
        assert out_a.tobytes() != out_b.tobytes()

    def test_permutation_equivariance(self):
        cfg = small_config()
        net = LandmarkNet(cfg, seed=0)
        net.eval()
        x = rand_images(cfg, batch=3)
        hf = net.compute_hf(torch.as_tensor(x)).numpy()
        out = net.run_forward(x, hf=hf)
        perm = [2, 0, 1]
        permuted = net.run_forward(x[perm], hf=hf[perm])
        # batched matmul reduction order depends on the batch layout, so
        # equality holds only to float32 roundoff
        assert np.allclose(permuted, out[perm], atol=1e-6, rtol=0)

    def test_default_hf_matches_explicit(self):
        cfg = small_config()
        net = LandmarkNet(cfg, seed=0)
        net.eval()
        x = rand_images(cfg)
        hf = net.compute_hf(torch.as_tensor(x)).numpy()
        a = net.run_forward(x)
        b = net.run_forward(x, hf=hf)
        assert a.tobytes() == b.tobytes()


class TestBackward:
    def test_requires_recorded_forward(self):
        cfg = small_config()
        net = LandmarkNet(cfg, seed=0)
        out = net.run_forward(rand_images(cfg), record=False)
        with pytest.raises(RuntimeError):
            net.run_backward(np.ones_like(out))

    def test_gradients_cover_all_parameters(self):
        cfg = small_config()
        net = LandmarkNet(cfg, seed=0)
        out = net.run_forward(rand_images(cfg), record=True)
        grads = net.run_backward(np.ones_like(out))
        assert set(grads) == {n for n, _ in net.named_parameters()}
        assert all(np.isfinite(g).all() for g in grads.values())

    def test_gradient_matches_central_differences(self):
        cfg = small_config(prompt_width=2)
        net = LandmarkNet(cfg, seed=0).double()
        net.eval()
        rng = np.random.default_rng(11)
        x = rng.uniform(0, 1, size=(1, 1, 32, 32))
        hf = rng.normal(scale=0.1, size=x.shape)
        out0 = net.run_forward(x, hf=hf, record=True)
        lw = rng.normal(size=out0.shape)
        grads = net.run_backward(lw)

        params = dict(net.named_parameters())
        names = sorted(params)
        t0 = time.time()
        checked = 0
        worst = 0.0
        while checked < 20:
            name = names[rng.integers(len(names))]
            p = params[name]
            flat = p.detach().reshape(-1)
            idx = int(rng.integers(flat.numel()))
            # skip entries whose gradient is dominated by finite-difference
            # roundoff; correctness is established by the meaningful ones
            analytic = float(grads[name].reshape(-1)[idx])
            if abs(analytic) < 1e-4:
                continue
            # two stencil widths so a ReLU kink inside one of them does not
            # masquerade as a gradient error
            rel = np.inf
            for h in (1e-7, 1e-6):
                with torch.no_grad():
                    orig = float(flat[idx])
                    flat[idx] = orig + h
                    fp = float((torch.as_tensor(net.run_forward(x, hf=hf))
                                * torch.as_tensor(lw)).sum())
                    flat[idx] = orig - h
                    fm = float((torch.as_tensor(net.run_forward(x, hf=hf))
                                * torch.as_tensor(lw)).sum())
                    flat[idx] = orig
                numeric = (fp - fm) / (2 * h)
                rel = min(rel, abs(numeric - analytic)
                          / max(abs(numeric), abs(analytic)))
            worst = max(worst, rel)
            checked += 1
        assert checked == 20
        assert worst < 1e-4, f"worst relative gradient error {worst:.3e}"
        assert time.time() - t0 < 60.0
