"""Desk-scale hierarchical transformer with frequency-guided structure
injection and regularization.

Encoder: patch embedding, then four stages of (efficient self-attention +
mix feed-forward) transformer layers at progressively halved resolution.
When structure guidance is enabled (prompt_width > 0), each stage builds a
structure prompt from the high-frequency image and a pooled copy of the
raw image, concatenates it onto every layer input, and a channel-attention
+ dual-MLP regularizer projects back to the stage width. The decoder
upsamples all four stage outputs to the stage-1 grid and emits one heatmap
plane per unified landmark.

All parameters are initialized from a seeded generator so that forward,
backward, and checkpoints are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .frequency import extract_hf


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    widths: tuple = (8, 16, 32, 64)
    depths: tuple = (1, 1, 1, 1)
    sr_ratios: tuple = (8, 4, 2, 1)
    prompt_width: int = 4        # per-branch channels; 0 disables structure guidance
    num_planes: int = 124
    image_size: int = 64
    ffn_expansion: int = 2
    decoder_width: int = 32
    hf_sigma: float = 20.0
    inject_at: str = "attention"  # prompts enter before the attention sublayer

    def __post_init__(self):
        if self.image_size % 32 != 0:
            raise ValueError("image_size must be a multiple of 32")
        if len(self.widths) != 4 or len(self.depths) != 4:
            raise ValueError("exactly four stages are supported")
        if self.inject_at != "attention":
            raise ValueError("only injection before attention is implemented")

    @property
    def guidance_enabled(self):
        return self.prompt_width > 0


class ChannelAttention(nn.Module):
    """Squeeze (avg + max pooling) -> shared bottleneck -> sigmoid gate."""

    def __init__(self, channels, reduction=4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        avg = self.fc2(F.relu(self.fc1(F.adaptive_avg_pool2d(x, 1))))
        mx = self.fc2(F.relu(self.fc1(F.adaptive_max_pool2d(x, 1))))
        return x * torch.sigmoid(avg + mx)


class StructureRegularizer(nn.Module):
    """Channel attention and the shared MLP are stage-level; the output
    MLP is independent per layer and restores the stage width."""

    def __init__(self, in_channels, stage_width, num_layers):
        super().__init__()
        self.ca = ChannelAttention(in_channels)
        self.mlp_shared = nn.Conv2d(in_channels, in_channels, 1)
        self.mlp_layer = nn.ModuleList(
            [nn.Conv2d(in_channels, stage_width, 1) for _ in range(num_layers)]
        )

    def forward(self, x, layer_idx):
        x = self.ca(x)
        x = F.gelu(self.mlp_shared(x))
        return self.mlp_layer[layer_idx](x)


class EfficientSelfAttention(nn.Module):
    """Single-head attention with spatial reduction on keys and values."""

    def __init__(self, dim, sr_ratio):
        super().__init__()
        self.dim = dim
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, sr_ratio, stride=sr_ratio)
            self.sr_norm = nn.LayerNorm(dim)

    def forward(self, x, hw):
        B, N, C = x.shape
        h, w = hw
        q = self.q(x)
        if self.sr_ratio > 1:
            red = x.transpose(1, 2).reshape(B, C, h, w)
            red = self.sr(red).reshape(B, C, -1).transpose(1, 2)
            red = self.sr_norm(red)
        else:
            red = x
        k, v = self.kv(red).chunk(2, dim=-1)
        attn = torch.softmax(q @ k.transpose(1, 2) / (C ** 0.5), dim=-1)
        return self.proj(attn @ v)


class MixFFN(nn.Module):
    """Linear -> 3x3 depthwise conv -> GELU -> linear."""

    def __init__(self, dim, expansion):
        super().__init__()
        hidden = dim * expansion
        self.fc1 = nn.Linear(dim, hidden)
        self.dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, hw):
        B, N, C = x.shape
        h, w = hw
        x = self.fc1(x)
        x = x.transpose(1, 2).reshape(B, -1, h, w)
        x = self.dw(x)
        x = x.reshape(B, -1, N).transpose(1, 2)
        return self.fc2(F.gelu(x))


class TransformerLayer(nn.Module):
    def __init__(self, dim, sr_ratio, expansion):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = EfficientSelfAttention(dim, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = MixFFN(dim, expansion)

    def forward(self, x, hw):
        x = x + self.attn(self.norm1(x), hw)
        x = x + self.ffn(self.norm2(x), hw)
        return x


class ConvBNReLU(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class StructureRefine(nn.Module):
    """Strided conv stack aligning structure features to a stage grid."""

    def __init__(self, cin, cout, total_stride):
        super().__init__()
        blocks = []
        stride_left = total_stride
        c = cin
        while stride_left > 1:
            blocks.append(ConvBNReLU(c, cout, stride=2))
            c = cout
            stride_left //= 2
        if not blocks:
            blocks.append(ConvBNReLU(cin, cout, stride=1))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


class ImageRefine(nn.Module):
    """Spatial pooling to the stage grid followed by a per-position linear map."""

    def __init__(self, cin, cout):
        super().__init__()
        self.proj = nn.Conv2d(cin, cout, 1)

    def forward(self, x, grid_hw):
        x = F.adaptive_avg_pool2d(x, grid_hw)
        return self.proj(x)


class LandmarkNet(nn.Module):
    def __init__(self, config=NetConfig(), seed=0):
        super().__init__()
        self.config = config
        cfg = config
        w = cfg.widths
        pw = cfg.prompt_width

        self.patch_embed = nn.Conv2d(cfg.in_channels, w[0], 7, stride=4,
                                     padding=3)
        self.embed_norm = nn.LayerNorm(w[0])
        self.downsamples = nn.ModuleList([
            nn.Conv2d(w[i], w[i + 1], 3, stride=2, padding=1) for i in range(3)
        ])
        self.down_norms = nn.ModuleList([nn.LayerNorm(w[i + 1]) for i in range(3)])
        self.stages = nn.ModuleList([
            nn.ModuleList([
                TransformerLayer(w[i], cfg.sr_ratios[i], cfg.ffn_expansion)
                for _ in range(cfg.depths[i])
            ])
            for i in range(4)
        ])

        if cfg.guidance_enabled:
            # structure path strides: input -> /4, then /2 per stage
            self.refine_s = nn.ModuleList(
                [StructureRefine(cfg.in_channels, pw, total_stride=4)]
                + [StructureRefine(pw, pw, total_stride=2) for _ in range(3)]
            )
            self.refine_pa = nn.ModuleList(
                [ImageRefine(cfg.in_channels, pw)]
                + [ImageRefine(pw, pw) for _ in range(3)]
            )
            self.regularizers = nn.ModuleList([
                StructureRegularizer(2 * pw + w[i], w[i], cfg.depths[i])
                for i in range(4)
            ])

        dec_in = sum(w)
        dw = cfg.decoder_width
        self.dec_reduce = nn.Conv2d(dec_in, dw, 1)
        self.dec_conv = nn.Conv2d(dw, dw, 3, padding=1)
        self.dec_out = nn.Conv2d(dw, cfg.num_planes, 1)

        init_parameters(self, seed)
        self._recorded = None

    # -- structure prompts ---------------------------------------------------

    def _prompts(self, images, hf):
        """Per-stage prompt tensors Concat(F_pa, F_s)."""
        prompts = []
        fs = hf
        fpa = images
        grid = self.config.image_size // 4
        for i in range(4):
            fs = self.refine_s[i](fs)
            fpa = self.refine_pa[i](fpa, (grid, grid))
            prompts.append(torch.cat([fpa, fs], dim=1))
            grid //= 2
        return prompts

    def compute_hf(self, images):
        """High-frequency companion input for a (B, C, H, W) image batch."""
        arr = images.detach().cpu().numpy() if torch.is_tensor(images) \
            else np.asarray(images)
        out = np.empty_like(arr, dtype=np.float64)
        for b in range(arr.shape[0]):
            for c in range(arr.shape[1]):
                out[b, c] = extract_hf(arr[b, c], sigma=self.config.hf_sigma)
        dtype = images.dtype if torch.is_tensor(images) else torch.float32
        return torch.as_tensor(out).to(dtype)

    # -- forward / backward --------------------------------------------------

    def forward(self, images, hf=None):
        cfg = self.config
        if images.shape[-1] != cfg.image_size or images.shape[-2] != cfg.image_size:
            raise ValueError(
                f"expected {cfg.image_size}x{cfg.image_size} inputs, "
                f"got {tuple(images.shape[-2:])}"
            )
        if cfg.guidance_enabled:
            if hf is None:
                hf = self.compute_hf(images)
            hf = hf.to(images.dtype)
            prompts = self._prompts(images, hf)

        B = images.shape[0]
        x = self.patch_embed(images)
        grid = cfg.image_size // 4
        x = self.embed_norm(x.flatten(2).transpose(1, 2))
        x = x.transpose(1, 2).reshape(B, cfg.widths[0], grid, grid)

        stage_outs = []
        for i in range(4):
            if i > 0:
                x = self.downsamples[i - 1](x)
                grid //= 2
                x = self.down_norms[i - 1](x.flatten(2).transpose(1, 2))
                x = x.transpose(1, 2).reshape(B, cfg.widths[i], grid, grid)
            for j, layer in enumerate(self.stages[i]):
                if cfg.guidance_enabled:
                    injected = torch.cat([prompts[i], x], dim=1)
                    x = self.regularizers[i](injected, j)
                tokens = x.flatten(2).transpose(1, 2)
                tokens = layer(tokens, (grid, grid))
                x = tokens.transpose(1, 2).reshape(B, cfg.widths[i], grid, grid)
            stage_outs.append(x)

        target = stage_outs[0].shape[-2:]
        ups = [stage_outs[0]] + [
            F.interpolate(t, size=target, mode="bilinear", align_corners=False)
            for t in stage_outs[1:]
        ]
        y = torch.cat(ups, dim=1)
        y = F.relu(self.dec_conv(F.relu(self.dec_reduce(y))))
        return self.dec_out(y)

    def run_forward(self, images, hf=None, record=False):
        """Forward pass from numpy arrays; optionally record for backward."""
        dtype = next(self.parameters()).dtype
        t = torch.as_tensor(np.asarray(images)).to(dtype)
        t_hf = None
        if hf is not None:
            t_hf = torch.as_tensor(np.asarray(hf)).to(dtype)
        if record:
            out = self.forward(t, t_hf)
            self._recorded = out
        else:
            with torch.no_grad():
                out = self.forward(t, t_hf)
            self._recorded = None
        return out.detach().cpu().numpy()

    def run_backward(self, loss_grad):
        """Backpropagate d(loss)/d(output); returns parameter gradients."""
        if self._recorded is None:
            raise RuntimeError("run_backward called without a recorded forward")
        self.zero_grad(set_to_none=True)
        grad = torch.as_tensor(np.asarray(loss_grad)).to(self._recorded.dtype)
        self._recorded.backward(grad)
        self._recorded = None
        return {
            name: (p.grad.detach().cpu().numpy().copy()
                   if p.grad is not None else np.zeros(p.shape))
            for name, p in self.named_parameters()
        }

    # -- parameter access ----------------------------------------------------

    def state_arrays(self):
        """Parameters and buffers as an ordered name -> float32 array dict."""
        out = {}
        for name, p in sorted(self.named_parameters()):
            out[name] = p.detach().cpu().numpy().astype(np.float32)
        for name, b in sorted(self.named_buffers()):
            out[name] = b.detach().cpu().numpy().astype(np.float32)
        return out

    def load_state_arrays(self, arrays):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        with torch.no_grad():
            for name, arr in arrays.items():
                if name in params:
                    params[name].copy_(torch.as_tensor(arr))
                elif name in buffers:
                    buffers[name].copy_(
                        torch.as_tensor(arr).to(buffers[name].dtype)
                    )
                else:
                    raise KeyError(f"unknown tensor {name!r} in checkpoint")


def init_parameters(model, seed):
    """Deterministic init: uniform [-0.05, 0.05] kernels, zero biases,
    unit normalization scales; parameter order fixed by sorted name."""
    rng = np.random.default_rng(seed)
    norm_types = (nn.LayerNorm, nn.BatchNorm2d)
    owner = {}
    for mod_name, mod in model.named_modules():
        for p_name, _ in mod.named_parameters(recurse=False):
            full = f"{mod_name}.{p_name}" if mod_name else p_name
            owner[full] = mod
    with torch.no_grad():
        for name, p in sorted(model.named_parameters()):
            if isinstance(owner[name], norm_types):
                if name.endswith("bias"):
                    p.zero_()
                else:
                    p.fill_(1.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                vals = rng.uniform(-0.05, 0.05, size=tuple(p.shape))
                p.copy_(torch.as_tensor(vals, dtype=p.dtype))
