"""Network components: degradation encoder, degradation generator, denoiser.

All three share the same 4-scale layout. The encoder turns a low-light
image into four feature maps sized to the decoder scales (H, H/2, H/4,
H/8); the generator and the noise-prediction U-Net consume those maps by
channel concatenation at each decoder level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

NUM_SCALES = 4


@dataclass(frozen=True)
class ModelConfig:
    base_width: int = 32   # U-Net width w; levels use (w, 2w, 4w, 8w)
    enc_width: int = 32    # encoder width and per-scale representation channels

    @property
    def rep_channels(self) -> int:
        return self.enc_width


def _groups(channels: int) -> int:
    g = min(8, channels)
    while channels % g:
        g -= 1
    return g


def sinusoidal_time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Map integer timesteps (B,) to (B, dim) sin/cos features."""
    if dim % 2:
        raise ValueError("time embedding dim must be even")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=t.dtype if t.is_floating_point() else torch.get_default_dtype(), device=t.device)
        / half
    )
    args = t.float().to(freqs.dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    """3x3 conv with group norm; optional additive time conditioning.

    Kept to a single conv per block so CPU-only training stays cheap.
    """

    def __init__(self, in_ch: int, out_ch: int, time_dim: int | None = None):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch) if time_dim else None
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv(F.silu(self.norm(x)))
        if self.time_proj is not None and temb is not None:
            h = h + self.time_proj(temb)[:, :, None, None]
        return h + self.skip(x)


class SelfAttention2d(nn.Module):
    """Single-head self-attention over spatial positions."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


class DegradationEncoder(nn.Module):
    """Four stride-2 conv stages; each stage is projected and upsampled
    back to its decoder scale (H, H/2, H/4, H/8)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        w = config.enc_width
        widths = [w, 2 * w, 4 * w, 8 * w]
        in_ch = 3
        for i, out_ch in enumerate(widths, start=1):
            setattr(self, f"stage{i}", nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1))
            setattr(self, f"proj{i}", nn.Conv2d(out_ch, config.rep_channels, 1))
            in_ch = out_ch

    def forward(self, y: torch.Tensor) -> list[torch.Tensor]:
        if y.shape[-1] % 8 or y.shape[-2] % 8:
            raise ValueError(f"spatial size {tuple(y.shape[-2:])} not divisible by 8")
        h_full, w_full = y.shape[-2:]
        maps = []
        h = y
        for i in range(1, NUM_SCALES + 1):
            h = F.silu(getattr(self, f"stage{i}")(h))
            target = (h_full // 2 ** (i - 1), w_full // 2 ** (i - 1))
            m = getattr(self, f"proj{i}")(h)
            maps.append(F.interpolate(m, size=target, mode="nearest"))
        return maps


def freeze(module: nn.Module) -> nn.Module:
    """Mark every parameter non-trainable. Idempotent."""
    for p in module.parameters():
        p.requires_grad_(False)
    return module


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class CondUNet(nn.Module):
    """4-level U-Net with per-level concatenation of degradation maps.

    Used both for noise prediction (9 input channels, time-conditioned,
    linear output) and low-light generation (3 input channels, no time
    conditioning, sigmoid output).
    """

    def __init__(
        self,
        in_channels: int,
        config: ModelConfig,
        time_conditioned: bool,
        out_channels: int = 3,
        sigmoid_out: bool = False,
    ):
        super().__init__()
        w = config.base_width
        widths = [w, 2 * w, 4 * w, 8 * w]
        rep = config.rep_channels
        self.time_conditioned = time_conditioned
        self.sigmoid_out = sigmoid_out
        time_dim = 4 * w if time_conditioned else None
        self.time_dim = time_dim
        if time_conditioned:
            self.time_mlp = nn.Sequential(
                nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
            )

        self.in_conv = nn.Conv2d(in_channels, widths[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        ch = widths[0]
        for i, out_ch in enumerate(widths):
            self.down_blocks.append(ResBlock(ch, out_ch, time_dim))
            ch = out_ch
            if i < NUM_SCALES - 1:
                self.downsamples.append(Downsample(ch))

        self.mid_attn = SelfAttention2d(ch)
        self.mid_block = ResBlock(ch, ch, time_dim)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(NUM_SCALES)):
            # carried features + skip connection + degradation map
            self.up_blocks.append(ResBlock(ch + widths[i] + rep, widths[i], time_dim))
            ch = widths[i]
            if i > 0:
                self.upsamples.append(Upsample(ch, widths[i - 1]))
                ch = widths[i - 1]

        self.out_norm = nn.GroupNorm(_groups(ch), ch)
        self.out_conv = nn.Conv2d(ch, out_channels, 3, padding=1)

    def forward(self, x, rep: list[torch.Tensor], t: torch.Tensor | None = None):
        if len(rep) != NUM_SCALES:
            raise ValueError(f"expected {NUM_SCALES} degradation maps, got {len(rep)}")
        if self.time_conditioned:
            if t is None:
                raise ValueError("time-conditioned network called without t")
            dtype = self.time_mlp[0].weight.dtype
            temb = self.time_mlp(sinusoidal_time_embedding(t, self.time_dim).to(dtype))
        else:
            temb = None

        h = self.in_conv(x)
        skips = []
        for i in range(NUM_SCALES):
            h = self.down_blocks[i](h, temb)
            skips.append(h)
            if i < NUM_SCALES - 1:
                h = self.downsamples[i](h)

        h = self.mid_block(self.mid_attn(h), temb)

        for j, i in enumerate(reversed(range(NUM_SCALES))):
            if rep[i].shape[-2:] != skips[i].shape[-2:]:
                raise ValueError(
                    f"degradation map scale {i} is {tuple(rep[i].shape[-2:])}, "
                    f"expected {tuple(skips[i].shape[-2:])}"
                )
            h = self.up_blocks[j](torch.cat([h, skips[i], rep[i]], dim=1), temb)
            if i > 0:
                h = self.upsamples[j](h)

        h = self.out_conv(F.silu(self.out_norm(h)))
        return torch.sigmoid(h) if self.sigmoid_out else h


class DGNet(CondUNet):
    """Degradation generator: synthesizes a low-light image from a
    normal-light one conditioned on the degradation maps, bounded to [0,1]."""

    def __init__(self, config: ModelConfig):
        super().__init__(3, config, time_conditioned=False, sigmoid_out=True)

    def generate(self, x, rep):
        return self(x, rep)


class Denoiser(CondUNet):
    """Noise predictor over channel-concatenated (x_t, y, C(y))."""

    IN_CHANNELS = 9

    def __init__(self, config: ModelConfig):
        super().__init__(self.IN_CHANNELS, config, time_conditioned=True)

    def predict_noise(self, x_t, y, rep, cmap, t):
        if x_t.shape != y.shape or x_t.shape != cmap.shape:
            raise ValueError("x_t, y and color map must share shape")
        return self(torch.cat([x_t, y, cmap], dim=1), rep, t)


def kaiming_init_(module: nn.Module) -> nn.Module:
    """Fan-in Kaiming initialization for all convs and linears."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return module


def zero_head_(net: CondUNet) -> CondUNet:
    """Zero the output conv so a fresh net predicts the neutral output."""
    nn.init.zeros_(net.out_conv.weight)
    nn.init.zeros_(net.out_conv.bias)
    return net


def build_models(
    config: ModelConfig, generator: torch.Generator | None = None
) -> tuple[DegradationEncoder, DGNet, Denoiser]:
    """Construct and initialize the three networks.

    When a generator is given, initialization is reproducible from its
    state (torch's global RNG is untouched).
    """
    if generator is not None:
        state = torch.random.get_rng_state()
        torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=generator)))
    encoder = kaiming_init_(DegradationEncoder(config))
    dgnet = zero_head_(kaiming_init_(DGNet(config)))
    denoiser = zero_head_(kaiming_init_(Denoiser(config)))
    if generator is not None:
        torch.random.set_rng_state(state)
    return encoder, dgnet, denoiser
