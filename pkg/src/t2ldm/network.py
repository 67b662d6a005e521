"""Range-view U-Net pair: a v-prediction denoiser and its reconstruction guide.

Both networks share one skeleton: a stem conv, four encoder stages (res block
plus attention), a middle block, and a mirrored decoder with concatenated skip
connections. Horizontal padding is circular everywhere so the 0/360 degree seam
behaves like any other column. The denoiser is conditioned on the timestep and
optionally on text tokens; the guide is conditioned on the denoiser's feature
pyramid instead and reconstructs the clean image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .dpe import dpe_features
from .rangemap import SensorConfig
from .textenc import EMBED_DIM, HashTextEncoder

TIME_DIM = 384


def _num_groups(channels: int) -> int:
    # largest group count <= 8 that divides the channel width
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def time_embedding(t: torch.Tensor, dim: int = TIME_DIM) -> torch.Tensor:
    """Interleaved sin/cos embedding of timesteps at geometric frequencies.

    t: scalar or (B,) tensor. Returns (B, dim) with layout
    [sin f0*t, cos f0*t, sin f1*t, cos f1*t, ...], f_k = 10000^(-k/half).
    """
    if dim % 2 != 0:
        raise ValueError("embedding dimension must be even")
    if not torch.is_tensor(t):
        t = torch.as_tensor(t)
    if t.dim() == 0:
        t = t[None]
    dtype = t.dtype if t.is_floating_point() else torch.float32
    half = dim // 2
    k = torch.arange(half, dtype=dtype, device=t.device)
    freqs = torch.exp(-math.log(10000.0) * k / half)
    angles = t.to(dtype)[:, None] * freqs[None, :]
    out = torch.empty(t.shape[0], dim, dtype=dtype, device=t.device)
    out[:, 0::2] = torch.sin(angles)
    out[:, 1::2] = torch.cos(angles)
    return out


def circular_pad(x: torch.Tensor, pad_h: int, pad_w: int) -> torch.Tensor:
    """Wrap columns cyclically, zero-pad rows."""
    if pad_w:
        x = F.pad(x, (pad_w, pad_w, 0, 0), mode="circular")
    if pad_h:
        x = F.pad(x, (0, 0, pad_h, pad_h))
    return x


class CircularConv2d(nn.Module):
    """Conv2d with circular horizontal padding and zero vertical padding."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, bias=True):
        super().__init__()
        if isinstance(kernel_size, int):
            kernel_size = (kernel_size, kernel_size)
        if kernel_size[0] % 2 == 0 or kernel_size[1] % 2 == 0:
            raise ValueError("kernel must be odd-sized")
        self.pad_h = kernel_size[0] // 2
        self.pad_w = kernel_size[1] // 2
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size,
                              stride=stride, padding=0, bias=bias)

    @property
    def weight(self):
        return self.conv.weight

    @property
    def bias(self):
        return self.conv.bias

    def forward(self, x):
        return self.conv(circular_pad(x, self.pad_h, self.pad_w))


def circular_upsample(x: torch.Tensor, stride) -> torch.Tensor:
    """Bilinear upsampling that treats the horizontal axis as periodic."""
    sh, sw = stride
    if sh == 1 and sw == 1:
        return x
    if sw > 1:
        x = F.pad(x, (1, 1, 0, 0), mode="circular")
    y = F.interpolate(x, scale_factor=(float(sh), float(sw)), mode="bilinear",
                      align_corners=False)
    if sw > 1:
        y = y[..., sw:-sw]
    return y


class FeedForward(nn.Module):
    """Pre-norm pointwise MLP returning a residual delta; last layer zero-init."""

    def __init__(self, channels, mult=2):
        super().__init__()
        self.norm = nn.GroupNorm(_num_groups(channels), channels)
        self.fc1 = nn.Conv2d(channels, channels * mult, 1)
        self.fc2 = nn.Conv2d(channels * mult, channels, 1)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return self.fc2(F.silu(self.fc1(self.norm(x))))


class ResBlock(nn.Module):
    """norm-swish-conv, add time and position terms, norm-swish-zero-conv, skip.

    The second conv starts at zero, so a fresh block is exactly the identity on
    its (possibly 1x1-projected) skip path. With bias=False the whole block maps
    zero input and zero time embedding to zero at initialization.
    """

    def __init__(self, in_channels, out_channels, time_dim=None, bias=True):
        super().__init__()
        self.norm1 = nn.GroupNorm(_num_groups(in_channels), in_channels)
        self.conv1 = CircularConv2d(in_channels, out_channels, 3, bias=bias)
        self.time_proj = None
        if time_dim is not None:
            self.time_proj = nn.Linear(time_dim, out_channels, bias=bias)
        self.norm2 = nn.GroupNorm(_num_groups(out_channels), out_channels)
        self.conv2 = CircularConv2d(out_channels, out_channels, 3, bias=bias)
        nn.init.zeros_(self.conv2.weight)
        if self.conv2.bias is not None:
            nn.init.zeros_(self.conv2.bias)
        if in_channels != out_channels:
            self.skip = CircularConv2d(in_channels, out_channels, 1, bias=bias)
        else:
            self.skip = nn.Identity()

    def forward(self, x, temb=None, dpe_add=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if temb is not None:
            if self.time_proj is None:
                raise ValueError("block was built without a time pathway")
            h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        if dpe_add is not None:
            h = h + dpe_add
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class LinearAttentionBlock(nn.Module):
    """Spatially linear attention: softmax over positions of K, summarised
    against V, composed with Q. The V projection starts at zero, so a fresh
    block is the identity."""

    def __init__(self, channels, heads):
        super().__init__()
        if channels % heads != 0:
            raise ValueError("channels must divide evenly into heads")
        self.heads = heads
        self.norm = nn.GroupNorm(_num_groups(channels), channels)
        self.to_q = nn.Conv2d(channels, channels, 1, bias=False)
        self.to_k = nn.Conv2d(channels, channels, 1, bias=False)
        self.to_v = nn.Conv2d(channels, channels, 1, bias=False)
        nn.init.zeros_(self.to_v.weight)
        self.ffn = FeedForward(channels)

    def forward(self, x):
        b, c, h, w = x.shape
        d = c // self.heads
        y = self.norm(x)
        q = self.to_q(y).view(b, self.heads, d, h * w)
        k = self.to_k(y).view(b, self.heads, d, h * w)
        v = self.to_v(y).view(b, self.heads, d, h * w)
        k = torch.softmax(k, dim=-1)
        summary = torch.einsum("bhcl,bhel->bhce", k, v) / math.sqrt(d)
        o = torch.einsum("bhce,bhcl->bhel", summary, q).reshape(b, c, h, w)
        o = x + o
        return o + self.ffn(o)


def _rotary(tokens: torch.Tensor) -> torch.Tensor:
    """Rotate even/odd feature pairs of (B, heads, L, D) tokens by position."""
    b, heads, length, d = tokens.shape
    if d % 2 != 0:
        raise ValueError("rotary embedding needs an even head dimension")
    half = d // 2
    dtype = tokens.dtype
    pos = torch.arange(length, dtype=dtype, device=tokens.device)
    inv = torch.exp(-math.log(10000.0)
                    * torch.arange(half, dtype=dtype, device=tokens.device) / half)
    ang = pos[:, None] * inv[None, :]
    cos, sin = torch.cos(ang), torch.sin(ang)
    t1 = tokens[..., 0::2]
    t2 = tokens[..., 1::2]
    out = torch.empty_like(tokens)
    out[..., 0::2] = t1 * cos - t2 * sin
    out[..., 1::2] = t1 * sin + t2 * cos
    return out


class CrossAttentionBlock(nn.Module):
    """Softmax attention from spatial tokens onto context tokens.

    context_dim selects the width of external context (e.g. 768 for text); an
    adapter maps it onto the feature width before the shared K/V projections.
    With context=None the block attends to its own tokens. The out projection
    and ffn tail start at zero, so a fresh block is the identity.
    """

    def __init__(self, channels, heads, context_dim=None, rope=False):
        super().__init__()
        if channels % heads != 0:
            raise ValueError("channels must divide evenly into heads")
        self.heads = heads
        self.rope = rope
        self.norm = nn.GroupNorm(_num_groups(channels), channels)
        self.adapter = None
        if context_dim is not None:
            self.adapter = nn.Linear(context_dim, channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)
        self.ffn = FeedForward(channels)

    def self_tokens(self, x):
        """The (B, H*W, C) token matrix used as context when none is given."""
        return self.norm(x).flatten(2).transpose(1, 2)

    def forward(self, x, context=None, context_mask=None, need_weights=False):
        b, c, h, w = x.shape
        d = c // self.heads
        tokens = self.self_tokens(x)
        if context is None:
            ctx = tokens
            self_mode = True
        else:
            if context.dim() != 3 or context.shape[0] != b:
                raise ValueError("context must be a (B, n, dim) token batch")
            if context.shape[1] == 0:
                raise ValueError("context must contain at least one token")
            if self.adapter is not None:
                ctx = self.adapter(context)
            elif context.shape[2] == c:
                ctx = context
            else:
                raise ValueError("context width does not match feature width")
            self_mode = False
        q = self.to_q(tokens).view(b, -1, self.heads, d).transpose(1, 2)
        k = self.to_k(ctx).view(b, -1, self.heads, d).transpose(1, 2)
        v = self.to_v(ctx).view(b, -1, self.heads, d).transpose(1, 2)
        if self.rope and self_mode:
            q = _rotary(q)
            k = _rotary(k)
        if context_mask is not None and self_mode:
            raise ValueError("context_mask requires explicit context")
        att = None
        if need_weights:
            scores = torch.einsum("bhld,bhnd->bhln", q, k) / math.sqrt(d)
            if context_mask is not None:
                bad = ~context_mask.bool()[:, None, None, :]
                scores = scores.masked_fill(bad, float("-inf"))
            att = torch.softmax(scores, dim=-1)
            o = torch.einsum("bhln,bhnd->bhld", att, v)
        else:
            mask = None
            if context_mask is not None:
                mask = context_mask.bool()[:, None, None, :]
            o = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        o = o.transpose(1, 2).reshape(b, -1, c)
        o = self.to_out(o).transpose(1, 2).reshape(b, c, h, w)
        o = x + o
        out = o + self.ffn(o)
        if need_weights:
            return out, att
        return out


@dataclass(frozen=True)
class UNetConfig:
    """Shared shape of the denoiser and the guide."""

    base_channels: int = 64
    channel_multipliers: tuple = (1, 2, 4, 4)
    strides: tuple = ((1, 2), (2, 2), (2, 2))
    attention_kinds: tuple = ("linear", "linear", "linear", "vanilla")
    attention_heads: tuple = (2, 4, 8, 8)
    skip_scale: float = 1.0 / math.sqrt(2.0)
    in_channels: int = 2
    time_dim: int = TIME_DIM
    context_dim: int = EMBED_DIM
    dpe_octaves: int = 4
    rope: bool = False
    fov_up_deg: float = 2.0
    fov_down_deg: float = -25.0

    def __post_init__(self):
        stages = len(self.channel_multipliers)
        if stages != 4:
            raise ValueError("the layout is fixed at four stages")
        if len(self.strides) != stages - 1:
            raise ValueError("need one stride per downsampling step")
        if len(self.attention_kinds) != stages or len(self.attention_heads) != stages:
            raise ValueError("attention settings must cover every stage")
        for kind in self.attention_kinds:
            if kind not in ("linear", "vanilla"):
                raise ValueError(f"unknown attention kind {kind!r}")
        for ch, heads in zip(self.stage_channels, self.attention_heads):
            if ch % heads != 0:
                raise ValueError("stage width must divide into its head count")

    @property
    def stage_channels(self) -> tuple:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    @property
    def total_stride(self) -> tuple:
        sh = sw = 1
        for h, w in self.strides:
            sh, sw = sh * h, sw * w
        return sh, sw

    def stage_shape(self, stage: int, height: int, width: int) -> tuple:
        """Spatial size at a given stage for a given input size."""
        for h, w in self.strides[:stage]:
            height, width = height // h, width // w
        return height, width

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "UNetConfig":
        fixed = dict(data)
        for key in ("channel_multipliers", "attention_kinds", "attention_heads"):
            if key in fixed:
                fixed[key] = tuple(fixed[key])
        if "strides" in fixed:
            fixed["strides"] = tuple(tuple(s) for s in fixed["strides"])
        return cls(**fixed)

    def angle_config(self) -> SensorConfig:
        # carrier for the fov angles that drive the position encoding
        return SensorConfig(fov_up_deg=self.fov_up_deg, fov_down_deg=self.fov_down_deg)


class DPEGate(nn.Module):
    """Gated 1x1 projection of the fixed directional encoding, one per stage."""

    def __init__(self, channels, octaves):
        super().__init__()
        self.octaves = octaves
        self.alpha = nn.Parameter(torch.zeros(()))
        self.proj = nn.Conv2d(4 * octaves, channels, 1)

    def forward(self, feats):
        return self.alpha * self.proj(feats)


def dpe_term(cache, config, gate, height, width, ref):
    """Gate output for one stage, with the fixed features cached per shape."""
    key = (height, width, ref.dtype)
    feats = cache.get(key)
    if feats is None:
        arr = dpe_features(height, width, config.angle_config(), config.dpe_octaves)
        feats = torch.as_tensor(arr).to(dtype=ref.dtype, device=ref.device)[None]
        cache[key] = feats
    return gate(feats.to(ref.device))


def _make_attention(kind, channels, heads, context_dim=None, rope=False):
    if kind == "linear":
        return LinearAttentionBlock(channels, heads)
    return CrossAttentionBlock(channels, heads, context_dim=context_dim, rope=rope)


class _UNetBase(nn.Module):
    """Skeleton shared by the denoiser and the guide: stages, skips, taps."""

    def __init__(self, config: UNetConfig, time_dim):
        super().__init__()
        self.config = config
        chans = config.stage_channels
        n = len(chans)
        octaves = config.dpe_octaves
        self.stem = CircularConv2d(config.in_channels, chans[0], 3)
        self.enc_res = nn.ModuleList()
        self.enc_att = nn.ModuleList()
        self.enc_dpe = nn.ModuleList()
        self.pools = nn.ModuleList()
        prev = chans[0]
        for s in range(n):
            self.enc_res.append(ResBlock(prev, chans[s], time_dim=time_dim))
            self.enc_att.append(self._stage_attention(s))
            self.enc_dpe.append(DPEGate(chans[s], octaves))
            if s < n - 1:
                self.pools.append(nn.AvgPool2d(config.strides[s], config.strides[s]))
            prev = chans[s]
        cm = chans[-1]
        self.mid_res1 = ResBlock(cm, cm, time_dim=time_dim)
        self.mid_att = self._middle_attention()
        self.mid_res2 = ResBlock(cm, cm, time_dim=time_dim)
        self.mid_dpe = DPEGate(cm, octaves)
        self.dec_res = nn.ModuleList()
        self.dec_att = nn.ModuleList()
        self.dec_dpe = nn.ModuleList()
        up = cm
        for s in reversed(range(n)):
            self.dec_res.append(ResBlock(up + chans[s], chans[s], time_dim=time_dim))
            self.dec_att.append(self._stage_attention(s))
            self.dec_dpe.append(DPEGate(chans[s], octaves))
            up = chans[s]
        self.out_norm = nn.GroupNorm(_num_groups(chans[0]), chans[0])
        self.out_conv = CircularConv2d(chans[0], config.in_channels, 3)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)
        self._dpe_cache = {}

    def _stage_attention(self, stage):
        cfg = self.config
        kind = cfg.attention_kinds[stage]
        ctx = cfg.context_dim if kind == "vanilla" and self._text_conditioned() else None
        return _make_attention(kind, cfg.stage_channels[stage], cfg.attention_heads[stage],
                               context_dim=ctx, rope=cfg.rope)

    def _middle_attention(self):
        cfg = self.config
        ctx = cfg.context_dim if self._text_conditioned() else None
        return _make_attention("vanilla", cfg.stage_channels[-1], cfg.attention_heads[-1],
                               context_dim=ctx, rope=cfg.rope)

    def _text_conditioned(self):
        return False

    def _dpe(self, gate, height, width, ref):
        return dpe_term(self._dpe_cache, self.config, gate, height, width, ref)

    def _check_input(self, x):
        cfg = self.config
        if x.dim() != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError("input must be (B, %d, H, W)" % cfg.in_channels)
        sh, sw = cfg.total_stride
        if x.shape[2] % sh != 0 or x.shape[3] % sw != 0:
            raise ValueError(f"spatial size must be divisible by {(sh, sw)}")


class DenoisingNetwork(_UNetBase):
    """Predicts the v-target from a noisy range map, a timestep, and optional
    text tokens; also returns the encoder+middle feature pyramid."""

    def __init__(self, config: UNetConfig = None):
        cfg = config if config is not None else UNetConfig()
        super().__init__(cfg, time_dim=cfg.time_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(),
            nn.Linear(cfg.time_dim, cfg.time_dim))
        null = HashTextEncoder().null_embedding()
        self.null_token = nn.Parameter(torch.as_tensor(null)[None])

    def _text_conditioned(self):
        return True

    def null_context(self, batch: int) -> torch.Tensor:
        """The learnable unconditional token, expanded to a batch."""
        p = self.null_token
        return p.to(dtype=next(self.parameters()).dtype).expand(batch, 1, p.shape[-1])

    def time_features(self, t, batch: int, dtype) -> torch.Tensor:
        """The (B, time_dim) embedding the blocks consume for timestep t."""
        if not torch.is_tensor(t):
            t = torch.as_tensor(t)
        if t.dim() == 0:
            t = t.expand(batch)
        return self.time_mlp(time_embedding(t, self.config.time_dim).to(dtype))

    def forward(self, x_t, t, text=None, text_mask=None, skip_extras=None,
                middle_extra=None):
        self._check_input(x_t)
        if text is not None and (text.dim() != 3 or text.shape[-1] != self.config.context_dim):
            raise ValueError("text must be (B, n, %d)" % self.config.context_dim)
        temb = self.time_features(t, x_t.shape[0], x_t.dtype)

        h = self.stem(x_t)
        taps = []
        n = len(self.enc_res)
        for s in range(n):
            dpe = self._dpe(self.enc_dpe[s], h.shape[2], h.shape[3], h)
            h = self.enc_res[s](h, temb, dpe)
            if isinstance(self.enc_att[s], CrossAttentionBlock):
                h = self.enc_att[s](h, text, context_mask=text_mask)
            else:
                h = self.enc_att[s](h)
            taps.append(h)
            if s < n - 1:
                h = self.pools[s](h)

        dpe_m = self._dpe(self.mid_dpe, h.shape[2], h.shape[3], h)
        h = self.mid_res1(h, temb, dpe_m)
        h = self.mid_att(h, text, context_mask=text_mask)
        h = self.mid_res2(h, temb, dpe_m)
        pyramid = taps + [h]

        if middle_extra is not None:
            h = h + middle_extra
        for i, s in enumerate(reversed(range(n))):
            skip = taps[s]
            # skip_extras: per-stage list, or a callable (stage, tap) -> extra
            # so a controller can mix in terms computed from this very tap
            if skip_extras is not None:
                extra = skip_extras(s, taps[s]) if callable(skip_extras) else skip_extras[s]
                if extra is not None:
                    skip = skip + extra
            h = torch.cat([h, skip], dim=1) * self.config.skip_scale
            dpe = self._dpe(self.dec_dpe[i], h.shape[2], h.shape[3], h)
            h = self.dec_res[i](h, temb, dpe)
            if isinstance(self.dec_att[i], CrossAttentionBlock):
                h = self.dec_att[i](h, text, context_mask=text_mask)
            else:
                h = self.dec_att[i](h)
            if s > 0:
                h = circular_upsample(h, self.config.strides[s - 1])
        v = self.out_conv(F.silu(self.out_norm(h)))
        return v, pyramid


class GuidanceNetwork(_UNetBase):
    """Reconstructs the clean range map from itself, fusing the denoiser's
    feature pyramid by cross-attention once per encoder stage."""

    def __init__(self, config: UNetConfig = None):
        cfg = config if config is not None else UNetConfig()
        super().__init__(cfg, time_dim=None)
        chans = cfg.stage_channels
        self.fuse = nn.ModuleList(
            CrossAttentionBlock(chans[s], cfg.attention_heads[s])
            for s in range(len(chans)))

    def expected_pyramid(self, batch, height, width):
        """(channels, H_s, W_s) of each tap the guide consumes."""
        shapes = []
        chans = self.config.stage_channels
        for s in range(len(chans)):
            hs, ws = self.config.stage_shape(s, height, width)
            shapes.append((batch, chans[s], hs, ws))
        shapes.append(shapes[-1][:1] + (chans[-1],) + shapes[-1][2:])
        return shapes

    def forward(self, x0, dn_pyramid):
        self._check_input(x0)
        expected = self.expected_pyramid(x0.shape[0], x0.shape[2], x0.shape[3])
        if len(dn_pyramid) != len(expected):
            raise ValueError("pyramid must carry one tap per stage plus middle")
        for tap, shape in zip(dn_pyramid, expected):
            if tuple(tap.shape) != shape:
                raise ValueError(f"pyramid tap shape {tuple(tap.shape)} != {shape}")

        h = self.stem(x0)
        taps = []
        n = len(self.enc_res)
        for s in range(n):
            dpe = self._dpe(self.enc_dpe[s], h.shape[2], h.shape[3], h)
            h = self.enc_res[s](h, None, dpe)
            h = self.enc_att[s](h)
            ctx = dn_pyramid[s].flatten(2).transpose(1, 2)
            h = self.fuse[s](h, ctx)
            taps.append(h)
            if s < n - 1:
                h = self.pools[s](h)

        dpe_m = self._dpe(self.mid_dpe, h.shape[2], h.shape[3], h)
        h = self.mid_res1(h, None, dpe_m)
        h = self.mid_att(h)
        h = self.mid_res2(h, None, dpe_m)
        pyramid = taps + [h]

        for i, s in enumerate(reversed(range(n))):
            h = torch.cat([h, taps[s]], dim=1) * self.config.skip_scale
            dpe = self._dpe(self.dec_dpe[i], h.shape[2], h.shape[3], h)
            h = self.dec_res[i](h, None, dpe)
            h = self.dec_att[i](h)
            if s > 0:
                h = circular_upsample(h, self.config.strides[s - 1])
        x0_recon = self.out_conv(F.silu(self.out_norm(h)))
        return x0_recon, pyramid


def zero_dpe_gates(model: nn.Module) -> None:
    """Force every directional-encoding gate shut (used by equivariance checks)."""
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, DPEGate):
                module.alpha.zero_()
