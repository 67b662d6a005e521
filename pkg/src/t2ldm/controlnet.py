"""Spatial conditioning for a trained denoiser without touching its weights.

A trainable copy of the denoiser encoder reads a condition image (a sparse
range map or a per-pixel semantic map); its per-stage features are summed
with the matching denoiser features, passed through zero-initialised 1x1
projections, and added onto the decoder skip path. At construction every
projection outputs exactly zero, so an untrained controller reproduces the
frozen denoiser bit for bit.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, load_into, module_arrays, save_checkpoint
from .network import CircularConv2d, DenoisingNetwork, UNetConfig, dpe_term
from .rangemap import SensorConfig, normalize, project
from .training import (TrainConfig, corrupt_batch, learning_rate_of_step,
                       loss_denoise)

SPARSE_CHANNELS = 2
SEMANTIC_CHANNELS = 1


@dataclass
class ConditionImage:
    """(c, H, W) float32 condition planes plus the (H, W) validity mask."""

    data: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError("condition data must be (c, H, W)")
        if self.valid.shape != self.data.shape[1:]:
            raise ValueError("valid mask must match the spatial shape")

    def tensor(self, batch: int = 1) -> torch.Tensor:
        """The (batch, c, H, W) tensor a controller consumes."""
        t = torch.as_tensor(np.array(self.data, dtype=np.float32))[None]
        return t.expand(batch, *t.shape[1:])


class ZeroProjection(nn.Module):
    """1x1 convolution initialised to zero so its branch starts silent."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(self, x):
        return self.conv(x)


class ControlNet(nn.Module):
    """Condition encoder plus zero projections around a frozen denoiser.

    The denoiser is held by reference, not registered, so parameters(),
    state_dict() and the optimizer see only the trainable condition branch.
    Keep both halves in the same dtype; .to()/.double() move only the branch.
    """

    def __init__(self, dn: DenoisingNetwork, condition_channels: int,
                 feed_noisy_input: bool = False):
        super().__init__()
        if condition_channels < 1:
            raise ValueError("condition_channels must be positive")
        cfg = dn.config
        chans = cfg.stage_channels
        self.condition_channels = condition_channels
        self.feed_noisy_input = feed_noisy_input
        self.stem = CircularConv2d(condition_channels, chans[0], 3)
        if condition_channels == cfg.in_channels:
            # same channel count: start from the denoiser stem so the branch
            # speaks the encoder's feature language from the first step
            with torch.no_grad():
                self.stem.conv.weight.copy_(dn.stem.conv.weight)
                self.stem.conv.bias.copy_(dn.stem.conv.bias)
        if feed_noisy_input:
            self.noise_stem = CircularConv2d(cfg.in_channels, chans[0], 3)
        self.enc_res = copy.deepcopy(dn.enc_res)
        self.enc_att = copy.deepcopy(dn.enc_att)
        self.enc_dpe = copy.deepcopy(dn.enc_dpe)
        self.pools = copy.deepcopy(dn.pools)
        self.zero_proj = nn.ModuleList(ZeroProjection(c) for c in chans)
        for p in self.parameters():
            p.requires_grad_(True)
        for p in dn.parameters():
            p.requires_grad_(False)
        self._dn = (dn,)
        self._dpe_cache = {}

    @property
    def dn(self) -> DenoisingNetwork:
        return self._dn[0]

    def _check_condition(self, x_t, condition):
        if condition.dim() != 4 or condition.shape[1] != self.condition_channels:
            raise ValueError(
                "condition must be (B, %d, H, W)" % self.condition_channels)
        if condition.shape[0] != x_t.shape[0] or condition.shape[2:] != x_t.shape[2:]:
            raise ValueError("condition batch and spatial size must match x_t")

    def encode(self, x_t, t, condition):
        """Per-stage features of the condition branch."""
        dn = self.dn
        temb = dn.time_features(t, x_t.shape[0], x_t.dtype)
        h = self.stem(condition)
        if self.feed_noisy_input:
            h = h + self.noise_stem(x_t)
        taps = []
        n = len(self.enc_res)
        for s in range(n):
            dpe = dpe_term(self._dpe_cache, dn.config, self.enc_dpe[s],
                           h.shape[2], h.shape[3], h)
            h = self.enc_res[s](h, temb, dpe)
            # the vanilla stage runs with no text: self-attention context
            h = self.enc_att[s](h)
            taps.append(h)
            if s < n - 1:
                h = self.pools[s](h)
        return taps

    def forward(self, x_t, t, condition):
        """v prediction with the condition folded into the decoder skips."""
        self._check_condition(x_t, condition)
        taps = self.encode(x_t, t, condition)

        def extra(stage, dn_tap):
            return self.zero_proj[stage](taps[stage] + dn_tap)

        v, _ = self.dn(x_t, t, skip_extras=extra)
        return v

    controlled_forward = forward


class ControlTrainer:
    """Optimises the condition branch only; the denoiser never moves."""

    def __init__(self, control: ControlNet, schedule, config: TrainConfig, seed: int):
        self.control = control
        self.schedule = schedule
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.step_count = 0
        trainable = [p for p in control.parameters() if p.requires_grad]
        self.opt = torch.optim.AdamW(trainable, lr=config.learning_rate,
                                     weight_decay=config.weight_decay)
        ab = np.asarray(schedule.alpha_bar, dtype=np.float64)
        self._sqrt_ab = np.sqrt(ab)
        self._sqrt_1mab = np.sqrt(1.0 - ab)

    def train_step(self, x0: torch.Tensor, condition: torch.Tensor) -> dict:
        cfg = self.config
        step = self.step_count
        lr = learning_rate_of_step(step, cfg)
        for group in self.opt.param_groups:
            group["lr"] = lr
        x_t, v, t, weight = corrupt_batch(self.rng, x0, self.schedule,
                                          cfg.snr_gamma, self._sqrt_ab,
                                          self._sqrt_1mab)
        v_hat = self.control(x_t, t, condition)
        loss = loss_denoise(v_hat, v, weight)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite loss at step {step}")
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        self.step_count += 1
        return {"step": step, "loss_denoise": float(loss.detach()), "lr": lr}


def save_control_checkpoint(path, control: ControlNet, extra=None) -> None:
    """Archive the condition branch under the control namespace."""
    tensors = module_arrays(control, "control.")
    config = {"unet": control.dn.config.to_dict(),
              "condition_channels": control.condition_channels,
              "feed_noisy_input": control.feed_noisy_input}
    save_checkpoint(path, tensors, config, extra)


def load_control_checkpoint(path, dn: DenoisingNetwork):
    """Rebuild a controller around dn from an archive; returns (control, extra)."""
    tensors, config, extra = load_checkpoint(path)
    if UNetConfig.from_dict(config["unet"]) != dn.config:
        raise ValueError("checkpoint was built for a different denoiser config")
    control = ControlNet(dn, config["condition_channels"],
                         feed_noisy_input=config["feed_noisy_input"])
    load_into(control, tensors, "control.")
    return control, extra


def farthest_point_sample(points: np.ndarray, count: int) -> np.ndarray:
    """Indices of count spread-out points; the seed is the max-norm point.

    Greedy: each pick maximises the distance to the chosen set. Ties keep
    the lowest index. count >= N returns every index in order.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must be (N, 3)")
    n = pts.shape[0]
    if n == 0:
        raise ValueError("cannot sample an empty cloud")
    if count < 1:
        raise ValueError("count must be positive")
    if count >= n:
        return np.arange(n, dtype=np.int64)
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = int(np.argmax(np.einsum("ij,ij->i", pts, pts)))
    dist = np.sum((pts - pts[chosen[0]]) ** 2, axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        np.minimum(dist, np.sum((pts - pts[nxt]) ** 2, axis=1), out=dist)
    return chosen


def make_sparse_condition(cloud: np.ndarray, rate: float,
                          config: SensorConfig) -> ConditionImage:
    """Thin a cloud to ceil(N / rate) farthest-point samples and project it.

    rate 1 keeps the cloud as is. The two channels follow the normalised
    range-image domain, invalid pixels at -1.
    """
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] not in (3, 4):
        raise ValueError("cloud must be (N, 3) or (N, 4)")
    if pts.shape[0] == 0:
        raise ValueError("cannot build a condition from an empty cloud")
    if rate < 1:
        raise ValueError("rate must be >= 1")
    keep = math.ceil(pts.shape[0] / rate)
    if keep < pts.shape[0]:
        pts = pts[farthest_point_sample(pts[:, :3], keep)]
    image = project(pts, config)
    norm = normalize(image, config)
    data = np.moveaxis(norm.data, -1, 0).astype(np.float32)
    return ConditionImage(data=data, valid=image.valid.copy())


def make_semantic_condition(points: np.ndarray, labels: np.ndarray,
                            class_count: int,
                            config: SensorConfig) -> ConditionImage:
    """Project per-point class labels to a single-channel map in [0, 1).

    Pixel collisions resolve exactly like depth projection (nearest wins);
    a pixel holding class k reads k / class_count, invalid pixels read 0.
    """
    pts = np.asarray(points, dtype=np.float64)
    lab = np.asarray(labels)
    if class_count < 1:
        raise ValueError("class_count must be positive")
    if pts.ndim != 2 or pts.shape[1] not in (3, 4):
        raise ValueError("points must be (N, 3) or (N, 4)")
    if lab.shape != (pts.shape[0],):
        raise ValueError("labels must be one integer per point")
    if pts.shape[0] == 0:
        shape = (config.height, config.width)
        return ConditionImage(data=np.zeros((1,) + shape, dtype=np.float32),
                              valid=np.zeros(shape, dtype=bool))
    if not np.issubdtype(lab.dtype, np.integer):
        raise ValueError("labels must be integers")
    if lab.min() < 0 or lab.max() >= class_count:
        raise ValueError("labels must lie in [0, class_count)")
    tagged = np.column_stack([pts[:, :3], lab.astype(np.float64)])
    image = project(tagged, config)
    data = np.where(image.valid, image.intensity / class_count, 0.0)
    return ConditionImage(data=data[None].astype(np.float32),
                          valid=image.valid.copy())
