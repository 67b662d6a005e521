"""Joint training of the denoiser and its reconstruction guide.

One step: corrupt a clean batch at per-sample timesteps, predict v, let the
guide reconstruct the clean image from the denoiser's feature pyramid, and
minimize weighted Huber(v) + MSE(recon) + lambda * (1 - cosine) feature
alignment. The guide trains jointly for gn_active_steps, then freezes and
keeps serving as a gradient-blocked teacher for the alignment term. An EMA
shadow of the denoiser is maintained for sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .schedule import NoiseSchedule, min_snr_weight

LOG_COLUMNS = ("step", "loss_denoise", "loss_guidance", "loss_align", "lambda", "lr")


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of one training run.

    lambda_interval * len(lambda_values) should not exceed gn_active_steps;
    past the end of the ladder lambda simply continues at its last value.
    """

    total_steps: int = 2000
    gn_active_steps: int = 2000
    lambda_values: tuple = (0.001, 0.01, 0.1, 1.0)
    lambda_interval: int = 500
    snr_gamma: float = 5.0
    cfg_dropout: float = 0.1
    ema_decay: float = 0.9997
    ema_update_every: int = 1
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 1
    scrg: bool = True
    align_after_freeze: bool = True

    def __post_init__(self):
        if self.total_steps < 1 or self.lambda_interval < 1 or self.ema_update_every < 1:
            raise ValueError("step counts must be positive")
        if not self.lambda_values:
            raise ValueError("need at least one lambda value")
        for name in ("cfg_dropout", "ema_decay"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning rate and batch size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        fixed = dict(data)
        if "lambda_values" in fixed:
            fixed["lambda_values"] = tuple(fixed["lambda_values"])
        return cls(**fixed)


def loss_denoise(v_hat, v, weight):
    """Per-sample Huber (delta=1) averaged over pixels, scaled by weight."""
    if v_hat.shape != v.shape:
        raise ValueError("prediction and target shapes differ")
    per = F.huber_loss(v_hat, v, delta=1.0, reduction="none")
    per = per.mean(dim=tuple(range(1, per.dim())))
    return (weight * per).mean()


def loss_guidance(x0_recon, x0):
    if x0_recon.shape != x0.shape:
        raise ValueError("reconstruction and target shapes differ")
    return F.mse_loss(x0_recon, x0)


def loss_align(f_recon, f_noise):
    """Mean over stages of mean (1 - cosine) between per-position channel vectors."""
    if len(f_recon) != len(f_noise):
        raise ValueError("pyramids have different depths")
    terms = []
    for a, b in zip(f_recon, f_noise):
        if a.shape != b.shape:
            raise ValueError(f"pyramid stage shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        terms.append((1.0 - F.cosine_similarity(a, b, dim=1)).mean())
    return sum(terms) / len(terms)


def lambda_of_step(step: int, config: TrainConfig) -> float:
    if step < 0:
        raise ValueError("step must be nonnegative")
    idx = min(step // config.lambda_interval, len(config.lambda_values) - 1)
    return float(config.lambda_values[idx])


def learning_rate_of_step(step: int, config: TrainConfig) -> float:
    """Cosine decay from the base rate to zero across total_steps."""
    frac = min(max(step, 0), config.total_steps) / config.total_steps
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * frac))


def cfg_dropout_mask(rng: np.random.Generator, batch: int, rate: float) -> np.ndarray:
    """Per-sample decision to replace the text tokens by the null token."""
    return rng.random(batch) < rate


class EMATracker:
    """Exponential moving average of a module's parameters."""

    def __init__(self, module: torch.nn.Module, decay: float):
        self.decay = decay
        self.shadow = {name: p.detach().clone()
                       for name, p in module.named_parameters()}

    def update(self, module: torch.nn.Module) -> None:
        with torch.no_grad():
            for name, p in module.named_parameters():
                self.shadow[name].lerp_(p.detach(), 1.0 - self.decay)

    def copy_to(self, module: torch.nn.Module) -> None:
        with torch.no_grad():
            for name, p in module.named_parameters():
                p.copy_(self.shadow[name])

    def arrays(self, prefix: str = "ema.") -> dict:
        return {prefix + name: t.cpu().numpy().astype("<f4")
                for name, t in self.shadow.items()}


def corrupt_batch(rng, x0: torch.Tensor, schedule: NoiseSchedule, snr_gamma: float,
                  sqrt_ab: np.ndarray, sqrt_1mab: np.ndarray):
    """Draw (t, eps) for a batch and return (x_t, v_target, t, weight).

    Consumes the rng in a fixed order (one t vector, one eps block) so
    same-seed runs stay step-for-step comparable. sqrt_ab and sqrt_1mab are
    the precomputed per-step tables indexed by t.
    """
    batch = x0.shape[0]
    t_np = rng.integers(1, schedule.num_steps + 1, size=batch)
    eps = torch.as_tensor(
        rng.standard_normal(tuple(x0.shape)).astype(np.float32)).to(x0.dtype)
    sa = torch.as_tensor(sqrt_ab[t_np], dtype=x0.dtype)
    sb = torch.as_tensor(sqrt_1mab[t_np], dtype=x0.dtype)
    expand = (slice(None),) + (None,) * (x0.dim() - 1)
    x_t = sa[expand] * x0 + sb[expand] * eps
    v = sa[expand] * eps - sb[expand] * x0
    weight = torch.as_tensor(
        [min_snr_weight(int(t), schedule, snr_gamma) for t in t_np],
        dtype=x0.dtype)
    return x_t, v, torch.as_tensor(t_np), weight


class Trainer:
    """Owns the optimizer, EMA, freeze policy, and rng for one run.

    dn must behave like dn(x_t, t, text, text_mask) -> (v_hat, pyramid) and
    gn like gn(x0, pyramid) -> (x0_recon, pyramid); the pyramids must be
    shape-congruent lists. Pass gn=None (or scrg=False) for a plain
    denoise-only run.
    """

    def __init__(self, dn, gn, schedule: NoiseSchedule, config: TrainConfig, seed: int):
        self.dn = dn
        self.gn = gn if config.scrg else None
        self.schedule = schedule
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.step_count = 0
        params = [{"params": list(dn.parameters())}]
        if self.gn is not None:
            params.append({"params": list(self.gn.parameters())})
        self.opt = torch.optim.AdamW(params, lr=config.learning_rate,
                                     weight_decay=config.weight_decay)
        self.ema = EMATracker(dn, config.ema_decay)
        self._frozen = False
        ab = np.asarray(schedule.alpha_bar, dtype=np.float64)
        self._sqrt_ab = np.sqrt(ab)
        self._sqrt_1mab = np.sqrt(1.0 - ab)

    def _freeze_gn(self) -> None:
        if self.gn is not None and not self._frozen:
            for p in self.gn.parameters():
                p.requires_grad_(False)
            self._frozen = True

    def _corrupt(self, x0: torch.Tensor):
        return corrupt_batch(self.rng, x0, self.schedule, self.config.snr_gamma,
                             self._sqrt_ab, self._sqrt_1mab)

    def _apply_cfg_dropout(self, text, null_token):
        drop = cfg_dropout_mask(self.rng, text.shape[0], self.config.cfg_dropout)
        if not drop.any():
            return text
        # replacing every row by the null token is equivalent to a single
        # null token (duplicated-context identity), so the mask stays valid
        mask = torch.as_tensor(drop)[:, None, None]
        return torch.where(mask, null_token.to(text.dtype).expand_as(text), text)

    def train_step(self, x0: torch.Tensor, text=None, text_mask=None) -> dict:
        cfg = self.config
        step = self.step_count
        joint = self.gn is not None and step < cfg.gn_active_steps
        if self.gn is not None and step >= cfg.gn_active_steps:
            self._freeze_gn()

        lr = learning_rate_of_step(step, cfg)
        for group in self.opt.param_groups:
            group["lr"] = lr
        lam = lambda_of_step(step, cfg)

        if text is not None and cfg.cfg_dropout > 0:
            text = self._apply_cfg_dropout(text, self.dn.null_token)
        x_t, v, t, weight = self._corrupt(x0)

        v_hat, f_noise = self.dn(x_t, t, text, text_mask)
        ld = loss_denoise(v_hat, v, weight)
        lg = v_hat.new_zeros(())
        la = v_hat.new_zeros(())
        if joint:
            x0_recon, f_recon = self.gn(x0, f_noise)
            lg = loss_guidance(x0_recon, x0)
            la = loss_align(f_recon, f_noise)
        elif self.gn is not None and cfg.align_after_freeze:
            with torch.no_grad():
                _, f_teacher = self.gn(x0, [p.detach() for p in f_noise])
            la = loss_align([p.detach() for p in f_teacher], f_noise)
        total = ld + lg + lam * la

        if not torch.isfinite(total):
            raise RuntimeError(
                f"non-finite loss at step {step}: denoise={float(ld.detach())} "
                f"guidance={float(lg.detach())} align={float(la.detach())}")

        self.opt.zero_grad(set_to_none=True)
        total.backward()
        self.opt.step()
        self.step_count += 1
        if self.step_count % cfg.ema_update_every == 0:
            self.ema.update(self.dn)

        return {
            "step": step,
            "loss_denoise": float(ld.detach()),
            "loss_guidance": float(lg.detach()),
            "loss_align": float(la.detach()),
            "lambda": lam,
            "lr": lr,
            "loss_total": float(total.detach()),
        }


class Batcher:
    """Serves batches from an in-memory dataset of normalized images.

    images: (N, C, H, W) float32. embeddings: optional list of (n_i, 768)
    arrays, one per image; heterogeneous token counts are padded with zeros
    under a validity mask.
    """

    def __init__(self, images, embeddings=None):
        self.images = torch.as_tensor(np.asarray(images, dtype=np.float32))
        if self.images.dim() != 4:
            raise ValueError("images must be (N, C, H, W)")
        if embeddings is not None and len(embeddings) != self.images.shape[0]:
            raise ValueError("one embedding set per image required")
        self.embeddings = embeddings

    def __len__(self):
        return self.images.shape[0]

    def sample(self, rng: np.random.Generator, batch: int):
        idx = rng.integers(0, len(self), size=batch)
        x0 = self.images[torch.as_tensor(idx)]
        if self.embeddings is None:
            return x0, None, None
        rows = [np.asarray(self.embeddings[i], dtype=np.float32) for i in idx]
        width = max(1, max(r.shape[0] for r in rows))
        dim = rows[0].shape[1]
        text = np.zeros((batch, width, dim), dtype=np.float32)
        mask = np.zeros((batch, width), dtype=bool)
        for i, r in enumerate(rows):
            text[i, :r.shape[0]] = r
            mask[i, :r.shape[0]] = True
        return x0, torch.as_tensor(text), torch.as_tensor(mask)


def run_training(dn, gn, batcher: Batcher, schedule: NoiseSchedule,
                 config: TrainConfig, seed: int, log_stream=None,
                 progress_every: int = 0) -> dict:
    """Run config.total_steps steps; returns the loss history."""
    trainer = Trainer(dn, gn, schedule, config, seed)
    data_rng = np.random.default_rng(seed + 1)
    history = {key: [] for key in ("loss_denoise", "loss_guidance", "loss_align")}
    if log_stream is not None:
        log_stream.write(",".join(LOG_COLUMNS) + "\n")
    for _ in range(config.total_steps):
        x0, text, mask = batcher.sample(data_rng, config.batch_size)
        report = trainer.train_step(x0, text, mask)
        for key in history:
            history[key].append(report[key])
        if log_stream is not None:
            log_stream.write(",".join(
                str(report[k]) if k == "step" else f"{report[k]:.6g}"
                for k in LOG_COLUMNS) + "\n")
        if progress_every and (report["step"] + 1) % progress_every == 0:
            print(f"step {report['step'] + 1}/{config.total_steps} "
                  f"denoise {report['loss_denoise']:.4f}", flush=True)
    history["trainer"] = trainer
    return history
