"""Two-stage training: joint learning of encoder + generator + denoiser,
then denoiser-only refinement with the encoder frozen.

All randomness flows from a single seed through named streams ("init",
"data", "noise", "timestep"), re-derived per iteration, so any step is
reproducible in isolation and across processes.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .colormap import color_map_batch
from .data import PairedSample, sample_patch
from .nets import ModelConfig, build_models, freeze
from .schedule import NoiseSchedule, build_schedule

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.1
    batch_size: int = 8
    patch_size: int = 128
    stage1_iters: int = 2000
    stage2_iters: int = 500
    lr0: float = 1e-3
    lr_milestones: tuple[int, ...] = (1_000, 10_000, 600_000)
    lr_factor: float = 0.5
    ema_decay: float = 0.999
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    hflip: bool = False
    use_color_map: bool = True  # False ablates the chromaticity condition
    # strength of training-time input perturbation: the noised state is
    # built from eps + gamma * xi (target stays eps), which makes the
    # denoiser robust to the slightly off-distribution states visited
    # during sampling; 0 disables
    input_perturbation: float = 0.0
    grad_clip: float = 0.0  # max gradient norm; 0 disables clipping
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in (0, 1)")
        if list(self.lr_milestones) != sorted(set(self.lr_milestones)):
            raise ValueError("lr_milestones must be strictly increasing")
        if self.patch_size % 8:
            raise ValueError("patch_size must be divisible by 8")
        if self.grad_clip < 0 or self.input_perturbation < 0:
            raise ValueError("grad_clip and input_perturbation must be >= 0")


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Piecewise-constant schedule: lr0 halved (lr_factor) at each milestone."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    decays = sum(1 for m in config.lr_milestones if m <= iteration)
    return config.lr0 * config.lr_factor**decays


def l1_loss(a, b):
    """Mean absolute difference over all elements."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def joint_loss(l_diff, l1, alpha: float):
    """Total objective: denoising loss plus alpha-weighted generation loss."""
    return l_diff + alpha * l1


def diffusion_loss(
    x0: torch.Tensor,
    y: torch.Tensor,
    encoder,
    denoiser,
    schedule: NoiseSchedule,
    noise_gen: torch.Generator,
    t_gen: torch.Generator,
    use_color_map: bool = True,
    input_perturbation: float = 0.0,
):
    """Noise-prediction MSE with per-sample uniform timesteps.

    Returns (loss, rep) so the caller can reuse the degradation maps for
    the generation branch without a second encoder pass.
    """
    if x0.shape != y.shape:
        raise ValueError("x0 / y batch shape mismatch")
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    b = x0.shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=t_gen)
    eps = torch.randn(x0.shape, generator=noise_gen, dtype=x0.dtype)
    eps_in = eps
    if input_perturbation:
        xi = torch.randn(x0.shape, generator=noise_gen, dtype=x0.dtype)
        eps_in = eps + input_perturbation * xi
    abar = torch.as_tensor(schedule.alpha_bars, dtype=x0.dtype)[t - 1]
    abar = abar.view(b, 1, 1, 1)
    # diffusion runs on zero-centered images (2x - 1)
    x_t = abar.sqrt() * (2.0 * x0 - 1.0) + (1.0 - abar).sqrt() * eps_in
    rep = encoder(y)
    cmap = color_map_batch(y) if use_color_map else torch.zeros_like(y)
    e = denoiser.predict_noise(x_t, y, rep, cmap, t)
    return ((e - eps) ** 2).mean(), rep


def ema_update(shadow, current, decay: float):
    """shadow' = decay * shadow + (1 - decay) * current, element-wise.

    Accepts tensors or name->tensor dicts; returns the updated container.
    """
    if isinstance(shadow, dict):
        return {k: ema_update(v, current[k], decay) for k, v in shadow.items()}
    if shadow.shape != current.shape:
        raise ValueError("EMA shape mismatch")
    return decay * shadow + (1.0 - decay) * current


class EMA:
    """Shadow copy of a module's parameters, never touched by gradients."""

    def __init__(self, module: nn.Module, decay: float):
        self.decay = decay
        self.shadow = {
            k: v.detach().clone() for k, v in module.state_dict().items()
        }

    def update(self, module: nn.Module):
        current = module.state_dict()
        self.shadow = {
            k: ema_update(v, current[k].detach(), self.decay)
            if torch.is_floating_point(v)
            else current[k].detach().clone()
            for k, v in self.shadow.items()
        }

    def copy_to(self, module: nn.Module):
        module.load_state_dict(self.shadow)


@dataclass
class Checkpoint:
    stage: int
    iteration: int
    schedule_config: dict
    model_config: ModelConfig
    train_config: TrainConfig
    encoder_state: dict
    dgnet_state: dict
    denoiser_state: dict
    ema_state: dict
    optimizer_state: dict | None = None

    def save(self, path: Path | str):
        payload = {
            "version": CHECKPOINT_VERSION,
            "stage": self.stage,
            "iteration": self.iteration,
            "schedule_config": dict(self.schedule_config),
            "model_config": dataclasses.asdict(self.model_config),
            "train_config": dataclasses.asdict(self.train_config),
            "encoder_state": self.encoder_state,
            "dgnet_state": self.dgnet_state,
            "denoiser_state": self.denoiser_state,
            "ema_state": self.ema_state,
            "optimizer_state": self.optimizer_state,
        }
        torch.save(payload, path)

    @classmethod
    def load(cls, path: Path | str) -> "Checkpoint":
        payload = torch.load(path, weights_only=False)
        version = payload.pop("version", None)
        if version != CHECKPOINT_VERSION:
            raise ValueError(
                f"checkpoint version {version!r} != supported {CHECKPOINT_VERSION}"
            )
        payload["model_config"] = ModelConfig(**payload["model_config"])
        tc = dict(payload["train_config"])
        tc["lr_milestones"] = tuple(tc["lr_milestones"])
        payload["train_config"] = TrainConfig(**tc)
        return cls(**payload)

    def schedule(self) -> NoiseSchedule:
        return build_schedule(**self.schedule_config)


def stream_seed(seed: int, stream: str, iteration: int = 0) -> int:
    """Stable 63-bit seed for a named stream at a given iteration."""
    digest = hashlib.sha256(f"{seed}/{stream}/{iteration}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def _generator(seed: int, stream: str, iteration: int = 0) -> torch.Generator:
    return torch.Generator().manual_seed(stream_seed(seed, stream, iteration))


def param_hash(module: nn.Module) -> str:
    """Order-stable SHA-256 of all parameters and buffers."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _make_batch(
    dataset: list[PairedSample],
    config: TrainConfig,
    iteration: int,
    dtype: torch.dtype,
):
    rng = np.random.default_rng(stream_seed(config.seed, "data", iteration))
    # balanced draw: permutations without replacement, repeated as needed,
    # so small datasets are covered evenly within each batch
    n = len(dataset)
    reps = -(-config.batch_size // n)
    idx = np.concatenate([rng.permutation(n) for _ in range(reps)])[: config.batch_size]
    lows, highs = [], []
    for i in idx:
        pair = dataset[int(i)]
        size = min(config.patch_size, *pair.low.shape[:2])
        patch = sample_patch(pair, size, rng)
        low, high = patch.low, patch.high
        if config.hflip and rng.random() < 0.5:
            low, high = low[:, ::-1].copy(), high[:, ::-1].copy()
        lows.append(low)
        highs.append(high)
    to_tensor = lambda ims: torch.as_tensor(
        np.stack(ims).transpose(0, 3, 1, 2), dtype=dtype
    )
    return to_tensor(highs), to_tensor(lows)  # x0 (normal light), y (low light)


def _loss_log_writer(path: Path | None):
    if path is None:
        return None
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    f = open(path, "a")
    if new:
        f.write("iteration,lr,l_diff,l1,l_total\n")
    return f


def _run_stage(
    stage: int,
    config: TrainConfig,
    dataset: list[PairedSample],
    encoder,
    dgnet,
    denoiser,
    ema: EMA,
    schedule: NoiseSchedule,
    start_iter: int,
    num_iters: int,
    optimizer_state: dict | None,
    dtype: torch.dtype,
    log_path: Path | None,
    checkpoint_path: Path | None = None,
    checkpoint_every: int = 0,
    schedule_config: dict | None = None,
    model_config: ModelConfig | None = None,
):
    if not dataset:
        raise ValueError("dataset is empty")
    if stage == 1:
        params = (
            list(encoder.parameters())
            + list(dgnet.parameters())
            + list(denoiser.parameters())
        )
    else:
        params = list(denoiser.parameters())
    optimizer = torch.optim.Adam(
        params, lr=config.lr0, betas=(config.adam_beta1, config.adam_beta2)
    )
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)

    log = _loss_log_writer(log_path)
    losses = []

    def make_checkpoint(iteration):
        return Checkpoint(
            stage=stage,
            iteration=iteration,
            schedule_config=schedule_config
            or {"T": schedule.T, "beta_start": schedule.beta_start, "beta_end": schedule.beta_end},
            model_config=model_config,
            train_config=config,
            encoder_state=encoder.state_dict(),
            dgnet_state=dgnet.state_dict(),
            denoiser_state=denoiser.state_dict(),
            ema_state=dict(ema.shadow),
            optimizer_state=optimizer.state_dict(),
        )

    try:
        for it in range(start_iter, start_iter + num_iters):
            lr = lr_at(it, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            x0, y = _make_batch(dataset, config, it, dtype)
            noise_gen = _generator(config.seed, "noise", it)
            t_gen = _generator(config.seed, "timestep", it)
            l_diff, rep = diffusion_loss(
                x0, y, encoder, denoiser, schedule, noise_gen, t_gen,
                use_color_map=config.use_color_map,
                input_perturbation=config.input_perturbation,
            )
            if stage == 1:
                l1 = l1_loss(y, dgnet(x0, rep))
                total = joint_loss(l_diff, l1, config.alpha)
            else:
                l1 = None
                total = l_diff
            if not torch.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss {float(total.detach())} at iteration {it}"
                )
            optimizer.zero_grad()
            total.backward()
            if config.grad_clip:
                nn.utils.clip_grad_norm_(params, config.grad_clip)
            optimizer.step()
            ema.update(denoiser)

            row = (
                it,
                lr,
                float(l_diff.detach()),
                float(l1.detach()) if l1 is not None else float("nan"),
                float(total.detach()),
            )
            losses.append(row)
            if log:
                log.write(
                    f"{row[0]},{row[1]:.8g},{row[2]:.8g},{row[3]:.8g},{row[4]:.8g}\n"
                )
            if checkpoint_path and checkpoint_every and (it + 1) % checkpoint_every == 0:
                make_checkpoint(it + 1).save(checkpoint_path)
    finally:
        if log:
            log.close()

    return make_checkpoint(start_iter + num_iters), losses


def train_stage1(
    config: TrainConfig,
    dataset: list[PairedSample],
    schedule: NoiseSchedule | None = None,
    model_config: ModelConfig | None = None,
    resume: Checkpoint | None = None,
    dtype: torch.dtype = torch.float32,
    log_path: Path | None = None,
    checkpoint_path: Path | None = None,
    checkpoint_every: int = 0,
    num_iters: int | None = None,
):
    """Joint optimization of encoder, generator and denoiser (Stage 1)."""
    if resume is not None:
        if resume.stage != 1:
            raise ValueError(f"cannot resume stage 1 from a stage-{resume.stage} checkpoint")
        schedule = resume.schedule()
        model_config = resume.model_config
        encoder, dgnet, denoiser = build_models(model_config)
        _load_all(encoder, dgnet, denoiser, resume, dtype)
        ema = EMA(denoiser, config.ema_decay)
        ema.shadow = {k: v.to(dtype) for k, v in resume.ema_state.items()}
        start, opt_state = resume.iteration, resume.optimizer_state
    else:
        schedule = schedule or build_schedule()
        model_config = model_config or ModelConfig()
        encoder, dgnet, denoiser = build_models(
            model_config, _generator(config.seed, "init")
        )
        for m in (encoder, dgnet, denoiser):
            m.to(dtype)
        ema = EMA(denoiser, config.ema_decay)
        start, opt_state = 0, None
    remaining = num_iters if num_iters is not None else config.stage1_iters - start
    return _run_stage(
        1, config, dataset, encoder, dgnet, denoiser, ema, schedule,
        start, max(remaining, 0), opt_state, dtype, log_path,
        checkpoint_path, checkpoint_every, model_config=model_config,
    )


def train_stage2(
    config: TrainConfig,
    stage1_ckpt: Checkpoint,
    dataset: list[PairedSample],
    dtype: torch.dtype = torch.float32,
    log_path: Path | None = None,
    checkpoint_path: Path | None = None,
    checkpoint_every: int = 0,
    num_iters: int | None = None,
):
    """Denoiser-only refinement with the encoder frozen (Stage 2).

    The generator is excluded from gradients entirely; optimizer moments
    start fresh because the objective changes at the stage boundary.
    """
    if stage1_ckpt.stage not in (1, 2):
        raise ValueError(f"invalid checkpoint stage {stage1_ckpt.stage}")
    schedule = stage1_ckpt.schedule()
    encoder, dgnet, denoiser = build_models(stage1_ckpt.model_config)
    _load_all(encoder, dgnet, denoiser, stage1_ckpt, dtype)
    freeze(encoder)
    freeze(dgnet)
    ema = EMA(denoiser, config.ema_decay)
    ema.shadow = {k: v.to(dtype) for k, v in stage1_ckpt.ema_state.items()}
    if stage1_ckpt.stage == 2:
        start, opt_state = stage1_ckpt.iteration, stage1_ckpt.optimizer_state
    else:
        start, opt_state = 0, None
    remaining = num_iters if num_iters is not None else config.stage2_iters - start
    return _run_stage(
        2, config, dataset, encoder, dgnet, denoiser, ema, schedule,
        start, max(remaining, 0), opt_state, dtype, log_path,
        checkpoint_path, checkpoint_every,
        schedule_config=stage1_ckpt.schedule_config,
        model_config=stage1_ckpt.model_config,
    )


def _load_all(encoder, dgnet, denoiser, ckpt: Checkpoint, dtype: torch.dtype):
    # convert before loading so higher-precision states aren't truncated
    for m in (encoder, dgnet, denoiser):
        m.to(dtype)
    encoder.load_state_dict(ckpt.encoder_state)
    dgnet.load_state_dict(ckpt.dgnet_state)
    denoiser.load_state_dict(ckpt.denoiser_state)


def restore_models(ckpt: Checkpoint, use_ema: bool = True):
    """Rebuild (encoder, dgnet, denoiser) from a checkpoint for inference.

    With use_ema the denoiser carries the EMA shadow weights.
    """
    encoder, dgnet, denoiser = build_models(ckpt.model_config)
    encoder.load_state_dict(ckpt.encoder_state)
    dgnet.load_state_dict(ckpt.dgnet_state)
    denoiser.load_state_dict(ckpt.ema_state if use_ema else ckpt.denoiser_state)
    for m in (encoder, dgnet, denoiser):
        m.eval()
    return encoder, dgnet, denoiser
