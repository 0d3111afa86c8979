"""Few-shot denoiser training loop with deterministic reference mode."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import schedule as sched
from .data import DatasetManifest, concat_pair
from .errors import ConfigError
from .unet import UNetConfig, BlockSpec, build_denoiser, Denoiser


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 2
    iterations: int = 150_000
    weight_decay: float = 2e-3
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables intermediate checkpoints
    T: int = 200
    beta_start: float | None = None  # None -> rescaled 1000-step endpoints
    beta_end: float | None = None
    ema: bool = False
    ema_decay: float = 0.999

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")

    def make_schedule(self) -> sched.NoiseSchedule:
        if self.beta_start is None or self.beta_end is None:
            return sched.default_schedule(self.T)
        return sched.make_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class Checkpoint:
    state_dict: dict
    config: UNetConfig
    meta: dict = field(default_factory=dict)
    loss_history: list = field(default_factory=list)  # in-memory only, not persisted

    def build_model(self) -> Denoiser:
        model = build_denoiser(self.config)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model


def config_hash(config: UNetConfig) -> str:
    return hashlib.sha256(
        json.dumps(config.describe(), sort_keys=True).encode()).hexdigest()[:16]


def weights_hash(model_or_state) -> str:
    state = model_or_state.state_dict() if isinstance(model_or_state, torch.nn.Module) \
        else model_or_state
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


def encode_dataset(data: DatasetManifest) -> torch.Tensor:
    """All samples as a (N, C, H, W) float32 tensor."""
    xs = []
    for s in data.load_all():
        pair = concat_pair(s, data.class_map)
        xs.append(torch.from_numpy(pair.x.transpose(2, 0, 1)))
    return torch.stack(xs)


def train(config: UNetConfig, data: DatasetManifest, tc: TrainConfig,
          out_dir: Path | None = None, log_every: int = 0) -> Checkpoint:
    """Standard eps-prediction training: uniform t, AdamW with decoupled decay.

    Reference mode is the only mode: one worker, a single seeded RNG stream
    for batch indices / timesteps / noise, so runs are bit-reproducible.
    """
    if len(data) == 0:
        raise ConfigError("empty dataset")
    x0_all = encode_dataset(data)
    n, c, h, w = x0_all.shape
    if h != config.input_resolution or w != config.input_resolution:
        raise ConfigError(f"sample resolution {h}x{w} != config {config.input_resolution}")
    if c != config.in_channels:
        raise ConfigError(f"sample channels {c} != config in_channels {config.in_channels}")

    s = tc.make_schedule()
    rng = np.random.default_rng(tc.seed)
    torch.manual_seed(tc.seed)
    model = build_denoiser(config)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=tc.learning_rate,
                            betas=(0.9, 0.999), eps=1e-8, weight_decay=tc.weight_decay)
    ema_state = {k: v.detach().clone() for k, v in model.state_dict().items()} if tc.ema else None

    losses = []
    for it in range(tc.iterations):
        idx = rng.integers(0, n, size=tc.batch_size)
        t = rng.integers(1, s.T + 1, size=tc.batch_size)
        eps = torch.from_numpy(
            rng.standard_normal((tc.batch_size, c, h, w)).astype(np.float32))
        x0 = x0_all[idx]
        ab = torch.from_numpy(np.sqrt(s.alpha_bar[t - 1]).astype(np.float32))
        om = torch.from_numpy(np.sqrt(1.0 - s.alpha_bar[t - 1]).astype(np.float32))
        x_t = ab[:, None, None, None] * x0 + om[:, None, None, None] * eps

        eps_hat = model(x_t, torch.from_numpy(t.astype(np.float64)))
        loss = sched.training_loss(eps_hat, eps)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))

        if ema_state is not None:
            with torch.no_grad():
                for k, v in model.state_dict().items():
                    if v.dtype.is_floating_point:
                        ema_state[k].mul_(tc.ema_decay).add_(v, alpha=1 - tc.ema_decay)
                    else:
                        ema_state[k].copy_(v)
        if log_every and (it + 1) % log_every == 0:
            tail = losses[-log_every:]
            print(f"iter {it + 1}/{tc.iterations} loss {np.mean(tail):.4f}")
        if out_dir and tc.checkpoint_every and (it + 1) % tc.checkpoint_every == 0:
            ck = _make_checkpoint(model, config, tc, s, it + 1, losses, ema_state)
            save_checkpoint(ck, Path(out_dir) / f"ckpt_{it + 1:07d}.pt")

    ck = _make_checkpoint(model, config, tc, s, tc.iterations, losses, ema_state)
    if out_dir:
        save_checkpoint(ck, Path(out_dir) / "ckpt_final.pt")
    return ck


def _make_checkpoint(model, config, tc, s, iteration, losses, ema_state) -> Checkpoint:
    state = ema_state if ema_state is not None else model.state_dict()
    state = {k: v.detach().clone() for k, v in state.items()}
    meta = {
        "config_hash": config_hash(config),
        "config": config.describe(),
        "iteration": iteration,
        "seed": tc.seed,
        "loss_tail": [round(v, 6) for v in losses[-50:]],
        "schedule": {"T": s.T, "beta_start": float(s.beta[0]), "beta_end": float(s.beta[-1])},
        "train": {"learning_rate": tc.learning_rate, "batch_size": tc.batch_size,
                  "weight_decay": tc.weight_decay, "ema": tc.ema,
                  "adam_betas": [0.9, 0.999], "adam_eps": 1e-8},
    }
    return Checkpoint(state_dict=state, config=config, meta=meta,
                      loss_history=list(losses))


def save_checkpoint(ckpt: Checkpoint, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": ckpt.state_dict, "meta": ckpt.meta}, path)
    path.with_suffix(".meta.json").write_text(
        json.dumps(ckpt.meta, indent=1, sort_keys=True), encoding="utf-8")
    return path


def load_checkpoint(path: Path, expected_config: UNetConfig | None = None) -> Checkpoint:
    blob = torch.load(Path(path), weights_only=False)
    meta = blob["meta"]
    cd = meta["config"]
    config = UNetConfig(
        input_resolution=cd["input_resolution"],
        in_channels=cd["in_channels"],
        down_blocks=tuple(BlockSpec(c, s) for c, s in
                          zip(cd["down_channels"], cd["pool_strides"])),
        time_embed_dim=cd["time_embed_dim"],
        norm_groups=cd["norm_groups"],
        name=cd["name"],
    )
    if expected_config is not None and config_hash(expected_config) != meta["config_hash"]:
        raise ConfigError(
            f"checkpoint architecture hash {meta['config_hash']} does not match "
            f"expected {config_hash(expected_config)}")
    return Checkpoint(state_dict=blob["state_dict"], config=config, meta=meta)
