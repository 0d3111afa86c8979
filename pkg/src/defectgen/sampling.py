"""Single-model and two-stage reverse-diffusion sampling.

The two-stage sampler runs the large-receptive-field model for the first `u`
reverse steps (t = T .. T-u+1) to lay down global structure, then hands the
partially denoised state to the small-receptive-field model for the remaining
T-u steps. u = T degenerates to large-only sampling, u = 0 to small-only.

All noise comes from a counter-based stream keyed by (seed, sample index,
timestep), so trajectories that share a model on a step are bit-identical
regardless of which sampler produced them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import ClassMap, DefectSample, DatasetManifest, export_dataset, split_pair, validate_sample
from .errors import ConfigError
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class SamplerConfig:
    T: int
    u: int  # number of initial reverse steps run by the large model
    batch: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.u <= self.T:
            raise ConfigError(f"u must be in 0..T, got u={self.u}, T={self.T}")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")


def stream_noise(seed: int, sample_index: int, timestep: int, shape) -> np.ndarray:
    """Deterministic standard-normal draw for one (sample, timestep) cell."""
    rng = np.random.default_rng([seed, sample_index, timestep])
    return rng.standard_normal(shape)


def _init_state(cfg: SamplerConfig, shape) -> torch.Tensor:
    # x_T uses timestep key T+1 so it never collides with step noise
    x = np.stack([stream_noise(cfg.seed, i, cfg.T + 1, shape) for i in range(cfg.batch)])
    return torch.from_numpy(x.astype(np.float32))


def _step_noise(cfg: SamplerConfig, t: int, shape) -> torch.Tensor | None:
    if t == 1:
        return None
    x = np.stack([stream_noise(cfg.seed, i, t, shape) for i in range(cfg.batch)])
    return torch.from_numpy(x.astype(np.float32))


@torch.no_grad()
def _run_chain(model_for_t, s: NoiseSchedule, cfg: SamplerConfig, shape) -> torch.Tensor:
    from .schedule import reverse_step

    x = _init_state(cfg, shape)
    for t in range(s.T, 0, -1):
        eps_hat = model_for_t(t)(x, float(t))
        x = reverse_step(eps_hat, x, t, s, _step_noise(cfg, t, shape))
    return x


def _check_models(s, cfg, *models):
    if s.T != cfg.T:
        raise ConfigError(f"schedule T={s.T} != sampler T={cfg.T}")
    shapes = {(m.config.input_resolution, m.config.in_channels) for m in models}
    if len(shapes) != 1:
        raise ConfigError(f"models disagree on (resolution, channels): {shapes}")
    return shapes.pop()


def sample_single(model, s: NoiseSchedule, cfg: SamplerConfig) -> np.ndarray:
    """Full reverse chain with one model. Returns (batch, h, w, c) float32."""
    res, c = _check_models(s, cfg, model)
    model.eval()
    x = _run_chain(lambda t: model, s, cfg, (c, res, res))
    return x.numpy().transpose(0, 2, 3, 1)


def sample_two_stage(large, small, s: NoiseSchedule, cfg: SamplerConfig) -> np.ndarray:
    """Large model for steps T..T-u+1, small model for T-u..1."""
    res, c = _check_models(s, cfg, large, small)
    large.eval()
    small.eval()
    switch = s.T - cfg.u  # t > switch -> large
    x = _run_chain(lambda t: large if t > switch else small, s, cfg, (c, res, res))
    return x.numpy().transpose(0, 2, 3, 1)


@torch.no_grad()
def sample_u_sweep(large, small, s: NoiseSchedule, cfg: SamplerConfig,
                   u_list) -> dict[int, np.ndarray]:
    """Two-stage sampling for several u values in one pass.

    All u cells share the large-model prefix of the reverse chain (the noise
    stream is keyed by timestep, not by position in the chain), so one large
    trajectory is run to max(u) steps with snapshots at each requested switch
    point, and the small model continues from each snapshot. Output is
    bit-identical to calling sample_two_stage once per u.
    """
    from .schedule import reverse_step

    u_list = sorted(set(u_list))
    if not u_list:
        raise ConfigError("u_list must be non-empty")
    for u in u_list:
        if not 0 <= u <= cfg.T:
            raise ConfigError(f"u must be in 0..T, got u={u}, T={cfg.T}")
    res, c = _check_models(s, cfg, large, small)
    large.eval()
    small.eval()
    shape = (c, res, res)

    snapshots: dict[int, torch.Tensor] = {}
    x = _init_state(cfg, shape)
    if 0 in u_list:
        snapshots[0] = x.clone()
    for t in range(s.T, s.T - max(u_list), -1):
        eps_hat = large(x, float(t))
        x = reverse_step(eps_hat, x, t, s, _step_noise(cfg, t, shape))
        u_here = s.T - (t - 1)  # switching now means u_here large steps were run
        if u_here in u_list:
            snapshots[u_here] = x.clone()

    out: dict[int, np.ndarray] = {}
    for u, state in snapshots.items():
        x = state
        for t in range(s.T - u, 0, -1):
            eps_hat = small(x, float(t))
            x = reverse_step(eps_hat, x, t, s, _step_noise(cfg, t, shape))
        out[u] = x.numpy().transpose(0, 2, 3, 1)
    return out


def batch_hash(batch: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(batch).tobytes()).hexdigest()[:16]


def export_pairs(batch: np.ndarray, class_map: ClassMap, out_root: Path,
                 split: str = "synthetic", prefix: str = "gen",
                 meta: dict | None = None, threshold: float = 0.5) -> DatasetManifest:
    """Decode generated tensors into image/mask pairs and write a dataset."""
    samples = []
    for i, x in enumerate(batch):
        from .data import EncodedPair

        sample = split_pair(EncodedPair(x=x, n_defect=class_map.n_defect),
                            sample_id=f"{prefix}_{i:04d}", threshold=threshold)
        rep = validate_sample(sample, class_map)
        if not rep.ok:
            raise ValueError(f"generated sample {sample.sample_id} failed validation: "
                             + "; ".join(rep.violations))
        samples.append(sample)
    manifest = export_dataset(class_map, samples, Path(out_root), split=split,
                              provenance="synthetic")
    if meta is not None:
        (Path(out_root) / "generation_meta.json").write_text(
            json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")
    return manifest


def decode_batch(batch: np.ndarray, class_map: ClassMap,
                 prefix: str = "gen", threshold: float = 0.5) -> list[DefectSample]:
    from .data import EncodedPair

    return [split_pair(EncodedPair(x=x, n_defect=class_map.n_defect),
                       sample_id=f"{prefix}_{i:04d}", threshold=threshold)
            for i, x in enumerate(batch)]
