"""Lightweight reference segmenter (tiny 3-level U-Net) with train/eval loops
and a registry for plugging in alternative backbones."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import DatasetManifest
from .errors import ConfigError
from .metrics import miou

SEG_BACKBONES: dict = {}


def register_backbone(name: str):
    def deco(fn):
        SEG_BACKBONES[name] = fn
        return fn
    return deco


@dataclass
class SegConfig:
    epochs: int = 20
    learning_rate: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    backbone: str = "tiny-unet"
    class_weighting: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.learning_rate <= 0 or self.batch_size < 1:
            raise ConfigError("epochs, learning_rate and batch_size must be positive")
        if self.backbone not in SEG_BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; "
                              f"registered: {sorted(SEG_BACKBONES)}")


def _block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.GroupNorm(min(8, cout), cout), nn.SiLU(),
        nn.Conv2d(cout, cout, 3, padding=1), nn.GroupNorm(min(8, cout), cout), nn.SiLU())


class TinyUNet(nn.Module):
    """3-level encoder-decoder, ~0.5M parameters at base=24."""

    def __init__(self, n_classes: int, base: int = 24):
        super().__init__()
        self.enc1 = _block(3, base)
        self.enc2 = _block(base, base * 2)
        self.enc3 = _block(base * 2, base * 4)
        self.pool = nn.MaxPool2d(2)
        self.up2 = nn.ConvTranspose2d(base * 4, base * 2, 2, stride=2)
        self.dec2 = _block(base * 4, base * 2)
        self.up1 = nn.ConvTranspose2d(base * 2, base, 2, stride=2)
        self.dec1 = _block(base * 2, base)
        self.head = nn.Conv2d(base, n_classes, 1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        e3 = self.enc3(self.pool(e2))
        d2 = self.dec2(torch.cat([self.up2(e3), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return self.head(d1)


@register_backbone("tiny-unet")
def _tiny_unet(n_classes: int) -> nn.Module:
    return TinyUNet(n_classes)


@dataclass
class SegModel:
    net: nn.Module
    n_classes: int
    loss_history: list

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Per-pixel argmax class mask for one (h, w, 3) image in [-1, 1]."""
        self.net.eval()
        with torch.no_grad():
            x = torch.from_numpy(image.transpose(2, 0, 1)[None].astype(np.float32))
            return self.net(x).argmax(dim=1)[0].numpy().astype(np.int64)

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.net.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()[:16]


def _load_tensors(data: DatasetManifest):
    imgs, masks = [], []
    for s in data.load_all():
        imgs.append(s.image.transpose(2, 0, 1))
        masks.append(s.mask)
    return (torch.from_numpy(np.stack(imgs).astype(np.float32)),
            torch.from_numpy(np.stack(masks).astype(np.int64)))


def train_seg(data: DatasetManifest, cfg: SegConfig) -> SegModel:
    """Cross-entropy training over shuffled epochs; deterministic per seed."""
    if len(data) == 0:
        raise ConfigError("empty dataset")
    n_classes = data.class_map.n_defect + 1
    images, masks = _load_tensors(data)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    net = SEG_BACKBONES[cfg.backbone](n_classes)
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)

    weight = None
    if cfg.class_weighting:
        counts = np.bincount(masks.numpy().ravel(), minlength=n_classes).astype(np.float64)
        weight = torch.from_numpy((counts.sum() / np.maximum(counts, 1) / n_classes)
                                  .astype(np.float32))

    history = []
    n = len(images)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits = net(images[idx])
            loss = F.cross_entropy(logits, masks[idx], weight=weight)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.detach()))
        history.append(float(np.mean(epoch_losses)))
    return SegModel(net=net, n_classes=n_classes, loss_history=history)


def eval_seg(model: SegModel, data: DatasetManifest) -> dict:
    samples = data.load_all()
    preds = [model.predict(s.image) for s in samples]
    gts = [s.mask for s in samples]
    return miou(preds, gts, model.n_classes)
