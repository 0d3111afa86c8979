"""Dataset schema, on-disk format, mask encoding and the procedural toy dataset.

Samples are (image, indexed mask) pairs. For generator training the pair is
packed into a single tensor: RGB channels in [-1, 1] followed by one binary
plane per defect class, so a dataset with n defect classes yields tensors
with n + 3 channels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DatasetError

# largest pool factor of any built-in model preset; sample resolutions must divide it
DEFAULT_POOL_FACTOR = 32

TOY_DEFECT_KINDS = ("blob", "scratch", "stain")


@dataclass(frozen=True)
class ClassMap:
    """Ordered defect-class names; index 0 is always background."""

    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) < 1 or self.names[0] != "background":
            raise ConfigError("class map must start with 'background' at index 0")
        if any(not n for n in self.names):
            raise ConfigError("class names must be non-empty")
        if len(set(self.names)) != len(self.names):
            raise ConfigError("class names must be unique")

    @property
    def n_defect(self) -> int:
        return len(self.names) - 1

    @property
    def n_total(self) -> int:
        return self.n_defect + 3

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"unknown class name: {name!r}") from None

    def to_dict(self) -> dict[str, str]:
        return {str(i): n for i, n in enumerate(self.names)}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassMap":
        try:
            names = tuple(d[str(i)] for i in range(len(d)))
        except KeyError as e:
            raise ConfigError(f"class map indices not contiguous: missing {e}") from None
        return cls(names)


@dataclass
class DefectSample:
    image: np.ndarray  # (h, w, 3) float32 in [-1, 1]
    mask: np.ndarray  # (h, w) integer, values in 0..n_defect
    sample_id: str
    caption: str | None = None


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, msg: str):
        self.violations.append(msg)


@dataclass
class EncodedPair:
    """Image + one-hot mask planes packed channel-last, (h, w, n_defect + 3)."""

    x: np.ndarray
    n_defect: int


@dataclass
class DatasetManifest:
    root: Path
    split: str
    sample_ids: list[str]
    class_map: ClassMap
    provenance: dict[str, str]  # sample_id -> "real" | "synthetic"

    def __len__(self):
        return len(self.sample_ids)

    def image_path(self, sample_id: str) -> Path:
        return self.root / self.split / "images" / f"{sample_id}.png"

    def mask_path(self, sample_id: str) -> Path:
        return self.root / self.split / "masks" / f"{sample_id}.png"

    def load_sample(self, sample_id: str, captions: dict[str, str] | None = None) -> DefectSample:
        ip, mp = self.image_path(sample_id), self.mask_path(sample_id)
        if not ip.exists():
            raise DatasetError(f"missing image file for sample {sample_id!r}: {ip}")
        if not mp.exists():
            raise DatasetError(f"missing mask file for sample {sample_id!r}: {mp}")
        img = np.asarray(Image.open(ip).convert("RGB"), dtype=np.float32)
        image = img / 255.0 * 2.0 - 1.0
        mask = np.asarray(Image.open(mp), dtype=np.int64)
        if mask.ndim == 3:
            mask = mask[..., 0].astype(np.int64)
        caption = (captions or {}).get(sample_id)
        return DefectSample(image=image, mask=mask, sample_id=sample_id, caption=caption)

    def load_all(self) -> list[DefectSample]:
        captions = load_captions(self.root)
        return [self.load_sample(sid, captions) for sid in self.sample_ids]


def validate_sample(sample: DefectSample, class_map: ClassMap,
                    pool_factor: int = DEFAULT_POOL_FACTOR) -> ValidationReport:
    """Check every sample invariant; report is empty iff all hold."""
    rep = ValidationReport()
    img, mask = sample.image, sample.mask
    if img.ndim != 3 or img.shape[2] != 3:
        rep.add(f"image must be h x w x 3, got shape {img.shape}")
        return rep
    if mask.ndim != 2:
        rep.add(f"mask must be h x w, got shape {mask.shape}")
        return rep
    if img.shape[:2] != mask.shape:
        rep.add(f"shape mismatch: image {img.shape[:2]} vs mask {mask.shape}")
    lo, hi = float(img.min()), float(img.max())
    if lo < -1.0 or hi > 1.0:
        rep.add(f"image values outside [-1, 1]: min {lo:.4f}, max {hi:.4f}")
    n = class_map.n_defect
    bad = np.argwhere(~np.isin(mask, np.arange(n + 1)))
    for r, c in bad[:10]:
        rep.add(f"mask value out of range at ({r},{c}): {int(mask[r, c])} (n_defect={n})")
    h, w = mask.shape if mask.ndim == 2 else (0, 0)
    for dim, name in ((img.shape[0], "h"), (img.shape[1], "w")):
        if dim % pool_factor != 0:
            rep.add(f"{name}={dim} not a multiple of pool factor {pool_factor}")
    return rep


def one_hot_encode(mask: np.ndarray, n_defect: int) -> np.ndarray:
    """Index mask -> (h, w, n_defect) binary planes; background stays all-zero."""
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() > n_defect:
        bad = int(mask.max() if mask.max() > n_defect else mask.min())
        raise ValueError(f"mask value {bad} outside 0..{n_defect}")
    planes = np.zeros(mask.shape + (n_defect,), dtype=np.float32)
    for k in range(n_defect):
        planes[..., k] = (mask == k + 1)
    return planes


def decode_mask(planes: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Inverse of one_hot_encode for soft planes; ties go to the lowest class index."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0,1), got {threshold}")
    planes = np.asarray(planes)
    best = np.argmax(planes, axis=-1)  # argmax already picks lowest index on ties
    hit = np.max(planes, axis=-1) >= threshold
    return np.where(hit, best + 1, 0).astype(np.int64)


def concat_pair(sample: DefectSample, class_map: ClassMap) -> EncodedPair:
    rep = validate_sample(sample, class_map)
    if not rep.ok:
        raise ValueError("invalid sample: " + "; ".join(rep.violations))
    planes = one_hot_encode(sample.mask, class_map.n_defect)
    x = np.concatenate([sample.image.astype(np.float32), planes], axis=-1)
    return EncodedPair(x=x, n_defect=class_map.n_defect)


def split_pair(pair: EncodedPair, sample_id: str = "", threshold: float = 0.5) -> DefectSample:
    """Unpack an encoded tensor back into image + indexed mask."""
    img = np.clip(pair.x[..., :3], -1.0, 1.0).astype(np.float32)
    mask = decode_mask(pair.x[..., 3:], threshold=threshold)
    return DefectSample(image=img, mask=mask, sample_id=sample_id)


# ---------------------------------------------------------------------------
# on-disk format


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round((image + 1.0) / 2.0 * 255.0), 0, 255).astype(np.uint8)


def load_captions(root: Path) -> dict[str, str]:
    path = Path(root) / "captions.jsonl"
    if not path.exists():
        return {}
    caps = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            caps[rec["sample_id"]] = rec["caption"]
    return caps


def export_dataset(manifest_or_class_map, samples: list[DefectSample], root: Path,
                   split: str = "train", provenance: str | dict = "real") -> DatasetManifest:
    """Write samples in the canonical layout and return the resulting manifest."""
    class_map = (manifest_or_class_map.class_map
                 if isinstance(manifest_or_class_map, DatasetManifest)
                 else manifest_or_class_map)
    root = Path(root)
    (root / split / "images").mkdir(parents=True, exist_ok=True)
    (root / split / "masks").mkdir(parents=True, exist_ok=True)
    cm_path = root / "classmap.json"
    cm_path.write_text(json.dumps(class_map.to_dict(), indent=1, sort_keys=True), encoding="utf-8")

    prov = {}
    captions = []
    for s in samples:
        tag = provenance if isinstance(provenance, str) else provenance[s.sample_id]
        prov[s.sample_id] = tag
        Image.fromarray(image_to_uint8(s.image)).save(root / split / "images" / f"{s.sample_id}.png")
        if s.mask.max() > 255:
            raise DatasetError(f"sample {s.sample_id}: class index exceeds 8-bit mask range")
        Image.fromarray(s.mask.astype(np.uint8), mode="L").save(root / split / "masks" / f"{s.sample_id}.png")
        if s.caption:
            captions.append({"sample_id": s.sample_id, "caption": s.caption})

    if captions:
        with (root / "captions.jsonl").open("a", encoding="utf-8") as f:
            for rec in captions:
                f.write(json.dumps(rec, sort_keys=True) + "\n")

    manifest = DatasetManifest(root=root, split=split,
                               sample_ids=[s.sample_id for s in samples],
                               class_map=class_map, provenance=prov)
    mpath = root / split / "manifest.json"
    mpath.write_text(json.dumps(
        {"split": split,
         "samples": [{"sample_id": sid, "provenance": prov[sid]} for sid in manifest.sample_ids]},
        indent=1, sort_keys=True), encoding="utf-8")
    return manifest


def load_dataset(root: Path, split: str) -> DatasetManifest:
    root = Path(root)
    cm_path = root / "classmap.json"
    if not cm_path.exists():
        raise DatasetError(f"missing classmap file: {cm_path}")
    class_map = ClassMap.from_dict(json.loads(cm_path.read_text(encoding="utf-8")))

    split_dir = root / split
    mpath = split_dir / "manifest.json"
    if mpath.exists():
        records = json.loads(mpath.read_text(encoding="utf-8"))["samples"]
    elif split_dir.exists():
        ids = sorted(p.stem for p in (split_dir / "images").glob("*.png")) \
            if (split_dir / "images").exists() else []
        records = [{"sample_id": sid, "provenance": "real"} for sid in ids]
    else:
        records = []

    manifest = DatasetManifest(root=root, split=split,
                               sample_ids=[r["sample_id"] for r in records],
                               class_map=class_map,
                               provenance={r["sample_id"]: r["provenance"] for r in records})
    for sid in manifest.sample_ids:
        if not manifest.image_path(sid).exists():
            raise DatasetError(f"missing image file for sample {sid!r}")
        if not manifest.mask_path(sid).exists():
            raise DatasetError(f"missing mask file for sample {sid!r}")
    return manifest


# ---------------------------------------------------------------------------
# procedural toy dataset


@dataclass(frozen=True)
class ToySpec:
    count: int = 25
    h: int = 32
    w: int = 32
    n_defect: int = 2
    defect_kinds: tuple[str, ...] = ()
    seed: int = 0
    pool_factor: int = DEFAULT_POOL_FACTOR

    def resolved_kinds(self) -> tuple[str, ...]:
        kinds = self.defect_kinds or TOY_DEFECT_KINDS[: self.n_defect]
        if len(kinds) != self.n_defect:
            raise ConfigError(f"need exactly n_defect={self.n_defect} defect kinds, got {kinds}")
        if not set(kinds) <= set(TOY_DEFECT_KINDS):
            raise ConfigError(f"unknown defect kinds: {set(kinds) - set(TOY_DEFECT_KINDS)}")
        return tuple(kinds)


def _banded_background(h, w, rng) -> np.ndarray:
    base = rng.integers(70, 170, size=3)
    period = rng.uniform(6, 14)
    angle = rng.uniform(0, math.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    phase = (xx * math.cos(angle) + yy * math.sin(angle)) / period + rng.uniform(0, 2 * math.pi)
    bands = np.sin(phase) * rng.uniform(8, 25)
    img = base[None, None, :] + bands[..., None] + rng.normal(0, 3, size=(h, w, 3))
    return np.clip(img, 0, 255)


# per-kind color shifts keep classes visually separable for the toy segmenter
_KIND_SHIFT = {"blob": (80, -40, -40), "scratch": (-70, -70, -70), "stain": (50, 60, -30)}


def _defect_region(kind: str, h: int, w: int, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "blob":
        cy, cx = rng.uniform(4, h - 4), rng.uniform(4, w - 4)
        ry, rx = rng.uniform(2, h / 7), rng.uniform(2, w / 7)
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    if kind == "scratch":
        y0, x0 = rng.uniform(2, h - 2), rng.uniform(2, w - 2)
        ang = rng.uniform(0, math.pi)
        length = rng.uniform(h / 4, h * 0.8)
        y1, x1 = y0 + length * math.sin(ang), x0 + length * math.cos(ang)
        # point-to-segment distance
        dy, dx = y1 - y0, x1 - x0
        t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / (dy * dy + dx * dx + 1e-9), 0, 1)
        dist = np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx))
        return dist <= rng.uniform(0.7, 1.3)
    if kind == "stain":
        region = np.zeros((h, w), dtype=bool)
        cy, cx = rng.uniform(5, h - 5), rng.uniform(5, w - 5)
        for _ in range(3):
            oy, ox = cy + rng.uniform(-3, 3), cx + rng.uniform(-3, 3)
            r = rng.uniform(2, h / 8)
            region |= (yy - oy) ** 2 + (xx - ox) ** 2 <= r * r
        return region
    raise ConfigError(f"unknown defect kind {kind!r}")


def synth_toy_dataset(spec: ToySpec, root: Path, split: str = "train") -> DatasetManifest:
    """Generate a deterministic procedural defect dataset and export it.

    Backgrounds are banded textures; defects are drawn shapes whose exact pixel
    footprint becomes the mask. Defect kinds cycle through a shuffled deck so
    class counts stay within +-20% of uniform.
    """
    if spec.count < 1:
        raise ConfigError("count must be >= 1")
    if spec.h % spec.pool_factor or spec.w % spec.pool_factor:
        raise ConfigError(f"h, w must be divisible by pool factor {spec.pool_factor}")
    kinds = spec.resolved_kinds()
    class_map = ClassMap(("background",) + kinds)
    rng = np.random.default_rng(spec.seed)

    deck: list[str] = []
    samples = []
    for i in range(spec.count):
        img = _banded_background(spec.h, spec.w, rng)
        mask = np.zeros((spec.h, spec.w), dtype=np.int64)
        n_defects = int(rng.choice([0, 1, 2, 3], p=[0.12, 0.44, 0.32, 0.12]))
        for _ in range(n_defects):
            if not deck:
                deck = list(kinds)
                rng.shuffle(deck)
            kind = deck.pop()
            region = _defect_region(kind, spec.h, spec.w, rng)
            shift = np.array(_KIND_SHIFT[kind], dtype=np.float64)
            img[region] = np.clip(img[region] + shift + rng.normal(0, 4, size=3), 0, 255)
            mask[region] = kinds.index(kind) + 1
        u8 = np.round(img).astype(np.uint8)
        samples.append(DefectSample(
            image=u8.astype(np.float32) / 255.0 * 2.0 - 1.0,
            mask=mask,
            sample_id=f"toy_{i:04d}",
            caption=f"toy sample with {n_defects} defect(s)"))
    return export_dataset(class_map, samples, Path(root), split=split, provenance="real")
