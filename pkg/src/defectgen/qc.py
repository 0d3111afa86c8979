"""Production quality-control simulation: per-image benign/defective decisions
from segmentation masks under product tolerance rules, scored as image-level
recall and false positive rate.

Rule file format (UTF-8, one rule per line, '#' comments):

    cracks forbidden
    contamination max_area 4000
    color_stains max_area 300

A class with mode `forbidden` makes an image defective at a single pixel; a
`max_area` class makes it defective when its total pixel count reaches the
threshold (benign requires strictly fewer pixels). Area is counted per class
over the whole image, not per connected component.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ClassMap
from .errors import ConfigError
from .metrics import image_confusion


@dataclass(frozen=True)
class QCRule:
    class_name: str
    mode: str  # "forbidden" | "max_area"
    threshold_px: int = 0

    def __post_init__(self):
        if self.mode not in ("forbidden", "max_area"):
            raise ConfigError(f"unknown rule mode {self.mode!r}")
        if self.mode == "max_area" and self.threshold_px < 1:
            raise ConfigError(f"max_area threshold must be >= 1, got {self.threshold_px}")


@dataclass(frozen=True)
class QCRuleSet:
    product: str
    rules: tuple[QCRule, ...]
    unlisted_policy: str = "forbidden"  # defect class with no rule: "forbidden" | "ignored"

    def __post_init__(self):
        names = [r.class_name for r in self.rules]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise ConfigError(f"duplicate rule for class(es): {sorted(dup)}")
        if self.unlisted_policy not in ("forbidden", "ignored"):
            raise ConfigError(f"unknown unlisted-class policy {self.unlisted_policy!r}")

    def rule_for(self, class_name: str) -> QCRule | None:
        for r in self.rules:
            if r.class_name == class_name:
                return r
        return None


def parse_rules(path: Path, product: str | None = None,
                unlisted_policy: str = "forbidden") -> QCRuleSet:
    path = Path(path)
    rules = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) == 2 and parts[1] == "forbidden":
            rules.append(QCRule(parts[0], "forbidden"))
        elif len(parts) == 3 and parts[1] == "max_area":
            try:
                thr = int(parts[2])
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: bad max_area threshold {parts[2]!r}") from None
            rules.append(QCRule(parts[0], "max_area", thr))
        else:
            raise ConfigError(f"{path}:{lineno}: cannot parse rule line {raw!r}")
    return QCRuleSet(product=product or path.stem, rules=tuple(rules),
                     unlisted_policy=unlisted_policy)


def check_ruleset(ruleset: QCRuleSet, class_map: ClassMap) -> None:
    for r in ruleset.rules:
        class_map.index_of(r.class_name)  # raises on unresolvable name


@dataclass
class Decision:
    label: str  # "benign" | "defective"
    violations: list = field(default_factory=list)

    @property
    def defective(self) -> bool:
        return self.label == "defective"


def classify(mask: np.ndarray, ruleset: QCRuleSet, class_map: ClassMap) -> Decision:
    """Decide benign/defective from per-class pixel counts only."""
    mask = np.asarray(mask)
    if mask.max(initial=0) > class_map.n_defect:
        raise ValueError(f"mask class {int(mask.max())} outside class map "
                         f"(n_defect={class_map.n_defect})")
    counts = np.bincount(mask.ravel(), minlength=class_map.n_defect + 1)
    violations = []
    for k in range(1, class_map.n_defect + 1):
        px = int(counts[k])
        if px == 0:
            continue
        name = class_map.names[k]
        rule = ruleset.rule_for(name)
        if rule is None:
            if ruleset.unlisted_policy == "forbidden":
                violations.append({"class": name, "rule": "unlisted(forbidden)", "pixels": px})
            continue
        if rule.mode == "forbidden":
            violations.append({"class": name, "rule": "forbidden", "pixels": px})
        elif px >= rule.threshold_px:  # benign requires strictly fewer pixels
            violations.append({"class": name, "rule": f"max_area {rule.threshold_px}",
                               "pixels": px})
    return Decision(label="defective" if violations else "benign", violations=violations)


def evaluate(pred_masks, gt_masks, ruleset: QCRuleSet, class_map: ClassMap) -> dict:
    """Score predicted masks against ground truth at the image level."""
    if len(pred_masks) != len(gt_masks):
        raise ValueError("pred/gt list length mismatch")
    check_ruleset(ruleset, class_map)
    per_image = []
    for i, (p, g) in enumerate(zip(pred_masks, gt_masks)):
        dp = classify(p, ruleset, class_map)
        dg = classify(g, ruleset, class_map)
        per_image.append({"index": i, "gt_label": dg.label, "pred_label": dp.label,
                          "pred_violations": dp.violations})
    confusion = image_confusion([r["pred_label"] for r in per_image],
                                [r["gt_label"] for r in per_image])
    return {"recall": confusion["recall"], "fpr": confusion["fpr"],
            "confusion": confusion, "per_image_decisions": per_image}


def write_evaluation_csv(result: dict, path: Path, sample_ids=None) -> None:
    import csv

    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "gt_label", "pred_label", "violations"])
        for rec in result["per_image_decisions"]:
            sid = sample_ids[rec["index"]] if sample_ids else str(rec["index"])
            vio = ";".join(f"{v['class']}:{v['rule']}:{v['pixels']}"
                           for v in rec["pred_violations"])
            w.writerow([sid, rec["gt_label"], rec["pred_label"], vio])
