"""Confusion counts, sensitivity/specificity/accuracy reports and the
sensitivity vs. 1-specificity scatter plot. PLAQUE is the positive class."""
import csv
import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Label, Representation, load_image


class Undefined(enum.Enum):
    """Marker for a metric whose denominator is zero."""
    UNDEFINED = "undefined"

    def __repr__(self):
        return "UNDEFINED"


UNDEFINED = Undefined.UNDEFINED

MARKERS = {
    "resnet50": "*",
    "resnet101": "x",
    "inception_v3": "o",
    "inception_resnet_v2": "+",
    "small_test": ".",
}
DISPLAY_NAMES = {
    "resnet50": "ResNet50",
    "resnet101": "ResNet101",
    "inception_v3": "InceptionV3",
    "inception_resnet_v2": "Inception-ResNetV2",
    "small_test": "SmallTest",
}
SCATTER_HEADER = ["label", "sensitivity", "one_minus_specificity"]


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    @property
    def positives(self):
        return self.tp + self.fn

    @property
    def negatives(self):
        return self.tn + self.fp


def _as_positive(values):
    out = []
    for v in values:
        lab = Label(v) if not isinstance(v, (bool, np.bool_)) else (Label.PLAQUE if v else Label.NO_PLAQUE)
        out.append(lab is Label.PLAQUE)
    return np.array(out, dtype=bool)


def confusion(labels, preds):
    labels, preds = list(labels), list(preds)
    if len(labels) != len(preds):
        raise ValueError(f"length mismatch: {len(labels)} labels vs {len(preds)} predictions")
    if not labels:
        raise ValueError("empty input")
    y, p = _as_positive(labels), _as_positive(preds)
    return ConfusionMatrix(
        tp=int(np.sum(y & p)),
        fp=int(np.sum(~y & p)),
        tn=int(np.sum(~y & ~p)),
        fn=int(np.sum(y & ~p)),
    )


def sensitivity(cm):
    return cm.tp / cm.positives if cm.positives else UNDEFINED


def specificity(cm):
    return cm.tn / cm.negatives if cm.negatives else UNDEFINED


def accuracy(cm):
    return (cm.tp + cm.tn) / cm.total if cm.total else UNDEFINED


def _fmt_metric(v):
    return "undefined" if v is UNDEFINED else f"{100 * v:.1f}%"


def _describe(backbone, representation, pretrained):
    name = DISPLAY_NAMES.get(backbone, backbone)
    return f"{name} {representation} {'pretrained' if pretrained else 'scratch'}"


@dataclass(frozen=True)
class OperatingPoint:
    """A (sensitivity, specificity) pair known without its confusion counts."""
    backbone: str
    representation: str
    pretrained: bool
    sensitivity: float
    specificity: float

    @property
    def label(self):
        return _describe(self.backbone, self.representation, self.pretrained)


@dataclass(frozen=True)
class MetricsReport:
    backbone: str
    representation: str
    pretrained: bool
    confusion: ConfusionMatrix

    @property
    def sensitivity(self):
        return sensitivity(self.confusion)

    @property
    def specificity(self):
        return specificity(self.confusion)

    @property
    def accuracy(self):
        return accuracy(self.confusion)

    @property
    def label(self):
        return _describe(self.backbone, self.representation, self.pretrained)

    def summary(self):
        return (
            f"{self.label}: sensitivity {_fmt_metric(self.sensitivity)}, "
            f"specificity {_fmt_metric(self.specificity)}, accuracy {_fmt_metric(self.accuracy)}"
        )

    def to_dict(self):
        def num(v):
            return "undefined" if v is UNDEFINED else v

        cm = self.confusion
        return {
            "backbone": self.backbone,
            "representation": self.representation,
            "pretrained": self.pretrained,
            "tp": cm.tp, "fp": cm.fp, "tn": cm.tn, "fn": cm.fn,
            "sensitivity": num(self.sensitivity),
            "specificity": num(self.specificity),
            "accuracy": num(self.accuracy),
        }

    @classmethod
    def from_dict(cls, d):
        cm = ConfusionMatrix(int(d["tp"]), int(d["fp"]), int(d["tn"]), int(d["fn"]))
        return cls(str(d["backbone"]), str(d["representation"]), bool(d["pretrained"]), cm)


def write_report(report, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path


def read_report(path):
    return MetricsReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def evaluate(model, test, aug=None, batch_size=32):
    """Run ``model`` over every frame of ``test`` and assemble a MetricsReport."""
    from .models import predict_labels, predict_proba, strict_mode

    if test is None or len(test) == 0:
        raise ValueError("empty test set")
    rep = model.representation
    if rep is not None and Representation(rep) is not test.representation:
        raise ValueError(
            f"representation mismatch: model trained on {Representation(rep).value}, "
            f"test set is {test.representation.value}"
        )
    aug = aug or model.augment
    deterministic = model.train_config.deterministic if model.train_config else True
    probs = []
    with strict_mode(deterministic):
        for start in range(0, len(test), batch_size):
            chunk = test.records[start:start + batch_size]
            imgs = [load_image(test.resolve(r)) for r in chunk]
            probs.extend(predict_proba(model, imgs, aug))
    cm = confusion(test.labels(), predict_labels(probs))
    return MetricsReport(
        backbone=model.config.backbone.value,
        representation=test.representation.value,
        pretrained=model.config.pretrained,
        confusion=cm,
    )


@dataclass(frozen=True)
class ScatterResult:
    image: Path
    csv: Path
    plotted: list      # [(label, sensitivity, 1 - specificity)] drawn as markers
    omitted: list      # labels with an undefined coordinate


def scatter_plot(reports, out, csv_path=None):
    """Plot sensitivity (y) against 1 - specificity (x), one marker per report.

    ``reports`` may mix MetricsReport and OperatingPoint. Also writes a CSV
    (default: ``out`` with a .csv suffix). Reports with an undefined
    coordinate are left off the plot and flagged ``undefined``.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    reports = list(reports)
    if not reports:
        raise ValueError("no reports to plot")
    out = Path(out)
    csv_path = Path(csv_path) if csv_path else out.with_suffix(".csv")

    rows, plotted, omitted, drawn = [], [], [], []
    for r in reports:
        sens, spec = r.sensitivity, r.specificity
        if sens is UNDEFINED or spec is UNDEFINED:
            omitted.append(r.label)
            rows.append([
                r.label,
                "undefined" if sens is UNDEFINED else repr(float(sens)),
                "undefined" if spec is UNDEFINED else repr(1.0 - spec),
            ])
            continue
        point = (r.label, float(sens), 1.0 - float(spec))
        plotted.append(point)
        drawn.append(r)
        rows.append([point[0], repr(point[1]), repr(point[2])])

    fig, ax = plt.subplots(figsize=(6, 6))
    seen = set()
    for r, (_, y, x) in zip(drawn, plotted):
        marker = MARKERS.get(r.backbone, "s")
        name = DISPLAY_NAMES.get(r.backbone, r.backbone)
        ax.scatter([x], [y], marker=marker, s=80, color="C0" if r.pretrained else "C1",
                   label=None if (name, r.pretrained) in seen else f"{name} ({'pretrained' if r.pretrained else 'scratch'})")
        seen.add((name, r.pretrained))
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("1 - specificity")
    ax.set_ylabel("sensitivity")
    ax.plot([0, 1], [0, 1], color="0.8", lw=0.8, zorder=0)
    if plotted:
        ax.legend(loc="lower right", fontsize="small")
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out, dpi=120, bbox_inches="tight")
    finally:
        plt.close(fig)

    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SCATTER_HEADER)
        w.writerows(rows)
    return ScatterResult(out, csv_path, plotted, omitted)


def read_scatter_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != SCATTER_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        out = []
        for label, s, x in reader:
            out.append((label, s if s == "undefined" else float(s), x if x == "undefined" else float(x)))
        return out
