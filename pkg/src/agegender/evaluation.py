"""Accuracy, AABD, confusion matrices, probability histograms and attention-map export."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .data import DEFAULT_SCHEME, BucketScheme, SampleRecord, iter_batches, write_pnm
from .models import Ensemble, MultiTaskModel, Prediction, ensemble_predict, forward_multitask
from .ops import upsample_bilinear
from .tensor import Tensor

logger = logging.getLogger(__name__)


def _labels(a) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {a.shape}")
    return a.astype(np.int64)


def _paired(pred, true):
    pred, true = _labels(pred), _labels(true)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(true)} labels")
    return pred, true


def accuracy(pred, true) -> float:
    pred, true = _paired(pred, true)
    if not len(pred):
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.count_nonzero(pred == true) / len(pred))


def aabd(pred_buckets, true_buckets) -> float:
    """Average absolute difference between predicted and true bucket indices."""
    pred, true = _paired(pred_buckets, true_buckets)
    if not len(pred):
        raise ValueError("AABD of an empty set is undefined")
    return float(np.abs(pred - true).mean())


def confusion_matrix(pred, true, k: int) -> np.ndarray:
    """K x K counts; rows are true classes, columns predictions."""
    pred, true = _paired(pred, true)
    if len(pred) and (min(pred.min(), true.min()) < 0 or max(pred.max(), true.max()) >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def row_percentages(cm: np.ndarray) -> np.ndarray:
    rows = cm.sum(axis=1, keepdims=True)
    return np.divide(100.0 * cm, rows, out=np.zeros(cm.shape), where=rows > 0)


def probability_histogram(probs, bins: int = 20) -> np.ndarray:
    """Counts over ``bins`` equal-width bins on [0, 1]; the last bin includes 1.0."""
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    if p.size and (p.min() < 0 or p.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    idx = np.minimum(np.floor(p * bins).astype(np.int64), bins - 1)
    return np.bincount(idx, minlength=bins)


# -- reports --------------------------------------------------------------------

@dataclass
class MetricsReport:
    gender_accuracy: float
    age_bucket_accuracy: float
    aabd: float
    confusion_gender: np.ndarray
    confusion_age: np.ndarray
    gender_prob_histogram: np.ndarray
    num_samples: int
    label: str = "model"

    @classmethod
    def from_predictions(cls, pred: Prediction, gender_true, bucket_true, label: str = "model",
                         bins: int = 20) -> "MetricsReport":
        g_pred, a_pred = pred.gender_labels, pred.age_buckets
        return cls(
            gender_accuracy=accuracy(g_pred, gender_true),
            age_bucket_accuracy=accuracy(a_pred, bucket_true),
            aabd=aabd(a_pred, bucket_true),
            confusion_gender=confusion_matrix(g_pred, gender_true, 2),
            confusion_age=confusion_matrix(a_pred, bucket_true, pred.num_age_buckets),
            gender_prob_histogram=probability_histogram(pred.female_probs, bins),
            num_samples=len(pred),
            label=label,
        )

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "num_samples": self.num_samples,
            "gender_accuracy": self.gender_accuracy,
            "age_bucket_accuracy": self.age_bucket_accuracy,
            "aabd": self.aabd,
            "confusion_gender": self.confusion_gender.tolist(),
            "confusion_gender_pct": row_percentages(self.confusion_gender).tolist(),
            "confusion_age": self.confusion_age.tolist(),
            "confusion_age_pct": row_percentages(self.confusion_age).tolist(),
            "gender_prob_histogram": self.gender_prob_histogram.tolist(),
        }

    def write(self, out_dir, stem: str = "metrics", scheme: BucketScheme = DEFAULT_SCHEME) -> list[Path]:
        """metrics.json, a flat metrics.csv, and one CSV grid per confusion matrix."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"{stem}.json", out / f"{stem}.csv",
                 out / f"{stem}_confusion_gender.csv", out / f"{stem}_confusion_age.csv"]
        paths[0].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        with open(paths[1], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "num_samples", "gender_accuracy", "age_bucket_accuracy", "aabd"])
            w.writerow([self.label, self.num_samples, repr(self.gender_accuracy),
                        repr(self.age_bucket_accuracy), repr(self.aabd)])
        _write_grid(paths[2], self.confusion_gender, ["male", "female"])
        b = self.confusion_age.shape[0]
        names = scheme.labels() if b == scheme.num_buckets else [str(i) for i in range(b)]
        _write_grid(paths[3], self.confusion_age, names)
        return paths


def _write_grid(path, cm: np.ndarray, names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *names])
        for name, row in zip(names, cm):
            w.writerow([name, *row.tolist()])


def predict_records(model: Union[MultiTaskModel, Ensemble], records: Sequence[SampleRecord],
                    batch_size: int = 64):
    """Eval-mode predictions plus ground-truth labels for ``records``."""
    ref = model.models[0] if isinstance(model, Ensemble) else model
    hw = (ref.spec.input_size, ref.spec.input_size)
    members = model.models if isinstance(model, Ensemble) else [model]
    per_member: list[list[Prediction]] = [[] for _ in members]
    genders, buckets = [], []
    for batch in iter_batches(records, batch_size, hw, augment=False, dtype=ref.dtype):
        for i, m in enumerate(members):
            per_member[i].append(forward_multitask(m, batch.images.astype(m.dtype)))
        genders.append(batch.gender)
        buckets.append(batch.bucket)
    if not genders:
        raise ValueError("cannot evaluate an empty partition")
    merged = [
        Prediction(np.concatenate([p.gender_probs for p in ps]), np.concatenate([p.age_probs for p in ps]))
        for ps in per_member
    ]
    return merged, np.concatenate(genders), np.concatenate(buckets)


def evaluate(model: Union[MultiTaskModel, Ensemble], records: Sequence[SampleRecord],
             label: Optional[str] = None, batch_size: int = 64, with_members: bool = False):
    """Metrics for one model or an ensemble (averaged probabilities) on ``records``.

    With ``with_members`` an ensemble also returns each member's report.
    """
    if not records:
        raise ValueError("cannot evaluate an empty partition")
    preds, g, b = predict_records(model, records, batch_size)
    if isinstance(model, Ensemble):
        report = MetricsReport.from_predictions(ensemble_predict(preds), g, b, label or "ensemble")
        if with_members:
            members = [MetricsReport.from_predictions(p, g, b, f"member{i}") for i, p in enumerate(preds)]
            return report, members
        return report
    return MetricsReport.from_predictions(preds[0], g, b, label or model.spec.backbone)


# -- attention maps -----------------------------------------------------------------

def normalize_map(m: np.ndarray) -> np.ndarray:
    """Min-max scale a 2-D map to uint8 [0, 255]; a constant map becomes mid-gray 128."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    if hi == lo:
        logger.warning("constant attention map; exporting as mid-gray")
        return np.full(m.shape, 128, dtype=np.uint8)
    return np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def blue_red(gray: np.ndarray) -> np.ndarray:
    """Linear colour map: 0 -> pure blue, 255 -> pure red."""
    g = gray.astype(np.uint8)
    return np.stack([g, np.zeros_like(g), 255 - g], axis=-1)


def attention_overlay(mask: np.ndarray, target_hw: Optional[tuple] = None, per_channel: bool = False) -> np.ndarray:
    """(C, h, w) mask -> channel mean (or every channel), bilinearly upscaled to ``target_hw``.

    Returns (h', w') or, with ``per_channel``, (C, h', w').
    """
    m = np.asarray(mask, dtype=np.float64)
    m = m if per_channel else m.mean(axis=0, keepdims=True)
    if target_hw is not None and tuple(target_hw) != m.shape[1:]:
        m = upsample_bilinear(Tensor(m[None], dtype=np.float64), *target_hw).data[0]
    return m if per_channel else m[0]


def export_attention_maps(taps: Sequence[np.ndarray], out_dir, sample_ids: Sequence[str],
                          target_hw: Optional[tuple] = None, per_channel: bool = False) -> list[Path]:
    """Write each sample's attention maps as ``<id>_attn<k>.pgm`` (gray) and ``.ppm`` (blue-to-red).

    ``taps`` is the list returned by :func:`~agegender.models.attention_taps`
    (one (N, C, h, w) array per module, module index k starting at 1).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for k, tap in enumerate(taps, start=1):
        if len(tap) != len(sample_ids):
            raise ValueError(f"tap {k} holds {len(tap)} samples but {len(sample_ids)} ids were given")
        for sid, mask in zip(sample_ids, tap):
            maps = attention_overlay(mask, target_hw, per_channel)
            if per_channel:
                items = [(f"{sid}_attn{k}_c{c}", maps[c]) for c in range(len(maps))]
            else:
                items = [(f"{sid}_attn{k}", maps)]
            for stem, m in items:
                gray = normalize_map(m)
                write_pnm(out / f"{stem}.pgm", gray)
                write_pnm(out / f"{stem}.ppm", blue_red(gray))
                written += [out / f"{stem}.pgm", out / f"{stem}.ppm"]
    return written
