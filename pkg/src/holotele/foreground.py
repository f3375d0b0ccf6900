"""Background modeling, foreground segmentation and change-detection metrics.

The segmentation model is pluggable. Anything callable as
``segmenter(frame, background, estimate) -> mask`` can be iterated by
:func:`segment_iterative`; the shipped refiner is a morphological opening.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import DimensionMismatch, MissingFrame, ZeroFrequency
from .imageio import list_frames, read_image, read_mask, write_mask

DEFAULT_THRESHOLD = 25
METRIC_NAMES = ("recall", "specificity", "fpr", "fnr", "pbc", "precision", "f1")
MASK_SUFFIXES = (".png", ".pgm", ".pbm", ".bmp")


def _check_same_shape(a, b, what="frames"):
    if a.shape != b.shape:
        raise DimensionMismatch(f"{what} differ in shape: {a.shape} vs {b.shape}")


# ------------------------------------------------------------ background


def median_background(frames):
    """Per-pixel, per-channel temporal median.

    Even frame counts average the two central values. The result keeps the
    input dtype when every median is a whole number, otherwise it is float64.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("median_background needs at least one frame")
    first = np.asarray(frames[0])
    for f in frames[1:]:
        _check_same_shape(first, np.asarray(f))
    stack = np.stack([np.asarray(f) for f in frames])
    med = np.median(stack, axis=0)
    if np.issubdtype(first.dtype, np.integer) and np.all(med == np.floor(med)):
        return med.astype(first.dtype)
    return med


def subtract_threshold(frame, background, threshold=DEFAULT_THRESHOLD):
    """Foreground where the largest channel difference exceeds ``threshold``."""
    frame = np.asarray(frame)
    background = np.asarray(background)
    _check_same_shape(frame, background)
    diff = np.abs(frame.astype(np.float64) - background.astype(np.float64))
    if diff.ndim == 3:
        diff = diff.max(axis=2)
    return diff > threshold


def morph(mask, op, radius=1):
    """Binary erosion or dilation with a ``(2r+1)`` square window.

    Windows are clipped at the image border: pixels outside the image are
    ignored rather than treated as background or foreground.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    m = np.asarray(mask, dtype=bool)
    size = 2 * int(radius) + 1
    if op == "erode":
        return ndimage.minimum_filter(m, size=size, mode="constant", cval=True)
    if op == "dilate":
        return ndimage.maximum_filter(m, size=size, mode="constant", cval=False)
    raise ValueError(f"unknown morphology op {op!r}")


def opening(mask, radius=1):
    return morph(morph(mask, "erode", radius), "dilate", radius)


def perturb_mask(mask, rng, max_radius=3):
    """Randomly erode or dilate a mask, imitating an imperfect previous estimate."""
    r = int(rng.integers(1, max_radius + 1))
    return morph(mask, "erode" if rng.random() < 0.5 else "dilate", r)


class Segmenter(Protocol):
    def __call__(self, frame, background, estimate): ...


class IdentitySegmenter:
    """Returns the current estimate unchanged."""

    def __call__(self, frame, background, estimate):
        return np.asarray(estimate, dtype=bool)


@dataclass(frozen=True)
class OpeningRefiner:
    """Morphological opening of the current estimate.

    With ``grow_threshold`` set, pixels next to the estimate whose
    difference from the background exceeds it are added back after the
    opening, which recovers thin edges the opening eroded.
    """

    radius: int = 1
    grow_threshold: float | None = None

    def __call__(self, frame, background, estimate):
        out = opening(estimate, self.radius)
        if self.grow_threshold is not None:
            near = morph(out, "dilate", 1)
            out = out | (near & subtract_threshold(frame, background, self.grow_threshold))
        return out


def segment_iterative(frame, background, segmenter=None, iterations=1, threshold=DEFAULT_THRESHOLD):
    """Seed with background subtraction, then apply ``segmenter`` ``iterations`` times."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    segmenter = segmenter if segmenter is not None else OpeningRefiner()
    est = subtract_threshold(frame, background, threshold)
    for _ in range(iterations):
        nxt = np.asarray(segmenter(frame, background, est), dtype=bool)
        _check_same_shape(est, nxt, "segmenter output and frame")
        est = nxt
    return est


# ------------------------------------------------------------ loss


@dataclass(frozen=True)
class ClassWeights:
    w_background: float
    w_foreground: float
    zero_frequency: tuple = (False, False)

    def __post_init__(self):
        for w in (self.w_background, self.w_foreground):
            if not math.isfinite(w) or w < 0:
                raise ValueError("class weights must be finite and non-negative")

    def as_array(self):
        return np.array([self.w_background, self.w_foreground])


def class_weights(masks):
    """Median-frequency balancing over the two classes.

    With two classes the median frequency is the mean of the two. A class
    that never occurs gets weight 0 and a :class:`ZeroFrequency` warning.
    """
    masks = list(masks)
    if not masks:
        raise ValueError("class_weights needs at least one mask")
    fg = sum(int(np.count_nonzero(m)) for m in masks)
    total = sum(int(np.asarray(m).size) for m in masks)
    freq = np.array([total - fg, fg], dtype=np.float64) / total
    med = freq.mean()
    zero = tuple(bool(f == 0) for f in freq)
    w = [0.0 if z else float(med / f) for f, z in zip(freq, zero)]
    if any(zero):
        names = [n for n, z in zip(("background", "foreground"), zero) if z]
        warnings.warn(f"class never occurs: {', '.join(names)}", ZeroFrequency, stacklevel=2)
    return ClassWeights(w[0], w[1], zero)


def _weights_array(weights):
    if isinstance(weights, ClassWeights):
        return weights.as_array()
    return np.asarray(weights, dtype=np.float64)


def balanced_ce_loss(logits, target, weights=(1.0, 1.0)):
    """Weighted cross-entropy ``w[c] * (-x[c] + log sum_j exp(x[j]))``.

    ``logits`` has shape ``(..., 2)`` and ``target`` the leading shape.
    Returns a float for a single sample, otherwise an array.
    """
    x = np.asarray(logits, dtype=np.float64)
    c = np.asarray(target, dtype=np.int64)
    w = _weights_array(weights)
    top = x.argmax(axis=-1)[..., None]
    m = np.take_along_axis(x, top, axis=-1)
    # exp(0) = 1 at the max is split off so log1p keeps precision for confident predictions
    e = np.exp(x - m)
    np.put_along_axis(e, top, 0.0, axis=-1)
    xc = np.take_along_axis(x, c[..., None], axis=-1)[..., 0]
    loss = w[c] * ((m[..., 0] - xc) + np.log1p(e.sum(axis=-1)))
    return float(loss) if loss.ndim == 0 else loss


def balanced_ce_grad(logits, target, weights=(1.0, 1.0)):
    """Gradient of :func:`balanced_ce_loss` with respect to the logits."""
    x = np.asarray(logits, dtype=np.float64)
    c = np.asarray(target, dtype=np.int64)
    w = _weights_array(weights)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, c[..., None], 1.0, axis=-1)
    return w[c][..., None] * (p - onehot)


# ------------------------------------------------------------ metrics


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred, truth, roi=None):
    """Pixel tallies of ``pred`` against ``truth``, optionally only inside ``roi``."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    _check_same_shape(pred, truth, "prediction and ground truth")
    if roi is not None:
        roi = np.asarray(roi, dtype=bool)
        _check_same_shape(pred, roi, "prediction and ROI")
        pred, truth = pred[roi], truth[roi]
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = int(pred.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, tn, fn)


@dataclass(frozen=True)
class Metrics:
    recall: float
    specificity: float
    fpr: float
    fnr: float
    pbc: float
    precision: float
    f1: float

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _ratio(num, den):
    return num / den if den else float("nan")


def metrics(counts, f1_variant="harmonic"):
    """Change-detection scores. Undefined ratios (0/0) are NaN, never 0.

    ``f1_variant="literal"`` drops the factor 2 of the harmonic mean, for
    comparison with the equation as sometimes printed.
    """
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    recall = _ratio(tp, tp + fn)
    precision = _ratio(tp, tp + fp)
    specificity = _ratio(tn, tn + fp)
    fpr = _ratio(fp, fp + tn)
    fnr = _ratio(fn, tp + fn)
    pbc = _ratio(100.0 * (fn + fp), counts.total)
    if f1_variant not in ("harmonic", "literal"):
        raise ValueError(f"unknown f1 variant {f1_variant!r}")
    if math.isnan(recall) or math.isnan(precision):
        f1 = float("nan")
    else:
        f1 = _ratio(precision * recall, precision + recall)
        if f1_variant == "harmonic":
            f1 *= 2
    return Metrics(recall, specificity, fpr, fnr, pbc, precision, f1)


def f1_from(precision, recall):
    return 2 * precision * recall / (precision + recall)


# ------------------------------------------------------------ sequences


@dataclass
class SequenceReport:
    frames: list  # (name, ConfusionCounts)
    counts: ConfusionCounts
    metrics: Metrics


def _mask_files(directory):
    return {p.stem: p for p in list_frames(directory, suffix=None) if p.suffix.lower() in MASK_SUFFIXES}


def evaluate_sequence(pred_dir, truth_dir, roi=None, f1_variant="harmonic"):
    """Score a directory of predicted masks against ground truth, matched by file stem.

    Counts are summed over frames before any ratio is taken. ``roi`` is an
    image path or array (0 = excluded) applied to every frame.
    """
    truth = _mask_files(truth_dir)
    pred = _mask_files(pred_dir)
    missing = sorted(set(truth) - set(pred))
    if missing:
        raise MissingFrame(f"no prediction for frame {missing[0]} ({len(missing)} missing)")
    extra = sorted(set(pred) - set(truth))
    if extra:
        raise MissingFrame(f"no ground truth for frame {extra[0]} ({len(extra)} missing)")
    if roi is not None and not isinstance(roi, np.ndarray):
        roi = read_mask(roi)
    per_frame = []
    total = ConfusionCounts()
    for name in sorted(truth):
        c = confusion(read_mask(pred[name]), read_mask(truth[name]), roi)
        per_frame.append((name, c))
        total = total + c
    return SequenceReport(per_frame, total, metrics(total, f1_variant))


def evaluate_categories(categories, f1_variant="harmonic"):
    """One row per category plus ``Overall``.

    ``categories`` maps a name to a list of ``(pred_dir, truth_dir, roi)``.
    Category rows pool the counts of their sequences; ``Overall`` pools
    every sequence.
    """
    rows = []
    overall = ConfusionCounts()
    for name, seqs in categories.items():
        cat = ConfusionCounts()
        for pred_dir, truth_dir, roi in seqs:
            cat = cat + evaluate_sequence(pred_dir, truth_dir, roi, f1_variant).counts
        rows.append((name, cat, metrics(cat, f1_variant)))
        overall = overall + cat
    rows.append(("Overall", overall, metrics(overall, f1_variant)))
    return rows


def report_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["category", "tp", "fp", "tn", "fn", *METRIC_NAMES])
    for name, c, m in rows:
        w.writerow([name, c.tp, c.fp, c.tn, c.fn, *(f"{getattr(m, k):.6f}" for k in METRIC_NAMES)])
    return buf.getvalue()


def report_table(rows):
    head = ["Category", "Recall", "Specificity", "FPR", "FNR", "PBC", "Precision", "F1"]
    width = max([len(h) for h in head[:1]] + [len(r[0]) for r in rows]) + 2
    lines = [head[0].ljust(width) + "".join(h.rjust(12) for h in head[1:])]
    lines.append("-" * len(lines[0]))
    for name, _, m in rows:
        lines.append(name.ljust(width) + "".join(f"{getattr(m, k):12.4f}" for k in METRIC_NAMES))
    return "\n".join(lines) + "\n"


def segment_directory(in_dir, background, out_dir, iterations=1, threshold=DEFAULT_THRESHOLD,
                      segmenter=None):
    """Segment every frame of ``in_dir`` and write masks with the same stems."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = [p for p in list_frames(in_dir, suffix=None) if p.suffix.lower() in MASK_SUFFIXES]
    for p in files:
        mask = segment_iterative(read_image(p), background, segmenter, iterations, threshold)
        write_mask(out / f"{p.stem}.png", mask)
    return len(files)


class MedianBackgroundSubtractor(TransformerMixin, BaseEstimator):
    """Temporal-median background model with iterative refinement.

    ``fit`` takes a stack of frames and stores ``background_``;
    ``transform`` returns one boolean mask per frame.
    """

    def __init__(self, threshold=DEFAULT_THRESHOLD, iterations=1, radius=1):
        self.threshold = threshold
        self.iterations = iterations
        self.radius = radius

    def fit(self, X, y=None):
        frames = list(X)
        self.background_ = median_background(frames)
        self.n_frames_ = len(frames)
        return self

    def transform(self, X):
        if not hasattr(self, "background_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("call fit() before transform()")
        seg = OpeningRefiner(self.radius)
        return np.stack([segment_iterative(f, self.background_, seg, self.iterations, self.threshold)
                         for f in X])
