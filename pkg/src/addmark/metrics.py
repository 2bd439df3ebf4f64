"""Bit accuracy, Hamming utilities, and rank-based ROC/AUROC."""

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import rankdata

LABEL_NULL = "null"
LABEL_WATERMARKED = "watermarked"


class ScoreSample:
    __slots__ = ("score", "label", "message")

    def __init__(self, score, label, message=None):
        if label not in (LABEL_NULL, LABEL_WATERMARKED):
            raise ValueError(f"unknown label {label!r}")
        if label == LABEL_WATERMARKED and message is None:
            raise ValueError("watermarked samples must carry a message")
        self.score = float(score)
        self.label = label
        self.message = message


def bit_accuracy(decoded, truth):
    if decoded.K != truth.K:
        raise ValueError(f"length mismatch: {decoded.K} vs {truth.K}")
    return float(np.mean(decoded.bits == truth.bits))


def hamming(m1, m2):
    if m1.K != m2.K:
        raise ValueError(f"length mismatch: {m1.K} vs {m2.K}")
    return int(np.sum(m1.bits != m2.bits))


def d_min(dictionary_messages):
    """Minimum pairwise Hamming distance by O(|D|^2 K) scan."""
    msgs = list(dictionary_messages)
    if len(msgs) < 2:
        return msgs[0].K + 1 if msgs else 0
    mat = np.stack([m.bits for m in msgs]).astype(np.float64)
    K = mat.shape[1]
    ham = (K - mat @ mat.T) / 2
    np.fill_diagonal(ham, K + 1)
    return int(ham.min())


def _split_scores(samples):
    null = np.array([s.score for s in samples if s.label == LABEL_NULL])
    pos = np.array([s.score for s in samples if s.label == LABEL_WATERMARKED])
    if null.size == 0 or pos.size == 0:
        raise ValueError("need at least one sample of each label")
    return null, pos


def auroc(samples):
    """Mann-Whitney AUROC with ties counted one-half."""
    null, pos = _split_scores(samples)
    ranks = rankdata(np.concatenate([null, pos]))
    u = ranks[null.size :].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (null.size * pos.size))


def auroc_from_scores(null_scores, pos_scores):
    samples = [ScoreSample(s, LABEL_NULL) for s in null_scores]
    samples += [
        ScoreSample(s, LABEL_WATERMARKED, message=_DUMMY) for s in pos_scores
    ]
    return auroc(samples)


class _DummyMessage:
    K = 0


_DUMMY = _DummyMessage()


def roc_curve(samples):
    """Staircase (FPR, TPR) points over all score thresholds, from the
    all-reject corner (0, 0) to the all-accept corner (1, 1).  Tied scores
    produce diagonal segments, so the trapezoidal area equals the
    Mann-Whitney AUROC exactly."""
    null, pos = _split_scores(samples)
    thresholds = np.unique(np.concatenate([null, pos]))[::-1]
    points = [(0.0, 0.0)]
    for t in thresholds:
        fpr = float(np.mean(null >= t))
        tpr = float(np.mean(pos >= t))
        points.append((fpr, tpr))
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    return points


def roc_area(points):
    pts = np.asarray(points, dtype=np.float64)
    return float(trapezoid(pts[:, 1], pts[:, 0]))
