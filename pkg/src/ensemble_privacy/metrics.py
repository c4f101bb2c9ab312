"""Accuracy, attack-strength and confidence-distribution measurements."""

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .exceptions import UndefinedMetricError

REPORT_FPRS = (0.001, 0.1)


def _scores_and_truth(scores, is_member=None):
    if is_member is None:
        scores, is_member = scores.scores, scores.is_member
    scores = np.asarray(scores, dtype=np.float64)
    is_member = np.asarray(is_member, dtype=bool)
    if scores.shape != is_member.shape:
        raise ValueError("scores and membership must align")
    return scores, is_member


def roc_auc(scores, is_member=None):
    """Probability that a random member outscores a random nonmember (ties count 1/2).

    Accepts an :class:`~ensemble_privacy.attacks.AttackScoreSet` or a pair of
    arrays. Computed from average ranks (Mann-Whitney U).
    """
    scores, is_member = _scores_and_truth(scores, is_member)
    n_pos = int(is_member.sum())
    n_neg = is_member.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both members and nonmembers")
    ranks = rankdata(scores)
    u = ranks[is_member].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def tpr_at_fpr(scores, target_fpr, is_member=None):
    """Member detection rate at the lowest threshold whose FPR is ``<= target_fpr``.

    Samples scoring at or above the threshold are flagged. Returns 0 when no
    observed score is an admissible threshold.
    """
    scores, is_member = _scores_and_truth(scores, is_member)
    pos, neg = scores[is_member], scores[~is_member]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("TPR@FPR needs both members and nonmembers")
    thresholds = np.unique(scores)
    neg_sorted = np.sort(neg)
    fpr = (neg.size - np.searchsorted(neg_sorted, thresholds, side="left")) / neg.size
    admissible = np.flatnonzero(fpr <= target_fpr)
    if admissible.size == 0:
        return 0.0
    threshold = thresholds[admissible[0]]
    return float(np.mean(pos >= threshold))


def js_divergence(member_conf, nonmember_conf, bins=100):
    """Base-2 Jensen-Shannon divergence of two confidence histograms on [0, 1].

    Empty bins contribute nothing (``0 * log 0 = 0``); the midpoint histogram
    is positive wherever either input is, so no smoothing is needed.
    """
    p, _ = np.histogram(np.asarray(member_conf, dtype=np.float64), bins=bins, range=(0.0, 1.0))
    q, _ = np.histogram(np.asarray(nonmember_conf, dtype=np.float64), bins=bins, range=(0.0, 1.0))
    if p.sum() == 0 or q.sum() == 0:
        raise UndefinedMetricError("JS divergence needs samples on both sides")
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def kl_to_mid(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(a[nz] / m[nz])))

    value = 0.5 * kl_to_mid(p) + 0.5 * kl_to_mid(q)
    return min(max(value, 0.0), 1.0)


def confidence_distortion(baseline, defended):
    """Mean over samples of ``L1(baseline, defended) / 2``, in [0, 1].

    Both arguments are ``(N, K)`` confidence matrices or objects with a
    ``fused`` attribute (e.g. :class:`~ensemble_privacy.ensemble.PredictionSet`).
    """
    a = np.asarray(getattr(baseline, "fused", baseline), dtype=np.float64)
    b = np.asarray(getattr(defended, "fused", defended), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("confidence matrices must have the same shape")
    if a.size == 0:
        return 0.0
    return float(np.mean(np.abs(a - b).sum(axis=1) / 2.0))


def accuracy(predictions, subset=None):
    """Fraction of correctly fused labels; ``subset`` is "members", "nonmembers" or None."""
    correct = predictions.correct
    if subset == "members":
        correct = correct[predictions.is_member]
    elif subset == "nonmembers":
        correct = correct[~predictions.is_member]
    elif subset is not None:
        raise ValueError(f"unknown subset {subset!r}")
    if correct.size == 0:
        raise UndefinedMetricError("accuracy of an empty set")
    return float(np.mean(correct))


@dataclass
class AgreementStats:
    """Counts of the level of correct agreement ``c`` and mean confidence per level."""

    member_hist: np.ndarray
    nonmember_hist: np.ndarray
    member_mean_conf: np.ndarray
    nonmember_mean_conf: np.ndarray

    def per_level_mean_conf(self):
        return {
            c: (float(m), float(nm))
            for c, (m, nm) in enumerate(zip(self.member_mean_conf, self.nonmember_mean_conf))
        }


def agreement_stats(predictions):
    """Histogram of ``c`` in ``[0, n]`` by membership, and per-level mean max-confidence.

    Levels without samples get NaN means.
    """
    n = predictions.n_models
    c = predictions.agreement_c
    conf = predictions.fused.max(axis=1)
    member = predictions.is_member
    hists, means = [], []
    for mask in (member, ~member):
        hists.append(np.bincount(c[mask], minlength=n + 1))
        sums = np.bincount(c[mask], weights=conf[mask], minlength=n + 1)
        with np.errstate(invalid="ignore", divide="ignore"):
            means.append(sums / hists[-1])
    return AgreementStats(hists[0], hists[1], means[0], means[1])


@dataclass
class MetricsReport:
    train_acc: float
    test_acc: float
    auc: float
    tpr_at: dict = field(default_factory=dict)
    distortion: float = 0.0
    js_divergence: float = 0.0
    agreement: AgreementStats = None


def summarize(predictions, scores, baseline=None, bins=100):
    """Collect the per-configuration numbers for one attack on one ensemble.

    ``predictions`` covers the balanced evaluation set; train/test accuracy are
    taken over its member and nonmember parts.
    """
    conf = predictions.fused.max(axis=1)
    member = predictions.is_member
    return MetricsReport(
        train_acc=accuracy(predictions, "members"),
        test_acc=accuracy(predictions, "nonmembers"),
        auc=roc_auc(scores),
        tpr_at={f: tpr_at_fpr(scores, f) for f in REPORT_FPRS},
        distortion=0.0 if baseline is None else confidence_distortion(baseline, predictions),
        js_divergence=js_divergence(conf[member], conf[~member], bins),
        agreement=agreement_stats(predictions),
    )
