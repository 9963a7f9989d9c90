"""Evaluation: ROC, AUC, HTER, threshold selection and attention maps.

Scores are real-class probabilities. A sample is accepted as real when its
score is >= threshold, so attacks scoring at or above the threshold are false
accepts and real samples scoring below it are false rejects.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nets import classify, feature_forward, meta_features


@dataclass(frozen=True)
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).ravel()
        y = np.asarray(self.labels).ravel()
        if s.shape != y.shape:
            raise ValueError(f"scores ({s.size}) and labels ({y.size}) differ in length")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0 or 1")
        if not np.all(np.isfinite(s)):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y.astype(np.int8))

    @property
    def n_real(self):
        return int(self.labels.sum())

    @property
    def n_fake(self):
        return int(self.labels.size - self.labels.sum())

    def require_both(self, what):
        if self.n_real == 0 or self.n_fake == 0:
            raise ValueError(f"{what}: both classes must be present (real={self.n_real}, fake={self.n_fake})")


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist()))


def _as_scoreset(s, labels=None):
    if isinstance(s, ScoreSet):
        return s
    return ScoreSet(s, labels)


def roc_curve(s, labels=None):
    """ROC points at every distinct score, from threshold +inf (0, 0) down to the minimum (1, 1).

    Equal scores are grouped, so ties move the curve diagonally.
    """
    s = _as_scoreset(s, labels)
    s.require_both("roc_curve")
    order = np.argsort(-s.scores, kind="mergesort")
    sc = s.scores[order]
    y = s.labels[order]
    # last index of every run of equal scores
    ends = np.r_[np.nonzero(np.diff(sc))[0], sc.size - 1]
    tp = np.cumsum(y)[ends]
    fp = np.cumsum(1 - y)[ends]
    tpr = np.r_[0.0, tp / s.n_real]
    fpr = np.r_[0.0, fp / s.n_fake]
    thr = np.r_[np.inf, sc[ends]]
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thr)


def auc(curve):
    """Trapezoidal area under a RocCurve."""
    return float(np.sum(np.diff(curve.fpr) * (curve.tpr[1:] + curve.tpr[:-1]) / 2.0))


def auc_pairs(s, labels=None):
    """AUC by counting (real, fake) pairs; ties count one half."""
    s = _as_scoreset(s, labels)
    s.require_both("auc_pairs")
    r = s.scores[s.labels == 1]
    f = s.scores[s.labels == 0]
    f_sorted = np.sort(f)
    below = np.searchsorted(f_sorted, r, side="left")
    not_above = np.searchsorted(f_sorted, r, side="right")
    wins = below.sum() + 0.5 * (not_above - below).sum()
    return float(wins / (r.size * f.size))


def far_frr(s, threshold, labels=None):
    s = _as_scoreset(s, labels)
    s.require_both("far_frr")
    fake = s.scores[s.labels == 0]
    real = s.scores[s.labels == 1]
    far = float(np.count_nonzero(fake >= threshold)) / fake.size
    frr = float(np.count_nonzero(real < threshold)) / real.size
    return far, frr


def hter(s, threshold, labels=None):
    """Half total error rate (FAR + FRR) / 2 at ``threshold``."""
    far, frr = far_frr(s, threshold, labels)
    return (far + frr) / 2.0


def eer_threshold(s, labels=None):
    """Threshold minimizing |FAR - FRR| among midpoints of adjacent distinct scores.

    Ties go to the lowest such threshold. With a single distinct score the
    score itself is returned.
    """
    s = _as_scoreset(s, labels)
    s.require_both("eer_threshold")
    u = np.unique(s.scores)
    if u.size == 1:
        return float(u[0])
    cands = (u[:-1] + u[1:]) / 2.0
    fake = np.sort(s.scores[s.labels == 0])
    real = np.sort(s.scores[s.labels == 1])
    far = (fake.size - np.searchsorted(fake, cands, side="left")) / fake.size
    frr = np.searchsorted(real, cands, side="left") / real.size
    gap = np.abs(far - frr)
    return float(cands[int(np.argmin(gap))])


@dataclass
class MetricsReport:
    hter: float
    auc: float
    eer_threshold: float
    roc: list
    n_real: int
    n_fake: int
    hter_oracle: float = None
    per_domain: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "hter": self.hter,
            "hter_oracle": self.hter_oracle,
            "auc": self.auc,
            "eer_threshold": self.eer_threshold,
            "n_real": self.n_real,
            "n_fake": self.n_fake,
        }


def evaluate(s, threshold=None, labels=None):
    """MetricsReport for a score set.

    ``threshold`` is normally chosen on source-domain validation data; the
    test-set EER threshold is always reported too, as ``hter_oracle``. With
    no threshold given the oracle threshold is used for both.
    """
    s = _as_scoreset(s, labels)
    curve = roc_curve(s)
    t_oracle = eer_threshold(s)
    h_oracle = hter(s, t_oracle)
    t = t_oracle if threshold is None else float(threshold)
    return MetricsReport(hter=hter(s, t), auc=auc(curve), eer_threshold=t, roc=curve.points(),
                         n_real=s.n_real, n_fake=s.n_fake, hter_oracle=h_oracle)


def write_report(report, out_dir):
    """metrics.json and roc.csv (threshold,fpr,tpr) under ``out_dir``."""
    import os
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
        json.dump(report.to_json(), fh, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, "roc.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for fpr, tpr, thr in report.roc:
            w.writerow([repr(float(thr)), repr(float(fpr)), repr(float(tpr))])


# ---------------------------------------------------------------------------
# scoring and attention


def score(params, x, net_cfg, batch_size=64):
    """Real-class probabilities l = M(F(x)) for a stack of inputs."""
    out = []
    for i in range(0, len(x), batch_size):
        f = feature_forward(params.F, T.constant(np.asarray(x[i:i + batch_size], dtype=np.float64)), net_cfg)
        out.append(classify(params.M, f, net_cfg).data)
    return np.concatenate(out) if out else np.zeros(0)


def normalize_map(a):
    """Min-max to [0, 1]; a constant map becomes all zeros."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi - lo <= 0:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def attention_map(params, x, net_cfg):
    """Class-activation map of one sample over the meta learner's last conv block.

    The map is sum_k w_k A_k(i, j) with w the fc weights, min-max normalized.
    Per-batch standardization needs a batch, so a lone sample is scored in
    eval mode by standardizing with its own spatial statistics.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"attention_map expects a single sample, got shape {x.shape}")
    f = feature_forward(params.F, T.constant(x), net_cfg)
    a = meta_features(params.M, f, net_cfg).data[0]
    w = params.M["M.fc.weight"].data[:, 0]
    cam = np.tensordot(w, a, axes=(0, 0))
    return normalize_map(cam)


def write_pgm(path, img):
    """ASCII PGM (P2), values in [0, 1] scaled to 0..255."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM export needs a 2-d map")
    v = np.clip(np.rint(img * 255.0), 0, 255).astype(int)
    h, w = v.shape
    with open(path, "w") as fh:
        fh.write(f"P2\n{w} {h}\n255\n")
        for row in v:
            fh.write(" ".join(str(int(p)) for p in row) + "\n")


def read_pgm(path):
    with open(path) as fh:
        tokens = [t for line in fh if not line.startswith("#") for t in line.split()]
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not an ASCII PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    vals = np.array([int(t) for t in tokens[4:4 + w * h]])
    return vals.reshape(h, w), maxval
