"""
Biometric error rates and domain-divergence diagnostics.

Liveness score convention: the softmax probability of the live class.  A
sample is accepted as live when ``score >= threshold``.

All rates are formed as a single division of exact integer counts, so they
are the correctly rounded values of the underlying fractions.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParseError

logger = logging.getLogger(__name__)

LIVE, ATTACK = 1, 0
_LABEL_NAMES = {"live": LIVE, "attack": ATTACK}


@dataclass
class ScoreSet:
    """Paired liveness scores and labels (1 = live, 0 = attack)."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.scores.shape != self.labels.shape:
            raise ContractError(f"{self.scores.size} scores but {self.labels.size} labels")
        if not np.all(np.isin(self.labels, (LIVE, ATTACK))):
            raise ContractError("labels must be 1 (live) or 0 (attack)")

    @classmethod
    def from_records(cls, records):
        records = list(records)
        scores = [float(s) for s, _ in records]
        labels = [_LABEL_NAMES[lab] if isinstance(lab, str) else int(lab) for _, lab in records]
        return cls(np.array(scores), np.array(labels, dtype=np.int64))

    def __len__(self):
        return self.scores.size

    @property
    def live(self):
        return self.scores[self.labels == LIVE]

    @property
    def attack(self):
        return self.scores[self.labels == ATTACK]

    def require_both_classes(self):
        n_live, n_attack = int((self.labels == LIVE).sum()), int((self.labels == ATTACK).sum())
        if n_live == 0 or n_attack == 0:
            raise ContractError(f"score set needs live and attack records, got {n_live} live / {n_attack} attack")
        return n_live, n_attack

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["score", "label"])
            for s, lab in zip(self.scores, self.labels):
                w.writerow([repr(float(s)), "live" if lab == LIVE else "attack"])

    @classmethod
    def read_csv(cls, path):
        scores, labels = [], []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["score", "label"]:
                raise ParseError(f"{path}:1: expected header 'score,label', got {header}")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 2:
                    raise ParseError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
                try:
                    score = float(row[0])
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: score {row[0]!r} is not a number") from None
                label = row[1].strip()
                if label not in _LABEL_NAMES:
                    raise ParseError(f"{path}:{lineno}: label must be live or attack, got {label!r}")
                if not math.isfinite(score):
                    raise ParseError(f"{path}:{lineno}: score is not finite")
                scores.append(score)
                labels.append(_LABEL_NAMES[label])
        return cls(np.array(scores), np.array(labels, dtype=np.int64))


def _error_counts(s: ScoreSet, thresholds):
    """(#attacks accepted, #lives rejected) at each threshold."""
    live = np.sort(s.live)
    attack = np.sort(s.attack)
    t = np.asarray(thresholds, dtype=np.float64)
    fa = attack.size - np.searchsorted(attack, t, side="left")
    fr = np.searchsorted(live, t, side="left")
    return fa, fr


def candidate_thresholds(s: ScoreSet):
    """Sorted unique scores plus one sentinel below and one above all of them."""
    uniq = np.unique(s.scores)
    return np.concatenate([[uniq[0] - 1.0], uniq, [uniq[-1] + 1.0]])


def roc_points(s: ScoreSet):
    """(threshold, FAR, FRR) at every candidate threshold, ascending."""
    n_live, n_attack = s.require_both_classes()
    ts = candidate_thresholds(s)
    fa, fr = _error_counts(s, ts)
    return [(float(t), int(a) / n_attack, int(r) / n_live) for t, a, r in zip(ts, fa, fr)]


def eer(s: ScoreSet):
    """(equal error rate, threshold); the smallest threshold wins ties."""
    n_live, n_attack = s.require_both_classes()
    ts = candidate_thresholds(s)
    fa, fr = _error_counts(s, ts)
    # |FAR - FRR| scaled by n_live * n_attack stays an exact integer
    gap = np.abs(fa.astype(object) * n_live - fr.astype(object) * n_attack)
    best = min(range(len(ts)), key=lambda i: gap[i])
    a, r = int(fa[best]), int(fr[best])
    return (a * n_live + r * n_attack) / (2 * n_attack * n_live), float(ts[best])


def apcer_bpcer_acer(s: ScoreSet, t):
    n_live, n_attack = s.require_both_classes()
    fa, fr = (int(v[0]) for v in _error_counts(s, [t]))
    return fa / n_attack, fr / n_live, (fa * n_live + fr * n_attack) / (2 * n_attack * n_live)


def hter(s: ScoreSet, t):
    """Half total error rate (FAR + FRR) / 2 at a fixed threshold."""
    n_live, n_attack = s.require_both_classes()
    fa, fr = (int(v[0]) for v in _error_counts(s, [t]))
    return (fa * n_live + fr * n_attack) / (2 * n_attack * n_live)


def acer_from_rates(apcer, bpcer):
    return (apcer + bpcer) / 2.0


def metric_bundle(s: ScoreSet, threshold=None):
    """EER and, at ``threshold`` (default: the EER threshold), APCER/BPCER/ACER/HTER."""
    rate, t_eer = eer(s)
    t = t_eer if threshold is None else float(threshold)
    apcer, bpcer, acer = apcer_bpcer_acer(s, t)
    return {
        "eer": rate,
        "eer_threshold": t_eer,
        "threshold": t,
        "apcer": apcer,
        "bpcer": bpcer,
        "acer": acer,
        "hter": hter(s, t),
    }


# -- feature divergence ---------------------------------------------------
@dataclass(frozen=True)
class ChannelStats:
    mu: float
    sigma: float

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma)) or self.sigma < 0:
            raise ContractError(f"invalid channel stats mu={self.mu}, sigma={self.sigma}")


def gaussian_kl(a: ChannelStats, b: ChannelStats, mode="standard"):
    """KL(a || b) between univariate Gaussians.

    ``mode="paper-literal"`` uses the variant with log(sigma_a / sigma_b)
    and a 2 * mu_b**2 denominator.
    """
    if a.sigma <= 0 or b.sigma <= 0:
        raise ContractError("Gaussian KL needs positive sigmas")
    if mode == "standard":
        return math.log(b.sigma / a.sigma) + (a.sigma ** 2 + (a.mu - b.mu) ** 2) / (2 * b.sigma ** 2) - 0.5
    if mode == "paper-literal":
        if b.mu == 0:
            raise ContractError("paper-literal KL needs a non-zero mean")
        return math.log(a.sigma / b.sigma) + (a.sigma ** 2 + (a.mu - b.mu) ** 2) / (2 * b.mu ** 2) - 0.5
    raise ContractError(f"unknown KL mode {mode!r}")


def symmetric_kl(a: ChannelStats, b: ChannelStats, mode="standard"):
    if mode == "paper-literal" and (a.mu == 0 or b.mu == 0):
        raise ContractError("paper-literal KL needs non-zero means in both domains")
    return gaussian_kl(a, b, mode) + gaussian_kl(b, a, mode)


def channel_stats(features):
    """Per-channel stats of the spatial-mean activation over N×C×H×W features."""
    f = np.asarray(features, dtype=np.float64)
    per_sample = f.reshape(f.shape[0], f.shape[1], -1).mean(axis=2)
    return [ChannelStats(float(m), float(s)) for m, s in zip(per_sample.mean(axis=0), per_sample.std(axis=0))]


@dataclass
class LayerDivergence:
    layer: str
    divergence: float
    channels: list = field(default_factory=list)  # (channel, stats_a, stats_b, d)
    skipped: int = 0


@dataclass
class DivergenceReport:
    per_layer: list

    def as_dict(self):
        return {ld.layer: ld.divergence for ld in self.per_layer}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "channel", "mu_a", "sigma_a", "mu_b", "sigma_b", "d"])
            for ld in self.per_layer:
                for ch, sa, sb, d in ld.channels:
                    w.writerow([ld.layer, ch, repr(sa.mu), repr(sa.sigma), repr(sb.mu), repr(sb.sigma),
                                "" if d is None else repr(d)])
                w.writerow([ld.layer, "mean", "", "", "", "", repr(ld.divergence)])


def divergence_from_features(features_a, features_b, layer="layer", mode="standard", min_sigma=1e-12):
    """Average per-channel symmetric KL between two domains' features of one layer.

    Channels with (near) zero spread in either domain are skipped and counted.
    """
    if len(features_a) == 0 or len(features_b) == 0:
        raise ContractError("both sample sets must be non-empty")
    stats_a, stats_b = channel_stats(features_a), channel_stats(features_b)
    if len(stats_a) != len(stats_b):
        raise ContractError(f"channel counts differ: {len(stats_a)} vs {len(stats_b)}")
    rows, total, used, skipped = [], 0.0, 0, 0
    for ch, (sa, sb) in enumerate(zip(stats_a, stats_b)):
        if sa.sigma <= min_sigma or sb.sigma <= min_sigma:
            skipped += 1
            rows.append((ch, sa, sb, None))
            continue
        d = symmetric_kl(sa, sb, mode)
        rows.append((ch, sa, sb, d))
        total += d
        used += 1
    if skipped:
        logger.warning("layer %s: skipped %d degenerate channel(s)", layer, skipped)
    return LayerDivergence(layer, total / used if used else 0.0, rows, skipped)


def layer_divergence(network, samples_a, samples_b, layer, mode="standard"):
    """Divergence at one named layer of ``network`` (anything with ``block_features``)."""
    fa = network.block_features(samples_a)[layer]
    fb = network.block_features(samples_b)[layer]
    return divergence_from_features(fa, fb, layer, mode).divergence


def divergence_report(network, samples_a, samples_b, layers=None, mode="standard"):
    feats_a = network.block_features(samples_a)
    feats_b = network.block_features(samples_b)
    layers = list(feats_a) if layers is None else list(layers)
    return DivergenceReport([divergence_from_features(feats_a[l], feats_b[l], l, mode) for l in layers])


# -- contribution balance -------------------------------------------------
def contribution_from_arrays(weight_gap, activations):
    """Normalized |head weight| x activation-std profile and its normalized entropy."""
    spread = np.asarray(activations, dtype=np.float64).std(axis=0)
    raw = np.abs(np.asarray(weight_gap, dtype=np.float64)) * spread
    total = raw.sum()
    if raw.size < 2:
        raise ContractError("contribution profile needs at least two features")
    if total <= 0:
        raise ContractError("every feature has zero contribution")
    p = raw / total
    nz = p[p > 0]
    entropy = float(-(nz * np.log(nz)).sum() / math.log(p.size))
    return p, entropy


def contribution_profile(model, images):
    """Per-fc2-feature share of the live-vs-attack decision over an eval set.

    A feature's contribution is |w_live - w_attack| of the anti head times the
    std of that feature's activation.  Returns (profile, normalized entropy).
    """
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] == 0:
        raise ContractError("contribution profile needs a non-empty eval set")
    _, fc2 = model.forward_anti(images)
    head = model.params["anti.fc3.w"].data
    return contribution_from_arrays(head[:, LIVE] - head[:, ATTACK], fc2.data)
