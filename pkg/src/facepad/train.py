"""Joint multi-task training, evaluation, and the TPC x FDA ablation grid."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import data as dio
from .errors import ConfigError, ContractError, DivergenceError
from .fda import LossNetwork, TransferWeights, TransformNet, train_transform_net
from .losses import LossLog, LossWeights, PairBatch, anti_loss, disjoint_pairs, recg_loss, total_loss, tpc_loss
from .metrics import ScoreSet, contribution_profile, divergence_report, eer, hter, metric_bundle
from .model import BackboneConfig, MultiTaskModel, build_model
from .optim import Adam, step_decay_lr
from .tensor import Tensor, softmax

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 3e-4
    decay_steps: int = 2000
    batch_size: int = 32
    steps: int = 2000
    weights: LossWeights = LossWeights()
    use_tpc: bool = True
    use_fda: bool = False
    target_domain_image: Optional[str] = None
    seed: int = 0
    tpc_reduction: str = "sum"
    crop_fraction: float = 0.6
    fda_weights: TransferWeights = TransferWeights()
    fda_epochs: int = 30
    fda_lr: float = 3e-3
    fda_seed: int = 0
    log_every: int = 1

    def validate(self):
        problems = []
        if not self.lr0 > 0:
            problems.append(f"lr0 must be > 0, got {self.lr0}")
        if self.decay_steps < 1:
            problems.append(f"decay_steps must be >= 1, got {self.decay_steps}")
        if self.steps < 0:
            problems.append(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1 or (self.use_tpc and self.batch_size < 2):
            problems.append(f"batch_size must be >= 2 when TPC is used, got {self.batch_size}")
        if self.use_fda and not self.target_domain_image:
            problems.append("use_fda requires target_domain_image")
        if self.tpc_reduction not in ("sum", "mean"):
            problems.append(f"tpc_reduction must be sum or mean, got {self.tpc_reduction!r}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self):
        d = asdict(self)
        return d


class TrainingDiverged(DivergenceError):
    def __init__(self, message, step, last_good):
        super().__init__(message, step=step)
        self.last_good = last_good


@dataclass
class TrainResult:
    model: MultiTaskModel
    log: LossLog
    transform: Optional[TransformNet] = None


def fda_loss_network(seed=0):
    return LossNetwork(seed=seed)


def fit_transform(images, target_image, cfg: TrainConfig):
    phi = fda_loss_network(cfg.fda_seed)
    return train_transform_net(images, target_image, phi, cfg.fda_weights, epochs=cfg.fda_epochs,
                               seed=cfg.fda_seed, lr=cfg.fda_lr)


def check_dataset(samples):
    if len({s.identity for s in samples}) < 2:
        raise ContractError("training needs at least 2 identities")
    if len({s.liveness for s in samples}) < 2:
        raise ContractError("training needs both live and attack samples")


def train(model: MultiTaskModel, samples, cfg: TrainConfig, transform: Optional[TransformNet] = None,
          target_image=None):
    """Descend anti + lambda1 * recg + lambda2 * tpc with Adam on mini-batches.

    With ``use_fda`` the anti-branch inputs are first mapped by a transform
    network toward the target-domain image; the network is fitted once on the
    training images (unless given) and then frozen.  The recognition branch
    always sees center crops of the original images.
    """
    cfg.validate()
    check_dataset(samples)
    images = dio.images_of(samples)
    liveness = dio.labels_of(samples)
    identities = dio.identities_of(samples)
    if identities.max() >= model.cfg.recg_out:
        raise ContractError(f"identity {identities.max()} exceeds the recognition head ({model.cfg.recg_out})")
    crops = np.stack([dio.recognition_view(im, cfg.crop_fraction) for im in images])
    if cfg.use_fda:
        if transform is None:
            if target_image is None:
                target_image = dio.read_ppm(cfg.target_domain_image)
            transform = fit_transform(images, target_image, cfg)
        anti_inputs = transform.transfer(images)
    else:
        anti_inputs = images

    log = LossLog()
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr0)
    rng = np.random.default_rng(cfg.seed)
    n = len(samples)
    batch = min(cfg.batch_size, n)
    last_good = [p.data.copy() for p in params]
    for step in range(cfg.steps):
        idx = np.sort(rng.choice(n, size=batch, replace=False))
        logits, fc2 = model.forward_anti(Tensor(anti_inputs[idx]))
        l_anti = anti_loss(logits, liveness[idx])
        l_recg = recg_loss(model.forward_recg(Tensor(crops[idx])), identities[idx])
        if cfg.use_tpc:
            pairs = disjoint_pairs(batch, rng)
            l_tpc = tpc_loss(PairBatch.from_features(fc2, pairs), cfg.tpc_reduction)
        else:
            l_tpc = Tensor(0.0)
        values = (l_anti.item(), l_recg.item(), l_tpc.item())
        if not all(math.isfinite(v) for v in values):
            raise TrainingDiverged(f"non-finite loss at step {step}: {values}", step, last_good)
        loss = total_loss(l_anti, l_recg, l_tpc, cfg.weights)
        opt.zero_grad()
        loss.backward()
        last_good = [p.data for p in params]
        opt.step(step_decay_lr(step, cfg.lr0, cfg.decay_steps))
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            log.append(step, *values, loss.item())
    return TrainResult(model, log, transform)


# -- evaluation -----------------------------------------------------------
def liveness_scores(model, images, transform=None, batch_size=64):
    """Softmax probability of the live class for each image."""
    images = np.asarray(images, dtype=np.float64)
    if transform is not None:
        images = transform.transfer(images)
    out = []
    for start in range(0, len(images), batch_size):
        logits, _ = model.forward_anti(Tensor(images[start:start + batch_size]))
        out.append(softmax(logits)[:, 1])
    return np.concatenate(out)


def recognition_predictions(model, images, crop_fraction=0.6, batch_size=64):
    crops = np.stack([dio.recognition_view(im, crop_fraction) for im in images])
    preds = []
    for start in range(0, len(crops), batch_size):
        preds.append(model.forward_recg(Tensor(crops[start:start + batch_size])).data.argmax(axis=1))
    return np.concatenate(preds)


@dataclass
class EvalResult:
    scores: ScoreSet
    metrics: dict
    recognition_accuracy: float
    excluded_identities: int


def evaluate(model, samples, threshold=None, transform=None, crop_fraction=0.6, known_identities=None):
    """Liveness metrics and top-1 recognition accuracy over ``samples``.

    ``threshold`` None uses the EER threshold of these samples.  Samples whose
    identity lies outside ``known_identities`` (default: the recognition head's
    range) are excluded from recognition accuracy and counted.
    """
    if not samples:
        raise ContractError("evaluation needs at least one sample")
    images = dio.images_of(samples)
    scores = ScoreSet(liveness_scores(model, images, transform), dio.labels_of(samples))
    metrics = metric_bundle(scores, threshold) if len(set(scores.labels.tolist())) == 2 else {}
    ids = dio.identities_of(samples)
    known = set(range(model.cfg.recg_out)) if known_identities is None else set(known_identities)
    mask = np.array([i in known for i in ids])
    excluded = int((~mask).sum())
    if mask.any():
        preds = recognition_predictions(model, images[mask], crop_fraction)
        acc = float((preds == ids[mask]).mean())
    else:
        acc = float("nan")
    return EvalResult(scores, metrics, acc, excluded)


# -- ablation -------------------------------------------------------------
@dataclass(frozen=True)
class AblationConfig:
    """Base settings shared by all four (TPC, FDA) cells."""

    train: TrainConfig = TrainConfig(steps=300, batch_size=32, weights=LossWeights(0.1, 2.5e-5))
    synthetic: dio.SyntheticConfig = dio.SyntheticConfig()
    backbone: Optional[BackboneConfig] = None
    source_domain: str = "A"
    target_domain: str = "B"
    holdout_fraction: float = 0.25


@dataclass
class AblationRow:
    seed: int
    use_tpc: bool
    use_fda: bool
    intra_hter: float
    cross_hter: float
    threshold: float
    contribution_entropy: float


CELLS = ((False, False), (False, True), (True, False), (True, True))


def ablation_data(cfg: AblationConfig, seed):
    samples = dio.generate(replace(cfg.synthetic, seed=seed))
    source = dio.select_domain(samples, cfg.source_domain)
    target = dio.select_domain(samples, cfg.target_domain)
    if not source or not target:
        raise ConfigError(f"domains {cfg.source_domain!r} and {cfg.target_domain!r} must both be generated")
    train_set, dev_set = dio.split(source, cfg.holdout_fraction, seed)
    return train_set, dev_set, target


def run_cell(cfg: AblationConfig, seed, use_tpc, use_fda, data=None, transform=None):
    train_set, dev_set, target = ablation_data(cfg, seed) if data is None else data
    backbone = cfg.backbone or BackboneConfig.desk(cfg.synthetic.n_identities,
                                                   input_size=(3, *cfg.synthetic.image_size))
    model = build_model(backbone, seed)
    tcfg = replace(cfg.train, seed=seed, use_tpc=use_tpc, use_fda=use_fda,
                   target_domain_image=cfg.train.target_domain_image or ("<in-memory>" if use_fda else None))
    result = train(model, train_set, tcfg, transform=transform if use_fda else None,
                   target_image=train_set[0].image if use_fda else None)
    tf = result.transform
    dev_scores = ScoreSet(liveness_scores(model, dio.images_of(dev_set), tf), dio.labels_of(dev_set))
    _, threshold = eer(dev_scores)
    cross_scores = ScoreSet(liveness_scores(model, dio.images_of(target), tf), dio.labels_of(target))
    _, entropy = contribution_profile(model, dio.images_of(dev_set))
    return AblationRow(seed, use_tpc, use_fda, hter(dev_scores, threshold), hter(cross_scores, threshold),
                       threshold, entropy), result


def run_ablation(cfg: AblationConfig, seeds, cells=CELLS):
    """Train every (TPC, FDA) cell per seed on the source domain.

    Intra HTER is measured on the held-out source split at its own EER
    threshold; cross HTER applies that same threshold to the target domain.
    """
    seeds = list(seeds)
    if not seeds:
        raise ContractError("ablation needs at least one seed")
    rows = []
    for seed in seeds:
        data = ablation_data(cfg, seed)
        transform = None
        if any(fda for _, fda in cells):
            tcfg = replace(cfg.train, seed=seed)
            transform = fit_transform(dio.images_of(data[0]), data[0][0].image, tcfg)
        for use_tpc, use_fda in cells:
            row, _ = run_cell(cfg, seed, use_tpc, use_fda, data=data, transform=transform)
            logger.info("seed %d tpc=%s fda=%s intra=%.4f cross=%.4f", seed, use_tpc, use_fda,
                        row.intra_hter, row.cross_hter)
            rows.append(row)
    return rows


ABLATION_COLUMNS = ["seed", "tpc", "fda", "intra_hter", "cross_hter", "threshold", "contribution_entropy"]


def write_ablation_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([r.seed, "+" if r.use_tpc else "-", "+" if r.use_fda else "-", repr(r.intra_hter),
                        repr(r.cross_hter), repr(r.threshold), repr(r.contribution_entropy)])


def summarize_ablation(rows):
    """Mean intra/cross HTER per cell, keyed by (use_tpc, use_fda)."""
    out = {}
    for cell in CELLS:
        sel = [r for r in rows if (r.use_tpc, r.use_fda) == cell]
        if sel:
            out[cell] = {
                "intra_hter": float(np.mean([r.intra_hter for r in sel])),
                "cross_hter": float(np.mean([r.cross_hter for r in sel])),
                "contribution_entropy": float(np.mean([r.contribution_entropy for r in sel])),
                "n": len(sel),
            }
    return out


# -- domain divergence before/after transfer ------------------------------
@dataclass
class DivergenceComparison:
    before: object  # DivergenceReport
    after: object
    transform: TransformNet


def fda_divergence(images_a, images_b, target_image, weights: TransferWeights = TransferWeights(), epochs=30,
                   lr=3e-3, seed=0, probe=None, probe_seed=123, mode="standard"):
    """Per-layer A/B feature divergence before and after image-level transfer.

    Even-indexed images of both domains fit the transform network; the
    odd-indexed ones are probed.  The probe network defaults to a loss network
    seeded independently of the one that defines the transfer objective.
    """
    images_a = np.asarray(images_a, dtype=np.float64)
    images_b = np.asarray(images_b, dtype=np.float64)
    if len(images_a) < 4 or len(images_b) < 4:
        raise ContractError("divergence comparison needs at least 4 images per domain")
    phi = fda_loss_network(seed)
    pool = np.concatenate([images_a[::2], images_b[::2]])
    net = train_transform_net(pool, target_image, phi, weights, epochs=epochs, seed=seed, lr=lr)
    probe = LossNetwork(seed=probe_seed) if probe is None else probe
    ev_a, ev_b = images_a[1::2], images_b[1::2]
    before = divergence_report(probe, ev_a, ev_b, mode=mode)
    after = divergence_report(probe, net.transfer(ev_a), net.transfer(ev_b), mode=mode)
    return DivergenceComparison(before, after, net)
