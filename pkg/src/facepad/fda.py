"""
Image-level domain adaptation by content and Gram-matrix feature losses.

A frozen convolutional loss network supplies features.  Transferring an
image ``x`` toward a target-domain image ``y_d`` minimises

    lambda_c * content(phi_c(y), phi_c(x)) + lambda_s * sum_j domain(phi_j(y), phi_j(y_d))

either directly over the pixels of ``y`` (:func:`transfer_image`) or over the
weights of a small feed-forward network ``y = f(x)``
(:func:`train_transform_net`).
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError, DivergenceError, ParseError, ShapeError
from .model import fill_parameters, read_checkpoint, write_checkpoint
from .optim import Adam
from .tensor import Tensor, conv2d, matmul, maxpool2d, relu, reshape, transpose, tsum, upsample2x


@dataclass(frozen=True)
class TransferWeights:
    lambda_c: float = 1.0
    lambda_s: float = 3.0e4  # domain term is ~1e-6 at desk scale

    def __post_init__(self):
        for v in (self.lambda_c, self.lambda_s):
            if not math.isfinite(v) or v < 0:
                raise ContractError(f"transfer weights must be finite and >= 0, got {self.lambda_c}, {self.lambda_s}")


def _he(rng, shape):
    return rng.normal(0.0, math.sqrt(2.0 / int(np.prod(shape[1:]))), size=shape)


class LossNetwork:
    """Fixed random-weight conv stack; ``blockK`` is the K-th ReLU output.

    Blocks after the first start with a 2x2 max pool.
    """

    def __init__(self, channels=(8, 16, 16), in_channels=3, seed=0,
                 content_layer="block2", domain_layers=None):
        rng = np.random.default_rng(seed)
        self.weights = []
        cin = in_channels
        for c in channels:
            self.weights.append((Tensor(_he(rng, (c, cin, 3, 3))), Tensor(rng.normal(0, 0.05, size=(c, 1, 1)))))
            cin = c
        self.layer_names = [f"block{i + 1}" for i in range(len(channels))]
        self.content_layer = content_layer
        self.domain_layers = list(self.layer_names if domain_layers is None else domain_layers)
        unknown = {content_layer, *self.domain_layers} - set(self.layer_names)
        if unknown:
            raise ContractError(f"unknown loss-network layers: {sorted(unknown)}")
        self.seed = seed
        self.channels = tuple(channels)

    def features(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        out = OrderedDict()
        for i, (w, b) in enumerate(self.weights):
            if i:
                x = maxpool2d(x, 2, 2)
            x = relu(conv2d(x, w, 1, 1) + b)
            out[self.layer_names[i]] = x
        return out

    def block_features(self, images):
        return OrderedDict((k, v.data) for k, v in self.features(np.asarray(images, dtype=np.float64)).items())


# -- losses ---------------------------------------------------------------
def gram(features):
    """kappa kappa^T / (C H W) for C×H×W features (or a batch N×C×H×W)."""
    f = features if isinstance(features, Tensor) else Tensor(features)
    if f.ndim not in (3, 4) or min(f.shape) < 1:
        raise ShapeError(f"gram needs C×H×W or N×C×H×W features, got {f.shape}")
    c, h, w = f.shape[-3:]
    if f.ndim == 3:
        k = reshape(f, (c, h * w))
        return matmul(k, transpose(k)) * (1.0 / (c * h * w))
    k = reshape(f, (f.shape[0], c, h * w))
    return matmul(k, transpose(k, (0, 2, 1))) * (1.0 / (c * h * w))


def _per_sample_mean(sq, batched):
    total = tsum(sq)
    return total * (1.0 / sq.shape[0]) if batched else total


def content_loss(y_feat, x_feat):
    """||y_feat - x_feat||^2 / (C H W), averaged over a leading batch axis if present."""
    y_feat = y_feat if isinstance(y_feat, Tensor) else Tensor(y_feat)
    x_feat = x_feat if isinstance(x_feat, Tensor) else Tensor(x_feat)
    if y_feat.shape != x_feat.shape:
        raise ShapeError(f"content loss needs equal shapes, got {y_feat.shape} and {x_feat.shape}")
    c, h, w = y_feat.shape[-3:]
    d = y_feat - x_feat
    return _per_sample_mean(d * d, y_feat.ndim == 4) * (1.0 / (c * h * w))


def domain_loss(y_feat, yd_feat=None, target_gram=None):
    """||G(y_feat) - G(yd_feat)||_F^2 / (C H W) with (C, H, W) taken from ``y_feat``.

    Pass ``target_gram`` instead of ``yd_feat`` to reuse a precomputed target.
    """
    y_feat = y_feat if isinstance(y_feat, Tensor) else Tensor(y_feat)
    if target_gram is None:
        yd_feat = yd_feat if isinstance(yd_feat, Tensor) else Tensor(yd_feat)
        if yd_feat.shape[-3] != y_feat.shape[-3]:
            raise ShapeError(f"domain loss needs equal channel counts, got {y_feat.shape} and {yd_feat.shape}")
        target_gram = gram(yd_feat)
    target = target_gram if isinstance(target_gram, Tensor) else Tensor(target_gram)
    c, h, w = y_feat.shape[-3:]
    if target.shape[-1] != c:
        raise ShapeError(f"target Gram is {target.shape}, features have {c} channels")
    d = gram(y_feat) - target
    return _per_sample_mean(d * d, y_feat.ndim == 4) * (1.0 / (c * h * w))


class TransferObjective:
    """Transfer objective with the source content and target Grams cached."""

    def __init__(self, phi: LossNetwork, x, y_d, w: TransferWeights):
        self.phi, self.w = phi, w
        x = np.asarray(x, dtype=np.float64)
        y_d = np.asarray(y_d, dtype=np.float64)
        if y_d.ndim != 3:
            raise ShapeError(f"target-domain image must be C×H×W, got {y_d.shape}")
        self.x_content = Tensor(phi.features(x)[phi.content_layer].data)
        yd_feats = phi.features(y_d)
        self.target_grams = {name: Tensor(gram(yd_feats[name]).data) for name in phi.domain_layers}

    def __call__(self, y):
        feats = self.phi.features(y)
        total = content_loss(feats[self.phi.content_layer], self.x_content) * self.w.lambda_c
        for name in self.phi.domain_layers:
            total = total + domain_loss(feats[name], target_gram=self.target_grams[name]) * self.w.lambda_s
        return total


def transfer_objective(y, x, y_d, phi, w):
    return TransferObjective(phi, x, y_d, w)(y)


def transfer_image(x, y_d, phi: LossNetwork, w: TransferWeights = TransferWeights(), steps=100, lr=1.0,
                   return_trace=False):
    """Projected gradient descent on the pixels of ``y``, starting from ``x``.

    A step that would raise the objective is retried with half the step
    size, so the recorded objective trace never increases.  Accepted steps
    grow the step size by 1.5x.  Pixels are kept in [0, 1].
    """
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    x = np.asarray(x, dtype=np.float64)
    if x.min() < 0 or x.max() > 1:
        raise ContractError("images must lie in [0, 1]")
    objective = TransferObjective(phi, x, y_d, w)
    y = x.copy()
    current = objective(Tensor(y)).item()
    trace = [current]
    for step in range(steps):
        probe = Tensor(y, requires_grad=True)
        value = objective(probe)
        value.backward()
        grad = probe.grad
        if not np.all(np.isfinite(grad)) or not math.isfinite(value.item()):
            raise DivergenceError(f"non-finite transfer objective at step {step}", step=step)
        if not np.any(grad):
            break
        for _ in range(40):
            cand = np.clip(y - lr * grad, 0.0, 1.0)
            cand_value = objective(Tensor(cand)).item()
            if not math.isfinite(cand_value):
                raise DivergenceError(f"non-finite transfer objective at step {step}", step=step)
            if cand_value <= current:
                break
            lr *= 0.5
        else:
            break
        y, current = cand, cand_value
        trace.append(current)
        lr *= 1.5
    return (y, trace) if return_trace else y


# -- feed-forward transform network ---------------------------------------
class TransformNet:
    """Residual encoder-decoder: y = x + dec(enc(x)), starting at the identity.

    enc: 3x3 conv (3->h) ReLU, 3x3 stride-2 conv (h->2h) ReLU;
    dec: 2x nearest upsample, 3x3 conv (2h->h) ReLU, 3x3 conv (h->3) zero-initialised.
    """

    def __init__(self, hidden=8, seed=0, in_channels=3):
        rng = np.random.default_rng(seed)
        h, c = hidden, in_channels
        shapes = [("enc1", (h, c, 3, 3)), ("enc2", (2 * h, h, 3, 3)), ("dec1", (h, 2 * h, 3, 3)), ("dec2", (c, h, 3, 3))]
        self.params = OrderedDict()
        for name, shape in shapes:
            init = np.zeros(shape) if name == "dec2" else _he(rng, shape)
            self.params[name + ".w"] = Tensor(init, requires_grad=True)
            self.params[name + ".b"] = Tensor(np.zeros((shape[0], 1, 1)), requires_grad=True)
        self.hidden, self.seed, self.in_channels = hidden, seed, in_channels

    def parameters(self):
        return list(self.params.values())

    def forward(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise ShapeError(f"transform network needs even spatial extents, got {x.shape}")
        p = self.params
        h = relu(conv2d(x, p["enc1.w"], 1, 1) + p["enc1.b"])
        h = relu(conv2d(h, p["enc2.w"], 2, 1) + p["enc2.b"])
        h = upsample2x(h)
        h = relu(conv2d(h, p["dec1.w"], 1, 1) + p["dec1.b"])
        return x + conv2d(h, p["dec2.w"], 1, 1) + p["dec2.b"]

    __call__ = forward

    def transfer(self, images):
        """Apply to an image or batch and clamp to [0, 1] (no graph recorded)."""
        return np.clip(self.forward(Tensor(np.asarray(images, dtype=np.float64))).data, 0.0, 1.0)

    def save(self, path, extra=None):
        header = {"kind": "transform", "config": {"hidden": self.hidden, "seed": self.seed,
                                                  "in_channels": self.in_channels, **(extra or {})}}
        write_checkpoint(path, header, self.params.values())

    @classmethod
    def load(cls, path):
        header, flat = read_checkpoint(path)
        if header.get("kind") != "transform":
            raise ParseError(f"{path}: checkpoint kind {header.get('kind')!r} is not a transform network")
        cfg = header["config"]
        net = cls(hidden=int(cfg["hidden"]), seed=int(cfg["seed"]), in_channels=int(cfg["in_channels"]))
        fill_parameters(net.params, flat, path)
        return net


def batch_objective(phi, y, x_content, target_grams, w):
    feats = phi.features(y)
    total = content_loss(feats[phi.content_layer], x_content) * w.lambda_c
    for name in phi.domain_layers:
        total = total + domain_loss(feats[name], target_gram=target_grams[name]) * w.lambda_s
    return total


def target_grams(phi, y_d):
    feats = phi.features(np.asarray(y_d, dtype=np.float64))
    return {name: Tensor(gram(feats[name]).data) for name in phi.domain_layers}


def mean_objective(transform, images, y_d, phi, w, batch_size=32):
    """Average transfer objective of ``transform(x)`` over ``images``; None means identity."""
    images = np.asarray(images, dtype=np.float64)
    grams = target_grams(phi, y_d)
    total = 0.0
    for start in range(0, len(images), batch_size):
        xb = images[start:start + batch_size]
        x_content = Tensor(phi.features(xb)[phi.content_layer].data)
        y = Tensor(xb) if transform is None else Tensor(transform.transfer(xb))
        total += batch_objective(phi, y, x_content, grams, w).item() * len(xb)
    return total / len(images)


def train_transform_net(images, y_d, phi: LossNetwork, w: TransferWeights = TransferWeights(), epochs=10,
                        seed=0, batch_size=8, lr=1e-3, hidden=8, log=None):
    """Fit a :class:`TransformNet` to the transfer objective averaged over ``images``."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise ContractError(f"transform training needs a non-empty N×C×H×W image array, got {images.shape}")
    net = TransformNet(hidden=hidden, seed=seed, in_channels=images.shape[1])
    grams = target_grams(phi, y_d)
    contents = phi.features(images)[phi.content_layer].data
    opt = Adam(net.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(images), batch_size):
            idx = np.sort(order[start:start + batch_size])
            loss = batch_objective(phi, net(Tensor(images[idx])), Tensor(contents[idx]), grams, w)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite transform loss at epoch {epoch}, step {step}", step=step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if log is not None:
                log.append((epoch, step, value))
            step += 1
    return net
