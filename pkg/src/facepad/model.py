"""Two-branch multi-task network over one shared convolutional parameter store."""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ParseError, ShapeError
from .tensor import Tensor, conv2d, matmul, maxpool2d, relu, reshape

CHECKPOINT_MAGIC = b"FPCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    """Topology of the shared backbone and the two FC branches.

    ``blocks`` lists (conv layers per block, channels).  Every conv layer is
    3x3 with padding 1 followed by ReLU; each block ends in a 2x2 max pool.
    ``fc_dims`` holds the two hidden FC widths; the third FC layer of each
    branch is its head (``anti_out`` or ``recg_out`` logits).
    """

    blocks: tuple = ((2, 8), (2, 16))
    input_size: tuple = (3, 32, 32)
    fc_dims: tuple = (64, 32)
    anti_out: int = 2
    recg_out: int = 2
    scale_profile: str = "desk"

    @classmethod
    def desk(cls, n_identities, input_size=(3, 32, 32), **overrides):
        return cls(recg_out=n_identities, input_size=tuple(input_size), **overrides)

    @classmethod
    def paper(cls, n_identities, channels=(64, 128, 256, 512, 512), input_size=(3, 224, 224),
              fc_dims=(4096, 4096)):
        return cls(
            blocks=tuple((3, c) for c in channels),
            input_size=tuple(input_size),
            fc_dims=tuple(fc_dims),
            recg_out=n_identities,
            scale_profile="paper",
        )

    @property
    def n_conv_layers(self):
        return sum(n for n, _ in self.blocks)

    @property
    def n_fc_layers(self):
        return len(self.fc_dims) + 1

    @property
    def flat_dim(self):
        _, h, w = self.input_size
        shrink = 2 ** len(self.blocks)
        return self.blocks[-1][1] * (h // shrink) * (w // shrink)

    def validate(self):
        problems = []
        if self.scale_profile not in ("desk", "paper"):
            problems.append(f"scale_profile must be 'desk' or 'paper', got {self.scale_profile!r}")
        if len(self.input_size) != 3 or min(self.input_size) < 1:
            problems.append(f"input_size must be (C, H, W) with positive extents, got {self.input_size}")
        if len(self.fc_dims) != 2 or min(self.fc_dims, default=0) < 1:
            problems.append(f"fc_dims must hold two positive hidden widths, got {self.fc_dims}")
        if self.anti_out != 2:
            problems.append(f"anti_out must be 2, got {self.anti_out}")
        if self.recg_out < 2:
            problems.append(f"recg_out must be >= 2 identities, got {self.recg_out}")
        if any(n < 1 or c < 1 for n, c in self.blocks):
            problems.append(f"every block needs >= 1 conv layer and >= 1 channel, got {self.blocks}")
        if self.scale_profile == "paper" and (len(self.blocks) != 5 or any(n != 3 for n, _ in self.blocks)):
            problems.append("paper profile needs 5 blocks of 3 conv layers")
        if self.scale_profile == "desk" and len(self.blocks) < 2:
            problems.append("desk profile needs at least 2 blocks")
        if len(self.input_size) == 3:
            shrink = 2 ** len(self.blocks)
            _, h, w = self.input_size
            if h % shrink or w % shrink:
                problems.append(f"input {h}x{w} must be divisible by 2^{len(self.blocks)} for pooling")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self):
        d = asdict(self)
        d["blocks"] = [list(b) for b in self.blocks]
        d["input_size"] = list(self.input_size)
        d["fc_dims"] = list(self.fc_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            blocks=tuple(tuple(b) for b in d["blocks"]),
            input_size=tuple(d["input_size"]),
            fc_dims=tuple(d["fc_dims"]),
            anti_out=int(d["anti_out"]),
            recg_out=int(d["recg_out"]),
            scale_profile=d["scale_profile"],
        )


def parameter_shapes(cfg: BackboneConfig):
    """Ordered (name, shape) pairs in declaration order."""
    shapes = []
    cin = cfg.input_size[0]
    for b, (n_layers, channels) in enumerate(cfg.blocks, start=1):
        for layer in range(1, n_layers + 1):
            shapes.append((f"conv{b}_{layer}.w", (channels, cin, 3, 3)))
            shapes.append((f"conv{b}_{layer}.b", (channels,)))
            cin = channels
    for branch, out in (("anti", cfg.anti_out), ("recg", cfg.recg_out)):
        dims = [cfg.flat_dim, *cfg.fc_dims, out]
        for i in range(3):
            shapes.append((f"{branch}.fc{i + 1}.w", (dims[i], dims[i + 1])))
            shapes.append((f"{branch}.fc{i + 1}.b", (dims[i + 1],)))
    return shapes


def parameter_count(cfg: BackboneConfig):
    """Closed-form parameter count (independent of :func:`parameter_shapes`)."""
    total, cin = 0, cfg.input_size[0]
    for n_layers, c in cfg.blocks:
        total += c * cin * 9 + c
        total += (n_layers - 1) * (c * c * 9 + c)
        cin = c
    f1, f2 = cfg.fc_dims
    trunk = cfg.flat_dim * f1 + f1 + f1 * f2 + f2
    total += 2 * trunk + (f2 + 1) * (cfg.anti_out + cfg.recg_out)
    return total


class MultiTaskModel:
    """Anti-spoofing and recognition branches reading one parameter store.

    ``params`` holds exactly one tensor per parameter.  The conv entries are
    the shared backbone; ``anti.*`` and ``recg.*`` are the branch FC layers.
    ``taps`` maps layer names to the activations of the latest forward call.
    """

    def __init__(self, cfg: BackboneConfig, params: "OrderedDict[str, Tensor]"):
        self.cfg = cfg
        self.params = params
        self.taps = {}

    @property
    def shared_params(self):
        return OrderedDict((k, v) for k, v in self.params.items() if k.startswith("conv"))

    @property
    def anti_head(self):
        return OrderedDict((k, v) for k, v in self.params.items() if k.startswith("anti."))

    @property
    def recg_head(self):
        return OrderedDict((k, v) for k, v in self.params.items() if k.startswith("recg."))

    def parameters(self):
        return list(self.params.values())

    def _check_input(self, image):
        expected = tuple(self.cfg.input_size)
        if tuple(image.shape[-3:]) != expected or image.ndim not in (3, 4):
            raise ShapeError(f"expected input of shape {expected} (optionally batched), got {image.shape}")

    def _backbone(self, x, prefix):
        p = self.params
        for b, (n_layers, _) in enumerate(self.cfg.blocks, start=1):
            for layer in range(1, n_layers + 1):
                name = f"conv{b}_{layer}"
                bias = reshape(p[name + ".b"], (-1, 1, 1))
                x = relu(conv2d(x, p[name + ".w"], stride=1, padding=1) + bias)
            x = maxpool2d(x, 2, 2)
            self.taps[f"{prefix}block{b}"] = x
        return x

    def _branch(self, x, branch):
        p = self.params
        single = x.ndim == 3
        flat = reshape(x, (1 if single else x.shape[0], -1))
        h1 = relu(matmul(flat, p[f"{branch}.fc1.w"]) + p[f"{branch}.fc1.b"])
        h2 = relu(matmul(h1, p[f"{branch}.fc2.w"]) + p[f"{branch}.fc2.b"])
        logits = matmul(h2, p[f"{branch}.fc3.w"]) + p[f"{branch}.fc3.b"]
        self.taps[f"fc1_{branch}"] = h1
        self.taps[f"fc2_{branch}"] = h2
        if single:
            return reshape(logits, (-1,)), reshape(h2, (-1,))
        return logits, h2

    def forward_anti(self, image):
        """Live/spoof logits and the second-FC representation of the anti branch."""
        image = image if isinstance(image, Tensor) else Tensor(image)
        self._check_input(image)
        return self._branch(self._backbone(image, ""), "anti")

    def forward_recg(self, cropped):
        """Identity logits for (resized) center-cropped faces."""
        cropped = cropped if isinstance(cropped, Tensor) else Tensor(cropped)
        self._check_input(cropped)
        logits, _ = self._branch(self._backbone(cropped, "recg_"), "recg")
        return logits

    def block_features(self, images):
        """Conv block outputs for a batch of images, as a name -> array map."""
        images = images if isinstance(images, Tensor) else Tensor(images)
        self._check_input(images)
        self._backbone(images, "")
        return OrderedDict((f"block{b}", self.taps[f"block{b}"].data)
                           for b in range(1, len(self.cfg.blocks) + 1))

    def flat_parameters(self):
        return np.concatenate([p.data.reshape(-1) for p in self.params.values()])

    def save(self, path):
        write_checkpoint(path, {"kind": "multitask", "config": self.cfg.to_dict()}, self.params.values())

    @classmethod
    def load(cls, path):
        header, flat = read_checkpoint(path)
        if header.get("kind") != "multitask":
            raise ParseError(f"{path}: checkpoint kind {header.get('kind')!r} is not a multitask model")
        cfg = BackboneConfig.from_dict(header["config"])
        model = build_model(cfg, seed=0)
        fill_parameters(model.params, flat, path)
        return model


def build_model(cfg: BackboneConfig, seed: int) -> MultiTaskModel:
    """He-normal weights, zero biases, deterministic in ``seed``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in parameter_shapes(cfg):
        if name.endswith(".b"):
            params[name] = Tensor(np.zeros(shape), requires_grad=True)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            params[name] = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)
    return MultiTaskModel(cfg, params)


# -- checkpoint format ----------------------------------------------------
# little-endian: magic(4) | version u32 | header_len u32 | header JSON (utf-8)
# | n_values u64 | n_values raw float64, parameters in declaration order
def write_checkpoint(path, header: dict, arrays):
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    flat = np.concatenate([np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64).reshape(-1)
                           for a in arrays])
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.astype("<f8").tobytes())


def read_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: bad checkpoint magic at byte 0")
    if len(raw) < 12:
        raise ParseError(f"{path}: truncated checkpoint header at byte {len(raw)}")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version} at byte 4")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: malformed checkpoint header at byte 12: {exc}") from None
    off = 12 + hlen
    if len(raw) < off + 8:
        raise ParseError(f"{path}: truncated checkpoint at byte {len(raw)}")
    (count,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if len(raw) != off + 8 * count:
        raise ParseError(f"{path}: expected {count} float64 values after byte {off}, file has {len(raw) - off} bytes")
    return header, np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(np.float64)


def fill_parameters(params, flat, source="checkpoint"):
    expected = sum(p.data.size for p in params.values())
    if flat.size != expected:
        raise ParseError(f"{source}: holds {flat.size} values, model needs {expected}")
    off = 0
    for p in params.values():
        n = p.data.size
        p.data = flat[off:off + n].reshape(p.data.shape).copy()
        off += n
