"""
Face samples: synthetic two-domain generation, PPM/manifest I/O, augmentation.

The synthetic generator renders a seeded geometric "face" per identity.  A
domain is an acquisition environment (background, illumination gain, blur,
sensor noise).  Attack samples are the same renders with the domain's spoof
signature applied: a low-amplitude periodic grid (moire proxy) whose period
and orientation are specific to the domain, plus a print-like channel-gain
colour distortion and a weak halftone grid shared by all domains.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ParseError, ShapeError

LIVE, ATTACK = "live", "attack"


@dataclass
class FaceSample:
    image: np.ndarray  # 3×H×W in [0, 1]
    identity: int
    liveness: str
    domain: str

    @property
    def label(self):
        """1 for live, 0 for attack."""
        return 1 if self.liveness == LIVE else 0


@dataclass(frozen=True)
class SpoofSignature:
    grid_period: float = 4.0  # pixels
    grid_angle: float = 0.0  # degrees
    grid_amplitude: float = 0.06
    color_gain: tuple = (1.06, 0.98, 0.90)
    # weak print halftone, the same in every domain
    halftone_period: float = 3.0
    halftone_angle: float = 45.0
    halftone_amplitude: float = 0.0


@dataclass(frozen=True)
class DomainSpec:
    name: str
    background: tuple = (0.25, 0.3, 0.35)
    background_std: float = 0.03
    gain: tuple = (1.0, 1.0, 1.0)
    noise: float = 0.02
    blur: int = 0  # box-blur radius in pixels
    spoof: SpoofSignature = SpoofSignature()


def default_domains():
    """Two environments with different lighting and different moire signatures."""
    return (
        DomainSpec("A", background=(0.22, 0.30, 0.38), background_std=0.03, gain=(1.0, 1.0, 1.0),
                   noise=0.02, blur=0, spoof=SpoofSignature(4.0, 0.0, 0.06, (1.06, 0.98, 0.90), halftone_amplitude=0.03)),
        DomainSpec("B", background=(0.45, 0.38, 0.25), background_std=0.05, gain=(1.12, 0.96, 0.82),
                   noise=0.035, blur=0, spoof=SpoofSignature(6.0, 60.0, 0.06, (1.06, 0.98, 0.90), halftone_amplitude=0.03)),
    )


@dataclass(frozen=True)
class SyntheticConfig:
    n_identities: int = 8
    samples_per_id: int = 16  # per domain, half live and half attack
    domains: tuple = field(default_factory=default_domains)
    image_size: tuple = (32, 32)
    seed: int = 0

    def validate(self):
        problems = []
        if self.n_identities < 2:
            problems.append(f"n_identities must be >= 2, got {self.n_identities}")
        if self.samples_per_id < 2 or self.samples_per_id % 2:
            problems.append(f"samples_per_id must be a positive even number, got {self.samples_per_id}")
        if not self.domains:
            problems.append("at least one domain is required")
        if len({d.name for d in self.domains}) != len(self.domains):
            problems.append("domain names must be unique")
        if len(self.image_size) != 2 or min(self.image_size) < 8:
            problems.append(f"image_size must be (H, W) with extents >= 8, got {self.image_size}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self


# -- rendering ------------------------------------------------------------
def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _identity_params(seed, identity):
    r = _rng(seed, 1, identity)
    return {
        "rx": r.uniform(0.42, 0.62),
        "ry": r.uniform(0.55, 0.78),
        "skin": r.uniform(0.35, 0.92, size=3),
        "eye_y": r.uniform(-0.35, -0.1),
        "eye_dx": r.uniform(0.16, 0.32),
        "eye_r": r.uniform(0.06, 0.12),
        "eye_color": r.uniform(0.0, 0.35, size=3),
        "mouth_y": r.uniform(0.25, 0.45),
        "mouth_w": r.uniform(0.12, 0.3),
        "mouth_color": r.uniform(0.2, 0.7, size=3),
        "hair": r.uniform(0.0, 0.6, size=3),
        "hair_line": r.uniform(-0.75, -0.45),
    }


def _soft(dist, h):
    # anti-aliased inside-mask from a signed distance (negative inside)
    return 1.0 / (1.0 + np.exp(np.clip(dist / h, -50, 50)))


def render_face(params, size, rng):
    """3×H×W face render with per-sample pose jitter, before any domain effects."""
    h, w = size
    ys = (np.arange(h) + 0.5) / h * 2 - 1
    xs = (np.arange(w) + 0.5) / w * 2 - 1
    y, x = np.meshgrid(ys, xs, indexing="ij")
    cx, cy = rng.uniform(-0.08, 0.08, size=2)
    scale = rng.uniform(0.95, 1.05)
    x = (x - cx) / scale
    y = (y - cy) / scale
    px = 2.0 / min(h, w)
    img = np.zeros((3, h, w))
    alpha = np.zeros((h, w))

    def paint(mask, color):
        nonlocal img, alpha
        img = img * (1 - mask) + mask * np.asarray(color)[:, None, None]
        alpha = np.maximum(alpha, mask)

    face = np.sqrt((x / params["rx"]) ** 2 + (y / params["ry"]) ** 2) - 1.0
    paint(_soft(face * min(params["rx"], params["ry"]), px), params["skin"])
    hair = _soft(face * min(params["rx"], params["ry"]), px) * _soft(y - params["hair_line"], px)
    paint(hair, params["hair"])
    for side in (-1, 1):
        eye = np.hypot(x - side * params["eye_dx"], y - params["eye_y"]) - params["eye_r"]
        paint(_soft(eye, px), params["eye_color"])
    mouth = np.maximum(np.abs(x) - params["mouth_w"], np.abs(y - params["mouth_y"]) - 0.05)
    paint(_soft(mouth, px), params["mouth_color"])
    return img * rng.uniform(0.92, 1.08), alpha


def _grid(size, period, angle, amplitude):
    h, w = size
    y, x = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    theta = math.radians(angle)
    u = x * math.cos(theta) + y * math.sin(theta)
    return amplitude * np.sin(2 * math.pi * u / period)


def moire_pattern(size, spoof: SpoofSignature):
    return _grid(size, spoof.grid_period, spoof.grid_angle, spoof.grid_amplitude)


def box_blur(image, radius):
    if radius <= 0:
        return image
    k = 2 * radius + 1
    padded = np.pad(image, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    return sliding_window_view(padded, (k, k), axis=(1, 2)).mean(axis=(-2, -1))


def render_sample(cfg: SyntheticConfig, domain_index, identity, index, liveness):
    dom = cfg.domains[domain_index]
    size = tuple(cfg.image_size)
    rng = _rng(cfg.seed, 2, domain_index, identity, index)
    face, alpha = render_face(_identity_params(cfg.seed, identity), size, rng)
    h, w = size
    ramp = np.linspace(-1, 1, h)[:, None] * rng.uniform(-0.05, 0.05)
    bg = np.asarray(dom.background)[:, None, None] + ramp + rng.normal(0, dom.background_std, (3, h, w))
    img = face * alpha + bg * (1 - alpha)
    if liveness == ATTACK:
        img = img * np.asarray(dom.spoof.color_gain)[:, None, None]
        img = img + moire_pattern(size, dom.spoof)[None]
        if dom.spoof.halftone_amplitude:
            img = img + _grid(size, dom.spoof.halftone_period, dom.spoof.halftone_angle,
                              dom.spoof.halftone_amplitude)[None]
    img = img * np.asarray(dom.gain)[:, None, None]
    img = box_blur(img, dom.blur)
    img = img + rng.normal(0, dom.noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate(cfg: SyntheticConfig):
    """Deterministic dataset: for each domain and identity, half live, half attack."""
    cfg.validate()
    samples = []
    half = cfg.samples_per_id // 2
    for d, dom in enumerate(cfg.domains):
        for ident in range(cfg.n_identities):
            for k in range(cfg.samples_per_id):
                liveness = LIVE if k < half else ATTACK
                img = render_sample(cfg, d, ident, k, liveness)
                samples.append(FaceSample(img, ident, liveness, dom.name))
    return samples


# -- dataset helpers ------------------------------------------------------
def images_of(samples):
    return np.stack([s.image for s in samples]).astype(np.float64)


def labels_of(samples):
    return np.array([s.label for s in samples], dtype=np.int64)


def identities_of(samples):
    return np.array([s.identity for s in samples], dtype=np.int64)


def select_domain(samples, name):
    return [s for s in samples if s.domain == name]


def split(samples, holdout_fraction, seed):
    """Random (train, held-out) split stratified by identity and liveness."""
    rng = np.random.default_rng(seed)
    groups = {}
    for i, s in enumerate(samples):
        groups.setdefault((s.identity, s.liveness), []).append(i)
    held = set()
    for key in sorted(groups):
        idx = groups[key]
        n = int(round(len(idx) * holdout_fraction))
        held.update(rng.permutation(idx)[:n].tolist())
    train = [s for i, s in enumerate(samples) if i not in held]
    test = [s for i, s in enumerate(samples) if i in held]
    return train, test


# -- geometry -------------------------------------------------------------
def hflip(image):
    return image[..., ::-1].copy()


def vflip(image):
    return image[..., ::-1, :].copy()


def augment_flips(samples, mode="triple"):
    """Replicate live samples with flips; attack samples pass through unchanged.

    ``triple``: original, horizontal flip, vertical flip.
    ``double``: original, horizontal flip.
    """
    if mode not in ("triple", "double"):
        raise ValueError(f"unknown flip mode {mode!r}")
    out = []
    for s in samples:
        out.append(s)
        if s.liveness != LIVE:
            continue
        out.append(replace(s, image=hflip(s.image)))
        if mode == "triple":
            out.append(replace(s, image=vflip(s.image)))
    return out


def center_crop(image, fraction):
    if not 0 < fraction <= 1:
        raise ShapeError(f"crop fraction must lie in (0, 1], got {fraction}")
    h, w = image.shape[-2:]
    ch, cw = int(math.floor(h * fraction)), int(math.floor(w * fraction))
    if ch < 1 or cw < 1:
        raise ShapeError(f"crop of {h}x{w} by {fraction} is empty")
    top, left = (h - ch) // 2, (w - cw) // 2
    return image[..., top:top + ch, left:left + cw].copy()


def resize_bilinear(image, size):
    """Bilinear resize of the last two axes (half-pixel centres, edge clamped)."""
    h, w = image.shape[-2:]
    oh, ow = size

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, oh)
    x0, x1, fx = axis(w, ow)
    top = image[..., y0, :] * (1 - fy)[:, None] + image[..., y1, :] * fy[:, None]
    return top[..., x0] * (1 - fx) + top[..., x1] * fx


def recognition_view(image, fraction=0.6):
    """Center crop resized back to the original extent: the recognition branch input."""
    return resize_bilinear(center_crop(image, fraction), image.shape[-2:])


# -- PPM codec ------------------------------------------------------------
def write_ppm(path, image):
    """Binary P6, 8-bit; ``image`` is 3×H×W in [0, 1]."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"PPM needs a 3×H×W image, got {img.shape}")
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    _, h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.transpose(1, 2, 0).tobytes())


def _ppm_tokens(raw, path):
    tokens, pos = [], 0
    while len(tokens) < 4:
        if pos >= len(raw):
            raise ParseError(f"{path}: truncated PPM header at byte {pos}")
        c = raw[pos:pos + 1]
        if c == b"#":
            end = raw.find(b"\n", pos)
            pos = len(raw) if end < 0 else end + 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
                pos += 1
            tokens.append((raw[start:pos], start))
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ParseError(f"{path}: missing whitespace after PPM header at byte {pos}")
    return tokens, pos + 1


def read_ppm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, offset = _ppm_tokens(raw, path)
    (magic, m_at), (w_tok, w_at), (h_tok, h_at), (max_tok, max_at) = tokens
    if magic != b"P6":
        raise ParseError(f"{path}: bad PPM magic {magic!r} at byte {m_at}")
    try:
        w, h, maxval = int(w_tok), int(h_tok), int(max_tok)
    except ValueError:
        raise ParseError(f"{path}: non-numeric PPM header field at byte {w_at}") from None
    if w < 1 or h < 1:
        raise ParseError(f"{path}: bad PPM extent {w}x{h} at byte {w_at}")
    if maxval != 255:
        raise ParseError(f"{path}: only 8-bit PPM (maxval 255) is supported, got {maxval} at byte {max_at}")
    need = 3 * w * h
    if len(raw) - offset < need:
        raise ParseError(f"{path}: raster truncated at byte {len(raw)}, need {need} bytes from byte {offset}")
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=offset)
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


# -- manifest -------------------------------------------------------------
MANIFEST_HEADER = ["path", "identity", "liveness", "domain"]


def load_manifest(path):
    """Parse a ``path,identity,liveness,domain`` CSV; image paths are relative to it."""
    if not os.path.exists(path):
        raise ParseError(f"{path}: manifest not found")
    base = os.path.dirname(os.path.abspath(path))
    samples = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise ParseError(f"{path}:1: expected header {','.join(MANIFEST_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            rel, ident, liveness, domain = (f.strip() for f in row)
            try:
                ident = int(ident)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: identity {ident!r} is not an integer") from None
            if ident < 0:
                raise ParseError(f"{path}:{lineno}: identity must be >= 0, got {ident}")
            if liveness not in (LIVE, ATTACK):
                raise ParseError(f"{path}:{lineno}: liveness must be live or attack, got {liveness!r}")
            img_path = rel if os.path.isabs(rel) else os.path.join(base, rel)
            if not os.path.exists(img_path):
                raise ParseError(f"{path}:{lineno}: image {rel} not found")
            samples.append(FaceSample(read_ppm(img_path), ident, liveness, domain))
    return samples


def save_dataset(samples, root):
    """Write ``manifest.csv`` plus one PPM per sample under ``root/images``."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    manifest = os.path.join(root, "manifest.csv")
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        for i, s in enumerate(samples):
            rel = f"images/{s.domain}_{i:05d}_{s.liveness}.ppm"
            write_ppm(os.path.join(root, rel), s.image)
            w.writerow([rel, s.identity, s.liveness, s.domain])
    return manifest
