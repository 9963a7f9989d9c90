"""Synthetic "real vs attack" domains with controllable shift.

A real sample is a shaded radial bump (the face) on a domain background. An
attack shows the same kind of face with its shading partly flattened. About
half of the attacks also carry a border artifact of the capture medium
(paper edge, screen bezel, fingers, cut edges, dashed frame) together with
that medium's exposure change; which artifact appears depends on the
domain. Each domain then applies its own hue rotation, brightness scale and
sensor noise to both classes.

The shading cue transfers across domains while the artifacts do not, so a
model that leans on a source domain's artifact generalizes poorly.

On disk a dataset is a directory::

    <root>/manifest.json
    <root>/<domain>/inputs.f32   little-endian float32, n x C x H x W
    <root>/<domain>/labels.u8    one byte per sample (1 real, 0 fake)
    <root>/<domain>/depth.f32    little-endian float32, n x Hd x Wd

Pixel values are float32-representable so save/load is bit-exact.
"""

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

FORMAT_VERSION = 1
N_ARTIFACTS = 5
SHADE_GAIN = 0.65  # share of face intensity driven by shading
LIGHT_JITTER = 0.2  # sd of the light direction offset
FLAT_CONTRAST = (0.2, 0.6)  # shading contrast kept by an attack, uniform range
ARTIFACT_RATE = 0.5  # fraction of attacks showing the medium's artifact


class DatasetFormatError(ValueError):
    """A dataset directory is missing, truncated or inconsistent."""

    def __init__(self, path, detail):
        super().__init__(f"{path}: {detail}")
        self.path = str(path)


@dataclass(frozen=True)
class DomainShift:
    hue_rotation: float = 0.0
    brightness_scale: float = 1.0
    background_texture_id: int = 0
    noise_sigma: float = 0.0


@dataclass(frozen=True)
class DomainSpec:
    name: str
    shift: DomainShift = field(default_factory=DomainShift)
    n_real: int = 100
    n_fake: int = 100
    seed: int = 0
    image_size: int = 32
    depth_size: int = 8
    artifact_id: int = None

    def __post_init__(self):
        if isinstance(self.shift, dict):
            object.__setattr__(self, "shift", DomainShift(**self.shift))
        if self.n_real <= 0 or self.n_fake <= 0:
            raise ValueError(f"domain {self.name!r}: sample counts must be positive")
        if self.shift.brightness_scale <= 0:
            raise ValueError(f"domain {self.name!r}: brightness_scale must be positive")
        if self.shift.noise_sigma < 0:
            raise ValueError(f"domain {self.name!r}: noise_sigma must be non-negative")
        if self.image_size <= 0 or self.depth_size <= 0:
            raise ValueError(f"domain {self.name!r}: sizes must be positive")

    @property
    def artifact(self):
        a = self.shift.background_texture_id if self.artifact_id is None else self.artifact_id
        return int(a) % N_ARTIFACTS

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: int
    depth: np.ndarray


class DomainDataset:
    """One domain's samples, stored as stacked arrays."""

    def __init__(self, spec, x, y, depth):
        self.spec = spec
        self.x = x
        self.y = y
        self.depth = depth

    @property
    def name(self):
        return self.spec.name

    def __len__(self):
        return len(self.y)

    @property
    def samples(self):
        return [Sample(self.x[i], int(self.y[i]), self.depth[i]) for i in range(len(self.y))]

    def subset(self, idx):
        idx = np.asarray(idx)
        return DomainDataset(self.spec, self.x[idx], self.y[idx], self.depth[idx])


# ---------------------------------------------------------------------------
# colour


def rgb_to_hsv(x):
    """Hexcone RGB -> HSV on channel-first images; all channels in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    r, g, b = x[0], x[1], x[2]
    v = np.max(x[:3], axis=0)
    c = v - np.min(x[:3], axis=0)
    s = np.where(v > 0, c / np.where(v > 0, v, 1.0), 0.0)
    safe = np.where(c > 0, c, 1.0)
    rc = (v - r) / safe
    gc = (v - g) / safe
    bc = (v - b) / safe
    h = np.where(v == r, bc - gc, np.where(v == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(c > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v])


def hsv_to_rgb(x):
    x = np.asarray(x, dtype=np.float64)
    h, s, v = x[0] % 1.0, x[1], x[2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def rgb_hsv_channels(x):
    """Stack RGB and HSV into the 6-channel input of the full-size network."""
    return np.concatenate([x, rgb_to_hsv(x)], axis=0)


def _rotate_hue(img, degrees):
    if degrees % 360 == 0:
        return img
    hsv = rgb_to_hsv(img)
    hsv[0] = (hsv[0] + degrees / 360.0) % 1.0
    return hsv_to_rgb(hsv)


# ---------------------------------------------------------------------------
# rendering


def make_depth_target(y, size):
    """Zeros for attacks; a centred Gaussian bump scaled to [0, 1] for real faces."""
    h, w = (size, size) if np.isscalar(size) else size
    if h <= 0 or w <= 0:
        raise ValueError("depth map size must be positive")
    if not y:
        return np.zeros((h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    sigma = 0.25 * max(h, w)
    bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma * sigma))
    lo, peak = bump.min(), bump[h // 2, w // 2]
    if peak == lo:  # 1x1 map
        return np.ones((h, w))
    # min-max normalization: corners read 0, the centre pixel (h//2, w//2) reads 1
    return (bump - lo) / (peak - lo)


def _texture(texture_id, n, rng):
    yy, xx = np.mgrid[0:n, 0:n] / n
    trng = np.random.default_rng(1000 + int(texture_id))
    theta = trng.uniform(0, np.pi)
    freq = trng.uniform(1.5, 4.0)
    tint = trng.uniform(0.25, 0.85, size=3)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    return tint[:, None, None] * (0.6 + 0.4 * wave)[None]


def _face(n, rng, flat):
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    cy, cx = n / 2 + rng.uniform(-0.06, 0.06, size=2) * n
    radius = rng.uniform(0.30, 0.36) * n
    d2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / (radius * radius)
    mask = np.clip(1.5 * (1.0 - d2), 0.0, 1.0)
    # light direction varies per sample; the bump's shading carries the depth cue
    ly, lx = rng.normal(size=2) * LIGHT_JITTER
    shade = np.exp(-d2 * 1.2) * (1.0 + lx * (xx - cx) / radius + ly * (yy - cy) / radius)
    contrast = rng.uniform(*FLAT_CONTRAST) if flat else 1.0
    skin = rng.uniform(0.45, 0.9) * np.array([1.0, 0.8, 0.65]) + rng.normal(0, 0.03, size=3)
    level = SHADE_GAIN * (contrast * shade + (1 - contrast) * 0.5)
    face = skin[:, None, None] * (1.0 - SHADE_GAIN + level)[None]
    return face, mask


# exposure of the attack medium: prints come out darker, screens brighter
EXPOSURE = (0.88, 1.12, 0.9, 1.1, 1.0)


def _artifact(img, kind, n, rng, key):
    """Capture-medium artifact of an attack, confined to the image border.

    ``kind`` fixes the domain's style (paper edge, screen bezel, fingers,
    cut print edges, dashed frame) and its exposure change.
    """
    arng = np.random.default_rng(5000 + 17 * kind + key)
    color = arng.uniform(0.0, 1.0, size=3)[:, None, None]
    out = img * EXPOSURE[kind]
    t = max(1, n // 16)
    if kind == 0:  # paper edge: thin frame a little inside the image
        o = int(rng.integers(0, max(1, n // 10)))
        inner = np.zeros((n, n), dtype=bool)
        inner[o:n - o, o:n - o] = True
        inner[o + t:n - o - t, o + t:n - o - t] = False
        out[:, inner] = np.broadcast_to(color, (3, n, n))[:, inner]
    elif kind == 1:  # screen bezel: dark thick rim
        rim = np.ones((n, n), dtype=bool)
        rim[2 * t:n - 2 * t, 2 * t:n - 2 * t] = False
        out[:, rim] = out[:, rim] * 0.3 + 0.7 * np.broadcast_to(color * 0.3, (3, n, n))[:, rim]
    elif kind == 2:  # fingers holding two corners
        s = max(2, n // 5)
        first = int(rng.integers(0, 4))
        for corner in (first, 3 - first):
            sl_y = slice(0, s) if corner < 2 else slice(n - s, n)
            sl_x = slice(0, s) if corner % 2 == 0 else slice(n - s, n)
            out[:, sl_y, sl_x] = color * 0.9 + 0.1
    elif kind == 3:  # cut print edges: bars at top and bottom
        h = int(rng.integers(t, 2 * t + 1))
        out[:, :h] = color
        out[:, n - h:] = color
    else:  # dashed frame
        rim = np.zeros((n, n), dtype=bool)
        rim[:t], rim[-t:], rim[:, :t], rim[:, -t:] = True, True, True, True
        yy, xx = np.mgrid[0:n, 0:n]
        rim &= ((yy + xx + int(rng.integers(0, 2))) % 4) < 2
        out[:, rim] = np.broadcast_to(color, (3, n, n))[:, rim]
    return out


def render_sample(spec, y, rng):
    n = spec.image_size
    bg = _texture(spec.shift.background_texture_id, n, rng)
    face, mask = _face(n, rng, flat=not y)
    img = bg * (1 - mask[None]) + face * mask[None]
    if not y:
        art = _artifact(img, spec.artifact, n, rng, spec.shift.background_texture_id)
        if rng.uniform() < ARTIFACT_RATE:
            img = art
    img = _rotate_hue(np.clip(img, 0, 1), spec.shift.hue_rotation)
    img = img * spec.shift.brightness_scale
    if spec.shift.noise_sigma > 0:
        img = img + rng.normal(0, spec.shift.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_domain(spec):
    rng = np.random.default_rng(spec.seed)
    labels = np.array([1] * spec.n_real + [0] * spec.n_fake, dtype=np.uint8)
    labels = labels[rng.permutation(len(labels))]
    x = np.stack([render_sample(spec, int(y), rng) for y in labels])
    real_map = make_depth_target(1, spec.depth_size).astype(np.float32)
    depth = np.where(labels[:, None, None] == 1, real_map[None], np.float32(0)).astype(np.float32)
    return DomainDataset(spec, x, labels, depth)


def synth_domains(specs):
    if len(specs) < 2:
        raise ValueError("need at least two domain specs")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError(f"domain names must be distinct: {names}")
    return [synth_domain(s) for s in specs]


def default_specs(n_per_class=100, image_size=32, depth_size=8, seed=0):
    """The four-domain benchmark: one domain per artifact style and background."""
    shifts = [
        DomainShift(hue_rotation=0.0, brightness_scale=1.0, background_texture_id=0, noise_sigma=0.02),
        DomainShift(hue_rotation=40.0, brightness_scale=0.8, background_texture_id=1, noise_sigma=0.04),
        DomainShift(hue_rotation=-35.0, brightness_scale=1.15, background_texture_id=2, noise_sigma=0.03),
        DomainShift(hue_rotation=90.0, brightness_scale=0.9, background_texture_id=3, noise_sigma=0.05),
    ]
    return [DomainSpec(name=name, shift=sh, n_real=n_per_class, n_fake=n_per_class, seed=seed * 100 + i,
                       image_size=image_size, depth_size=depth_size)
            for i, (name, sh) in enumerate(zip("OCIM", shifts))]


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    depth: np.ndarray

    def __len__(self):
        return len(self.y)

    @classmethod
    def concat(cls, batches):
        return cls(np.concatenate([b.x for b in batches]), np.concatenate([b.y for b in batches]),
                   np.concatenate([b.depth for b in batches]))


def as_batch(d):
    return Batch(d.x.astype(np.float64), d.y.astype(np.float64), d.depth.astype(np.float64))


def sample_batch(d, b, rng):
    """Stratified batch: b/2 real and b/2 fake, without replacement."""
    if b <= 0 or b % 2:
        raise ValueError(f"batch size must be a positive even number, got {b}")
    real = np.flatnonzero(d.y == 1)
    fake = np.flatnonzero(d.y == 0)
    half = b // 2
    if len(real) < half or len(fake) < half:
        raise ValueError(f"domain {d.name!r} has {len(real)} real / {len(fake)} fake samples; need {half} of each")
    idx = np.concatenate([rng.choice(real, half, replace=False), rng.choice(fake, half, replace=False)])
    return Batch(d.x[idx].astype(np.float64), d.y[idx].astype(np.float64), d.depth[idx].astype(np.float64))


# ---------------------------------------------------------------------------
# persistence


def save_dataset(domains, root):
    os.makedirs(root, exist_ok=True)
    manifest = {"version": FORMAT_VERSION, "domains": []}
    for d in domains:
        sub = os.path.join(root, d.name)
        os.makedirs(sub, exist_ok=True)
        d.x.astype("<f4").tofile(os.path.join(sub, "inputs.f32"))
        d.y.astype("u1").tofile(os.path.join(sub, "labels.u8"))
        d.depth.astype("<f4").tofile(os.path.join(sub, "depth.f32"))
        manifest["domains"].append({
            "name": d.name,
            "n_samples": int(len(d)),
            "input_shape": list(d.x.shape[1:]),
            "depth_shape": list(d.depth.shape[1:]),
            "seed": int(d.spec.seed),
            "spec": d.spec.to_dict(),
        })
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _read_blob(path, dtype, count):
    if not os.path.exists(path):
        raise DatasetFormatError(path, "missing file")
    size = os.path.getsize(path)
    expected = count * np.dtype(dtype).itemsize
    if size != expected:
        raise DatasetFormatError(path, f"expected {expected} bytes from manifest, found {size}")
    return np.fromfile(path, dtype=dtype, count=count)


def load_dataset(root):
    mpath = os.path.join(root, "manifest.json")
    if not os.path.exists(mpath):
        raise DatasetFormatError(mpath, "missing manifest")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(mpath, f"invalid JSON ({exc})") from None
    if manifest.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(mpath, f"unsupported version {manifest.get('version')!r}, expected {FORMAT_VERSION}")
    out = []
    for entry in manifest["domains"]:
        n = int(entry["n_samples"])
        ishape = tuple(entry["input_shape"])
        dshape = tuple(entry["depth_shape"])
        sub = os.path.join(root, entry["name"])
        x = _read_blob(os.path.join(sub, "inputs.f32"), "<f4", n * int(np.prod(ishape))).reshape((n,) + ishape)
        y = _read_blob(os.path.join(sub, "labels.u8"), "u1", n)
        depth = _read_blob(os.path.join(sub, "depth.f32"), "<f4", n * int(np.prod(dshape))).reshape((n,) + dshape)
        if np.any(y > 1):
            raise DatasetFormatError(os.path.join(sub, "labels.u8"), "labels must be 0 or 1")
        spec_d = dict(entry.get("spec") or {"name": entry["name"], "seed": entry["seed"]})
        spec_d.setdefault("n_real", max(1, int(np.sum(y == 1))))
        spec_d.setdefault("n_fake", max(1, int(np.sum(y == 0))))
        spec = DomainSpec(**spec_d)
        out.append(DomainDataset(spec, x.astype(np.float32), y.astype(np.uint8), depth.astype(np.float32)))
    return out
