"""Feature extractor, meta learner and depth estimator as pure functions.

Two presets share one topology: a trunk of conv stages (each conv followed by
per-batch standardization and relu, each stage closed by a 2x2 max pool), a
classifier head that pools the last conv block globally before a single fc
unit, and a depth head fed by the channel concatenation of every stage output
resized to the last stage's grid.

``desk`` (default) is small enough to train on a laptop CPU; ``paper`` has the
full-size layout (6x256x256 input, 32x32 depth map).

Parameter count of the desk preset, with input channels c, stage widths
(w1, w2), meta width m and depth width d::

    F: 9*c*w1 + 9*w1*w1 + 9*w1*w2 + 9*w2*w2 + 4*(w1 + w2)
    M: 9*w2*m + 2*m + m + 1
    D: 9*(w1 + w2)*d + 2*d + 9*d + 1
"""

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import ParamSet, ShapeError, Tensor

PRESETS = ("desk", "paper")

# paper layout: trunk stages, meta learner (ints are conv widths, "pool" a 2x2 pool), depth head
PAPER_STAGES = ((64, 128, 196, 128), (128, 196, 128), (128, 196, 128))
PAPER_META = (128, "pool", 256, "pool", 512)
PAPER_DEPTH = (128, 64)


@dataclass(frozen=True)
class NetConfig:
    preset: str = "desk"
    input_shape: tuple = (3, 32, 32)
    widths: tuple = (32, 64)
    meta_width: int = 64
    depth_width: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; expected one of {PRESETS}")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        if self.preset == "paper" and self.input_shape != (6, 256, 256):
            raise ValueError("paper preset fixes the input shape to 6x256x256")
        if len(self.input_shape) != 3:
            raise ValueError("input_shape must be (channels, height, width)")
        c, h, w = self.input_shape
        scale = 2 ** len(self.stages)
        if h % scale or w % scale:
            raise ValueError(f"input height/width must be divisible by {scale}")
        if min(self.input_shape) <= 0 or min(self.widths) <= 0 or self.meta_width <= 0 or self.depth_width <= 0:
            raise ValueError("shapes and widths must be positive")

    @classmethod
    def paper(cls, seed=0):
        return cls(preset="paper", input_shape=(6, 256, 256), seed=seed)

    @property
    def stages(self):
        if self.preset == "paper":
            return PAPER_STAGES
        w1, w2 = self.widths
        return ((w1, w1), (w2, w2))

    @property
    def meta_layers(self):
        return PAPER_META if self.preset == "paper" else (self.meta_width,)

    @property
    def depth_layers(self):
        return PAPER_DEPTH if self.preset == "paper" else (self.depth_width,)

    @property
    def depth_map_size(self):
        scale = 2 ** len(self.stages)
        return (self.input_shape[1] // scale, self.input_shape[2] // scale)

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class NetParams:
    F: ParamSet
    M: ParamSet
    D: ParamSet

    def all(self):
        return self.F.merge(self.M, self.D)

    @classmethod
    def split(cls, params):
        return cls(params.subset("F."), params.subset("M."), params.subset("D."))

    def attach(self, tape):
        return NetParams(self.F.attach(tape), self.M.attach(tape), self.D.attach(tape))

    def num_values(self):
        return self.F.num_values() + self.M.num_values() + self.D.num_values()


@dataclass
class FeatureMaps:
    pool1: Tensor
    skip: Tensor
    stages: list = field(default_factory=list)


def _conv_shapes(cfg):
    """Ordered (name, shape) of every parameter."""
    shapes = {}
    c = cfg.input_shape[0]
    paper = cfg.preset == "paper"
    k = 0
    for s, stage in enumerate(cfg.stages):
        for j, width in enumerate(stage):
            k += 1
            base = f"F.conv1_{k}" if paper else f"F.b{s + 1}.conv{j + 1}"
            norm = f"F.norm1_{k}" if paper else f"F.b{s + 1}.norm{j + 1}"
            shapes[base + ".weight"] = (width, c, 3, 3)
            shapes[norm + ".scale"] = (width,)
            shapes[norm + ".shift"] = (width,)
            c = width
    trunk_out = c
    n = 0
    for layer in cfg.meta_layers:
        if layer == "pool":
            continue
        n += 1
        base = f"M.conv2_{n}" if paper else f"M.conv{n}"
        norm = f"M.norm2_{n}" if paper else f"M.norm{n}"
        shapes[base + ".weight"] = (layer, c, 3, 3)
        shapes[norm + ".scale"] = (layer,)
        shapes[norm + ".shift"] = (layer,)
        c = layer
    shapes["M.fc.weight"] = (c, 1)
    shapes["M.fc.bias"] = (1,)
    c = sum(stage[-1] for stage in cfg.stages)
    for n, width in enumerate(cfg.depth_layers, start=1):
        base = f"D.conv3_{n}" if paper else f"D.conv{n}"
        norm = f"D.norm3_{n}" if paper else f"D.norm{n}"
        shapes[base + ".weight"] = (width, c, 3, 3)
        shapes[norm + ".scale"] = (width,)
        shapes[norm + ".shift"] = (width,)
        c = width
    last = len(cfg.depth_layers) + 1
    base = f"D.conv3_{last}" if paper else f"D.conv{last}"
    shapes[base + ".weight"] = (1, c, 3, 3)
    shapes[base + ".bias"] = (1,)
    assert trunk_out == cfg.stages[-1][-1]
    return shapes


def param_shapes(cfg):
    return dict(sorted(_conv_shapes(cfg).items()))


def init_params(cfg):
    """He-normal weights (variance 2/fan_in), zero biases/shifts, unit scales."""
    rng = np.random.default_rng(cfg.seed)
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            arrays[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith(".scale"):
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = np.zeros(shape)
    return NetParams.split(ParamSet.from_arrays(arrays))


def _conv_block(x, params, conv, norm):
    h = T.conv2d(x, params[conv + ".weight"])
    h = T.standardize(h, params[norm + ".scale"], params[norm + ".shift"])
    return T.relu(h)


def _resize_to(x, size):
    while x.shape[2] > size[0]:
        x = T.maxpool2(x)
    return x


def feature_forward(theta_F, x, cfg):
    """Trunk forward; returns the final pooled map and the depth-head skip input."""
    expected = cfg.input_shape
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ShapeError("feature_forward", f"expected batch of {expected}, got {x.shape}")
    paper = cfg.preset == "paper"
    h = x
    stage_outs = []
    k = 0
    for s, stage in enumerate(cfg.stages):
        for j in range(len(stage)):
            k += 1
            conv = f"F.conv1_{k}" if paper else f"F.b{s + 1}.conv{j + 1}"
            norm = f"F.norm1_{k}" if paper else f"F.b{s + 1}.norm{j + 1}"
            h = _conv_block(h, theta_F, conv, norm)
        h = T.maxpool2(h)
        stage_outs.append(h)
    size = tuple(h.shape[2:])
    skip = T.concat([_resize_to(o, size) for o in stage_outs], axis=1)
    return FeatureMaps(pool1=h, skip=skip, stages=stage_outs)


def meta_features(theta_M, f, cfg):
    """Activations of the meta learner's last conv block (input to global pooling)."""
    paper = cfg.preset == "paper"
    h = f.pool1
    n = 0
    for layer in cfg.meta_layers:
        if layer == "pool":
            h = T.maxpool2(h)
            continue
        n += 1
        conv = f"M.conv2_{n}" if paper else f"M.conv{n}"
        norm = f"M.norm2_{n}" if paper else f"M.norm{n}"
        h = _conv_block(h, theta_M, conv, norm)
    return h


def classify_logits(theta_M, f, cfg):
    a = meta_features(theta_M, f, cfg)
    pooled = T.global_avg_pool(a)
    z = T.add(T.matmul(pooled, theta_M["M.fc.weight"]), theta_M["M.fc.bias"])
    return T.reshape(z, (z.shape[0],))


def classify(theta_M, f, cfg):
    """Per-sample real-class probability sigmoid(fc(GAP(conv block)))."""
    return T.sigmoid(classify_logits(theta_M, f, cfg))


def estimate_depth(theta_D, f, cfg):
    """Per-sample single-channel depth map of size ``cfg.depth_map_size``."""
    if f.skip is None:
        raise ShapeError("estimate_depth", "feature maps carry no skip input")
    paper = cfg.preset == "paper"
    h = f.skip
    for n in range(1, len(cfg.depth_layers) + 1):
        conv = f"D.conv3_{n}" if paper else f"D.conv{n}"
        norm = f"D.norm3_{n}" if paper else f"D.norm{n}"
        h = _conv_block(h, theta_D, conv, norm)
    last = len(cfg.depth_layers) + 1
    conv = f"D.conv3_{last}" if paper else f"D.conv{last}"
    w = theta_D[conv + ".weight"]
    if h.shape[1] != w.shape[1]:
        raise ShapeError("estimate_depth", f"skip has {h.shape[1]} channels, head expects {w.shape[1]}")
    out = T.conv2d(h, w)
    out = T.add(out, T.reshape(theta_D[conv + ".bias"], (1, 1, 1, 1)))
    return T.reshape(out, (out.shape[0], out.shape[2], out.shape[3]))


def desk_param_count(cfg):
    c = cfg.input_shape[0]
    w1, w2 = cfg.widths
    m, d = cfg.meta_width, cfg.depth_width
    f = 9 * c * w1 + 9 * w1 * w1 + 9 * w1 * w2 + 9 * w2 * w2 + 4 * (w1 + w2)
    return f + (9 * w2 * m + 3 * m + 1) + (9 * (w1 + w2) * d + 11 * d + 1)
