"""Backbones with a frozen, row-normalized centroid head.

The head is never a parameter: cosine scores are
``l2_normalize_rows(features) @ centroids.T`` with the centroid matrix used
as a constant, so no optimizer can touch it.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .pedcc import CentroidSet, FormatError, dumps_centroids, format_row, parse_centroids
from .tensor import Tensor

BN_MOMENTUM = 0.99
BN_EPS = 1e-5
CHECKPOINT_TAG = "PEDCC-MODEL 1"
ARCHITECTURES = ("mlp", "conv_small", "wideresnet")


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple = (8,)
    arch: str = "mlp"
    hidden: tuple = (32,)
    widen: int = 1
    depth: int = 28
    width: int = 2
    feature_dim: int = 8
    num_classes: int = 4
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; choose from {ARCHITECTURES}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.feature_dim < 1 or self.num_classes < 2:
            raise ValueError("feature_dim must be >= 1 and num_classes >= 2")
        if self.arch == "mlp" and len(self.input_shape) != 1:
            raise ValueError(f"mlp expects flat inputs, got input_shape {self.input_shape}")
        if self.arch != "mlp" and len(self.input_shape) != 3:
            raise ValueError(f"{self.arch} expects (channels, height, width) inputs")
        if self.arch == "wideresnet":
            if (self.depth - 4) % 6:
                raise ValueError(f"wideresnet depth must be 6n+4, got {self.depth}")
            if 64 * self.width != self.feature_dim:
                raise ValueError(f"wideresnet-{self.depth}-{self.width} pools {64 * self.width} "
                                 f"channels but feature_dim is {self.feature_dim}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


@dataclass
class Model:
    cfg: ModelConfig
    centroids: CentroidSet
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    training: bool = True

    @property
    def head(self) -> np.ndarray:
        return self.centroids.points

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def train(self) -> Model:
        self.training = True
        return self

    def eval(self) -> Model:
        self.training = False
        return self

    def snapshot(self) -> Model:
        return copy.deepcopy(self)

    def features(self, x) -> Tensor:
        x = T.as_tensor(x)
        if tuple(x.shape[1:]) != self.cfg.input_shape:
            raise ValueError(f"input rows have shape {tuple(x.shape[1:])}, model expects {self.cfg.input_shape}")
        return _BACKBONES[self.cfg.arch][1](self, x)


# -- initialization -----------------------------------------------------------------
def _he(rng, shape, fan_in) -> Tensor:
    return Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in), requires_grad=True)


def _zeros(n) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


def _ones(n) -> Tensor:
    return Tensor(np.ones(n), requires_grad=True)


def _add_linear(m: Model, rng, name, n_in, n_out):
    m.params[f"{name}.weight"] = _he(rng, (n_in, n_out), n_in)
    m.params[f"{name}.bias"] = _zeros(n_out)


def _add_conv(m: Model, rng, name, c_in, c_out, k):
    m.params[f"{name}.weight"] = _he(rng, (c_out, c_in, k, k), c_in * k * k)


def _add_bn(m: Model, name, c):
    m.params[f"{name}.gamma"] = _ones(c)
    m.params[f"{name}.beta"] = _zeros(c)
    m.buffers[f"{name}.running_mean"] = np.zeros(c)
    m.buffers[f"{name}.running_var"] = np.ones(c)


# -- layers ---------------------------------------------------------------------------
def _linear(m: Model, name, x):
    return T.add(T.matmul(x, m.params[f"{name}.weight"]), m.params[f"{name}.bias"])


def _bn(m: Model, name, x):
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    bshape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    gamma = T.reshape(m.params[f"{name}.gamma"], bshape)
    beta = T.reshape(m.params[f"{name}.beta"], bshape)
    rm, rv = f"{name}.running_mean", f"{name}.running_var"
    if m.training:
        mu = T.mean(x, axis=axes, keepdims=True)
        centered = T.sub(x, mu)
        var = T.mean(T.mul(centered, centered), axis=axes, keepdims=True)
        m.buffers[rm] = BN_MOMENTUM * m.buffers[rm] + (1 - BN_MOMENTUM) * mu.data.reshape(-1)
        m.buffers[rv] = BN_MOMENTUM * m.buffers[rv] + (1 - BN_MOMENTUM) * var.data.reshape(-1)
        xhat = T.mul(centered, T.power(T.add(var, BN_EPS), -0.5))
    else:
        mu = m.buffers[rm].reshape(bshape)
        inv = (m.buffers[rv] + BN_EPS).reshape(bshape) ** -0.5
        xhat = T.mul(T.sub(x, mu), inv)
    return T.add(T.mul(xhat, gamma), beta)


def _conv(m: Model, name, x, stride=1):
    w = m.params[f"{name}.weight"]
    return T.conv2d(x, w, stride=stride, padding=w.shape[2] // 2)


def _global_avg_pool(x):
    return T.mean(x, axis=(2, 3))


# -- backbones --------------------------------------------------------------------------
def _init_mlp(m: Model, rng):
    sizes = [m.cfg.input_shape[0], *m.cfg.hidden, m.cfg.feature_dim]
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        _add_linear(m, rng, f"fc{i}", a, b)


def _mlp(m: Model, x):
    n = len(m.cfg.hidden) + 1
    for i in range(n):
        x = _linear(m, f"fc{i}", x)
        if i < n - 1:
            x = T.relu(x)
    return x


def _conv_small_widths(cfg):
    return (16 * cfg.widen, 32 * cfg.widen, cfg.feature_dim)


def _init_conv_small(m: Model, rng):
    c_in = m.cfg.input_shape[0]
    for i, c in enumerate(_conv_small_widths(m.cfg)):
        _add_conv(m, rng, f"block{i}.conv", c_in, c, 3)
        _add_bn(m, f"block{i}.bn", c)
        c_in = c


def _conv_small(m: Model, x):
    for i in range(3):
        x = _bn(m, f"block{i}.bn", _conv(m, f"block{i}.conv", x, stride=1 if i == 0 else 2))
        # Last block stays signed so pooled features can reach any centroid.
        if i < 2:
            x = T.relu(x)
    return _global_avg_pool(x)


def _wrn_plan(cfg):
    n = (cfg.depth - 4) // 6
    widths = (16 * cfg.width, 32 * cfg.width, 64 * cfg.width)
    plan, c_in = [], 16
    for g, (w, stride) in enumerate(zip(widths, (1, 2, 2))):
        for b in range(n):
            plan.append((f"group{g}.block{b}", c_in, w, stride if b == 0 else 1))
            c_in = w
    return plan


def _init_wrn(m: Model, rng):
    _add_conv(m, rng, "conv1", m.cfg.input_shape[0], 16, 3)
    for name, c_in, c_out, _ in _wrn_plan(m.cfg):
        _add_bn(m, f"{name}.bn1", c_in)
        _add_conv(m, rng, f"{name}.conv1", c_in, c_out, 3)
        _add_bn(m, f"{name}.bn2", c_out)
        _add_conv(m, rng, f"{name}.conv2", c_out, c_out, 3)
        if c_in != c_out:
            _add_conv(m, rng, f"{name}.shortcut", c_in, c_out, 1)
    _add_bn(m, "final.bn", 64 * m.cfg.width)


def _wrn(m: Model, x):
    x = _conv(m, "conv1", x)
    for name, c_in, c_out, stride in _wrn_plan(m.cfg):
        o = T.relu(_bn(m, f"{name}.bn1", x))
        y = _conv(m, f"{name}.conv1", o, stride)
        y = _conv(m, f"{name}.conv2", T.relu(_bn(m, f"{name}.bn2", y)))
        short = x if c_in == c_out else _conv(m, f"{name}.shortcut", o, stride)
        x = T.add(y, short)
    return _global_avg_pool(_bn(m, "final.bn", x))


_BACKBONES = {
    "mlp": (_init_mlp, _mlp),
    "conv_small": (_init_conv_small, _conv_small),
    "wideresnet": (_init_wrn, _wrn),
}


def build_model(cfg: ModelConfig, centroids: CentroidSet) -> Model:
    if cfg.feature_dim != centroids.dim:
        raise ValueError(f"feature_dim {cfg.feature_dim} does not match centroid dim {centroids.dim}")
    if cfg.num_classes != centroids.num_classes:
        raise ValueError(f"num_classes {cfg.num_classes} does not match {centroids.num_classes} centroids")
    m = Model(cfg, centroids)
    _BACKBONES[cfg.arch][0](m, np.random.default_rng(cfg.seed))
    return m


def cosine_scores(features: Tensor, head: np.ndarray) -> Tensor:
    return T.matmul(T.l2_normalize_rows(features), head.T)


def forward(m: Model, x, s: float = 7.5) -> tuple[Tensor, Tensor, Tensor]:
    """Return (raw features, cosine scores, softmax of s-scaled cosines)."""
    feats = m.features(x)
    cos = cosine_scores(feats, m.head)
    probs = T.softmax(T.scale(cos, s), axis=1)
    return feats, cos, probs


def predict(m: Model, x, batch_size: int = 1024) -> np.ndarray:
    """Argmax of cosine scores (eval mode); ties go to the lowest class index."""
    x = np.asarray(T.as_tensor(x).data)
    was_training, m.training = m.training, False
    try:
        out = [np.argmax(forward(m, x[i:i + batch_size])[1].data, axis=1) for i in range(0, len(x), batch_size)]
    finally:
        m.training = was_training
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# -- checkpoints -------------------------------------------------------------------------
def _block(name: str, arr: np.ndarray) -> str:
    shape = "x".join(str(n) for n in arr.shape) if arr.ndim else "scalar"
    return f"{name} {shape} {format_row(arr.reshape(-1))}"


def dumps_checkpoint(m: Model) -> str:
    lines = [CHECKPOINT_TAG, "config " + json.dumps(m.cfg.to_dict(), sort_keys=True)]
    lines.extend(dumps_centroids(m.centroids).rstrip("\n").split("\n"))
    lines.append(f"params {len(m.params)}")
    lines.extend(_block(k, v.data) for k, v in m.params.items())
    lines.append(f"buffers {len(m.buffers)}")
    lines.extend(_block(k, v) for k, v in m.buffers.items())
    return "\n".join(lines) + "\n"


def save_checkpoint(m: Model, path) -> None:
    Path(path).write_text(dumps_checkpoint(m), encoding="utf-8", newline="\n")


def _parse_block(line: str, lineno: int) -> tuple[str, np.ndarray]:
    parts = line.split(" ")
    if len(parts) < 3:
        raise FormatError(f"line {lineno}: malformed tensor block")
    name, shape_s, values = parts[0], parts[1], parts[2:]
    try:
        shape = () if shape_s == "scalar" else tuple(int(v) for v in shape_s.split("x"))
        arr = np.array([float(v) for v in values])
    except ValueError:
        raise FormatError(f"line {lineno}: bad shape or value in block {name!r}") from None
    if arr.size != int(np.prod(shape)):
        raise FormatError(f"line {lineno}: block {name!r} declares shape {shape} but has {arr.size} values")
    return name, arr.reshape(shape)


def load_checkpoint(path) -> Model:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != CHECKPOINT_TAG:
        raise FormatError(f"line 1: expected {CHECKPOINT_TAG!r}")
    if len(lines) < 2 or not lines[1].startswith("config "):
        raise FormatError("line 2: missing config line")
    try:
        cfg = ModelConfig.from_dict(json.loads(lines[1][len("config "):]))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"line 2: bad config ({exc})") from None
    head = lines[2].split() if len(lines) > 2 else []
    if len(head) < 4:
        raise FormatError("line 3: missing centroid header")
    c = int(head[2])
    centroids = parse_centroids(lines[2:3 + c], first_lineno=3)
    pos = 3 + c
    sections = {}
    for section in ("params", "buffers"):
        if pos >= len(lines) or not lines[pos].startswith(section + " "):
            raise FormatError(f"line {pos + 1}: expected '{section} <count>'")
        count = int(lines[pos].split()[1])
        blocks = {}
        for k in range(count):
            lineno = pos + 2 + k
            if lineno - 1 >= len(lines):
                raise FormatError(f"line {lineno}: truncated {section} section")
            name, arr = _parse_block(lines[lineno - 1], lineno)
            blocks[name] = arr
        sections[section] = blocks
        pos += 1 + count
    m = build_model(cfg, centroids)
    for section, target in (("params", m.params), ("buffers", m.buffers)):
        got = sections[section]
        if set(got) != set(target):
            raise FormatError(f"{section} names do not match the architecture: "
                              f"missing {sorted(set(target) - set(got))}, extra {sorted(set(got) - set(target))}")
        for name, arr in got.items():
            ref = target[name].shape
            if arr.shape != ref:
                raise FormatError(f"{section[:-1]} {name!r} has shape {arr.shape}, architecture needs {ref}")
    m.params = {k: Tensor(sections["params"][k], requires_grad=True) for k in m.params}
    m.buffers = {k: sections["buffers"][k].copy() for k in m.buffers}
    return m
