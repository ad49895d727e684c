"""Small convolutional encoder/decoder with heatmap, radius, uncertainty and gaze heads.

Encoder: one stride-2 3x3 convolution per stage.  Decoder (heatmap head only):
a 3x3 convolution, nearest 2x upsampling and an additive skip from the encoder
stage of matching resolution, back up to the first stage; a final 3x3
convolution emits 10 heatmap logits at half the input resolution.  The vector
heads read the deepest stage through one affine map, either flattened (default,
keeps where features are, which the radius needs) or globally averaged.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..geometry import N_LANDMARKS
from . import engine as E

HEADS = ("heatmap", "radius", "alpha", "gaze")
CHECKPOINT_FORMAT = "hgn-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    input_size: tuple[int, int] = (64, 96)
    widths: tuple[int, ...] = (16, 32, 64, 64)
    heads: tuple[str, ...] = ("heatmap", "radius")
    radius_prior: float = 20.0
    radius_floor: float = 1.0
    dtype: str = "float32"
    seed: int = 0
    head_pool: str = "flatten"

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        object.__setattr__(self, "heads", tuple(self.heads))
        if not self.widths or min(self.widths) < 1:
            raise ConfigError("need at least one stage with positive width")
        unknown = set(self.heads) - set(HEADS)
        if unknown:
            raise ConfigError(f"unknown heads: {sorted(unknown)}")
        div = 2 ** len(self.widths)
        h, w = self.input_size
        if h % div or w % div:
            raise ConfigError(f"input size {self.input_size} not divisible by {div}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype}")
        if self.head_pool not in ("flatten", "avg"):
            raise ConfigError(f"unknown head pooling {self.head_pool}")
        if self.radius_prior <= self.radius_floor:
            raise ConfigError("radius prior must exceed the radius floor")

    @property
    def heatmap_resolution(self) -> tuple[int, int]:
        return self.input_size[0] // 2, self.input_size[1] // 2

    @property
    def feature_size(self) -> int:
        if self.head_pool == "avg":
            return self.widths[-1]
        div = 2 ** len(self.widths)
        return self.input_size[0] // div * (self.input_size[1] // div) * self.widths[-1]

    @property
    def heatmap_scale(self) -> float:
        return 2.0

    def has(self, head: str) -> bool:
        return head in self.heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["widths"] = list(self.widths)
        d["heads"] = list(self.heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


@dataclass
class NetworkOutput:
    heatmap_logits: E.Tensor | None = None
    radius: E.Tensor | None = None
    alpha: E.Tensor | None = None
    gaze: E.Tensor | None = None


@dataclass
class Trace:
    """Everything recorded by :func:`forward` that :func:`backward` needs."""
    params: dict[str, E.Tensor]
    outputs: NetworkOutput
    extras: dict = field(default_factory=dict)


def layer_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    c_in = 1
    for i, c in enumerate(config.widths, start=1):
        shapes[f"enc{i}.w"] = (3, 3, c_in, c)
        shapes[f"enc{i}.b"] = (c,)
        c_in = c
    if config.has("heatmap"):
        for i in range(len(config.widths) - 1, 0, -1):
            shapes[f"dec{i}.w"] = (3, 3, c_in, config.widths[i - 1])
            shapes[f"dec{i}.b"] = (config.widths[i - 1],)
            c_in = config.widths[i - 1]
        shapes["heat.w"] = (3, 3, c_in, N_LANDMARKS)
        shapes["heat.b"] = (N_LANDMARKS,)
    feat = config.feature_size
    for head, out in (("radius", 1), ("alpha", 2), ("gaze", 2)):
        if config.has(head):
            shapes[f"{head}.w"] = (feat, out)
            shapes[f"{head}.b"] = (out,)
    return shapes


def _inverse_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


def init_params(config: NetworkConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases.

    The radius bias starts at the value that makes the radius head output
    ``config.radius_prior``; the uncertainty bias starts at zero.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dtype = np.dtype(config.dtype)
    params = {}
    for name, shape in layer_shapes(config).items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[:-1]))
            params[name] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    if "radius.b" in params:
        params["radius.b"][:] = _inverse_softplus(config.radius_prior - config.radius_floor)
    return params


def forward(params: dict[str, np.ndarray], config: NetworkConfig, images) -> Trace:
    """Run the network on a batch of (N, H, W) grayscale images in [0, 1]."""
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    if images.shape[1:] != config.input_size:
        raise ConfigError(f"expected images of size {config.input_size}, got {images.shape[1:]}")
    missing = set(layer_shapes(config)) - set(params)
    if missing:
        raise ConfigError(f"parameter set lacks {sorted(missing)}")
    dtype = np.dtype(config.dtype)
    p = {k: E.parameter(v, name=k) for k, v in params.items() if k in layer_shapes(config)}

    x = E.constant((images[..., None] - 0.5).astype(dtype))
    skips = []
    for i in range(1, len(config.widths) + 1):
        x = E.relu(E.conv2d(x, p[f"enc{i}.w"], p[f"enc{i}.b"], stride=2, pad=1))
        skips.append(x)

    out = NetworkOutput()
    if config.has("heatmap"):
        d = x
        for i in range(len(config.widths) - 1, 0, -1):
            d = E.conv2d(d, p[f"dec{i}.w"], p[f"dec{i}.b"], stride=1, pad=1)
            d = E.relu(E.add(E.upsample2x(d), skips[i - 1]))
        logits = E.conv2d(d, p["heat.w"], p["heat.b"], stride=1, pad=1)
        out.heatmap_logits = E.transpose(logits, (0, 3, 1, 2))

    feat = E.global_avg_pool(x) if config.head_pool == "avg" else E.flatten(x)
    if config.has("radius"):
        r = E.softplus(E.linear(feat, p["radius.w"], p["radius.b"]))
        out.radius = E.add_scalar(r, config.radius_floor)
    if config.has("alpha"):
        out.alpha = E.linear(feat, p["alpha.w"], p["alpha.b"])
    if config.has("gaze"):
        out.gaze = E.linear(feat, p["gaze.w"], p["gaze.b"])
    return Trace(p, out)


def backward(trace: Trace | None, loss: E.Tensor | None = None,
             loss_gradient=None) -> dict[str, np.ndarray]:
    """Gradients of ``loss`` w.r.t. every parameter recorded in ``trace``.

    Parameters off the loss path get an explicit zero array.
    """
    if trace is None or loss is None:
        raise E.GraphUsageError("backward() requires the trace of a completed forward and a loss")
    E.backward(loss, loss_gradient)
    grads = {}
    for name, t in trace.params.items():
        grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        t.grad = None
    return grads


def count_params(params) -> int:
    return int(sum(v.size for v in params.values()))


def _encode_array(a: np.ndarray) -> dict:
    le = a.astype(a.dtype.newbyteorder("<"), copy=False)
    return {"shape": list(a.shape), "dtype": le.dtype.str,
            "data": base64.b64encode(np.ascontiguousarray(le).tobytes()).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    a = np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"])
    return a.astype(a.dtype.newbyteorder("="))


def save_checkpoint(path, config: NetworkConfig, params: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    """Write a JSON checkpoint: config echo plus little-endian base64 parameter arrays."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "meta": meta or {},
        "params": {k: _encode_array(params[k]) for k in sorted(params)},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> tuple[NetworkConfig, dict[str, np.ndarray], dict]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc})") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    config = NetworkConfig.from_dict(doc["config"])
    params = {k: _decode_array(v) for k, v in doc["params"].items()}
    for name, shape in layer_shapes(config).items():
        if name not in params or params[name].shape != shape:
            raise CheckpointError(f"{path}: parameter {name} missing or misshapen")
    return config, params, doc.get("meta", {})
