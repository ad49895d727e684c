"""Hybrid synthetic / real-like training.

Synthetic samples supervise heatmaps, radius and gaze; real-like samples
supervise gaze only.  The training mode decides which heads exist and how the
gaze prediction is formed:

  B, B+U          gaze regressed directly (B sees only real-like data)
  HGN, HGN+UM     gaze = reconstruct(soft-argmax landmarks, predicted radius)
  MTL variants    heatmap / radius / direct-gaze heads trained side by side
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from decimal import Decimal

import numpy as np

from . import geometry, heatmap, synthgen
from .losses import LossBreakdown, LossWeights, quality
from .netcore import engine as E
from .netcore.network import ConfigError, NetworkConfig, Trace, forward, init_params
from .netcore import network
from .synthgen import AugmentPolicy, Dataset, Domain

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModeSpec:
    heads: tuple[str, ...]
    route: str                 # "recon" or "direct"
    uses_synthetic: bool = True
    uses_reallike: bool = True
    uncertainty: bool = False


MODES: dict[str, ModeSpec] = {
    "B": ModeSpec(("gaze",), "direct", uses_synthetic=False),
    "B+U": ModeSpec(("gaze",), "direct"),
    "HGN": ModeSpec(("heatmap", "radius"), "recon"),
    "HGN+UM": ModeSpec(("heatmap", "radius", "alpha"), "recon", uncertainty=True),
    "MTL": ModeSpec(("heatmap", "radius", "gaze"), "direct"),
    "MTL-wo-radius": ModeSpec(("heatmap", "gaze"), "direct"),
    "MTL-wo-lmks": ModeSpec(("radius", "gaze"), "direct"),
}


def mode_spec(mode: str) -> ModeSpec:
    try:
        return MODES[mode]
    except KeyError:
        raise ConfigError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}") from None


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    decay_epochs: tuple[int, ...] = (20, 60)
    decay_factor: float = 0.1
    batch_size: int = 64
    weight_decay: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mix_ratio: float = 0.5
    mode: str = "HGN"
    pretrain_epochs: int = 10
    seed: int = 0
    weights: LossWeights = LossWeights()
    gaze_loss_scale: float = 180.0 / math.pi   # residuals enter the losses in degrees
    heatmap_sigma: float = heatmap.DEFAULT_SIGMA
    augment: AugmentPolicy = AugmentPolicy()
    histeq: bool = False
    widths: tuple[int, ...] = (16, 32, 64, 64)
    input_size: tuple[int, int] = (64, 96)
    dtype: str = "float32"
    head_pool: str = "flatten"
    checkpoint_every: int = 0
    quality_probe: int = 256

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if isinstance(self.augment, dict):
            object.__setattr__(self, "augment", AugmentPolicy(**self.augment))
        mode_spec(self.mode)
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if not (self.lr >= 0 and self.batch_size > 0 and self.weight_decay >= 0
                and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("invalid optimizer settings")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ConfigError("mix ratio must lie in [0, 1]")

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(input_size=self.input_size, widths=self.widths,
                             heads=mode_spec(self.mode).heads, dtype=self.dtype, seed=self.seed,
                             head_pool=self.head_pool)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("decay_epochs", "widths", "input_size"):
            d[k] = list(d[k])
        d["augment"]["blur_sigma"] = list(d["augment"]["blur_sigma"])
        d["augment"]["downscale_factors"] = list(d["augment"]["downscale_factors"])
        d["augment"]["contrast"] = list(d["augment"]["contrast"])
        return d


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Step schedule: the base rate divided by ``1/decay_factor`` once per decay epoch reached."""
    if not 0 <= epoch < max(config.epochs, 1):
        raise ConfigError(f"epoch {epoch} outside [0, {config.epochs})")
    k = sum(1 for e in config.decay_epochs if epoch >= e)
    # decimal arithmetic keeps 1e-4 -> 1e-5 -> 1e-6 exact in binary floating point
    return float(Decimal(repr(config.lr)) * Decimal(repr(config.decay_factor)) ** k)


# ---------------------------------------------------------------------------
# batches

@dataclass
class Batch:
    images: np.ndarray
    landmarks: np.ndarray
    radius: np.ndarray
    gaze: np.ndarray
    domains: np.ndarray

    @property
    def supervise_heatmaps(self) -> np.ndarray:
        return self.domains == Domain.SYNTHETIC

    supervise_radius = supervise_heatmaps

    @property
    def supervise_gaze(self) -> np.ndarray:
        return np.ones(len(self.domains), dtype=bool)

    def __len__(self):
        return len(self.domains)


def make_batch(samples, images=None) -> Batch:
    return Batch(
        images=np.stack([s.image for s in samples]) if images is None else images,
        landmarks=np.stack([s.landmarks for s in samples]),
        radius=np.array([s.radius for s in samples]),
        gaze=np.stack([s.gaze for s in samples]),
        domains=np.array([int(s.domain) for s in samples]),
    )


def mix_batches(synthetic, reallike, ratio: float, batch_size: int, rng: np.random.Generator):
    """Yield lists of samples with ``ceil(ratio * B)`` synthetic and the rest real-like.

    Each set is reshuffled and visited at most once; the epoch ends when either
    set cannot fill its share.  A set smaller than its share yields one short batch.
    """
    synthetic = list(synthetic or [])
    reallike = list(reallike or [])
    n_syn = math.ceil(ratio * batch_size)
    n_real = batch_size - n_syn
    if n_syn and not synthetic:
        raise ConfigError("mix ratio requires synthetic samples but none were given")
    if n_real and not reallike:
        raise ConfigError("mix ratio requires real-like samples but none were given")
    order_s = rng.permutation(len(synthetic))
    order_r = rng.permutation(len(reallike))
    counts = []
    if n_syn:
        counts.append(len(synthetic) // n_syn)
    if n_real:
        counts.append(len(reallike) // n_real)
    n_batches = min(counts)
    if n_batches == 0:
        yield ([synthetic[i] for i in order_s[:n_syn]] + [reallike[i] for i in order_r[:n_real]])
        return
    for b in range(n_batches):
        yield ([synthetic[i] for i in order_s[b * n_syn:(b + 1) * n_syn]]
               + [reallike[i] for i in order_r[b * n_real:(b + 1) * n_real]])


def preprocess(images: np.ndarray, histeq: bool) -> np.ndarray:
    if not histeq:
        return images
    return np.stack([synthgen.equalize_histogram(im) for im in images])


# ---------------------------------------------------------------------------
# loss graph

@dataclass
class LossGraph:
    total: E.Tensor
    heatmap: E.Tensor
    radius: E.Tensor
    gaze: E.Tensor
    prediction: E.Tensor
    residuals: np.ndarray

    def breakdown(self, weights: LossWeights, um: bool) -> LossBreakdown:
        return LossBreakdown(float(self.heatmap.data), float(self.radius.data),
                             float(self.gaze.data), float(self.total.data), um, self.residuals)


def render_targets(batch: Batch, net: NetworkConfig, sigma: float) -> np.ndarray:
    res = net.heatmap_resolution
    uniform = np.full((10,) + res, 1.0 / (res[0] * res[1]))
    out = np.empty((len(batch),) + uniform.shape, dtype=np.dtype(net.dtype))
    for i, (lm, sup) in enumerate(zip(batch.landmarks, batch.supervise_heatmaps)):
        out[i] = heatmap.render_target(lm, res, sigma, net.heatmap_scale)[0] if sup else uniform
    return out


def predicted_gaze(trace: Trace, net: NetworkConfig, spec: ModeSpec):
    """Gaze tensor for the mode: reconstruction path or direct head."""
    out = trace.outputs
    probs = E.spatial_softmax(out.heatmap_logits) if out.heatmap_logits is not None else None
    if spec.route == "recon":
        points = E.soft_argmax(probs, net.heatmap_scale)
        return E.reconstruct_gaze(points, out.radius), probs, points
    return out.gaze, probs, None


def build_loss(trace: Trace, batch: Batch, net: NetworkConfig, config: TrainConfig,
               detach_gaze: bool = False) -> LossGraph:
    spec = mode_spec(config.mode)
    out = trace.outputs
    dtype = np.dtype(net.dtype)
    zero = E.constant(np.zeros((), dtype=dtype))
    gaze, probs, _ = predicted_gaze(trace, net, spec)

    h_term = zero
    if probs is not None:
        targets = render_targets(batch, net, config.heatmap_sigma)
        h_term = E.masked_mean(E.heatmap_l1(probs, targets), batch.supervise_heatmaps)
    r_term = zero
    if out.radius is not None:
        r = E.sum_last(E.abs_diff(out.radius, batch.radius[:, None]))
        r_term = E.masked_mean(r, batch.supervise_radius)

    s = config.gaze_loss_scale
    if detach_gaze:
        gaze = E.detach(gaze)
    res = E.abs_diff(E.scale(gaze, s), batch.gaze * s)
    if spec.uncertainty:
        g_term = E.masked_mean(E.uncertainty_loss(res, out.alpha), batch.supervise_gaze)
    else:
        g_term = E.masked_mean(E.sum_last(res), batch.supervise_gaze)

    w = config.weights
    total = E.weighted_sum([(w.heatmap, h_term), (w.radius, r_term), (w.gaze, g_term)])
    return LossGraph(total, h_term, r_term, g_term, gaze, res.data)


def loss_builder(net: NetworkConfig, config: TrainConfig, batch: Batch):
    """Closure mapping a parameter dict to ``(trace, total loss)`` for gradient checking."""
    def build(params):
        trace = forward(params, net, batch.images)
        return trace, build_loss(trace, batch, net, config).total
    return build


def toy_batch(net: NetworkConfig, n: int = 4, seed: int = 0) -> Batch:
    """Random images with geometrically valid labels, half synthetic and half real-like.

    Used for gradient checks at sizes far below anything the renderer produces.
    """
    rng = np.random.default_rng([seed, 9])
    h, w = net.input_size
    images = rng.uniform(0, 1, (n, h, w)).astype(np.dtype(net.dtype))
    landmarks = np.empty((n, 10, 2))
    radius = rng.uniform(0.3, 0.45, n) * min(h, w)
    gaze = rng.uniform(-0.4, 0.4, (n, 2))
    for i in range(n):
        eye = geometry.EyeballState(rng.uniform(0.4, 0.6) * w, rng.uniform(0.4, 0.6) * h,
                                    radius[i], 0.4)
        landmarks[i] = geometry.project_landmarks(eye, geometry.GazeAngles(*gaze[i]))
    domains = np.array([int(Domain.SYNTHETIC if i % 2 == 0 else Domain.REALLIKE) for i in range(n)])
    return Batch(images, landmarks, radius, gaze, domains)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float,
              config: TrainConfig) -> None:
    """One in-place ADAM update with decoupled weight decay."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k in sorted(params):
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.eps) + config.weight_decay * params[k]
        params[k] -= (lr * update).astype(params[k].dtype)


def train_step(params: dict, state: OptimizerState, batch: Batch, net: NetworkConfig,
               config: TrainConfig, lr: float) -> LossBreakdown:
    trace = forward(params, net, batch.images)
    graph = build_loss(trace, batch, net, config)
    for name, t in (("heatmap", graph.heatmap), ("radius", graph.radius),
                    ("gaze", graph.gaze), ("total", graph.total)):
        if not np.isfinite(t.data):
            raise TrainingError(f"non-finite {name} loss term at step {state.step}")
    try:
        grads = network.backward(trace, graph.total)
    except E.NonFiniteError as exc:
        raise TrainingError(f"non-finite gradient at step {state.step}: {exc}") from exc
    adam_step(params, grads, state, lr, config)
    return graph.breakdown(config.weights, mode_spec(config.mode).uncertainty)


# ---------------------------------------------------------------------------
# prediction (used by evaluation and per-epoch validation)

@dataclass
class Prediction:
    gaze: np.ndarray
    landmarks: np.ndarray | None = None
    radius: np.ndarray | None = None
    alpha: np.ndarray | None = None

    @property
    def quality(self) -> np.ndarray | None:
        return None if self.alpha is None else quality(self.alpha)


def predict(params: dict, net: NetworkConfig, mode: str, images: np.ndarray,
            batch_size: int = 128, histeq: bool = False) -> Prediction:
    spec = mode_spec(mode)
    missing = set(spec.heads) - set(net.heads)
    if missing:
        raise ConfigError(f"mode {mode} needs heads {sorted(missing)} absent from the network")
    images = preprocess(np.asarray(images), histeq)
    gz, lm, rad, al = [], [], [], []
    for i in range(0, len(images), batch_size):
        trace = forward(params, net, images[i:i + batch_size])
        gaze, _, points = predicted_gaze(trace, net, spec)
        gz.append(gaze.data.astype(np.float64))
        out = trace.outputs
        if out.heatmap_logits is not None:
            lm.append(heatmap.decode(out.heatmap_logits.data.astype(np.float64), net.heatmap_scale))
        if out.radius is not None:
            rad.append(out.radius.data[:, 0].astype(np.float64))
        if out.alpha is not None:
            al.append(out.alpha.data.astype(np.float64))
    cat = lambda xs: np.concatenate(xs) if xs else None  # noqa: E731
    return Prediction(cat(gz) if gz else np.zeros((0, 2)), cat(lm), cat(rad), cat(al))


# ---------------------------------------------------------------------------
# training loop

METRIC_COLUMNS = ("epoch", "lr", "L_h", "L_r", "L_gaze", "L_total", "val_angular_deg",
                  "mean_quality_synth", "mean_quality_reallike")


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    L_h: float
    L_r: float
    L_gaze: float
    L_total: float
    val_angular_deg: float
    mean_quality_synth: float
    mean_quality_reallike: float

    def line(self) -> str:
        vals = [str(self.epoch), repr(self.lr)] + [
            f"{getattr(self, c):.9g}" for c in METRIC_COLUMNS[2:]]
        return "\t".join(vals)


def metrics_header() -> str:
    return "#" + "\t".join(METRIC_COLUMNS)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    network: NetworkConfig
    config: TrainConfig
    metrics: list[EpochMetrics] = field(default_factory=list)
    pretrain_losses: list[float] = field(default_factory=list)

    def metrics_text(self) -> str:
        return "\n".join([metrics_header()] + [m.line() for m in self.metrics]) + "\n"

    def checkpoint_meta(self) -> dict:
        return {"mode": self.config.mode, "histeq": self.config.histeq,
                "train_config": self.config.to_dict()}


def _augmented(samples, config: TrainConfig, epoch: int, phase: int, batch: int) -> np.ndarray:
    imgs = np.stack([s.image for s in samples])
    pol = config.augment
    if max(pol.p_blur, pol.p_downscale, pol.p_brightness, pol.p_contrast, pol.p_lines) <= 0:
        return imgs
    out = np.empty_like(imgs)
    for i, im in enumerate(imgs):
        rng = np.random.default_rng([config.seed, 3, phase, epoch, batch, i])
        out[i] = synthgen.augment(im, rng, pol)
    return out


def _val_error(params, net, config, val: Dataset | None) -> float:
    from .geometry import angular_error
    if val is None or len(val) == 0:
        return float("nan")
    pred = predict(params, net, config.mode, val.images(), histeq=config.histeq)
    return float(np.mean(angular_error(val.gazes(), pred.gaze)))


def _mean_quality(params, net, config, samples) -> float:
    if not net.has("alpha") or not samples:
        return float("nan")
    probe = samples[: config.quality_probe]
    pred = predict(params, net, config.mode, np.stack([s.image for s in probe]),
                   histeq=config.histeq)
    return float(np.mean(pred.quality))


def _run_epoch(params, state, net, config, synthetic, reallike, ratio, lr, epoch, phase):
    rng = np.random.default_rng([config.seed, 4, phase, epoch])
    sums = np.zeros(4)
    n = 0
    for b, samples in enumerate(mix_batches(synthetic, reallike, ratio, config.batch_size, rng)):
        images = preprocess(_augmented(samples, config, epoch, phase, b), config.histeq)
        batch = make_batch(samples, images)
        b = train_step(params, state, batch, net, config, lr)
        sums += b.as_row()
        n += 1
    return sums / max(n, 1)


def train(config: TrainConfig, synthetic: Dataset | None = None,
          reallike: Dataset | None = None, validation: Dataset | None = None,
          checkpoint_dir=None, progress=None) -> TrainResult:
    """Optional synthetic-only pretraining, then the hybrid phase with the step schedule."""
    spec = mode_spec(config.mode)
    syn = list(synthetic.samples) if synthetic is not None and spec.uses_synthetic else []
    real = list(reallike.samples) if reallike is not None and spec.uses_reallike else []
    if spec.route == "recon" and not syn:
        raise ConfigError(f"mode {config.mode} needs synthetic samples for landmark supervision")
    if not syn and not real:
        raise ConfigError(f"mode {config.mode} has no usable training samples")
    if (syn and syn[0].image.shape != config.input_size) or (real and real[0].image.shape != config.input_size):
        raise ConfigError("training images do not match the configured input size")
    ratio = config.mix_ratio if (syn and real) else (1.0 if syn else 0.0)

    net = config.network_config()
    params = init_params(net, config.seed)
    result = TrainResult(params, net, config)
    if config.epochs == 0:
        return result
    state = OptimizerState.zeros_like(params)

    if syn:
        for ep in range(config.pretrain_epochs):
            row = _run_epoch(params, state, net, config, syn, [], 1.0, config.lr, ep, phase=0)
            result.pretrain_losses.append(float(row[3]))
            log.info("pretrain epoch %d total=%.4f", ep, row[3])

    for ep in range(config.epochs):
        lr = lr_at_epoch(config, ep)
        row = _run_epoch(params, state, net, config, syn, real, ratio, lr, ep, phase=1)
        m = EpochMetrics(ep, lr, *map(float, row),
                         _val_error(params, net, config, validation),
                         _mean_quality(params, net, config, syn),
                         _mean_quality(params, net, config, real))
        result.metrics.append(m)
        log.info("epoch %d %s", ep, m.line())
        if progress is not None:
            progress(m)
        if checkpoint_dir is not None and config.checkpoint_every and (ep + 1) % config.checkpoint_every == 0:
            network.save_checkpoint(f"{checkpoint_dir}/epoch{ep + 1:03d}.json", net, params,
                                    result.checkpoint_meta())
    return result


def with_mode(config: TrainConfig, mode: str, seed: int | None = None) -> TrainConfig:
    return replace(config, mode=mode, seed=config.seed if seed is None else seed)
