"""Procedural eye images with exact geometric labels.

Each sample is rendered directly in the normalised camera space: a grayscale
eye whose opening, sclera shading and iris cap all follow from one
``EyeballState`` and one gaze, so the landmark labels satisfy the projection
equations exactly.  Real-like samples are made from synthetic ones by
perturbing the gaze label and degrading the image.
"""

from __future__ import annotations

import enum
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import geometry
from .geometry import EyeballState, GazeAngles

MAGIC = b"HGNDS"
FORMAT_VERSION = 1
MAX_GAZE_DEG = 80.0


class Domain(enum.IntEnum):
    SYNTHETIC = 0
    REALLIKE = 1


class DatasetError(Exception):
    """Base class for dataset file problems; ``code`` is a stable category."""
    code = "dataset"


class CorruptHeaderError(DatasetError):
    code = "corrupt-header"


class TruncatedError(DatasetError):
    code = "truncated"


class VersionMismatchError(DatasetError):
    code = "version-mismatch"


class CorruptPayloadError(DatasetError):
    code = "corrupt-payload"


@dataclass(frozen=True)
class SynthConfig:
    height: int = 64
    width: int = 96
    theta_range_deg: tuple[float, float] = (-30.0, 30.0)
    phi_range_deg: tuple[float, float] = (-40.0, 40.0)
    radius_range: tuple[float, float] = (14.0, 26.0)
    center_jitter: float = 6.0
    psi_range: tuple[float, float] = (0.35, 0.5)
    pixel_noise: float = 0.02
    mean_radius_labels: bool = False
    count: int = 2000
    seed: int = 0

    def __post_init__(self):
        for name in ("theta_range_deg", "phi_range_deg", "radius_range", "psi_range"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        for name in ("theta_range_deg", "phi_range_deg"):
            lo, hi = getattr(self, name)
            if not (-MAX_GAZE_DEG < lo <= hi < MAX_GAZE_DEG):
                raise ValueError(f"{name} must lie inside (-80, 80) degrees")
        if self.count < 1:
            raise ValueError("sample count must be at least 1")
        if self.radius_range[0] <= 0 or self.radius_range[0] > self.radius_range[1]:
            raise ValueError("invalid radius range")
        if not 0 < self.psi_range[0] <= self.psi_range[1] < math.pi / 2:
            raise ValueError("invalid iris angular radius range")

    def canonical(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class DegradationSpec:
    sigma_inj: float = 0.0
    occlusion_prob: float = 0.0
    blur_prob: float = 0.0
    blur_sigma: float = 2.0


@dataclass(frozen=True)
class DegradationRecord:
    sigma_inj: float = 0.0
    noise_theta: float = 0.0
    noise_phi: float = 0.0
    occluded: bool = False
    blurred: bool = False

    @property
    def noise(self) -> np.ndarray:
        return np.array([self.noise_theta, self.noise_phi])


@dataclass(eq=False)
class Sample:
    image: np.ndarray                 # (H, W) float32, multiples of 1/255
    landmarks: np.ndarray             # (10, 2) pixels
    radius: float
    gaze: np.ndarray                  # (theta, phi) label, radians
    domain: Domain = Domain.SYNTHETIC
    degradation: DegradationRecord = field(default_factory=DegradationRecord)

    @property
    def supervise_landmarks(self) -> bool:
        return self.domain == Domain.SYNTHETIC

    @property
    def clean_gaze(self) -> np.ndarray:
        return self.gaze - self.degradation.noise

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (np.array_equal(self.image, other.image)
                and np.array_equal(self.landmarks, other.landmarks)
                and self.radius == other.radius
                and np.array_equal(self.gaze, other.gaze)
                and self.domain == other.domain
                and self.degradation == other.degradation)


@dataclass(eq=False)
class Dataset:
    config: str
    samples: list[Sample]
    version: int = FORMAT_VERSION

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.config == other.config
                and self.version == other.version and self.samples == other.samples)

    def subset(self, domain: Domain) -> "Dataset":
        return Dataset(self.config, [s for s in self.samples if s.domain == domain], self.version)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def gazes(self) -> np.ndarray:
        return np.stack([s.gaze for s in self.samples])

    def clean_gazes(self) -> np.ndarray:
        """Gaze labels with any injected label noise removed."""
        return np.stack([s.clean_gaze for s in self.samples])


# ---------------------------------------------------------------------------
# rendering

@dataclass(frozen=True)
class Appearance:
    skin: float = 0.62
    sclera: float = 0.9
    iris: float = 0.32
    pupil: float = 0.06
    open_half_width: float = 0.93    # in eyeball radii
    open_upper: float = 0.67
    open_lower: float = 0.57


def _edge(d):
    """Anti-aliased coverage for a signed pixel distance (positive inside)."""
    return np.clip(0.5 + d, 0.0, 1.0)


def quantize(image: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def rasterize_eye(eye: EyeballState, gaze: GazeAngles, size=(64, 96),
                  appearance: Appearance = Appearance()) -> np.ndarray:
    """Render a noise-free grayscale eye; intensities in [0, 1].

    The opening between the eyelids is a lens centred on the eyeball center and
    scaled by the radius; inside it the visible sclera is shaded by the sphere
    normal and the iris/pupil are the sphere points within the iris angular
    radius of the gaze direction.
    """
    h, w = size
    R = eye.radius
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = (xs - eye.center_x) / R
    dy = (ys - eye.center_y) / R

    u = dx / appearance.open_half_width
    profile = np.clip(1.0 - u * u, 0.0, None)
    upper = -appearance.open_upper * profile
    lower = appearance.open_lower * profile
    inside = np.minimum(dy - upper, lower - dy) * R
    inside = np.where(np.abs(u) < 1.0, inside, -np.abs(u) * R)
    opening = _edge(inside)

    rho2 = dx * dx + dy * dy
    z = -np.sqrt(np.clip(1.0 - rho2, 0.0, None))
    g = geometry.angles_to_vector(gaze)
    cosang = np.clip(dx * g[0] + dy * g[1] + z * g[2], -1.0, 1.0)
    ang = np.arccos(cosang)
    psi = eye.iris_angular_radius
    iris = _edge((psi - ang) * R) * (rho2 < 1.0)
    pupil = _edge((0.45 * psi - ang) * R) * (rho2 < 1.0)
    limbus = np.exp(-(((ang - psi) * R) / 1.2) ** 2) * (rho2 < 1.0)

    sclera = appearance.sclera * (0.8 + 0.2 * (-z))
    interior = sclera * (1 - iris) + appearance.iris * (1.0 - 0.35 * limbus) * iris
    interior = interior * (1 - pupil) + appearance.pupil * pupil

    crease = np.exp(-(((upper - dy) * R - 0.35 * R) / 1.5) ** 2) * (np.abs(u) < 1.0)
    skin = appearance.skin * (1.0 - 0.08 * crease) * (0.95 + 0.05 * ys / h)
    shadow = np.exp(-np.clip(dy - upper, 0.0, None) * R / 2.0)
    interior = interior * (1.0 - 0.25 * shadow)
    img = skin * (1 - opening) + interior * opening
    return np.clip(img, 0.0, 1.0)


def sample_stream(seed: int, index: int) -> np.random.Generator:
    """Independent random stream for sample ``index`` of a dataset seeded with ``seed``."""
    return np.random.default_rng([int(seed), 1, int(index)])


def generate_sample(config: SynthConfig, rng: np.random.Generator | int) -> Sample:
    """Draw geometry, gaze and appearance, then render and label one synthetic sample.

    ``rng`` may be a Generator or a sample index (mapped through :func:`sample_stream`).
    """
    if not isinstance(rng, np.random.Generator):
        rng = sample_stream(config.seed, rng)
    theta = math.radians(rng.uniform(*config.theta_range_deg))
    phi = math.radians(rng.uniform(*config.phi_range_deg))
    radius = rng.uniform(*config.radius_range)
    cx = (config.width - 1) / 2 + rng.uniform(-config.center_jitter, config.center_jitter)
    cy = (config.height - 1) / 2 + rng.uniform(-config.center_jitter, config.center_jitter)
    psi = rng.uniform(*config.psi_range)
    app = Appearance(
        skin=rng.uniform(0.45, 0.75),
        sclera=rng.uniform(0.8, 0.97),
        iris=rng.uniform(0.15, 0.45),
        pupil=rng.uniform(0.02, 0.1),
        open_half_width=rng.uniform(0.88, 0.98),
        open_upper=rng.uniform(0.62, 0.72),
        open_lower=rng.uniform(0.52, 0.62),
    )
    eye = EyeballState(cx, cy, radius, psi)
    gaze = GazeAngles(theta, phi)
    img = rasterize_eye(eye, gaze, (config.height, config.width), app)
    if config.pixel_noise > 0:
        img = img + rng.normal(0.0, config.pixel_noise, img.shape)
    return Sample(
        image=quantize(img),
        landmarks=geometry.project_landmarks(eye, gaze),
        radius=float(radius),
        gaze=np.array([theta, phi]),
    )


# ---------------------------------------------------------------------------
# augmentation and degradation

@dataclass(frozen=True)
class AugmentPolicy:
    p_blur: float = 0.5
    p_downscale: float = 0.5
    p_brightness: float = 0.5
    p_contrast: float = 0.5
    p_lines: float = 0.5
    blur_sigma: tuple[float, float] = (0.5, 1.5)
    downscale_factors: tuple[int, ...] = (2,)
    brightness: float = 0.15
    contrast: tuple[float, float] = (0.6, 1.4)
    max_lines: int = 3

    @classmethod
    def disabled(cls) -> "AugmentPolicy":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


def blur(image, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(image, sigma, mode="nearest")


def downscale_upscale(image, factor: int) -> np.ndarray:
    """Block-average by ``factor`` then nearest-neighbour upsample back to the input size."""
    h, w = image.shape
    ph, pw = -h % factor, -w % factor
    padded = np.pad(image, ((0, ph), (0, pw)), mode="edge") if ph or pw else image
    H, W = padded.shape
    small = padded.reshape(H // factor, factor, W // factor, factor).mean(axis=(1, 3))
    return small.repeat(factor, axis=0).repeat(factor, axis=1)[:h, :w]


def adjust_brightness(image, delta: float) -> np.ndarray:
    return np.clip(image + delta, 0.0, 1.0)


def adjust_contrast(image, factor: float) -> np.ndarray:
    m = image.mean()
    return np.clip(m + factor * (image - m), 0.0, 1.0)


def draw_line(image, p0, p1, value: float, width: int = 1) -> np.ndarray:
    out = image.copy()
    h, w = out.shape
    n = int(max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1])) * 2) + 2
    xs = np.rint(np.linspace(p0[0], p1[0], n)).astype(int)
    ys = np.rint(np.linspace(p0[1], p1[1], n)).astype(int)
    for off in range(width):
        yy = ys + off
        ok = (xs >= 0) & (xs < w) & (yy >= 0) & (yy < h)
        out[yy[ok], xs[ok]] = value
    return out


def augment(image, rng: np.random.Generator, policy: AugmentPolicy = AugmentPolicy()) -> np.ndarray:
    """Label-preserving photometric augmentation; each step fires with its own probability."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    if rng.random() < policy.p_blur:
        img = blur(img, rng.uniform(*policy.blur_sigma))
    if rng.random() < policy.p_downscale:
        img = downscale_upscale(img, int(rng.choice(policy.downscale_factors)))
    if rng.random() < policy.p_brightness:
        img = adjust_brightness(img, rng.uniform(-policy.brightness, policy.brightness))
    if rng.random() < policy.p_contrast:
        img = adjust_contrast(img, rng.uniform(*policy.contrast))
    if rng.random() < policy.p_lines:
        for _ in range(int(rng.integers(1, policy.max_lines + 1))):
            p0 = (rng.uniform(0, w), rng.uniform(0, h))
            p1 = (rng.uniform(0, w), rng.uniform(0, h))
            img = draw_line(img, p0, p1, rng.uniform(0.0, 1.0), int(rng.integers(1, 3)))
    return np.clip(img, 0.0, 1.0)


def occlude_eyelid(image, eyeball_center, radius, closure: float, rng) -> np.ndarray:
    """Paint a skin-toned band from above the eye down to ``cy + closure * R``."""
    h, w = image.shape
    cx, cy = eyeball_center
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    bottom = cy + closure * radius
    band = _edge(bottom - ys) * _edge(1.15 * radius - np.abs(xs - cx)) * _edge(ys - (cy - 1.2 * radius))
    tone = float(np.median(image[: max(1, h // 8)]))
    fill = tone + rng.normal(0.0, 0.02, image.shape)
    return image * (1 - band) + fill * band


def degrade_to_reallike(sample: Sample, rng: np.random.Generator,
                        spec: DegradationSpec = DegradationSpec()) -> Sample:
    """Turn a synthetic sample into a real-like one.

    The gaze label receives zero-mean Gaussian noise of std ``spec.sigma_inj`` per
    component; the image is optionally occluded by a closing eyelid and blurred.
    Landmark and radius labels are kept but are unsupervised for this domain.
    """
    noise = rng.normal(0.0, spec.sigma_inj, 2) if spec.sigma_inj > 0 else np.zeros(2)
    occluded = bool(rng.random() < spec.occlusion_prob)
    blurred = bool(rng.random() < spec.blur_prob)
    img = sample.image.astype(np.float64)
    if occluded:
        img = occlude_eyelid(img, sample.landmarks[1], sample.radius, rng.uniform(-0.15, 0.35), rng)
    if blurred:
        img = blur(img, spec.blur_sigma)
    record = DegradationRecord(float(spec.sigma_inj), float(noise[0]), float(noise[1]),
                               occluded, blurred)
    return replace(sample, image=quantize(img), gaze=sample.gaze + noise,
                   domain=Domain.REALLIKE, degradation=record)


def generate_dataset(config: SynthConfig, reallike_fraction: float = 0.0,
                     degradation: DegradationSpec = DegradationSpec()) -> Dataset:
    """Generate ``config.count`` samples, a fixed fraction of them degraded to real-like."""
    n_real = int(round(reallike_fraction * config.count))
    pick = np.random.default_rng([int(config.seed), 2]).permutation(config.count)[:n_real]
    real = set(int(i) for i in pick)
    samples = []
    for i in range(config.count):
        rng = sample_stream(config.seed, i)
        s = generate_sample(config, rng)
        if i in real:
            s = degrade_to_reallike(s, rng, degradation)
        samples.append(s)
    if config.mean_radius_labels:
        mean_r = float(np.mean([s.radius for s in samples]))
        samples = [replace(s, radius=mean_r) for s in samples]
    canon = json.dumps({"synth": json.loads(config.canonical()),
                        "reallike_fraction": reallike_fraction,
                        "degradation": asdict(degradation)}, sort_keys=True, separators=(",", ":"))
    return Dataset(canon, samples)


def equalize_histogram(image) -> np.ndarray:
    from skimage.exposure import equalize_hist
    return equalize_hist(np.asarray(image, dtype=np.float64)).astype(np.float32)


# ---------------------------------------------------------------------------
# serialization (little-endian throughout)

_HEAD = struct.Struct("<5sI")
_SAMPLE_LABELS = struct.Struct("<20f f 2f B 3f 2B")


def dataset_bytes(dataset: Dataset) -> bytes:
    buf = io.BytesIO()
    cfg = dataset.config.encode("utf-8")
    buf.write(_HEAD.pack(MAGIC, dataset.version))
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<Q", len(dataset.samples)))
    for s in dataset.samples:
        h, w = s.image.shape
        buf.write(struct.pack("<HH", h, w))
        buf.write(np.round(s.image * 255.0).astype(np.uint8).tobytes())
        d = s.degradation
        buf.write(_SAMPLE_LABELS.pack(
            *np.asarray(s.landmarks, dtype=np.float64).ravel(), s.radius, *s.gaze,
            int(s.domain), d.sigma_inj, d.noise_theta, d.noise_phi, int(d.occluded), int(d.blurred)))
    return buf.getvalue()


def write_dataset(dataset: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(dataset))


def parse_dataset(raw: bytes) -> Dataset:
    if len(raw) < _HEAD.size + 4:
        raise CorruptHeaderError("file too short for a dataset header")
    magic, version = _HEAD.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CorruptHeaderError("bad magic bytes")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"dataset version {version}, expected {FORMAT_VERSION}")
    pos = _HEAD.size
    (clen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if pos + clen + 8 > len(raw):
        raise CorruptHeaderError("header config echo overruns the file")
    try:
        config = raw[pos:pos + clen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptHeaderError("config echo is not UTF-8") from exc
    pos += clen
    (count,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    samples = []
    for i in range(count):
        if pos == len(raw):
            raise CorruptPayloadError(f"header declares {count} samples, payload holds {i}")
        if pos + 4 > len(raw):
            raise TruncatedError(f"sample {i} truncated")
        h, w = struct.unpack_from("<HH", raw, pos)
        pos += 4
        end = pos + h * w + _SAMPLE_LABELS.size
        if end > len(raw):
            raise TruncatedError(f"sample {i} truncated")
        img = (np.frombuffer(raw, np.uint8, h * w, pos).reshape(h, w) / 255.0).astype(np.float32)
        pos += h * w
        vals = _SAMPLE_LABELS.unpack_from(raw, pos)
        pos = end
        try:
            domain = Domain(vals[23])
        except ValueError as exc:
            raise CorruptPayloadError(f"sample {i}: unknown domain tag {vals[23]}") from exc
        samples.append(Sample(
            image=img,
            landmarks=np.array(vals[:20], dtype=np.float64).reshape(10, 2),
            radius=vals[20],
            gaze=np.array(vals[21:23], dtype=np.float64),
            domain=domain,
            degradation=DegradationRecord(vals[24], vals[25], vals[26], bool(vals[27]), bool(vals[28])),
        ))
    if pos != len(raw):
        raise CorruptPayloadError(f"{len(raw) - pos} trailing bytes after {count} samples")
    return Dataset(config, samples, version)


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return parse_dataset(fh.read())


def to_file_precision(dataset: Dataset) -> Dataset:
    """The dataset exactly as it reads back from disk (labels rounded to float32)."""
    return parse_dataset(dataset_bytes(dataset))
