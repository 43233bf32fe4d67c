"""Synthetic multimodal gas dataset: generation, augmentation, splitting and persistence.

Sensor means are calibrated to two reference readings per class taken
from a 7-sensor MQ array (10-bit ADC). Thermal frames are an ambient
background plus Gaussian plume blobs plus pixel noise, at the camera's
native 206x156 resolution.

On-disk layout of a dataset directory::

    manifest.json   version, class names, split seed, sample records
    sensors.csv     id,mq2,mq3,mq5,mq6,mq7,mq8,mq135,t_seconds
    images/<id>.pgm binary PGM (P5, maxval 255)
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, InvalidRange, InvalidShape, SplitError
from .tensor import Rng

MANIFEST_VERSION = 1
SENSOR_NAMES = ("mq2", "mq3", "mq5", "mq6", "mq7", "mq8", "mq135")
ADC_MAX = 1023
NATIVE_HEIGHT = 156
NATIVE_WIDTH = 206


class GasClass(enum.IntEnum):
    NoGas = 0
    Perfume = 1
    Smoke = 2
    Mixture = 3

    @classmethod
    def parse(cls, name: str) -> "GasClass":
        try:
            return cls[name]
        except KeyError:
            raise ValueError(f"unknown gas class {name!r}") from None


CLASS_NAMES = tuple(c.name for c in GasClass)

# Reference array readings, two rows per class (no mixture row exists).
REFERENCE_READINGS = {
    GasClass.NoGas: ((558, 516, 376, 336, 665, 450, 415), (791, 520, 510, 455, 690, 733, 533)),
    GasClass.Perfume: ((808, 520, 515, 485, 692, 754, 513), (800, 521, 508, 481, 686, 746, 505)),
    GasClass.Smoke: ((550, 343, 371, 400, 572, 583, 304), (537, 354, 337, 374, 562, 547, 279)),
}


def default_sensor_means() -> dict:
    means = {c: tuple(float(v) for v in np.mean(rows, axis=0)) for c, rows in REFERENCE_READINGS.items()}
    # the array responds to the dominant stimulus in a mixture
    means[GasClass.Mixture] = tuple(max(a, b) for a, b in zip(means[GasClass.Perfume], means[GasClass.Smoke]))
    return means


# --------------------------------------------------------------------------
# samples
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SensorFrame:
    adc: tuple  # 7 ints, SENSOR_NAMES order
    t: float = 0.0

    def __post_init__(self):
        adc = tuple(int(v) for v in self.adc)
        if len(adc) != len(SENSOR_NAMES):
            raise ValueError(f"sensor frame needs {len(SENSOR_NAMES)} readings, got {len(adc)}")
        if any(v < 0 or v > ADC_MAX for v in adc):
            raise InvalidRange(f"ADC readings must lie in [0, {ADC_MAX}]: {adc}")
        object.__setattr__(self, "adc", adc)

    def normalized(self) -> np.ndarray:
        return np.array(self.adc, dtype=np.float64) / ADC_MAX


@dataclass(frozen=True, eq=False)
class ThermalFrame:
    pixels: np.ndarray  # [H, W] intensities in [0, 255]

    def __post_init__(self):
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 1:
            raise InvalidShape(f"thermal frame must be a non-empty 2-D array, got {self.pixels.shape}")

    @property
    def shape(self) -> tuple:
        return self.pixels.shape

    def __eq__(self, other):
        if not isinstance(other, ThermalFrame):
            return NotImplemented
        return self.pixels.dtype == other.pixels.dtype and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


@dataclass(frozen=True)
class LabeledSample:
    id: str
    sensor: SensorFrame
    thermal: ThermalFrame
    label: GasClass


# --------------------------------------------------------------------------
# generator
# --------------------------------------------------------------------------


@dataclass
class GenConfig:
    """Generator parameters. Plume ranges are (lo, hi) bounds of a uniform draw.

    Mixture frames carry both a Perfume and a Smoke plume; with
    ``shared_center`` they rise from one spot, otherwise each gets its own.
    """

    sensor_means: dict = field(default_factory=default_sensor_means)
    sensor_noise: float = 15.0
    ambient: float = 60.0
    pixel_noise: float = 4.0
    plume_amplitude: dict = field(
        default_factory=lambda: {GasClass.Perfume: (80.0, 100.0), GasClass.Smoke: (40.0, 50.0)}
    )
    plume_width: dict = field(
        default_factory=lambda: {GasClass.Perfume: (12.0, 16.0), GasClass.Smoke: (32.0, 45.0)}
    )
    center_margin: float = 0.15
    shared_center: bool = True
    height: int = NATIVE_HEIGHT
    width: int = NATIVE_WIDTH
    samples_per_class: int = 1600
    frame_period: float = 2.0
    seed: int = 7

    def __post_init__(self):
        self.sensor_means = {GasClass(k) if not isinstance(k, str) else GasClass.parse(k): tuple(map(float, v))
                             for k, v in self.sensor_means.items()}
        self.plume_amplitude = _class_ranges(self.plume_amplitude)
        self.plume_width = _class_ranges(self.plume_width)
        if set(self.sensor_means) != set(GasClass):
            raise ValueError("sensor_means needs an entry for every class")
        for c, mu in self.sensor_means.items():
            if len(mu) != len(SENSOR_NAMES) or any(not 0 <= m <= ADC_MAX for m in mu):
                raise ValueError(f"sensor mean for {c.name} must be 7 values in [0, {ADC_MAX}]")
        if self.sensor_noise < 0 or self.pixel_noise < 0:
            raise ValueError("noise levels must be non-negative")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if self.height < 1 or self.width < 1:
            raise ValueError("frame dimensions must be positive")
        if not 0 <= self.center_margin < 0.5:
            raise ValueError("center_margin must be in [0, 0.5)")

    def to_dict(self) -> dict:
        return {
            "sensor_means": {c.name: list(v) for c, v in sorted(self.sensor_means.items())},
            "sensor_noise": self.sensor_noise,
            "ambient": self.ambient,
            "pixel_noise": self.pixel_noise,
            "plume_amplitude": {c.name: list(v) for c, v in sorted(self.plume_amplitude.items())},
            "plume_width": {c.name: list(v) for c, v in sorted(self.plume_width.items())},
            "center_margin": self.center_margin,
            "shared_center": self.shared_center,
            "height": self.height,
            "width": self.width,
            "samples_per_class": self.samples_per_class,
            "frame_period": self.frame_period,
            "seed": self.seed,
        }

    def plumes_for(self, cls: GasClass) -> list:
        """Source classes whose plumes appear in a frame of ``cls``."""
        if cls == GasClass.Mixture:
            return [GasClass.Perfume, GasClass.Smoke]
        if cls == GasClass.NoGas:
            return []
        return [cls]


def _class_ranges(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        c = GasClass.parse(k) if isinstance(k, str) else GasClass(k)
        lo, hi = (float(x) for x in v)
        if lo > hi:
            raise ValueError(f"range for {c.name} has lo > hi")
        out[c] = (lo, hi)
    return out


def gen_sensor(cls: GasClass, cfg: GenConfig, rng: Rng, t: float = 0.0) -> SensorFrame:
    """Class mean plus Gaussian noise, rounded half-to-even and clamped to 10 bits."""
    mu = np.array(cfg.sensor_means[GasClass(cls)])
    raw = mu + cfg.sensor_noise * rng.normal(len(SENSOR_NAMES))
    adc = np.clip(np.rint(raw), 0, ADC_MAX).astype(int)
    return SensorFrame(tuple(adc.tolist()), t)


def _blob(h: int, w: int, cy: int, cx: int, width: float) -> np.ndarray:
    gy = np.exp(-((np.arange(h) - cy) ** 2) / (2.0 * width * width))
    gx = np.exp(-((np.arange(w) - cx) ** 2) / (2.0 * width * width))
    return np.outer(gy, gx)


def gen_thermal(cls: GasClass, cfg: GenConfig, rng: Rng) -> ThermalFrame:
    """Ambient level, one Gaussian plume per source, pixel noise; quantized to uint8.

    Blob centers are whole pixels, so before noise the center pixel of a
    lone plume is exactly ``ambient + amplitude`` (clamped to 255).
    """
    h, w = cfg.height, cfg.width
    img = np.full((h, w), float(cfg.ambient))
    my, mx = int(cfg.center_margin * h), int(cfg.center_margin * w)
    center = None
    for src in cfg.plumes_for(GasClass(cls)):
        amp = rng.uniform(*cfg.plume_amplitude.get(src, (0.0, 0.0)))
        width = rng.uniform(*cfg.plume_width.get(src, (1.0, 1.0)))
        cy = my + rng.integers(h - 2 * my)
        cx = mx + rng.integers(w - 2 * mx)
        if cfg.shared_center:
            # draws still happen so the stream layout is the same either way
            center = center or (cy, cx)
            cy, cx = center
        if amp != 0.0:
            img += amp * _blob(h, w, cy, cx, max(width, 1e-6))
    if cfg.pixel_noise > 0:
        img += cfg.pixel_noise * rng.normal((h, w))
    return ThermalFrame(np.clip(np.rint(img), 0, 255).astype(np.uint8))


def sample_id(index: int) -> str:
    return f"{index:06d}"


def gen_sample(cls: GasClass, index_in_class: int, cfg: GenConfig) -> LabeledSample:
    """Generate one sample from its own derived stream, so order does not matter."""
    index = int(cls) * cfg.samples_per_class + index_in_class
    rng = Rng.derive(cfg.seed, index)
    sensor = gen_sensor(cls, cfg, rng, t=index_in_class * cfg.frame_period)
    thermal = gen_thermal(cls, cfg, rng)
    return LabeledSample(sample_id(index), sensor, thermal, GasClass(cls))


def gen_dataset(cfg: GenConfig) -> list:
    """``samples_per_class`` samples of each class, class-major order."""
    return [gen_sample(c, i, cfg) for c in GasClass for i in range(cfg.samples_per_class)]


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Rotate:
    degrees: float


@dataclass(frozen=True)
class Shear:
    kx: float


@dataclass(frozen=True)
class Rescale:
    pass


@dataclass(frozen=True)
class Resize:
    height: int
    width: int


def _remap(img: np.ndarray, src_y: np.ndarray, src_x: np.ndarray, fill: float) -> np.ndarray:
    h, w = img.shape
    iy = np.rint(src_y).astype(np.int64)
    ix = np.rint(src_x).astype(np.int64)
    inside = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    out = np.full(img.shape, fill, dtype=img.dtype)
    out[inside] = img[iy[inside], ix[inside]]
    return out


def rotate(img: np.ndarray, degrees: float, fill: float) -> np.ndarray:
    """Nearest-neighbour rotation about the image center."""
    if degrees % 360 == 0:
        return img.copy()
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = math.radians(degrees)
    cos, sin = math.cos(th), math.sin(th)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # inverse map: rotate destination coordinates back by -theta
    src_y = cy + cos * dy - sin * dx
    src_x = cx + sin * dy + cos * dx
    return _remap(img, src_y, src_x, fill)


def shear(img: np.ndarray, kx: float, fill: float) -> np.ndarray:
    """Horizontal nearest-neighbour shear (tilt) about the center row."""
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    src_x = xx - kx * (yy - (h - 1) / 2.0)
    return _remap(img, yy, src_x, fill)


@lru_cache(maxsize=32)
def _area_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """Row i averages source cells over [i, i+1) * n_src/n_dst with fractional overlap."""
    scale = n_src / n_dst
    m = np.zeros((n_dst, n_src))
    for i in range(n_dst):
        lo, hi = i * scale, (i + 1) * scale
        for k in range(int(math.floor(lo)), min(int(math.ceil(hi)), n_src)):
            m[i, k] = min(hi, k + 1) - max(lo, k)
    m /= m.sum(axis=1, keepdims=True)
    m.setflags(write=False)
    return m


def resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Area-average resampling to ``height x width`` (float64 output)."""
    if height < 8 or width < 8:
        raise InvalidShape(f"resize target must be at least 8x8, got {height}x{width}")
    src = np.asarray(img, dtype=np.float64)
    out = _area_matrix(src.shape[-2], height) @ src @ _area_matrix(src.shape[-1], width).T
    # keep averages inside the source range despite rounding
    return np.clip(out, src.min(), src.max())


def rescale(img: np.ndarray) -> np.ndarray:
    """Map 8-bit intensities to [0, 1] reals."""
    return np.asarray(img, dtype=np.float64) / 255.0


def augment(frame: ThermalFrame, op, fill: float = 60.0):
    """Apply one augmentation op.

    Rotate and Shear return a ThermalFrame, Resize returns a float
    ThermalFrame, Rescale returns the [0, 1] array fed to models.
    """
    px = frame.pixels
    if isinstance(op, Rotate):
        return ThermalFrame(rotate(px, op.degrees, fill))
    if isinstance(op, Shear):
        return ThermalFrame(shear(px, op.kx, fill))
    if isinstance(op, Resize):
        return ThermalFrame(resize(px, op.height, op.width))
    if isinstance(op, Rescale):
        return rescale(px)
    raise TypeError(f"unknown augmentation {op!r}")


def random_augment(frame: ThermalFrame, rng: Rng, max_degrees: float = 15.0, max_shear: float = 0.2,
                   fill: float = 60.0) -> ThermalFrame:
    """Random rotation in [-max_degrees, max_degrees] followed by a random tilt."""
    deg = rng.uniform(-max_degrees, max_degrees)
    kx = rng.uniform(-max_shear, max_shear)
    return augment(augment(frame, Rotate(deg), fill), Shear(kx), fill)


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------

DEFAULT_RATIOS = (0.64, 0.16, 0.20)
_SPLIT_KEY = 0x5EED


def split(dataset: Sequence[LabeledSample], ratios=DEFAULT_RATIOS, seed: int = 7):
    """Stratified (train, val, test) partition; each stratum must divide exactly.

    Within each partition samples keep their dataset order.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise SplitError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    parts = ([], [], [])
    for cls in GasClass:
        idx = [i for i, s in enumerate(dataset) if s.label == cls]
        if not idx:
            continue
        counts = []
        for r in ratios[:2]:
            exact = r * len(idx)
            if abs(exact - round(exact)) > 1e-6:
                raise SplitError(f"{cls.name}: {r} of {len(idx)} samples is not a whole number")
            counts.append(int(round(exact)))
        order = Rng.derive(seed, _SPLIT_KEY, int(cls)).permutation(len(idx))
        shuffled = [idx[k] for k in order]
        n_tr, n_va = counts
        for part, chunk in zip(parts, (shuffled[:n_tr], shuffled[n_tr:n_tr + n_va], shuffled[n_tr + n_va:])):
            part.extend(chunk)
    return tuple([dataset[i] for i in sorted(p)] for p in parts)


# --------------------------------------------------------------------------
# PGM
# --------------------------------------------------------------------------


def write_pgm(path, pixels: np.ndarray) -> None:
    if pixels.dtype != np.uint8 or pixels.ndim != 2:
        raise ValueError("PGM writer expects a 2-D uint8 array")
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(pixels).tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) 8-bit PGM; header comments are allowed."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read image: {e.strerror}", path) from None
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", path)
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0][:8]!r})", path)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("malformed PGM header", path) from None
    if maxval != 255 or w < 1 or h < 1:
        raise FormatError(f"unsupported PGM geometry {w}x{h} maxval {maxval}", path)
    body = raw[pos:]
    if len(body) < w * h:
        raise FormatError(f"truncated PGM raster: {len(body)} of {w * h} bytes", path)
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w).copy()


# --------------------------------------------------------------------------
# dataset directories
# --------------------------------------------------------------------------


@dataclass
class Dataset:
    samples: list
    split_seed: int = 7

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def splits(self, ratios=DEFAULT_RATIOS):
        return split(self.samples, ratios, self.split_seed)


def _fmt_float(x: float) -> str:
    return repr(float(x))


def save_dataset(samples: Sequence[LabeledSample], directory, split_seed: int = 7) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    records = []
    lines = ["id," + ",".join(SENSOR_NAMES) + ",t_seconds"]
    for row, s in enumerate(samples):
        image = f"images/{s.id}.pgm"
        px = s.thermal.pixels
        if px.dtype != np.uint8:
            px = np.clip(np.rint(px), 0, 255).astype(np.uint8)
        write_pgm(directory / image, px)
        lines.append(",".join([s.id, *map(str, s.sensor.adc), _fmt_float(s.sensor.t)]))
        records.append({"id": s.id, "label": s.label.name, "image": image, "sensor_row": row})
    (directory / "sensors.csv").write_bytes(("\n".join(lines) + "\n").encode("ascii"))
    manifest = {
        "version": MANIFEST_VERSION,
        "class_names": list(CLASS_NAMES),
        "split_seed": int(split_seed),
        "samples": records,
    }
    (directory / "manifest.json").write_bytes((json.dumps(manifest, indent=1) + "\n").encode("ascii"))
    return directory


def _read_sensors(path: Path) -> list:
    try:
        text = path.read_bytes().decode("ascii")
    except OSError as e:
        raise FormatError(f"cannot read sensor table: {e.strerror}", path) from None
    except UnicodeDecodeError:
        raise FormatError("sensor table is not ASCII", path) from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    header = "id," + ",".join(SENSOR_NAMES) + ",t_seconds"
    if not lines or lines[0] != header:
        raise FormatError(f"expected header {header!r}", path, 1)
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != len(SENSOR_NAMES) + 2:
            raise FormatError(f"expected {len(SENSOR_NAMES) + 2} fields, got {len(fields)}", path, lineno)
        try:
            adc = tuple(int(v) for v in fields[1:-1])
            frame = SensorFrame(adc, float(fields[-1]))
        except ValueError as e:
            raise FormatError(str(e), path, lineno) from None
        rows.append((fields[0], frame))
    return rows


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    try:
        manifest = json.loads(mpath.read_bytes().decode("ascii"))
    except OSError as e:
        raise FormatError(f"cannot read manifest: {e.strerror}", mpath) from None
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid JSON: {e.msg}", mpath, e.lineno) from None
    except UnicodeDecodeError:
        raise FormatError("manifest is not ASCII", mpath) from None
    if not isinstance(manifest, dict):
        raise FormatError("manifest must be a JSON object", mpath)
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {manifest.get('version')!r}", mpath)
    if manifest.get("class_names") != list(CLASS_NAMES):
        raise FormatError(f"class names must be {list(CLASS_NAMES)}", mpath)
    records = manifest.get("samples")
    split_seed = manifest.get("split_seed")
    if not isinstance(records, list) or not isinstance(split_seed, int):
        raise FormatError("manifest needs a 'samples' list and an integer 'split_seed'", mpath)
    sensors = _read_sensors(directory / "sensors.csv")
    samples = []
    for k, rec in enumerate(records):
        where = f"sample record {k}"
        try:
            sid, label, image, row = rec["id"], rec["label"], rec["image"], rec["sensor_row"]
        except (KeyError, TypeError):
            raise FormatError(f"{where} lacks id/label/image/sensor_row", mpath) from None
        try:
            cls = GasClass.parse(label)
        except ValueError:
            raise FormatError(f"{where} has unknown class label {label!r}", mpath) from None
        if not isinstance(row, int) or not 0 <= row < len(sensors):
            raise FormatError(f"{where} refers to missing sensor row {row!r}", mpath)
        row_id, frame = sensors[row]
        if row_id != sid:
            raise FormatError(f"{where}: sensor row {row} has id {row_id!r}, expected {sid!r}",
                              directory / "sensors.csv", row + 2)
        pixels = read_pgm(directory / image)
        samples.append(LabeledSample(sid, frame, ThermalFrame(pixels), cls))
    return Dataset(samples, split_seed)
