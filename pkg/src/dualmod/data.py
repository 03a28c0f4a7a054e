"""Synthetic RGB-T scenes, PGM/PPM I/O, an on-disk loader and augmentation.

Image arrays are float64 ``C x H x W`` in [0, 1].  Annotation coordinates use
the pixel-index convention: pixel ``(row i, col j)`` sits at ``(x=j, y=i)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, GenerationError, LoadError, ParseError
from .loss_metrics import PointAnnotations

SPLITS = ("train", "val", "test")


@dataclass
class Sample:
    id: str
    rgb: np.ndarray  # 3 x H x W
    thermal: np.ndarray  # 1 x H x W
    annotations: PointAnnotations = field(default_factory=PointAnnotations)
    rgb_brightness: Optional[float] = None

    def __post_init__(self):
        if self.rgb.shape[1:] != self.thermal.shape[1:]:
            raise LoadError(
                f"sample {self.id}: rgb {self.rgb.shape} and thermal {self.thermal.shape} misaligned"
            )

    @property
    def height(self) -> int:
        return self.rgb.shape[1]

    @property
    def width(self) -> int:
        return self.rgb.shape[2]

    @property
    def count(self) -> int:
        return self.annotations.count


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 64
    n_people: int = 5
    seed: int = 0
    rgb_brightness: float = 1.0
    blob_radius: float = 3.0

    def __post_init__(self):
        if self.n_people < 0:
            raise ConfigError(f"n_people must be >= 0, got {self.n_people}")
        if self.blob_radius <= 0:
            raise ConfigError(f"blob_radius must be positive, got {self.blob_radius}")
        if not 0.0 <= self.rgb_brightness <= 1.0:
            raise ConfigError(f"rgb_brightness must be in [0, 1], got {self.rgb_brightness}")


def _texture(rng: np.random.Generator, h: int, w: int, n_waves: int = 4) -> np.ndarray:
    """Smooth random field in roughly [-1, 1] made from a few plane waves."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    field_ = np.zeros((h, w))
    for _ in range(n_waves):
        fx, fy = rng.uniform(-0.25, 0.25, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.cos(2 * np.pi * (fx * xx + fy * yy) / 4.0 + phase)
    return field_ / n_waves


def _place_centers(spec: SceneSpec, rng: np.random.Generator, max_tries: int = 1000) -> np.ndarray:
    min_sep = 2.0 * spec.blob_radius
    pts: list[tuple[float, float]] = []
    for _ in range(spec.n_people):
        for _ in range(max_tries):
            x = rng.uniform(0, spec.width - 1)
            y = rng.uniform(0, spec.height - 1)
            if all((x - px) ** 2 + (y - py) ** 2 >= min_sep ** 2 for px, py in pts):
                pts.append((x, y))
                break
        else:
            raise GenerationError(
                f"could not place {spec.n_people} heads of radius {spec.blob_radius} "
                f"in a {spec.width}x{spec.height} scene (placed {len(pts)})"
            )
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def generate_scene(spec: SceneSpec, sample_id: Optional[str] = None) -> Sample:
    """Gaussian head blobs on textured backgrounds; deterministic in ``spec.seed``.

    Thermal shows every head at full contrast.  RGB shows them scaled by
    ``rgb_brightness``, so a brightness of 0 leaves only background texture.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    centers = _place_centers(spec, rng)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    s2 = 2.0 * (spec.blob_radius / 2.0) ** 2
    blobs = np.zeros((h, w))
    colors = rng.uniform(0.5, 1.0, size=(len(centers), 3))
    rgb_blobs = np.zeros((3, h, w))
    for (cx, cy), col in zip(centers, colors):
        g = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / s2)
        blobs = np.maximum(blobs, g)
        rgb_blobs = np.maximum(rgb_blobs, col[:, None, None] * g)

    base = rng.uniform(0.2, 0.4, size=3)
    rgb = np.stack([base[c] + 0.1 * _texture(rng, h, w) for c in range(3)])
    rgb = rgb + spec.rgb_brightness * rgb_blobs
    thermal = 0.1 + 0.03 * _texture(rng, h, w) + 0.85 * blobs
    return Sample(
        id=sample_id if sample_id is not None else f"scene{spec.seed:06d}",
        rgb=np.clip(rgb, 0.0, 1.0),
        thermal=np.clip(thermal, 0.0, 1.0)[None],
        annotations=PointAnnotations(centers),
        rgb_brightness=spec.rgb_brightness,
    )


# ---------------------------------------------------------------------------
# PGM / PPM


def write_pnm(path, image: np.ndarray, plain: bool = False) -> None:
    """Write a 1-channel (PGM) or 3-channel (PPM) image, maxval 255."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    c, h, w = image.shape
    if c not in (1, 3):
        raise ConfigError(f"PNM needs 1 or 3 channels, got {c}")
    q = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    raster = q.transpose(1, 2, 0)  # H x W x C, interleaved
    magic = {(1, True): "P2", (3, True): "P3", (1, False): "P5", (3, False): "P6"}[(c, plain)]
    header = f"{magic}\n{w} {h}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        if plain:
            rows = raster.reshape(h, w * c)
            fh.write("".join(" ".join(str(v) for v in row) + "\n" for row in rows).encode("ascii"))
        else:
            fh.write(raster.tobytes())


def _header_tokens(buf: bytes, n: int) -> tuple[list[bytes], int]:
    """First ``n`` whitespace-separated header tokens, skipping ``#`` comments."""
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < n:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if i >= len(buf):
            raise ParseError("truncated PNM header")
        if buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace() and buf[j:j + 1] != b"#":
            j += 1
        tokens.append(buf[i:j])
        i = j
    return tokens, i


def read_pnm(path) -> np.ndarray:
    """Read P2/P3/P5/P6 into a float ``C x H x W`` array scaled to [0, 1]."""
    buf = Path(path).read_bytes()
    tokens, pos = _header_tokens(buf, 4)
    magic = tokens[0].decode("ascii", "replace")
    if magic not in ("P2", "P3", "P5", "P6"):
        raise ParseError(f"{path}: unsupported PNM magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise ParseError(f"{path}: malformed PNM header") from None
    if not 0 < maxval < 256:
        raise ParseError(f"{path}: maxval {maxval} not supported")
    c = 1 if magic in ("P2", "P5") else 3
    n = w * h * c
    if magic in ("P5", "P6"):
        raster = np.frombuffer(buf[pos + 1:pos + 1 + n], dtype=np.uint8)
    else:
        text = b" ".join(ln.split(b"#")[0] for ln in buf[pos:].splitlines())
        raster = np.array(text.split()[:n], dtype=np.int64)
    if raster.size != n:
        raise ParseError(f"{path}: expected {n} samples, found {raster.size}")
    return raster.reshape(h, w, c).transpose(2, 0, 1).astype(np.float64) / maxval


# ---------------------------------------------------------------------------
# annotations and dataset layout


def read_annotations(path) -> PointAnnotations:
    pts = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#")[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                if len(parts) != 2:
                    raise ValueError
                pts.append((float(parts[0]), float(parts[1])))
            except ValueError:
                raise ParseError(f"{path}:{lineno}: expected 'x y', got {line!r}") from None
    return PointAnnotations(np.array(pts).reshape(-1, 2))


def write_annotations(path, ann: PointAnnotations) -> None:
    with open(path, "w") as fh:
        for x, y in ann.points:
            fh.write(f"{float(x)!r} {float(y)!r}\n")


def write_dataset(samples, root, split: str = "train", plain: bool = False) -> None:
    base = Path(root) / split
    for sub in ("rgb", "thermal", "annotations"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_pnm(base / "rgb" / f"{s.id}.ppm", s.rgb, plain)
        write_pnm(base / "thermal" / f"{s.id}.pgm", s.thermal, plain)
        write_annotations(base / "annotations" / f"{s.id}.txt", s.annotations)


def _stems(folder: Path, exts: tuple) -> dict[str, Path]:
    if not folder.is_dir():
        raise LoadError(f"missing directory {folder}")
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in exts}


def load_dataset(root, split: str) -> list[Sample]:
    """Load ``root/split/{rgb,thermal,annotations}``; samples sorted by id."""
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
    base = Path(root) / split
    rgb = _stems(base / "rgb", (".ppm", ".pgm"))
    thermal = _stems(base / "thermal", (".pgm", ".ppm"))
    ann = _stems(base / "annotations", (".txt",))
    for stem, p in rgb.items():
        if stem not in thermal:
            raise LoadError(f"{p}: no matching thermal image for sample {stem!r}")
        if stem not in ann:
            raise LoadError(f"{p}: no matching annotation file for sample {stem!r}")
    for stem, p in list(thermal.items()) + list(ann.items()):
        if stem not in rgb:
            raise LoadError(f"{p}: no matching rgb image for sample {stem!r}")

    samples = []
    for stem in sorted(rgb):
        im_rgb = read_pnm(rgb[stem])
        if im_rgb.shape[0] == 1:
            im_rgb = np.repeat(im_rgb, 3, axis=0)
        im_th = read_pnm(thermal[stem])
        if im_th.shape[0] == 3:
            im_th = im_th.mean(axis=0, keepdims=True)
        samples.append(Sample(stem, im_rgb, im_th, read_annotations(ann[stem])))
    return samples


# ---------------------------------------------------------------------------
# augmentation


def crop_flip(sample: Sample, x0: int, y0: int, crop: int, flip: bool) -> Sample:
    """Crop a ``crop`` x ``crop`` window at (x0, y0), then optionally mirror it.

    ``crop=0`` keeps the full image.  A point survives when its local
    coordinates lie in ``[0, size - 1]``; mirroring maps ``x -> size - 1 - x``.
    """
    if crop:
        ch, cw = crop, crop
    else:
        ch, cw = sample.height, sample.width
        x0 = y0 = 0
    if x0 < 0 or y0 < 0 or x0 + cw > sample.width or y0 + ch > sample.height:
        raise ConfigError(
            f"crop window {cw}x{ch} at ({x0},{y0}) exceeds {sample.width}x{sample.height} image"
        )
    rgb = sample.rgb[:, y0:y0 + ch, x0:x0 + cw]
    th = sample.thermal[:, y0:y0 + ch, x0:x0 + cw]
    pts = sample.annotations.points - np.array([x0, y0], dtype=np.float64)
    keep = (pts[:, 0] >= 0) & (pts[:, 0] <= cw - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= ch - 1)
    pts = pts[keep]
    if flip:
        rgb = rgb[:, :, ::-1]
        th = th[:, :, ::-1]
        pts = np.stack([cw - 1 - pts[:, 0], pts[:, 1]], axis=1)
    return replace(
        sample,
        rgb=np.ascontiguousarray(rgb),
        thermal=np.ascontiguousarray(th),
        annotations=PointAnnotations(pts),
    )


def augment(sample: Sample, crop: int, flip_prob: float, rng: np.random.Generator) -> Sample:
    """Random crop (``crop=0`` disables) and random horizontal flip."""
    if crop > min(sample.height, sample.width):
        raise ConfigError(f"crop {crop} larger than image {sample.width}x{sample.height}")
    if crop < 0 or not 0.0 <= flip_prob <= 1.0:
        raise ConfigError(f"invalid augmentation crop={crop} flip_prob={flip_prob}")
    x0 = int(rng.integers(0, sample.width - crop + 1)) if crop else 0
    y0 = int(rng.integers(0, sample.height - crop + 1)) if crop else 0
    flip = bool(rng.random() < flip_prob)
    return crop_flip(sample, x0, y0, crop, flip)


def synthetic_set(
    n: int,
    seed: int,
    size: int = 64,
    people: tuple[int, int] = (3, 12),
    brightness: tuple[float, float] = (1.0, 1.0),
    blob_radius: float = 3.0,
    prefix: str = "syn",
) -> list[Sample]:
    """``n`` scenes whose head counts and brightness are drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        spec = SceneSpec(
            width=size,
            height=size,
            n_people=int(rng.integers(people[0], people[1] + 1)),
            seed=int(rng.integers(0, 2**31 - 1)),
            rgb_brightness=float(rng.uniform(*brightness)),
            blob_radius=blob_radius,
        )
        out.append(generate_scene(spec, f"{prefix}{i:04d}"))
    return out
