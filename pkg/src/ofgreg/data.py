"""Synthetic phantoms with known deformations, and the binary volume formats.

Binary container (little-endian)::

    magic[4]  "OFGV" scalar | "OFGD" field | "OFGL" labels
    u32       format version (1)
    u32[3]    dims
    f32[3]    spacing
    u32       dtype: 0 = f32 scalar, 1 = f32 xyz vector (interleaved), 2 = u16 label
    ...       raw data, x fastest
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from ofgreg.volume import DisplacementField, Grid, ImagePair, LabelVolume, ScalarVolume, normalize
from ofgreg.warp import nearest_array, trilinear_array

FORMAT_VERSION = 1
HEADER = struct.Struct("<4sI3I3fI")
MAGIC = {"volume": b"OFGV", "field": b"OFGD", "labels": b"OFGL"}
DTYPE_CODE = {"volume": 0, "field": 1, "labels": 2}


class FormatError(ValueError):
    """A container file failed validation; ``offset`` is the byte where it went wrong."""

    def __init__(self, message, path=None, offset=None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.offset = offset


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 32, 32)
    shapes: int = 4
    intensities: tuple[float, ...] = (0.35, 0.6, 0.85, 1.0)
    labels: tuple[int, ...] = (1, 2, 3, 4)
    noise: float = 0.01
    margin: int = 2


@dataclass(frozen=True)
class FieldSpec:
    amplitude: float = 3.0
    sigma: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")


# relative size of each nested shape
_NESTING = (("ellipsoid", 1.0), ("ellipsoid", 0.84), ("ellipsoid", 0.66), ("ellipsoid", 0.45))


def _shape_layout(dims, n_shapes, rng, margin):
    """Concentric shells: each shape sits inside the previous one with a jittered centre."""
    dims = np.asarray(dims, dtype=np.float64)
    centre = (dims - 1) / 2 + rng.uniform(-1.0, 1.0, 3)
    room = (dims - 1) / 2 - 1.0 - margin
    outer = room * rng.uniform(0.9, 1.0, 3)
    layout = [(_NESTING[0][0], centre, outer)]
    for s in range(1, n_shapes):
        kind, frac = _NESTING[s % len(_NESTING)]
        frac = frac / (1 + s // len(_NESTING))
        c = centre + rng.uniform(-0.6, 0.6, 3)
        layout.append((kind, c, outer * frac * rng.uniform(0.95, 1.05, 3)))
    return layout


def _membership(kind, centre, radius, dims):
    x = np.stack(np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij"))
    rel = (x - centre.reshape(3, 1, 1, 1)) / radius.reshape(3, 1, 1, 1)
    if kind == "box":
        return np.all(np.abs(rel) <= 1.0, axis=0)
    return np.sum(rel * rel, axis=0) <= 1.0


def gen_phantom(spec: PhantomSpec = PhantomSpec(), seed: int = 0):
    """Nested analytic shapes with per-shape intensity and label, plus noise; returns (image, labels)."""
    if len(spec.intensities) < spec.shapes or len(spec.labels) < spec.shapes:
        raise ValueError("need one intensity and one label per shape")
    dims = Grid(spec.dims).dims
    rng = np.random.default_rng(seed)
    img = np.zeros(dims)
    lab = np.zeros(dims, dtype=np.uint16)
    for s, (kind, c, r) in enumerate(_shape_layout(dims, spec.shapes, rng, spec.margin)):
        lo, hi = c - r, c + r
        if np.any(lo < spec.margin) or np.any(hi > np.asarray(dims) - 1 - spec.margin):
            raise ValueError(f"shape {s} does not fit inside the grid with margin {spec.margin}")
        inside = _membership(kind, c, r, dims)
        img[inside] = spec.intensities[s]
        lab[inside] = spec.labels[s]
    present = set(np.unique(lab).tolist()) - {0}
    if present != set(spec.labels[: spec.shapes]):
        raise ValueError("a shape is fully hidden by the shapes drawn over it")
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, dims)
    grid = Grid(dims)
    vol = normalize(ScalarVolume(grid, img.astype(np.float32)))
    return vol, LabelVolume(grid, lab)


def gen_smooth_field(grid: Grid, spec: FieldSpec = FieldSpec()) -> DisplacementField:
    """Gaussian-smoothed white noise rescaled so the largest vector has length ``amplitude``."""
    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal((3,) + grid.dims)
    u = np.stack([ndimage.gaussian_filter(noise[c], spec.sigma, mode="reflect") for c in range(3)])
    peak = np.sqrt(np.sum(u * u, axis=0)).max()
    if spec.amplitude == 0 or peak == 0:
        return DisplacementField(grid, np.zeros((3,) + grid.dims, dtype=np.float32))
    return DisplacementField(grid, (u * (spec.amplitude / peak)).astype(np.float32))


def make_pair(phantom_spec: PhantomSpec = PhantomSpec(), field_spec: FieldSpec = FieldSpec(),
              seed: int = 0, name: str = "") -> ImagePair:
    """Fixed phantom, and the same phantom warped by a smooth ground-truth field."""
    fixed, fixed_labels = gen_phantom(phantom_spec, seed)
    truth = gen_smooth_field(fixed.grid, FieldSpec(field_spec.amplitude, field_spec.sigma, field_spec.seed))
    moving, _ = trilinear_array(fixed.data, truth.data)
    moving_labels = nearest_array(fixed_labels.data, truth.data)
    return ImagePair(
        fixed=fixed,
        moving=ScalarVolume(fixed.grid, moving.astype(np.float32)),
        fixed_labels=fixed_labels,
        moving_labels=LabelVolume(fixed.grid, moving_labels),
        truth_field=truth,
        name=name,
    )


def pair_seeds(seed: int, index: int) -> tuple[int, int]:
    """Independent phantom and field seeds for pair ``index`` of a dataset."""
    ss = np.random.SeedSequence([seed, index])
    a, b = ss.generate_state(2)
    return int(a), int(b)


def make_dataset(n_pairs: int, seed: int = 0, phantom_spec: PhantomSpec = PhantomSpec(),
                 amplitude: float = 3.0, sigma: float = 4.0) -> list[ImagePair]:
    pairs = []
    for i in range(n_pairs):
        ps, fs = pair_seeds(seed, i)
        pairs.append(make_pair(phantom_spec, FieldSpec(amplitude, sigma, fs), ps, name=f"pair_{i:03d}"))
    return pairs


# ---------------------------------------------------------------- file formats

def _write(path, kind, grid: Grid, payload: np.ndarray):
    header = HEADER.pack(MAGIC[kind], FORMAT_VERSION, *grid.dims, *grid.spacing, DTYPE_CODE[kind])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes(order="F"))


def _read(path, kind):
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise FormatError(f"truncated header: expected {HEADER.size} bytes, got {len(raw)}", path, len(raw))
    magic, version, nx, ny, nz, sx, sy, sz, code = HEADER.unpack_from(raw)
    if magic != MAGIC[kind]:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC[kind]!r}", path, 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", path, 4)
    if code != DTYPE_CODE[kind]:
        raise FormatError(f"dtype code {code} does not match {kind} (expected {DTYPE_CODE[kind]})", path, 32)
    try:
        grid = Grid((nx, ny, nz), (sx, sy, sz))
    except ValueError as err:
        raise FormatError(f"invalid grid in header: {err}", path, 8) from None
    itemsize = 2 if kind == "labels" else 4
    count = grid.size * (3 if kind == "field" else 1)
    expected = HEADER.size + count * itemsize
    if len(raw) != expected:
        raise FormatError(f"size mismatch: expected {expected} bytes, got {len(raw)}", path, min(len(raw), expected))
    dtype = "<u2" if kind == "labels" else "<f4"
    return grid, np.frombuffer(raw, dtype=dtype, offset=HEADER.size)


def write_volume(path, v: ScalarVolume):
    _write(path, "volume", v.grid, v.data.astype("<f4"))


def read_volume(path) -> ScalarVolume:
    grid, flat = _read(path, "volume")
    return ScalarVolume(grid, flat.reshape(grid.dims, order="F").astype(np.float32))


def write_field(path, u: DisplacementField):
    # components interleaved: (3, X, Y, Z) in Fortran order puts xyz fastest
    _write(path, "field", u.grid, u.data.astype("<f4"))


def read_field(path) -> DisplacementField:
    grid, flat = _read(path, "field")
    return DisplacementField(grid, flat.reshape((3,) + grid.dims, order="F").astype(np.float32))


def write_labels(path, labels: LabelVolume):
    _write(path, "labels", labels.grid, labels.data.astype("<u2"))


def read_labels(path) -> LabelVolume:
    grid, flat = _read(path, "labels")
    return LabelVolume(grid, flat.reshape(grid.dims, order="F").astype(np.uint16))


# ---------------------------------------------------------------- dataset directories

PAIR_FILES = {
    "fixed": "fixed.ofgv",
    "moving": "moving.ofgv",
    "fixed_labels": "fixed_labels.ofgl",
    "moving_labels": "moving_labels.ofgl",
    "truth_field": "truth.ofgd",
}


def write_pair(directory, pair: ImagePair):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_volume(d / PAIR_FILES["fixed"], pair.fixed)
    write_volume(d / PAIR_FILES["moving"], pair.moving)
    if pair.fixed_labels is not None:
        write_labels(d / PAIR_FILES["fixed_labels"], pair.fixed_labels)
    if pair.moving_labels is not None:
        write_labels(d / PAIR_FILES["moving_labels"], pair.moving_labels)
    if pair.truth_field is not None:
        write_field(d / PAIR_FILES["truth_field"], pair.truth_field)


def read_pair(directory) -> ImagePair:
    d = Path(directory)

    def opt(key, reader):
        p = d / PAIR_FILES[key]
        return reader(p) if p.exists() else None

    return ImagePair(
        fixed=read_volume(d / PAIR_FILES["fixed"]),
        moving=read_volume(d / PAIR_FILES["moving"]),
        fixed_labels=opt("fixed_labels", read_labels),
        moving_labels=opt("moving_labels", read_labels),
        truth_field=opt("truth_field", read_field),
        name=d.name,
    )


def write_dataset(directory, pairs: Sequence[ImagePair], config: Optional[dict] = None):
    """Write every pair into its own sub-directory plus a ``manifest.txt``."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    lines = ["# ofgreg synthetic dataset"]
    for key, value in (config or {}).items():
        lines.append(f"# {key} = {value}")
    for i, pair in enumerate(pairs):
        name = pair.name or f"pair_{i:03d}"
        write_pair(root / name, pair)
        lines.append(name)
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_dataset(directory) -> list[ImagePair]:
    root = Path(directory)
    manifest = root / "manifest.txt"
    if manifest.exists():
        names = [l.strip() for l in manifest.read_text().splitlines() if l.strip() and not l.startswith("#")]
    else:
        names = sorted(p.name for p in root.iterdir() if (p / PAIR_FILES["fixed"]).exists())
    if not names:
        raise FileNotFoundError(f"no image pairs found in {root}")
    return [read_pair(root / n) for n in names]
