"""Cube and mask files, synthetic datasets, patch-pair sampling and cube scheduling.

Cubes live in memory band-sequential, ``data[band, row, col]``, matching the
on-disk ``.hsic`` payload so a load is a single read into one buffer.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    DatasetError,
    DGCError,
    FormatError,
    ShapeError,
    TruncatedFileError,
    VersionError,
)

log = logging.getLogger(__name__)

CUBE_MAGIC = b"HSIC"
MASK_MAGIC = b"HSIM"
FORMAT_VERSION = 1
_CUBE_HEADER = struct.Struct("<4sIIIIdd")
_MASK_HEADER = struct.Struct("<4sIII")
CUBE_HEADER_SIZE = _CUBE_HEADER.size
MASK_HEADER_SIZE = _MASK_HEADER.size

BACKGROUND, TISSUE, LESION = 0, 1, 2


@dataclass
class HsiCube:
    data: np.ndarray  # (bands, height, width) float32
    wavelength_start: float = 400.0
    wavelength_step: float = 2.0

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"cube data must be (bands, height, width), got {self.data.shape}")

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def wavelengths(self) -> np.ndarray:
        return self.wavelength_start + self.wavelength_step * np.arange(self.bands)

    def pixels(self) -> np.ndarray:
        """(height, width, bands) view of the payload."""
        return self.data.transpose(1, 2, 0)

    def crop(self, row: int, col: int, size: int) -> np.ndarray:
        """Copy of a size x size window as (size, size, bands)."""
        return np.ascontiguousarray(self.data[:, row:row + size, col:col + size].transpose(1, 2, 0))

    def check(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise ValueError("cube contains non-finite reflectance values")


@dataclass
class GroundTruthMask:
    labels: np.ndarray  # (height, width) uint8

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


def bands_for_range(start: float, end: float, step: float) -> int:
    return 1 + int(round((end - start) / step))


# ---------------------------------------------------------------- file formats

def save_cube(cube: HsiCube, path) -> None:
    cube.check()
    payload = np.ascontiguousarray(cube.data, dtype="<f4")
    header = _CUBE_HEADER.pack(
        CUBE_MAGIC, FORMAT_VERSION, cube.height, cube.width, cube.bands,
        float(cube.wavelength_start), float(cube.wavelength_step),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def _read_header(fh, fmt: struct.Struct, magic: bytes, path) -> tuple:
    raw = fh.read(fmt.size)
    if len(raw) >= 4 and raw[:4] != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, found {raw[:4]!r}")
    if len(raw) < fmt.size:
        raise TruncatedFileError(f"{path}: header is {len(raw)} bytes, need {fmt.size}")
    fields = fmt.unpack(raw)
    if fields[1] != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported version {fields[1]}")
    return fields


def _read_payload(fh, count: int, dtype: str, path) -> np.ndarray:
    out = np.empty(count, dtype=dtype)
    view = memoryview(out).cast("B")
    got = fh.readinto(view)
    if got < view.nbytes:
        raise TruncatedFileError(f"{path}: payload is {got} bytes, header declares {view.nbytes}")
    if fh.read(1):
        raise FormatError(f"{path}: trailing bytes after payload")
    return out


def load_cube(path) -> HsiCube:
    with open(path, "rb") as fh:
        _, _, h, w, bands, start, step = _read_header(fh, _CUBE_HEADER, CUBE_MAGIC, path)
        data = _read_payload(fh, h * w * bands, "<f4", path)
    cube = HsiCube(data.reshape(bands, h, w), start, step)
    if not np.all(np.isfinite(cube.data)):
        raise FormatError(f"{path}: payload contains non-finite values")
    return cube


def save_mask(mask: GroundTruthMask, path) -> None:
    labels = np.asarray(mask.labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("mask labels must fit in u8")
    with open(path, "wb") as fh:
        fh.write(_MASK_HEADER.pack(MASK_MAGIC, FORMAT_VERSION, labels.shape[0], labels.shape[1]))
        fh.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def load_mask(path) -> GroundTruthMask:
    with open(path, "rb") as fh:
        _, _, h, w = _read_header(fh, _MASK_HEADER, MASK_MAGIC, path)
        labels = _read_payload(fh, h * w, "u1", path)
    return GroundTruthMask(labels.reshape(h, w))


# ----------------------------------------------------------- synthetic datasets

@dataclass
class SynthSpec:
    n_cubes: int = 8
    height: int = 128
    width: int = 128
    bands: int = 64
    n_classes: int = 2
    spectra: np.ndarray | None = None  # (n_classes, bands); None -> default_spectra
    blobs: int = 3
    radius: tuple[float, float] | None = None  # pixels; None -> relative to cube size
    lesion_blobs: int = 6
    lesion_radius: tuple[float, float] | None = None
    lesion_max_fraction: float = 0.1  # of tissue pixels, per lesion class
    gain: tuple[float, float] = (0.8, 1.2)
    noise_std: float = 0.01
    wavelength_start: float = 400.0
    wavelength_step: float | None = None  # None -> span 400-1000 nm
    seed: int = 0

    def validate(self) -> None:
        if self.n_cubes < 1 or self.height < 1 or self.width < 1 or self.bands < 1:
            raise ConfigError("cube count and dimensions must be positive")
        if self.n_classes < 2:
            raise ConfigError("need at least 2 entity classes")
        if self.blobs < 1:
            raise ConfigError("zero blobs cannot realise more than one class")
        if self.n_classes > 2 and self.lesion_blobs < 1:
            raise ConfigError("lesion classes requested with zero lesion blobs")
        if not 0 < self.gain[0] <= self.gain[1]:
            raise ConfigError("gain range must be positive and ordered")
        if self.noise_std < 0:
            raise ConfigError("noise std must be >= 0")
        if self.spectra is not None and np.shape(self.spectra) != (self.n_classes, self.bands):
            raise ConfigError("spectra must be (n_classes, bands)")

    @property
    def step(self) -> float:
        if self.wavelength_step is not None:
            return self.wavelength_step
        return 600.0 / max(self.bands - 1, 1)

    def to_json(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "spectra"}
        out["custom_spectra"] = self.spectra is not None
        return out


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def default_spectra(wavelengths: np.ndarray, n_classes: int, seed: int = 0) -> np.ndarray:
    """Smooth reflectance curves: dark belt, healthy leaf, brown lesion, then random smooth."""
    lam = np.asarray(wavelengths, dtype=np.float64)
    curves = [
        0.06 + 0.02 * (lam - 400.0) / 600.0,
        0.04 + 0.07 * np.exp(-0.5 * ((lam - 550.0) / 30.0) ** 2) + 0.42 * _sigmoid((lam - 715.0) / 15.0),
        0.05 + 0.22 * _sigmoid((lam - 600.0) / 45.0) - 0.08 * _sigmoid((lam - 800.0) / 40.0),
    ]
    rng = np.random.default_rng([seed, 0x5EC])
    while len(curves) < n_classes:
        c = 0.05 + np.zeros_like(lam)
        for _ in range(3):
            mu, sd, amp = rng.uniform(400, 1000), rng.uniform(30, 150), rng.uniform(0.05, 0.4)
            c = c + amp * np.exp(-0.5 * ((lam - mu) / sd) ** 2)
        curves.append(c)
    return np.stack(curves[:n_classes])


def _paint_ellipses(shape, rng, count, rmin, rmax) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    inside = np.zeros(shape, dtype=bool)
    for _ in range(count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ra, rb = rng.uniform(rmin, rmax, size=2)
        th = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        inside |= (u / ra) ** 2 + (v / rb) ** 2 <= 1.0
    return inside


def synth_mask(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    side = min(h, w)
    rmin, rmax = spec.radius if spec.radius is not None else (0.18 * side, 0.32 * side)
    labels = np.zeros((h, w), dtype=np.uint8)
    for _ in range(100):
        tissue = _paint_ellipses((h, w), rng, spec.blobs, rmin, rmax)
        if tissue.any() and not tissue.all():
            break
    labels[tissue] = TISSUE
    if spec.n_classes > 2:
        lmin, lmax = spec.lesion_radius if spec.lesion_radius is not None else (0.02 * side, 0.05 * side)
        n_tissue = int(tissue.sum())
        for cls in range(2, spec.n_classes):
            spots = np.zeros((h, w), dtype=bool)
            for _ in range(spec.lesion_blobs):
                ys, xs = np.nonzero(tissue & (labels == TISSUE))
                if len(ys) == 0:
                    break
                j = rng.integers(len(ys))
                r = rng.uniform(lmin, lmax)
                yy, xx = np.ogrid[0:h, 0:w]
                disc = (yy - ys[j]) ** 2 + (xx - xs[j]) ** 2 <= r * r
                cand = spots | (disc & tissue & (labels == TISSUE))
                if cand.sum() >= spec.lesion_max_fraction * n_tissue:
                    break
                spots = cand
            labels[spots] = cls
    return labels


def generate_synthetic(spec: SynthSpec) -> list[tuple[HsiCube, GroundTruthMask]]:
    """Deterministic labelled cubes: class spectrum x per-cube gain + Gaussian noise."""
    spec.validate()
    step = spec.step
    wavelengths = spec.wavelength_start + step * np.arange(spec.bands)
    spectra = (np.asarray(spec.spectra, dtype=np.float64) if spec.spectra is not None
               else default_spectra(wavelengths, spec.n_classes, spec.seed))
    out = []
    for i in range(spec.n_cubes):
        rng = np.random.default_rng([spec.seed, i])
        labels = synth_mask(spec, rng)
        gain = rng.uniform(*spec.gain)
        data = spectra[labels] * gain  # (h, w, bands)
        if spec.noise_std > 0:
            data = data + rng.normal(0.0, spec.noise_std, size=data.shape)
        cube = HsiCube(np.ascontiguousarray(data.transpose(2, 0, 1), dtype=np.float32),
                       spec.wavelength_start, step)
        out.append((cube, GroundTruthMask(labels)))
    return out


def write_dataset(spec: SynthSpec, out_dir) -> Path:
    """Write cube/mask pairs plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    items = []
    for i, (cube, mask) in enumerate(generate_synthetic(spec)):
        cname, mname = f"cube_{i:04d}.hsic", f"cube_{i:04d}.hsim"
        save_cube(cube, out_dir / cname)
        save_mask(mask, out_dir / mname)
        items.append({"cube": cname, "mask": mname})
    manifest = {"format": "dgc-dataset", "version": 1, "seed": spec.seed,
                "spec": spec.to_json(), "items": items}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> tuple[list[Path], list[Path | None]]:
    """Cube and mask paths from a dataset directory or manifest file."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = json.loads(path.read_text())
    root = path.parent
    cubes = [root / it["cube"] for it in doc["items"]]
    masks = [root / it["mask"] if it.get("mask") else None for it in doc["items"]]
    return cubes, masks


# ----------------------------------------------------------------- patch pairs

@dataclass
class PatchPair:
    grid1: np.ndarray  # (P, P, C)
    grid2: np.ndarray
    origin1: tuple[int, int]
    origin2: tuple[int, int]
    overlap1: np.ndarray  # flat pixel indices into grid1
    overlap2: np.ndarray

    @property
    def size(self) -> int:
        return self.grid1.shape[0]

    @property
    def overlap_fraction(self) -> float:
        return len(self.overlap1) / self.size ** 2


def overlap_indices(origin1, origin2, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat row-major indices of the shared source pixels in each window."""
    (r1, c1), (r2, c2) = origin1, origin2
    top, bottom = max(r1, r2), min(r1, r2) + size
    left, right = max(c1, c2), min(c1, c2) + size
    if bottom <= top or right <= left:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    ys, xs = np.mgrid[top:bottom, left:right]
    ys, xs = ys.ravel(), xs.ravel()
    return (ys - r1) * size + (xs - c1), (ys - r2) * size + (xs - c2)


def _overlap_area_bounds(size: int, overlap_range) -> tuple[int, int]:
    fmin, fmax = overlap_range
    if not 0 < fmin <= fmax < 1:
        raise ConfigError(f"overlap range must satisfy 0 < fmin <= fmax < 1, got {overlap_range}")
    return math.ceil(fmin * size * size - 1e-9), math.floor(fmax * size * size + 1e-9)


def sample_patch_pair(cube: HsiCube, patch_size: int, overlap_range=(0.25, 0.75),
                      rng: np.random.Generator | None = None, origins=None) -> PatchPair:
    """Two partially overlapping P x P crops of one cube.

    ``origins`` forces both window offsets (test hook) and bypasses the overlap range.
    """
    p = patch_size
    if p > min(cube.height, cube.width):
        raise ShapeError(f"patch size {p} exceeds cube {cube.height}x{cube.width}")
    if origins is None:
        rng = rng if rng is not None else np.random.default_rng()
        origin1, origin2 = _draw_origins(cube.height, cube.width, p, overlap_range, rng)
    else:
        origin1, origin2 = (tuple(int(v) for v in o) for o in origins)
        for r, c in (origin1, origin2):
            if not (0 <= r <= cube.height - p and 0 <= c <= cube.width - p):
                raise ShapeError(f"origin {(r, c)} out of bounds")
    ov1, ov2 = overlap_indices(origin1, origin2, p)
    return PatchPair(cube.crop(*origin1, p), cube.crop(*origin2, p), origin1, origin2, ov1, ov2)


def _draw_origins(h, w, p, overlap_range, rng, max_tries=1000):
    amin, amax = _overlap_area_bounds(p, overlap_range)
    d = np.arange(-(p - 1), p)
    dy, dx = np.meshgrid(d, d, indexing="ij")
    area = (p - np.abs(dy)) * (p - np.abs(dx))
    ok_area = (area >= amin) & (area <= amax)
    if not ok_area.any() or not (ok_area & (np.abs(dy) <= h - p) & (np.abs(dx) <= w - p)).any():
        raise ConfigError(f"no displacement gives overlap in {overlap_range} for P={p} on {h}x{w}")
    for _ in range(max_tries):
        r1, c1 = int(rng.integers(0, h - p + 1)), int(rng.integers(0, w - p + 1))
        ok = ok_area & (r1 + dy >= 0) & (r1 + dy <= h - p) & (c1 + dx >= 0) & (c1 + dx <= w - p)
        idx = np.flatnonzero(ok)
        if len(idx):
            j = idx[rng.integers(len(idx))]
            return (r1, c1), (r1 + int(dy.flat[j]), c1 + int(dx.flat[j]))
    raise ConfigError(f"could not place an overlapping window pair after {max_tries} draws")


# -------------------------------------------------------------- cube scheduling

@dataclass
class SchedulerState:
    epoch: int = 0
    pos: int = -1  # index into the epoch's visit order of the resident cube
    remaining: int = 0

    def to_json(self) -> dict:
        return {"epoch": self.epoch, "pos": self.pos, "remaining": self.remaining}


@dataclass
class _Slot:
    epoch: int
    pos: int
    index: int
    cube: HsiCube


class CubeScheduler:
    """Serves cubes in a seeded per-epoch order, each for ``reuse`` draws.

    ``mode="async"`` prefetches the next cube on a loader thread into a second
    slot; the draw sequence is identical to ``mode="sync"``, only load timing
    differs. At most one (sync) or two (async) cube buffers are resident.
    """

    def __init__(self, paths: Sequence, reuse: int = 32, seed: int = 0, mode: str = "sync",
                 loader: Callable = load_cube, state: SchedulerState | None = None):
        if not paths:
            raise DatasetError("dataset is empty")
        if reuse < 1:
            raise ConfigError("reuse budget must be >= 1")
        if mode not in ("sync", "async"):
            raise ConfigError(f"unknown scheduler mode {mode!r}")
        self.paths = list(paths)
        self.reuse = reuse
        self.seed = seed
        self.mode = mode
        self.loader = loader
        self.state = state if state is not None else SchedulerState()
        self._current: _Slot | None = None
        self._pending = None
        self._pool = ThreadPoolExecutor(max_workers=1) if mode == "async" else None
        self._lock = threading.Lock()
        self.resident = 0
        self.peak_resident = 0
        self.failures = 0

    def order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, 0x0D, epoch]).permutation(len(self.paths))

    def _acquire(self):
        with self._lock:
            self.resident += 1
            self.peak_resident = max(self.peak_resident, self.resident)

    def _release(self):
        with self._lock:
            self.resident -= 1

    def _load_from(self, epoch: int, pos: int) -> _Slot:
        """Load the first readable cube at or after (epoch, pos), skipping failures."""
        n = len(self.paths)
        for _ in range(n):
            if pos >= n:
                epoch, pos = epoch + 1, 0
            index = int(self.order(epoch)[pos])
            self._acquire()
            try:
                cube = self.loader(self.paths[index])
            except (OSError, FormatError, ValueError) as exc:
                self._release()
                self.failures += 1
                log.warning("skipping unreadable cube %s: %s", self.paths[index], exc)
                pos += 1
                continue
            return _Slot(epoch, pos, index, cube)
        raise DatasetError("no readable cube in the dataset")

    def _drop_current(self):
        if self._current is not None:
            self._current = None
            self._release()

    def _prefetch(self):
        if self._pool is not None:
            nxt = (self._current.epoch, self._current.pos + 1)
            self._pending = self._pool.submit(self._load_from, *nxt)

    def _switch(self):
        st = self.state
        if self._pending is not None:
            slot = self._pending.result()
            self._pending = None
        else:
            self._drop_current()
            slot = self._load_from(st.epoch, st.pos + 1)
        self._drop_current()
        self._current = slot
        st.epoch, st.pos, st.remaining = slot.epoch, slot.pos, self.reuse
        self._prefetch()

    def next(self) -> tuple[HsiCube, int]:
        """Resident cube for one draw and the budget left after it."""
        st = self.state
        if self._current is None and st.pos >= 0 and st.remaining > 0:
            # resuming mid-cube
            self._current = self._load_from(st.epoch, st.pos)
            if (self._current.epoch, self._current.pos) != (st.epoch, st.pos):
                st.epoch, st.pos, st.remaining = self._current.epoch, self._current.pos, self.reuse
            self._prefetch()
        elif self._current is None or st.remaining <= 0:
            self._switch()
        st.remaining -= 1
        return self._current.cube, st.remaining

    @property
    def current_index(self) -> int | None:
        return None if self._current is None else self._current.index

    def close(self):
        if self._pending is not None:
            try:
                slot = self._pending.result()
                del slot
                self._release()
            except DGCError:
                pass
            self._pending = None
        self._drop_current()
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
