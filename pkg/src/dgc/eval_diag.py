"""Pseudo-segmentation of whole cubes, IoU scoring, cluster merging, rendering and
training-dynamics diagnostics.
"""

from __future__ import annotations

import colorsys
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clustering import CentroidBank, MeanShiftConfig, hard_assign, mean_shift_refine
from .data_io import GroundTruthMask, HsiCube
from .encoder import EncoderParams, encode
from .errors import ConfigError, ShapeError

PHASES = ("inactive", "ignite", "afterglow", "smoldering", "aftermath")


# ---------------------------------------------------------------- segmentation

def tile_origins(length: int, tile: int) -> list[int]:
    """Window starts covering [0, length); the last window is shifted inward."""
    starts = list(range(0, length - tile + 1, tile))
    if starts[-1] + tile < length:
        starts.append(length - tile)
    return starts


def _nearest_tile(length: int, starts: list[int], tile: int) -> np.ndarray:
    centers = np.asarray(starts, dtype=np.float64) + (tile - 1) / 2.0
    coords = np.arange(length, dtype=np.float64)
    return np.argmin(np.abs(coords[:, None] - centers[None, :]), axis=1)


def segment_cube(params: EncoderParams, bank: CentroidBank, cfg: MeanShiftConfig, cube: HsiCube,
                 patch_size: int = 64, tiles_per_batch: int = 8) -> np.ndarray:
    """Cluster id per pixel, (H, W); overlapping tiles resolved by nearest tile centre."""
    if cube.bands != params.config.bands:
        raise ShapeError(f"cube has {cube.bands} bands, encoder expects {params.config.bands}")
    th, tw = min(patch_size, cube.height), min(patch_size, cube.width)
    rows, cols = tile_origins(cube.height, th), tile_origins(cube.width, tw)
    row_owner = _nearest_tile(cube.height, rows, th)
    col_owner = _nearest_tile(cube.width, cols, tw)
    out = np.empty((cube.height, cube.width), dtype=np.int64)
    jobs = [(i, j) for i in range(len(rows)) for j in range(len(cols))]
    for s in range(0, len(jobs), tiles_per_batch):
        chunk = jobs[s:s + tiles_per_batch]
        x = np.stack([cube.data[:, rows[i]:rows[i] + th, cols[j]:cols[j] + tw].transpose(1, 2, 0)
                      for i, j in chunk])
        emb = encode(params, x)
        if cfg.iterations > 0:
            emb = mean_shift_refine(emb, cfg)
        labels = hard_assign(emb, bank)
        for (i, j), lab in zip(chunk, labels):
            ys = np.flatnonzero(row_owner[rows[i]:rows[i] + th] == i)
            xs = np.flatnonzero(col_owner[cols[j]:cols[j] + tw] == j)
            out[np.ix_(rows[i] + ys, cols[j] + xs)] = lab[np.ix_(ys, xs)]
    return out


# -------------------------------------------------------------------- merging

@dataclass
class MergeMap:
    mapping: np.ndarray  # cluster id -> semantic class id

    @classmethod
    def identity(cls, k: int) -> "MergeMap":
        return cls(np.arange(k))

    @classmethod
    def from_dict(cls, d: dict[int, int], k: int | None = None) -> "MergeMap":
        k = max(d) + 1 if k is None else k
        missing = [c for c in range(k) if c not in d]
        if missing:
            raise ConfigError(f"merge spec does not cover clusters {missing}")
        return cls(np.array([int(d[c]) for c in range(k)]))

    def as_dict(self) -> dict[int, int]:
        return {i: int(c) for i, c in enumerate(self.mapping)}


def read_merge_spec(path) -> MergeMap:
    """``cluster = class`` lines; ``#`` starts a comment."""
    d = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        m = re.fullmatch(r"(\d+)\s*[=:]\s*(\d+)", line)
        if not m:
            raise ConfigError(f"{path}:{n}: expected 'cluster = class', got {line!r}")
        d[int(m.group(1))] = int(m.group(2))
    if not d:
        raise ConfigError(f"{path}: empty merge spec")
    return MergeMap.from_dict(d)


def write_merge_spec(merge: MergeMap, path) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in merge.as_dict().items()))


def apply_merge(labels: np.ndarray, merge: MergeMap) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= len(merge.mapping)):
        raise ConfigError(f"label {labels.max()} not covered by a merge map of {len(merge.mapping)} clusters")
    return merge.mapping[labels]


def cooccurrence(labels: np.ndarray, gt: np.ndarray, k: int, n_classes: int) -> np.ndarray:
    """(k, n_classes) pixel counts."""
    labels, gt = np.asarray(labels).ravel(), np.asarray(gt).ravel()
    if labels.shape != gt.shape:
        raise ShapeError("map and mask sizes differ")
    return np.bincount(labels * n_classes + gt, minlength=k * n_classes).reshape(k, n_classes)


def best_match_from_counts(table: np.ndarray) -> MergeMap:
    return MergeMap(np.argmax(table, axis=1))


def best_match_merge(labels, gt, n_classes: int, k: int | None = None) -> MergeMap:
    """Map each cluster to the class it shares most pixels with.

    ``labels``/``gt`` may be single maps or equal-length lists (one global merge).
    """
    maps = labels if isinstance(labels, (list, tuple)) else [labels]
    gts = gt if isinstance(gt, (list, tuple)) else [gt]
    gts = [g.labels if isinstance(g, GroundTruthMask) else g for g in gts]
    if not maps or any(np.asarray(m).size == 0 for m in maps):
        raise ShapeError("empty segmentation map")
    if k is None:
        k = int(max(np.max(m) for m in maps)) + 1
    table = sum(cooccurrence(m, g, k, n_classes) for m, g in zip(maps, gts))
    return best_match_from_counts(table)


# ------------------------------------------------------------------------ IoU

@dataclass
class IoUReport:
    per_class: dict[int, float]
    mean: float
    intersection: dict[int, int] = field(default_factory=dict)
    union: dict[int, int] = field(default_factory=dict)


def iou_counts(pred: np.ndarray, gt: np.ndarray, classes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    inter, union, present = [], [], []
    for c in classes:
        p, g = pred == c, gt == c
        inter.append(int(np.sum(p & g)))
        union.append(int(np.sum(p | g)))
        present.append(bool(g.any()))
    return np.array(inter), np.array(union), np.array(present)


def _report(classes, inter, union, present) -> IoUReport:
    per = {int(c): (1.0 if u == 0 else i / u) for c, i, u in zip(classes, inter, union)}
    used = [per[int(c)] for c, pr in zip(classes, present) if pr]
    mean = float(np.mean(used)) if used else 1.0
    return IoUReport(per, mean, {int(c): int(i) for c, i in zip(classes, inter)},
                     {int(c): int(u) for c, u in zip(classes, union)})


def iou(pred, gt, classes=(0, 1)) -> IoUReport:
    """Per-class IoU (1.0 when a class is absent from both); mean over classes present in gt."""
    if isinstance(gt, GroundTruthMask):
        gt = gt.labels
    return _report(classes, *iou_counts(pred, gt, classes))


def aggregate_iou(pairs, classes=(0, 1)) -> IoUReport:
    """IoU from intersections and unions pooled over (pred, gt) pairs."""
    inter = union = present = None
    for pred, gt in pairs:
        if isinstance(gt, GroundTruthMask):
            gt = gt.labels
        i, u, p = iou_counts(pred, gt, classes)
        inter = i if inter is None else inter + i
        union = u if union is None else union + u
        present = p if present is None else present | p
    if inter is None:
        raise ShapeError("no maps to evaluate")
    return _report(classes, inter, union, present)


# ---------------------------------------------------------------- diagnostics

def seg_entropy(labels: np.ndarray) -> float:
    labels = np.asarray(labels).ravel()
    if labels.size == 0:
        raise ShapeError("empty map")
    counts = np.bincount(labels)
    p = counts[counts > 0] / labels.size
    return 0.0 - float(np.sum(p * np.log(p)))  # no -0.0 for a single label


def seg_mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"maps differ in size: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ShapeError("empty map")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    na, nb = ai.max() + 1, bi.max() + 1
    joint = np.bincount(ai * nb + bi, minlength=na * nb).reshape(na, nb) / a.size
    pa, pb = joint.sum(axis=1), joint.sum(axis=0)
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / np.outer(pa, pb)[nz])))
    # rounding can push identical-map MI a hair past H
    return min(max(mi, 0.0), seg_entropy(a), seg_entropy(b))


def active_clusters(labels: np.ndarray, min_fraction: float = 0.01) -> int:
    counts = np.bincount(np.asarray(labels).ravel())
    return int(np.sum(counts / counts.sum() >= min_fraction))


@dataclass
class Snapshot:
    entropy: float
    mi_prev: float | None
    active: int
    step: int = 0


@dataclass
class PhaseThresholds:
    """Heuristic phase boundaries, as fractions of log K (drop: of the running max entropy)."""
    stable: float = 0.5
    noise: float = 0.1
    drop: float = 0.2
    near_max: float = 0.9


def classify_phase(window: list[Snapshot], k: int, th: PhaseThresholds | None = None) -> str:
    """Phase label of the last snapshot in ``window`` (needs at least two)."""
    if len(window) < 2:
        raise ValueError("phase classification needs at least two snapshots")
    th = th or PhaseThresholds()
    log_k = math.log(k)
    last, prev = window[-1], window[-2]
    mi = last.mi_prev if last.mi_prev is not None else 0.0
    stable, noise = th.stable * log_k, th.noise * log_k
    # MI <= H(prev): a near-collapsed predecessor cannot certify stability or noise
    informative_prev = prev.entropy >= stable
    if last.active <= 1:
        return "inactive"
    if informative_prev and mi < noise and last.entropy >= th.near_max * log_k:
        return "aftermath"
    rising = last.entropy >= prev.entropy - 1e-12
    if rising and (mi >= stable or not informative_prev):
        return "ignite"
    peak = max(s.entropy for s in window)
    return "afterglow" if peak - last.entropy < th.drop * peak else "smoldering"


def snapshot_series(maps: list[np.ndarray], steps: list[int] | None = None,
                    min_fraction: float = 0.01) -> list[Snapshot]:
    out = []
    for i, m in enumerate(maps):
        mi = seg_mutual_information(maps[i - 1], m) if i else None
        out.append(Snapshot(seg_entropy(m), mi, active_clusters(m, min_fraction),
                            steps[i] if steps is not None else i))
    return out


def phase_timeline(snaps: list[Snapshot], k: int, th: PhaseThresholds | None = None) -> list[str | None]:
    """Phase per snapshot; the first has no predecessor and gets None."""
    return [None] + [classify_phase(snaps[:i + 1], k, th) for i in range(1, len(snaps))]


def ignite_span(snaps: list[Snapshot], phases: list[str | None]) -> tuple[int, int] | None:
    """(onset, offset) steps of the first ignite run, if any."""
    idx = [i for i, p in enumerate(phases) if p == "ignite"]
    if not idx:
        return None
    end = idx[0]
    while end + 1 < len(phases) and phases[end + 1] == "ignite":
        end += 1
    return snaps[idx[0]].step, snaps[end].step


# ------------------------------------------------------------------ rendering

_PALETTE16 = np.array([
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (0, 0, 128),
], dtype=np.uint8)


def palette(k: int) -> np.ndarray:
    """Fixed (k, 3) colour table; entries past 16 step hue by the golden ratio."""
    cols = list(_PALETTE16[:k])
    for i in range(16, k):
        r, g, b = colorsys.hsv_to_rgb((i * 0.618033988749895) % 1.0, 0.65, 0.95)
        cols.append((round(r * 255), round(g * 255), round(b * 255)))
    return np.array(cols, dtype=np.uint8).reshape(k, 3)


def pseudo_rgb(cube: HsiCube, targets=(650.0, 550.0, 450.0)) -> np.ndarray:
    """(H, W, 3) uint8 from the bands nearest the targets, min-max scaled per band; flat bands -> 128."""
    wl = cube.wavelengths
    out = np.empty((cube.height, cube.width, 3), dtype=np.uint8)
    for ch, t in enumerate(targets):
        band = cube.data[int(np.argmin(np.abs(wl - t)))].astype(np.float64)
        lo, hi = band.min(), band.max()
        if hi > lo:
            out[..., ch] = np.round(255.0 * (band - lo) / (hi - lo)).astype(np.uint8)
        else:
            out[..., ch] = 128
    return out


def cluster_colors(labels: np.ndarray, k: int | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    k = int(labels.max()) + 1 if k is None else k
    return palette(k)[labels]


def ppm_bytes(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def write_ppm(rgb: np.ndarray, path) -> None:
    Path(path).write_bytes(ppm_bytes(rgb))


def render(obj, style: str, path, k: int | None = None) -> None:
    """Write ``obj`` (HsiCube or label map) as a binary PPM in ``pseudo-rgb`` or ``cluster-colors`` style."""
    if style == "pseudo-rgb":
        if not isinstance(obj, HsiCube):
            raise ConfigError("pseudo-rgb rendering needs a cube")
        rgb = pseudo_rgb(obj)
    elif style == "cluster-colors":
        rgb = cluster_colors(obj, k)
    else:
        raise ConfigError(f"unknown render style {style!r}")
    write_ppm(rgb, path)
