"""Two-phase training: a gradient step on the encoder (and centroids), then EMA on centroids.

The patch sequence is a pure function of the seed, the step index and the
cube visit order, so sync and async runs draw identical batches and a resumed
run replays an uninterrupted one.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import clustering as cl
from . import losses as ls
from .data_io import (
    CubeScheduler,
    PatchPair,
    SchedulerState,
    load_cube,
    read_manifest,
    sample_patch_pair,
    save_mask,
    GroundTruthMask,
)
from .encoder import EncoderConfig, EncoderParams, encode_backward, encode_forward, init_params
from .errors import CheckpointError, ConfigError, ConfigMismatchError, DatasetError, NumericalError, ShapeError

log = logging.getLogger(__name__)

# fields that change how long or how a run is driven, not what it computes
RUN_ONLY_FIELDS = ("steps", "mode", "checkpoint_interval", "log_interval", "snapshot_interval", "max_aborted")


@dataclass
class TrainConfig:
    k: int = 2
    patch_size: int = 64
    batch: int = 4
    overlap_min: float = 0.25
    overlap_max: float = 0.75
    reuse: int = 32
    steps: int = 1000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_unif: float = 1.0
    lambda_orth: float = 0.1
    lambda_bal: float = 1.0
    lambda_cons: float = 1.0
    ms_iterations: int = 5
    ms_bandwidth: float = 0.5
    mean_shift_train: bool = True
    ema_decay: float = 0.99
    temperature: float = 0.1
    dead_threshold: float | None = None
    reactivation_eps: float = 0.05
    centroid_grad: bool = True
    mode: str = "sync"
    seed: int = 0
    bands: int = 301
    embed_dim: int = 32
    kernel_size: int = 9
    strides: tuple[int, ...] = (4, 4, 2)
    dtype: str = "float32"
    active_min_fraction: float = 0.01
    checkpoint_interval: int = 0
    log_interval: int = 1
    snapshot_interval: int = 0
    max_aborted: int = 10

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.validate()

    def validate(self):
        for name in ("k", "patch_size", "batch", "reuse", "embed_dim", "kernel_size", "log_interval",
                     "max_aborted"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.k < 2:
            raise ConfigError("k must be >= 2")
        for name in ("steps", "checkpoint_interval", "snapshot_interval", "ms_iterations"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.mode not in ("sync", "async"):
            raise ConfigError(f"mode must be sync or async, got {self.mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if not 0 < self.overlap_min <= self.overlap_max < 1:
            raise ConfigError("overlap range must satisfy 0 < min <= max < 1")
        if self.lr < 0 or self.temperature <= 0 or self.ms_bandwidth <= 0:
            raise ConfigError("lr must be >= 0; temperature and bandwidth > 0")
        if not 0 <= self.ema_decay <= 1:
            raise ConfigError("ema_decay must lie in [0, 1]")
        self.weights  # validates lambdas

    @property
    def weights(self) -> ls.LossWeights:
        return ls.LossWeights(self.lambda_unif, self.lambda_orth, self.lambda_bal, self.lambda_cons)

    @property
    def mean_shift(self) -> cl.MeanShiftConfig:
        return cl.MeanShiftConfig(self.ms_iterations, self.ms_bandwidth)

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.bands, self.embed_dim, self.kernel_size, self.strides)

    @property
    def steps_per_cube(self) -> int:
        return max(1, self.reuse // self.batch)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def model_hash(self) -> bytes:
        d = {k: v for k, v in self.to_json().items() if k not in RUN_ONLY_FIELDS}
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).digest()


class Adam:
    """Adaptive moment estimation, no weight decay."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def copy(self) -> "Adam":
        out = Adam(self.lr, self.beta1, self.beta2, self.eps)
        out.t = self.t
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        return out

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Returns updated copies; ``params`` is left untouched."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        out = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                out[name] = p
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            step = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            out[name] = (p - step).astype(p.dtype, copy=False)
        return out


@dataclass
class StepRecord:
    step: int
    losses: ls.LossBreakdown
    usage: np.ndarray
    active_clusters: int
    wall_ms: float
    aborted: bool = False


@dataclass
class TrainState:
    config: TrainConfig
    params: EncoderParams
    bank: cl.CentroidBank
    opt: Adam
    step: int = 0
    sched: SchedulerState = field(default_factory=SchedulerState)
    history: list[StepRecord] = field(default_factory=list)


def init_state(config: TrainConfig) -> TrainState:
    dtype = np.dtype(config.dtype)
    params = init_params(config.bands, config.seed, config.encoder, dtype=dtype)
    bank = cl.init_bank(config.k, config.embed_dim, config.seed, dtype=dtype,
                        ema_decay=config.ema_decay, temperature=config.temperature,
                        dead_threshold=config.dead_threshold, reactivation_eps=config.reactivation_eps)
    opt = Adam(config.lr, config.beta1, config.beta2, config.adam_eps)
    return TrainState(config, params, bank, opt)


# ------------------------------------------------------------ forward/backward

@dataclass
class Batch:
    x: np.ndarray  # (2B, P, P, C): first crops then second crops
    overlap1: np.ndarray  # global row indices into the pooled (2B*N) pixel set
    overlap2: np.ndarray

    @classmethod
    def from_pairs(cls, pairs: list[PatchPair]) -> "Batch":
        b = len(pairs)
        n = pairs[0].size ** 2
        x = np.stack([p.grid1 for p in pairs] + [p.grid2 for p in pairs])
        o1 = np.concatenate([i * n + p.overlap1 for i, p in enumerate(pairs)])
        o2 = np.concatenate([(b + i) * n + p.overlap2 for i, p in enumerate(pairs)])
        return cls(x, o1, o2)


@dataclass
class Forward:
    breakdown: ls.LossBreakdown
    z: np.ndarray  # pooled post-refinement embeddings (2B*N, D)
    p: np.ndarray  # pooled soft assignment (2B*N, K)
    grads: dict[str, np.ndarray] | None


def forward_backward(params: EncoderParams, centers: np.ndarray, batch: Batch, config: TrainConfig,
                     need_grad: bool = True, coeffs: dict[str, float] | None = None) -> Forward:
    """Loss breakdown and gradients for encoder tensors plus ``"centroids"``.

    Gradients are of the weighted total unless ``coeffs`` maps term names
    (comp1, comp2, unif, orth, bal, cons) to the multipliers to differentiate.
    """
    ms = config.mean_shift
    emb, enc_cache = encode_forward(params, batch.x)
    ms_cache = None
    if config.mean_shift_train and ms.iterations > 0:
        emb_r, ms_cache = cl.mean_shift_forward(emb, ms)
    else:
        emb_r = emb
    z = emb_r.reshape(-1, emb_r.shape[-1])
    n_half = z.shape[0] // 2
    cos, cos_cache = cl.cosine_forward(z, centers)
    tau = config.temperature
    p = cl.softmax(cos / tau)

    s1, s2 = slice(0, n_half), slice(n_half, None)
    comp1 = ls.compactness_from_cos(p[s1], cos[s1])
    comp2 = ls.compactness_from_cos(p[s2], cos[s2])
    labels = ls.uniform_pseudo_labels(p, config.k)
    unif = ls.uniform_loss(p, labels)
    orth = ls.orthogonality(centers)
    bal = ls.balance(p)
    q1, q2 = p[batch.overlap1], p[batch.overlap2]
    cons = ls.consistency(q1, q2)
    w = config.weights
    bd = ls.total_loss(comp1, comp2, unif, orth, bal, cons, w)
    if not need_grad:
        return Forward(bd, z, p, None)

    a = {"comp1": 1.0, "comp2": 1.0, "unif": w.unif, "orth": w.orth, "bal": w.bal, "cons": w.cons}
    if coeffs is not None:
        a = {name: coeffs.get(name, 0.0) for name in a}
    dp = np.zeros_like(p)
    dcos = np.zeros_like(cos)
    for sl, name in ((s1, "comp1"), (s2, "comp2")):
        gp, gc = ls.compactness_grad(p[sl], cos[sl])
        dp[sl] += a[name] * gp
        dcos[sl] += a[name] * gc
    dp += a["unif"] * ls.uniform_loss_grad(p, labels)
    dp += a["bal"] * ls.balance_grad(p)
    g1, g2 = ls.consistency_grad(q1, q2)
    np.add.at(dp, batch.overlap1, a["cons"] * g1)
    np.add.at(dp, batch.overlap2, a["cons"] * g2)
    dcos += cl.softmax_backward(p, dp) / tau
    dz, dc = cl.cosine_backward(cos_cache, dcos)
    dc = dc + a["orth"] * ls.orthogonality_grad(centers)

    demb = dz.reshape(emb_r.shape)
    if ms_cache is not None:
        demb = cl.mean_shift_backward(ms_cache, demb)
    grads = encode_backward(params, None, demb, cache=enc_cache)
    grads["centroids"] = dc
    return Forward(bd, z, p, grads)


def _all_finite(bd: ls.LossBreakdown, grads) -> bool:
    return bd.is_finite() and all(np.all(np.isfinite(g)) for g in grads.values())


def step_rng(seed: int, tag: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, tag, step])


def train_step(state: TrainState, pairs: list[PatchPair]) -> tuple[TrainState, StepRecord]:
    """One gradient phase followed by one centroid phase; never mutates ``state``."""
    cfg = state.config
    t0 = time.perf_counter()
    if len(pairs) == 0:
        raise ShapeError("empty batch")
    batch = Batch.from_pairs(pairs)
    fwd = forward_backward(state.params, state.bank.centers, batch, cfg)
    step_index = state.step + 1

    labels = cl.hard_assign(fwd.z, state.bank)
    usage = np.bincount(labels, minlength=cfg.k) / labels.size
    active = int(np.sum(usage >= cfg.active_min_fraction))

    if not _all_finite(fwd.breakdown, fwd.grads):
        log.warning("step %d: non-finite loss or gradient, update rolled back", step_index)
        new = dataclasses.replace(state, step=step_index, history=state.history)
        rec = StepRecord(step_index, fwd.breakdown, usage, active,
                         (time.perf_counter() - t0) * 1e3, aborted=True)
        return new, rec

    # phase I: gradient step
    opt = state.opt.copy()
    tensors = dict(state.params.tensors)
    grads = {k: v for k, v in fwd.grads.items() if k != "centroids"}
    if cfg.centroid_grad:
        tensors["centroids"] = state.bank.centers
        grads["centroids"] = fwd.grads["centroids"]
    updated = opt.step(tensors, grads)
    centers = updated.pop("centroids", state.bank.centers)
    params = EncoderParams(state.params.config, updated)

    # phase II: EMA, reactivation, normalisation
    bank = state.bank.with_centers(centers)
    bank = cl.ema_update(bank, fwd.z, fwd.p)
    masses = cl.cluster_masses(fwd.p)
    bank = cl.reactivate_dead(bank, masses, step_rng(cfg.seed, 0x2EAC, step_index))
    bank = cl.normalize_bank(bank)
    bank = bank.with_centers(bank.centers.astype(state.bank.centers.dtype, copy=False))

    rec = StepRecord(step_index, fwd.breakdown, usage, active, (time.perf_counter() - t0) * 1e3)
    new = TrainState(cfg, params, bank, opt, step_index, state.sched, state.history)
    return new, rec


def sample_batch(cube, config: TrainConfig, step_index: int) -> list[PatchPair]:
    rng = step_rng(config.seed, 0x9A7C, step_index)
    return [sample_patch_pair(cube, config.patch_size, (config.overlap_min, config.overlap_max), rng)
            for _ in range(config.batch)]


# ------------------------------------------------------------------ metric log

def metric_header(k: int) -> list[str]:
    return (["step", "comp1", "comp2", "unif", "orth", "bal", "cons", "total", "active_clusters"]
            + [f"usage_{i}" for i in range(k)] + ["wall_ms"])


def metric_row(rec: StepRecord) -> list[str]:
    bd = rec.losses
    vals = [bd.comp1, bd.comp2, bd.unif, bd.orth, bd.bal, bd.cons, bd.total]
    return ([str(rec.step)] + [repr(float(v)) for v in vals] + [str(rec.active_clusters)]
            + [repr(float(u)) for u in rec.usage] + [f"{rec.wall_ms:.3f}"])


def read_metrics(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------- training loop

def train(config: TrainConfig, dataset, out_dir=None, resume: TrainState | None = None,
          loader=load_cube) -> tuple[TrainState, list[StepRecord]]:
    """Run until ``config.steps`` steps are complete.

    ``dataset`` is a dataset directory, manifest path, or list of cube paths.
    With ``out_dir`` set, writes ``metrics.csv``, periodic checkpoints, optional
    snapshot maps and ``final.dgck``.
    """
    paths = _dataset_paths(dataset)
    if resume is not None:
        if resume.config.model_hash() != config.model_hash():
            raise ConfigMismatchError("resume state was trained under a different model config")
        state = dataclasses.replace(resume, config=config, sched=dataclasses.replace(resume.sched),
                                    history=list(resume.history))
    else:
        state = init_state(config)
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "metrics.csv"
        append = resume is not None and csv_path.exists()
        fh = open(csv_path, "a" if append else "w", newline="")
        writer = csv.writer(fh)
        if not append:
            writer.writerow(metric_header(config.k))
    records: list[StepRecord] = []
    aborted_run = 0
    sched = CubeScheduler(paths, config.steps_per_cube, config.seed, config.mode, loader, state.sched)
    try:
        if out is not None and config.snapshot_interval and state.step == 0:
            _write_snapshot(state, paths[0], out)
        while state.step < config.steps:
            cube, _ = sched.next()
            pairs = sample_batch(cube, config, state.step + 1)
            del cube
            state, rec = train_step(state, pairs)
            state.sched = sched.state
            state.history.append(rec)
            records.append(rec)
            aborted_run = aborted_run + 1 if rec.aborted else 0
            if writer is not None and (rec.step % config.log_interval == 0 or rec.aborted):
                writer.writerow(metric_row(rec))
            if aborted_run >= config.max_aborted:
                raise NumericalError(f"{aborted_run} consecutive steps produced non-finite values")
            if out is not None:
                if config.checkpoint_interval and state.step % config.checkpoint_interval == 0:
                    save_checkpoint(state, out / "checkpoints" / f"step_{state.step:07d}.dgck")
                if config.snapshot_interval and state.step % config.snapshot_interval == 0:
                    _write_snapshot(state, paths[0], out)
    finally:
        sched.close()
        if fh is not None:
            fh.close()
    if out is not None:
        save_checkpoint(state, out / "final.dgck")
    return state, records


def _dataset_paths(dataset) -> list[Path]:
    if isinstance(dataset, (list, tuple)):
        paths = [Path(p) for p in dataset]
    else:
        p = Path(dataset)
        if p.is_dir() or p.suffix == ".json":
            paths = read_manifest(p)[0]
        else:
            paths = [p]
    if not paths:
        raise DatasetError("dataset is empty")
    return paths


def _write_snapshot(state: TrainState, cube_path, out: Path):
    from .eval_diag import segment_cube

    cube = load_cube(cube_path)
    seg = segment_cube(state.params, state.bank, state.config.mean_shift, cube, state.config.patch_size)
    del cube
    snap = out / "snapshots"
    snap.mkdir(parents=True, exist_ok=True)
    save_mask(GroundTruthMask(seg.astype(np.uint8)), snap / f"step_{state.step:07d}.hsim")


# ----------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"DGCK"
CKPT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


def _put_bytes(buf: io.BytesIO, b: bytes):
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _put_array(buf: io.BytesIO, a: np.ndarray):
    a = np.asarray(a)
    code = _CODES[a.dtype.newbyteorder("=")]
    buf.write(struct.pack("<BB", code, a.ndim))
    buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
    buf.write(np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def bytes_(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)

    def array(self) -> np.ndarray:
        code, ndim = self.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown array dtype code {code}")
        shape = self.unpack(f"<{ndim}I")
        dt = _DTYPES[code]
        count = int(np.prod(shape)) if ndim else 1
        raw = self.take(count * dt.itemsize)
        return np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def _history_matrix(history: list[StepRecord], k: int) -> np.ndarray:
    # wall time stays out so equal runs give byte-identical checkpoints
    rows = []
    for r in history:
        bd = r.losses
        rows.append([r.step, bd.comp1, bd.comp2, bd.unif, bd.orth, bd.bal, bd.cons, bd.total,
                     r.active_clusters, *r.usage, float(r.aborted)])
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), 10 + k)


def _history_from_matrix(mat: np.ndarray, k: int) -> list[StepRecord]:
    out = []
    for row in mat:
        bd = ls.LossBreakdown(*[float(v) for v in row[1:8]])
        out.append(StepRecord(int(row[0]), bd, row[9:9 + k].copy(), int(row[8]), 0.0, bool(row[9 + k])))
    return out


def checkpoint_bytes(state: TrainState) -> bytes:
    cfg = state.config
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    buf.write(cfg.model_hash())
    _put_bytes(buf, json.dumps(cfg.to_json(), sort_keys=True).encode())
    buf.write(struct.pack("<Q", state.step))
    rng_state = {"seed": cfg.seed, "scheduler": state.sched.to_json()}
    _put_bytes(buf, json.dumps(rng_state, sort_keys=True).encode())
    names = list(state.params.tensors)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        _put_bytes(buf, name.encode())
        _put_array(buf, state.params.tensors[name])
    bank = state.bank
    hyper = {"ema_decay": bank.ema_decay, "temperature": bank.temperature,
             "dead_threshold": bank.dead_threshold, "reactivation_eps": bank.reactivation_eps}
    _put_bytes(buf, json.dumps(hyper, sort_keys=True).encode())
    _put_array(buf, bank.centers)
    opt = state.opt
    _put_bytes(buf, json.dumps({"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps},
                               sort_keys=True).encode())
    buf.write(struct.pack("<QI", opt.t, len(opt.m)))
    for name in opt.m:
        _put_bytes(buf, name.encode())
        _put_array(buf, opt.m[name])
        _put_array(buf, opt.v[name])
    _put_array(buf, _history_matrix(state.history, cfg.k))
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save_checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = checkpoint_bytes(state)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_checkpoint(path, expected: TrainConfig | None = None) -> TrainState:
    """Restore a TrainState; ``expected`` rejects checkpoints of a different model config."""
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a dgc checkpoint")
    (version,) = struct.unpack("<I", data[4:8])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < 8 + 32 + 32:
        raise CheckpointError(f"{path}: checkpoint truncated")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, checkpoint is corrupt")
    r = _Reader(body)
    r.take(8)
    stored_hash = r.take(32)
    cfg = TrainConfig.from_json(json.loads(r.bytes_()))
    if cfg.model_hash() != stored_hash:
        raise ConfigMismatchError(f"{path}: stored config hash does not match its config")
    if expected is not None and expected.model_hash() != stored_hash:
        raise ConfigMismatchError(f"{path}: checkpoint config differs from the requested config")
    (step,) = r.unpack("<Q")
    rng_state = json.loads(r.bytes_())
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        name = r.bytes_().decode()
        tensors[name] = r.array()
    hyper = json.loads(r.bytes_())
    bank = cl.CentroidBank(r.array(), **hyper)
    oh = json.loads(r.bytes_())
    opt = Adam(oh["lr"], oh["beta1"], oh["beta2"], oh["eps"])
    opt.t, n_m = r.unpack("<QI")
    for _ in range(n_m):
        name = r.bytes_().decode()
        opt.m[name] = r.array()
        opt.v[name] = r.array()
    history = _history_from_matrix(r.array(), cfg.k)
    if r.pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes in checkpoint")
    sched = SchedulerState(**rng_state["scheduler"])
    return TrainState(cfg, EncoderParams(cfg.encoder, tensors), bank, opt, step, sched, history)
