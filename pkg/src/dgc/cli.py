"""``dgc`` command-line entry point.

Every option lives in one schema (``SCHEMA``). The schema drives config-file
validation, ``--key value`` overrides and ``--help`` text, so the three never
drift apart.

Config files are flat ``key = value`` text. Keys above the first section
header apply to every subcommand that knows them; ``[train]``, ``[synth]`` and
so on hold subcommand-specific keys. Command-line overrides win over the file.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .data_io import (
    GroundTruthMask,
    SynthSpec,
    load_cube,
    load_mask,
    read_manifest,
    save_mask,
    write_dataset,
)
from .errors import ConfigError, ConfigMismatchError, DatasetError, FormatError, NumericalError, ShapeError
from .eval_diag import (
    PhaseThresholds,
    aggregate_iou,
    apply_merge,
    best_match_merge,
    ignite_span,
    iou,
    phase_timeline,
    read_merge_spec,
    render,
    segment_cube,
    snapshot_series,
    write_merge_spec,
)
from .trainer import TrainConfig, load_checkpoint, read_metrics, train

log = logging.getLogger("dgc")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4

COMMANDS = ("synth", "train", "segment", "eval", "merge", "diagnose")


# ---------------------------------------------------------------- value parsing

def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(t) for t in s.replace(",", " ").split())


def _opt_float(s: str) -> float | None:
    return None if s.strip().lower() in ("", "none", "auto") else float(s)


def _opt_str(s: str) -> str | None:
    return None if s.strip().lower() in ("", "none") else s.strip()


def _text(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str
    commands: tuple[str, ...]
    required: bool = False

    @property
    def metavar(self) -> str:
        return {_bool: "BOOL", _ints: "INTS", int: "INT", float: "FLOAT", _opt_float: "FLOAT|none"}.get(
            self.parse, "TEXT")


_TRAIN_HELP = {
    "k": "number of clusters K",
    "patch_size": "side of square training patches, pixels",
    "batch": "patch pairs per step",
    "overlap_min": "smallest overlap fraction of a patch pair",
    "overlap_max": "largest overlap fraction of a patch pair",
    "reuse": "patches drawn from a cube before moving to the next one",
    "steps": "total optimisation steps",
    "lr": "Adam learning rate",
    "beta1": "Adam first-moment decay",
    "beta2": "Adam second-moment decay",
    "adam_eps": "Adam epsilon",
    "lambda_unif": "weight of the balanced pseudo-label loss",
    "lambda_orth": "weight of the centroid orthogonality loss",
    "lambda_bal": "weight of the marginal balance loss",
    "lambda_cons": "weight of the overlap consistency loss",
    "ms_iterations": "unrolled mean-shift iterations",
    "ms_bandwidth": "mean-shift Gaussian bandwidth",
    "mean_shift_train": "refine embeddings with mean-shift during training",
    "ema_decay": "centroid EMA decay (1 keeps centroids fixed)",
    "temperature": "softmax temperature of soft assignment",
    "dead_threshold": "mass fraction below which a cluster is revived (none: 0.5/K)",
    "reactivation_eps": "noise scale used to revive dead clusters",
    "centroid_grad": "also update centroids by gradient before the EMA",
    "mode": "cube loading: sync or async (one prefetching loader thread)",
    "bands": "spectral bands per pixel (0: read from the first cube)",
    "embed_dim": "embedding dimension",
    "kernel_size": "spectral convolution kernel size",
    "strides": "strides of the three spectral convolutions",
    "dtype": "float32 or float64",
    "active_min_fraction": "pixel share a cluster needs to count as active",
    "checkpoint_interval": "steps between checkpoints (0: final only)",
    "log_interval": "steps between metric rows",
    "snapshot_interval": "steps between snapshot maps of the first cube (0: off)",
    "max_aborted": "consecutive non-finite steps tolerated before failing",
}

_TRAIN_PARSERS = {"dead_threshold": _opt_float, "strides": _ints, "mean_shift_train": _bool,
                  "centroid_grad": _bool}


def _train_keys() -> list[Key]:
    keys = []
    defaults = TrainConfig()
    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":
            continue
        default = getattr(defaults, f.name)
        if f.name == "bands":
            default = 0
        parse = _TRAIN_PARSERS.get(f.name, type(default))
        keys.append(Key(f.name, parse, default, _TRAIN_HELP[f.name], ("train",)))
    return keys


SCHEMA: list[Key] = [
    Key("seed", int, 0, "master seed; every random stream derives from it", ("synth", "train")),
    Key("out", str, None, "output directory (merge: output map file; diagnose: timeline CSV)",
        COMMANDS, required=True),
    # synth
    Key("cubes", int, 8, "number of cubes to generate", ("synth",)),
    Key("size", int, 128, "cube height and width, pixels", ("synth",)),
    Key("bands", int, 64, "spectral bands per cube", ("synth",)),
    Key("classes", int, 2, "entity classes (3+ adds small lesion-like classes)", ("synth",)),
    Key("blobs", int, 3, "tissue ellipses per cube", ("synth",)),
    Key("lesion_blobs", int, 6, "lesion discs per lesion class", ("synth",)),
    Key("lesion_max_fraction", float, 0.1, "cap on each lesion class, as a share of tissue", ("synth",)),
    Key("gain_min", float, 0.8, "lowest per-cube illumination gain", ("synth",)),
    Key("gain_max", float, 1.2, "highest per-cube illumination gain", ("synth",)),
    Key("noise", float, 0.01, "Gaussian noise std", ("synth",)),
    Key("wavelength_start", float, 400.0, "first band centre, nm", ("synth",)),
    Key("wavelength_step", _opt_float, None, "band spacing, nm (none: span 400-1000 nm)", ("synth",)),
    # train
    Key("dataset", str, None, "dataset directory or manifest", ("train",), required=True),
    Key("resume", _opt_str, None, "checkpoint to continue from", ("train",)),
    *_train_keys(),
    # segment
    Key("checkpoint", str, None, "trained checkpoint", ("segment",), required=True),
    Key("input", str, None, "cube file, dataset directory or manifest", ("segment",), required=True),
    Key("tile", int, 0, "tile side used for inference (0: training patch size)", ("segment",)),
    # eval
    Key("maps", str, None, "directory of cluster maps, or comma-separated map files", ("eval",), required=True),
    Key("masks", str, None, "dataset directory/manifest, or comma-separated mask files", ("eval",),
        required=True),
    Key("merge", _opt_str, None, "merge spec file mapping cluster ids to classes", ("eval",)),
    Key("auto_merge", _bool, False, "derive the merge by best match against the masks", ("eval",)),
    Key("n_classes", int, 0, "classes in the masks (0: largest mask label + 1)", ("eval",)),
    Key("save_merge", _opt_str, None, "write the merge map actually used to this file", ("eval",)),
    # merge
    Key("map", str, None, "cluster map to relabel", ("merge",), required=True),
    Key("spec", str, None, "merge spec file (every cluster id must be listed)", ("merge",), required=True),
    # diagnose
    Key("run", str, None, "train output directory holding metrics.csv and snapshots/", ("diagnose",),
        required=True),
    Key("theta_stable", float, 0.5, "MI threshold for structural stability, fraction of log K", ("diagnose",)),
    Key("theta_noise", float, 0.1, "MI threshold for noise-level change, fraction of log K", ("diagnose",)),
    Key("drop", float, 0.2, "entropy drop from the running max that marks smoldering", ("diagnose",)),
    Key("near_max", float, 0.9, "entropy share of log K regarded as near-maximal", ("diagnose",)),
]

# "bands" exists for synth (cube size) and train (model input); key by (command, name)
_BY_COMMAND: dict[str, dict[str, Key]] = {c: {} for c in COMMANDS}
for _key in SCHEMA:
    for _c in _key.commands:
        _BY_COMMAND[_c].setdefault(_key.name, _key)
_ALL_NAMES = {k.name for k in SCHEMA}


def keys_for(command: str) -> dict[str, Key]:
    return _BY_COMMAND[command]


# ---------------------------------------------------------------- config files

def read_config(path, command: str) -> dict[str, str]:
    """Raw values that apply to ``command``; unknown sections or keys raise ConfigError."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cp = configparser.ConfigParser(interpolation=None, default_section="\0", inline_comment_prefixes=("#", ";"),
                                   comment_prefixes=("#", ";"), delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string("[global]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    out: dict[str, str] = {}
    for section in cp.sections():
        if section != "global" and section not in COMMANDS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        known = _ALL_NAMES if section == "global" else set(keys_for(section))
        for name, value in cp.items(section):
            if name not in known:
                raise ConfigError(f"{path}: unknown key {name!r} in [{section}]")
            if section == "global" and name in keys_for(command):
                out.setdefault(name, value)
    if cp.has_section(command):
        out.update(cp.items(command))
    return out


def resolve(command: str, raw: dict[str, str]) -> dict[str, Any]:
    """Typed values for every key of ``command``: raw text parsed, defaults filled in."""
    keys = keys_for(command)
    values: dict[str, Any] = {}
    for name, key in keys.items():
        if name in raw:
            try:
                values[name] = key.parse(raw[name])
            except ValueError as exc:
                raise ConfigError(f"bad value for {name}: {raw[name]!r} ({exc})") from exc
        elif key.required:
            raise ConfigError(f"{command}: missing required key {name!r}")
        else:
            values[name] = key.default
    unknown = set(raw) - set(keys)
    if unknown:
        raise ConfigError(f"{command}: unknown keys {sorted(unknown)}")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgc", description="Deep global clustering for hyperspectral cubes.")
    parser.add_argument("--version", action="version", version=f"dgc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for command in COMMANDS:
        p = sub.add_parser(command, help=_COMMAND_HELP[command], description=_COMMAND_HELP[command],
                           argument_default=argparse.SUPPRESS)
        p.add_argument("--config", metavar="FILE", help="key = value config file")
        for name, key in keys_for(command).items():
            flags = [f"--{name}"] + ([f"--{name.replace('_', '-')}"] if "_" in name else [])
            extra = {"nargs": "?", "const": "true"} if key.parse is _bool else {}
            default = "required" if key.required else f"default: {_text(key.default)}"
            p.add_argument(*flags, dest=name, metavar=key.metavar, help=f"{key.help} ({default})", **extra)
    return parser


_COMMAND_HELP = {
    "synth": "generate a labelled synthetic dataset with a manifest",
    "train": "train encoder and centroid bank; writes metrics.csv and checkpoints",
    "segment": "write cluster maps and PPM renders for cubes",
    "eval": "score cluster maps against masks (per-class and mean IoU)",
    "merge": "relabel a cluster map with a merge spec",
    "diagnose": "classify training snapshots into phases; writes a timeline CSV",
}


# ----------------------------------------------------------------- subcommands

def cmd_synth(v: dict[str, Any]) -> int:
    spec = SynthSpec(n_cubes=v["cubes"], height=v["size"], width=v["size"], bands=v["bands"],
                     n_classes=v["classes"], blobs=v["blobs"], lesion_blobs=v["lesion_blobs"],
                     lesion_max_fraction=v["lesion_max_fraction"], gain=(v["gain_min"], v["gain_max"]),
                     noise_std=v["noise"], wavelength_start=v["wavelength_start"],
                     wavelength_step=v["wavelength_step"], seed=v["seed"])
    spec.validate()
    print(write_dataset(spec, v["out"]))
    return EXIT_OK


def train_config(v: dict[str, Any]) -> TrainConfig:
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    kw = {n: v[n] for n in names if n in v}
    if kw.get("bands", 0) == 0:
        cubes, _ = read_manifest(v["dataset"])
        if not cubes:
            raise ConfigError("dataset lists no cubes")
        kw["bands"] = load_cube(cubes[0]).bands
    return TrainConfig(**kw)


def cmd_train(v: dict[str, Any]) -> int:
    cfg = train_config(v)
    resume = load_checkpoint(v["resume"], expected=cfg) if v["resume"] else None
    state, records = train(cfg, v["dataset"], v["out"], resume=resume)
    aborted = sum(r.aborted for r in records)
    log.info("trained %d steps (%d rolled back)", len(records), aborted)
    print(Path(v["out"]) / "final.dgck")
    return EXIT_OK


def _cube_paths(spec: str) -> list[Path]:
    p = Path(spec)
    if p.is_dir() or p.suffix == ".json":
        return read_manifest(p)[0]
    return [Path(s) for s in spec.split(",")]


def cmd_segment(v: dict[str, Any]) -> int:
    state = load_checkpoint(v["checkpoint"])
    cfg = state.config
    tile = v["tile"] or cfg.patch_size
    out = Path(v["out"])
    out.mkdir(parents=True, exist_ok=True)
    for path in _cube_paths(v["input"]):
        cube = load_cube(path)
        labels = segment_cube(state.params, state.bank, cfg.mean_shift, cube, tile)
        stem = path.stem
        save_mask(GroundTruthMask(labels.astype(np.uint8)), out / f"{stem}.hsim")
        render(labels, "cluster-colors", out / f"{stem}.clusters.ppm", k=cfg.k)
        render(cube, "pseudo-rgb", out / f"{stem}.rgb.ppm")
        print(out / f"{stem}.hsim")
    return EXIT_OK


def _map_mask_pairs(maps: str, masks: str) -> list[tuple[str, Path, Path]]:
    mp, kp = Path(masks), Path(maps)
    if mp.is_dir() or mp.suffix == ".json":
        mask_paths = [m for m in read_manifest(mp)[1] if m is not None]
    else:
        mask_paths = [Path(s) for s in masks.split(",")]
    if kp.is_dir():
        map_paths = [kp / m.name for m in mask_paths]
    else:
        map_paths = [Path(s) for s in maps.split(",")]
    if len(map_paths) != len(mask_paths):
        raise ConfigError(f"{len(map_paths)} maps but {len(mask_paths)} masks")
    return [(m.stem, a, m) for a, m in zip(map_paths, mask_paths)]


def _iou_line(name: str, per: dict[int, float], mean: float) -> str:
    parts = ", ".join(f"{val:.3f} (class {c})" for c, val in per.items())
    return f"{name}: IoU {parts}; mean {mean:.3f}"


def cmd_eval(v: dict[str, Any]) -> int:
    pairs = _map_mask_pairs(v["maps"], v["masks"])
    maps = [load_mask(a).labels.astype(np.int64) for _, a, _ in pairs]
    gts = [load_mask(m).labels.astype(np.int64) for _, _, m in pairs]
    n_classes = v["n_classes"] or int(max(g.max() for g in gts)) + 1
    k = int(max(m.max() for m in maps)) + 1
    if v["merge"] and v["auto_merge"]:
        raise ConfigError("give either merge or auto_merge, not both")
    if v["merge"]:
        merge = read_merge_spec(v["merge"])
    elif v["auto_merge"]:
        merge = best_match_merge(maps, gts, n_classes, k)
    else:
        merge = None
    if merge is not None:
        log.info("merge map %s", merge.as_dict())
        maps = [apply_merge(m, merge) for m in maps]
        if v["save_merge"]:
            Path(v["save_merge"]).parent.mkdir(parents=True, exist_ok=True)
            write_merge_spec(merge, v["save_merge"])
    classes = list(range(n_classes))
    out = Path(v["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "iou.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["map"] + [f"iou_{c}" for c in classes] + ["mean_iou"])
        for (name, _, _), pred, gt in zip(pairs, maps, gts):
            rep = iou(pred, gt, classes)
            print(_iou_line(name, rep.per_class, rep.mean))
            w.writerow([name] + [f"{rep.per_class[c]:.6f}" for c in classes] + [f"{rep.mean:.6f}"])
        agg = aggregate_iou(list(zip(maps, gts)), classes)
        print(_iou_line("aggregate", agg.per_class, agg.mean))
        w.writerow(["aggregate"] + [f"{agg.per_class[c]:.6f}" for c in classes] + [f"{agg.mean:.6f}"])
    return EXIT_OK


def cmd_merge(v: dict[str, Any]) -> int:
    merge = read_merge_spec(v["spec"])
    labels = load_mask(v["map"]).labels
    merged = apply_merge(labels, merge)
    if merged.size and merged.max() > 255:
        raise ConfigError("merged class ids must fit in 0..255")
    out = Path(v["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mask(GroundTruthMask(merged.astype(np.uint8)), out)
    print(out)
    return EXIT_OK


TIMELINE_COLUMNS = ("snapshot", "entropy", "mi_prev", "active_clusters", "phase")


def cmd_diagnose(v: dict[str, Any]) -> int:
    run = Path(v["run"])
    header = next(iter(read_metrics(run / "metrics.csv")), None)
    if header is None:
        raise FormatError(f"{run / 'metrics.csv'} has no rows")
    k = sum(1 for col in header if col.startswith("usage_"))
    snaps_dir = run / "snapshots"
    files = sorted(snaps_dir.glob("step_*.hsim")) if snaps_dir.is_dir() else []
    if len(files) < 2:
        raise FormatError(f"{snaps_dir}: need at least two snapshot maps, found {len(files)}")
    steps = [int(f.stem.split("_")[1]) for f in files]
    maps = [load_mask(f).labels for f in files]
    snaps = snapshot_series(maps, steps)
    th = PhaseThresholds(v["theta_stable"], v["theta_noise"], v["drop"], v["near_max"])
    phases = phase_timeline(snaps, k, th)
    out = Path(v["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TIMELINE_COLUMNS)
        for s, ph in zip(snaps, phases):
            w.writerow([s.step, f"{s.entropy:.9f}", "" if s.mi_prev is None else f"{s.mi_prev:.9f}",
                        s.active, ph or ""])
    span = ignite_span(snaps, phases)
    if span is None:
        print("ignite: none")
    else:
        print(f"ignite: onset step {span[0]}, offset step {span[1]}")
    print(out)
    return EXIT_OK


_HANDLERS = {"synth": cmd_synth, "train": cmd_train, "segment": cmd_segment, "eval": cmd_eval,
             "merge": cmd_merge, "diagnose": cmd_diagnose}


def _setup_logging():
    level = os.environ.get("DGC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def run(argv: list[str] | None = None) -> int:
    """Parse ``argv`` and run one subcommand; returns the process exit code."""
    _setup_logging()
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    config = args.pop("config", None)
    try:
        raw = read_config(config, command) if config else {}
        raw.update(args)
        values = resolve(command, raw)
        return _HANDLERS[command](values)
    except (ConfigError, ConfigMismatchError) as exc:
        print(f"dgc {command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError, ShapeError, DatasetError) as exc:
        print(f"dgc {command}: input/output error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"dgc {command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def main(argv: list[str] | None = None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
