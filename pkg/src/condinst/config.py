"""Flat dotted key-value run configuration with per-subcommand schemas.

File format, one entry per line::

    # comment
    train.lr = 0.01
    model.mask_head_depth = 3
    sweep.axis = depth=1,2,3

Flags override file values; unknown keys are rejected.
"""
from __future__ import annotations

import argparse
from dataclasses import dataclass
from pathlib import Path

PROVENANCE = {
    "published": "published default",
    "toy": "desk-scale default",
    "artifact": "pipeline plumbing",
}


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _int_list(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _str_list(text) -> tuple[str, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(str(v) for v in text)
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _opt_str(text):
    return None if text is None or str(text) in ("", "none", "None") else str(text)


PARSERS = {"int": int, "float": float, "str": str, "bool": _bool, "ints": _int_list, "strs": _str_list,
           "path": _opt_str}


@dataclass(frozen=True)
class Option:
    key: str  # dotted, e.g. "train.lr"
    default: object
    kind: str  # key of PARSERS
    help: str
    provenance: str = "toy"
    choices: tuple | None = None

    @property
    def flag(self) -> str:
        return "--" + self.key.split(".", 1)[1].replace("_", "-")

    @property
    def dest(self) -> str:
        return self.key.replace(".", "__")

    def parse(self, raw):
        try:
            value = PARSERS[self.kind](raw) if raw is not None else None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{self.key}: cannot parse {raw!r} as {self.kind}") from exc
        if self.choices is not None and value not in self.choices:
            raise ConfigError(f"{self.key}: {value!r} not in {list(self.choices)}")
        return value


def _o(*a, **k) -> Option:
    return Option(*a, **k)


COMMON = [
    _o("run.out", None, "path", "output directory (required)", "artifact"),
    _o("run.seed", 0, "int", "random seed", "artifact"),
]

DATA = [
    _o("data.num_scenes", 200, "int", "number of scenes"),
    _o("data.image_size", 64, "int", "square image side, divisible by 32"),
    _o("data.min_instances", 1, "int", "fewest instances per scene"),
    _o("data.max_instances", 5, "int", "most instances per scene"),
    _o("data.num_thing_classes", 3, "int", "thing classes"),
    _o("data.num_stuff_classes", 2, "int", "stuff classes"),
    _o("data.occlusion_prob", 0.5, "float", "probability a new instance overlaps an earlier one"),
    _o("data.pair_prob", 0.5, "float", "probability of an identical-appearance overlapping pair"),
    _o("data.noise", 0.02, "float", "pixel noise std"),
]

MODEL = [
    _o("model.fpn_levels", ("P3", "P4", "P5"), "strs", "pyramid levels (five levels P3-P7 at full scale)"),
    _o("model.stem_channels", 16, "int", "backbone base width"),
    _o("model.fpn_channels", 32, "int", "pyramid width (256 at full scale)"),
    _o("model.head_channels", 32, "int", "head tower width"),
    _o("model.tower_convs", 2, "int", "convs per head tower (4 at full scale)"),
    _o("model.bottom_channels", 32, "int", "bottom branch width (128 at full scale)"),
    _o("model.bottom_convs", 4, "int", "3x3 convs in the bottom branch", "published"),
    _o("model.bottom_level", "P3", "str", "bottom branch level", "published", ("P2", "P3")),
    _o("model.c_bottom", 8, "int", "bottom feature channels", "published"),
    _o("model.mask_head_depth", 3, "int", "dynamic mask head layers", "published"),
    _o("model.mask_head_width", 8, "int", "dynamic mask head hidden channels", "published"),
    _o("model.upsample_factor", 2, "int", "mask upsampling factor", "published", (1, 2, 4)),
    _o("model.coord_norm_constant", 32.0, "float", "relative coordinate normaliser"),
    _o("model.coord_mode", "rel", "str", "coordinate channels", "published", ("rel", "abs", "none")),
    _o("model.mask_head_mode", "dynamic", "str", "dynamic filters or one static head (control)", "artifact",
       ("dynamic", "static")),
]

TRAIN = [
    _o("train.data", None, "path", "dataset directory; generated in memory from data.* when unset", "artifact"),
    _o("train.iterations", 2000, "int", "SGD iterations (90k at full scale)"),
    _o("train.batch_size", 8, "int", "images per batch (16 at full scale)"),
    _o("train.lr", 0.01, "float", "initial learning rate", "published"),
    _o("train.momentum", 0.9, "float", "SGD momentum", "published"),
    _o("train.weight_decay", 1e-4, "float", "weight decay", "published"),
    _o("train.milestones", (1500,), "ints", "iterations where the lr drops"),
    _o("train.lr_drop", 0.1, "float", "lr multiplier at each milestone", "published"),
    _o("train.warmup_iters", 100, "int", "linear warm-up iterations"),
    _o("train.task", "instance", "str", "instance (amodal masks) or panoptic (visible masks)", "artifact",
       ("instance", "panoptic")),
    _o("train.flip", False, "bool", "random left-right flip", "published"),
    _o("train.aux_semantic", False, "bool", "auxiliary semantic loss"),
    _o("train.sample_cap", 64, "int", "max positives per image for the mask loss", "published"),
]

INFER = [
    _o("infer.checkpoint", None, "path", "checkpoint directory, model.json or weights.bin", "artifact"),
    _o("infer.data", None, "path", "dataset directory to run on", "artifact"),
    _o("infer.nms", "box", "str", "box or mask NMS", "published", ("box", "mask")),
    _o("infer.score_threshold", 0.05, "float", "score floor", "published"),
    _o("infer.max_detections", 100, "int", "detections kept per image", "published"),
    _o("infer.limit", 0, "int", "only the first N scenes (0 = all)", "artifact"),
]

BENCH = [
    _o("bench.checkpoint", None, "path", "checkpoint; a freshly initialised model when unset", "artifact"),
    _o("bench.k_values", (1, 10, 100), "ints", "instance counts to time", "published"),
    _o("bench.repeats", 30, "int", "timed samples per K", "artifact"),
    _o("bench.dtype", "float32", "str", "benchmark precision", "artifact", ("float32", "float64")),
    _o("bench.plot", True, "bool", "write timings.png", "artifact"),
]

RENDER = [
    _o("render.data", None, "path", "dataset directory holding the scene", "artifact"),
    _o("render.scene", 0, "int", "scene id to draw", "artifact"),
    _o("render.prediction", None, "path", "prediction JSON from infer; ground truth is drawn when unset",
       "artifact"),
    _o("render.panoptic", False, "bool", "draw the panoptic map instead of instances", "artifact"),
]

SWEEP = [
    _o("sweep.axis", (), "strs", "axes as name=v1,v2 (repeatable): depth, width, upsample, coords, nms, head",
       "artifact"),
    _o("sweep.seeds", (0, 1, 2), "ints", "training seeds per configuration", "artifact"),
    _o("sweep.num_val", 50, "int", "held-out validation scenes", "artifact"),
]

SCHEMAS: dict[str, list[Option]] = {
    "gen-data": COMMON + DATA,
    "train": COMMON + DATA + MODEL + TRAIN,
    "infer": COMMON + INFER,
    "eval": COMMON + INFER,
    "bench": COMMON + [o for o in MODEL] + BENCH,
    "render": COMMON + RENDER,
    "sweep": COMMON + DATA + MODEL + TRAIN + SWEEP,
}


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    for n, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        k = k.strip()
        if k == "sweep.axis" and k in out:
            out[k] = out[k] + ";" + v.strip()
        else:
            out[k] = v.strip()
    return out


def help_text(opt: Option) -> str:
    choices = f" {{{','.join(map(str, opt.choices))}}}" if opt.choices else ""
    default = ",".join(map(str, opt.default)) if isinstance(opt.default, tuple) else opt.default
    return f"{opt.help}{choices} [default: {default}; {PROVENANCE[opt.provenance]}]"


def add_options(parser: argparse.ArgumentParser, command: str) -> None:
    parser.add_argument("--config", default=None, help="flat key-value config file; flags override it")
    for opt in SCHEMAS[command]:
        kw = {"dest": opt.dest, "default": None, "help": help_text(opt), "metavar": opt.kind.upper()}
        if opt.key == "sweep.axis":
            kw["action"] = "append"
        parser.add_argument(opt.flag, **kw)


def resolve(command: str, ns: argparse.Namespace) -> dict[str, object]:
    """Defaults, then the config file, then flags; every key validated."""
    schema = {o.key: o for o in SCHEMAS[command]}
    raw: dict[str, object] = {}
    if getattr(ns, "config", None):
        for k, v in read_config_file(ns.config).items():
            if k not in schema:
                raise ConfigError(f"unknown key {k!r} for {command}; valid keys: {', '.join(sorted(schema))}")
            raw[k] = v.split(";") if k == "sweep.axis" else v
    for opt in schema.values():
        v = getattr(ns, opt.dest, None)
        if v is not None:
            raw[opt.key] = v
    cfg = {}
    for key, opt in schema.items():
        if key not in raw:
            cfg[key] = opt.default
        elif key == "sweep.axis":
            items = raw[key] if isinstance(raw[key], list) else [raw[key]]
            cfg[key] = tuple(str(v).strip() for v in items)
        else:
            cfg[key] = opt.parse(raw[key])
    return cfg


def section(cfg: dict[str, object], name: str) -> dict[str, object]:
    """``{"model.c_bottom": 8}`` -> ``{"c_bottom": 8}`` for one section."""
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}
