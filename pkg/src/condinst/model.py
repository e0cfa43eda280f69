"""CondInst network: toy backbone, FPN-lite, shared dense heads, bottom branch and dynamic mask heads."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn

from .numerics import DTYPE, ConvSpec, avg_pool2, conv, upsample

CHECKPOINT_VERSION = "1.0"
LEVEL_STRIDES = {"P2": 4, "P3": 8, "P4": 16, "P5": 32, "P6": 64, "P7": 128}
COORD_MODES = ("rel", "abs", "none")


@dataclass
class ModelConfig:
    num_classes: int = 3
    fpn_levels: tuple[str, ...] = ("P3", "P4", "P5")
    stem_channels: int = 16
    fpn_channels: int = 32
    head_channels: int = 32
    tower_convs: int = 2
    bottom_channels: int = 32
    bottom_convs: int = 4
    bottom_level: str = "P3"
    c_bottom: int = 8
    mask_head_depth: int = 3
    mask_head_width: int = 8
    upsample_factor: int = 2
    coord_norm_constant: float = 32.0
    coord_mode: str = "rel"
    mask_head_mode: str = "dynamic"  # "static" is the vanilla-FCN control
    semantic_classes: int = 0  # > 0 enables the semantic branch (panoptic mode)

    def __post_init__(self):
        self.fpn_levels = tuple(self.fpn_levels)
        if not self.fpn_levels or any(lv not in LEVEL_STRIDES for lv in self.fpn_levels):
            raise ValueError(f"fpn_levels must be a non-empty subset of {sorted(LEVEL_STRIDES)}")
        if list(self.fpn_levels) != sorted(self.fpn_levels, key=LEVEL_STRIDES.get):
            raise ValueError("fpn_levels must be listed from fine to coarse")
        if self.bottom_level not in ("P2", "P3"):
            raise ValueError(f"bottom_level must be P2 or P3, got {self.bottom_level}")
        if min(self.mask_head_depth, self.mask_head_width, self.c_bottom, self.num_classes) < 1:
            raise ValueError("mask head depth/width, c_bottom and num_classes must be >= 1")
        if self.upsample_factor not in (1, 2, 4):
            raise ValueError(f"upsample_factor must be 1, 2 or 4, got {self.upsample_factor}")
        if self.coord_mode not in COORD_MODES:
            raise ValueError(f"coord_mode must be one of {COORD_MODES}")
        if self.mask_head_mode not in ("dynamic", "static"):
            raise ValueError("mask_head_mode must be 'dynamic' or 'static'")
        if self.coord_norm_constant <= 0:
            raise ValueError("coord_norm_constant must be positive")

    @property
    def strides(self) -> dict[str, int]:
        return {lv: LEVEL_STRIDES[lv] for lv in self.fpn_levels}

    @property
    def bottom_stride(self) -> int:
        return LEVEL_STRIDES[self.bottom_level]

    @property
    def mask_stride(self) -> float:
        return self.bottom_stride / self.upsample_factor

    @property
    def max_stride(self) -> int:
        return max(32, *self.strides.values())

    @property
    def num_filter_params(self) -> int:
        return num_filter_params(self.c_bottom, self.mask_head_depth, self.mask_head_width)


def mask_head_widths(c_bottom: int, depth: int, width: int) -> list[int]:
    return [c_bottom + 2] + [width] * (depth - 1) + [1]


def num_filter_params(c_bottom: int = 8, depth: int = 3, width: int = 8) -> int:
    if depth == 1:
        return (c_bottom + 2) + 1
    weights = (c_bottom + 2) * width + (depth - 2) * width * width + width
    biases = (depth - 1) * width + 1
    return weights + biases


# ---------------------------------------------------------------------------
# dynamic mask heads


@dataclass
class MaskHead:
    layers: list[ConvSpec]

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels


def unpack_filter_params(theta, c_bottom: int = 8, depth: int = 3, width: int = 8) -> MaskHead:
    """Split a flat parameter vector into 1x1 conv layers.

    Layout is layer 1 weights (out x in, row-major), layer 1 biases, layer 2
    weights, ... and must be consumed exactly.
    """
    theta = torch.as_tensor(theta, dtype=DTYPE).reshape(-1)
    expected = num_filter_params(c_bottom, depth, width)
    if theta.numel() != expected:
        raise ValueError(f"theta has {theta.numel()} parameters, expected {expected}")
    widths = mask_head_widths(c_bottom, depth, width)
    layers, pos = [], 0
    for cin, cout in zip(widths[:-1], widths[1:]):
        w = theta[pos:pos + cin * cout]
        pos += cin * cout
        b = theta[pos:pos + cout]
        pos += cout
        layers.append(ConvSpec(cin, cout, 1, w, b))
    assert pos == expected
    return MaskHead(layers)


def split_filter_params(thetas: torch.Tensor, widths: list[int]):
    """Batched counterpart of :func:`unpack_filter_params` for a ``(K, N)`` tensor."""
    out, pos = [], 0
    k = thetas.shape[0]
    for cin, cout in zip(widths[:-1], widths[1:]):
        w = thetas[:, pos:pos + cin * cout].reshape(k, cout, cin)
        pos += cin * cout
        b = thetas[:, pos:pos + cout]
        pos += cout
        out.append((w, b))
    if pos != thetas.shape[1]:
        raise ValueError(f"theta has {thetas.shape[1]} parameters, expected {pos}")
    return out


def apply_mask_head(features: torch.Tensor, head: MaskHead) -> torch.Tensor:
    """Run one generated head over a ``(C_bottom + 2, H, W)`` map; returns ``(1, H, W)`` logits."""
    if features.shape[0] != head.in_channels:
        raise ValueError(f"mask head expects {head.in_channels} input channels, got {features.shape[0]}")
    x = features[None]
    for i, layer in enumerate(head.layers):
        x = conv(x, layer.weights, layer.bias)
        if i < len(head.layers) - 1:
            x = torch.relu(x)
    return x[0]


def apply_mask_heads_batched(features: torch.Tensor, thetas: torch.Tensor, widths: list[int]) -> torch.Tensor:
    """K heads at once: ``features`` is ``(K, C_in, H, W)``, ``thetas`` is ``(K, N)``."""
    k, cin, h, w = features.shape
    if cin != widths[0]:
        raise ValueError(f"mask head expects {widths[0]} input channels, got {cin}")
    x = features.reshape(k, cin, h * w)
    params = split_filter_params(thetas, widths)
    for i, (wt, b) in enumerate(params):
        x = torch.baddbmm(b[:, :, None], wt, x)
        if i < len(params) - 1:
            x = torch.relu(x)
    return x.reshape(k, 1, h, w)


def map_location(x, y, stride: int):
    """Feature-map cell to input-image point."""
    return stride // 2 + x * stride, stride // 2 + y * stride


def make_relative_coords(gen_points: torch.Tensor, bottom_shape: tuple[int, int], bottom_stride: int,
                         norm: float = 32.0, mode: str = "rel") -> torch.Tensor:
    """Coordinate channels for each generator point.

    ``gen_points`` is ``(K, 2)`` input-space (x, y); result is ``(K, 2, H, W)``
    holding ``(bottom point - generator point) / norm``.  ``mode='abs'`` gives
    plain input-space coordinates / norm, ``mode='none'`` zeros.
    """
    gen_points = torch.as_tensor(gen_points, dtype=DTYPE).reshape(-1, 2)
    h, w = bottom_shape
    ys = (bottom_stride // 2 + torch.arange(h, dtype=DTYPE) * bottom_stride)
    xs = (bottom_stride // 2 + torch.arange(w, dtype=DTYPE) * bottom_stride)
    grid_x = xs[None, :].expand(h, w)
    grid_y = ys[:, None].expand(h, w)
    k = gen_points.shape[0]
    if mode == "none":
        return torch.zeros(k, 2, h, w, dtype=DTYPE)
    if mode == "abs":
        return (torch.stack([grid_x, grid_y])[None] / norm).expand(k, 2, h, w).clone()
    ox = grid_x[None] - gen_points[:, 0, None, None]
    oy = grid_y[None] - gen_points[:, 1, None, None]
    return torch.stack([ox, oy], dim=1) / norm


# ---------------------------------------------------------------------------
# network


class HeadOutputs(NamedTuple):
    cls_logits: torch.Tensor  # (B, C, H, W)
    ctr_logits: torch.Tensor  # (B, 1, H, W)
    box_reg: torch.Tensor  # (B, 4, H, W) positive distances l, t, r, b in input pixels
    controller: torch.Tensor  # (B, N, H, W)


@dataclass
class ModelOutputs:
    heads: dict[str, HeadOutputs]
    bottom: torch.Tensor  # (B, C_bottom, Hb, Wb)
    semantic: torch.Tensor | None = None  # (B, L, H/4, W/4)
    pyramid: dict[str, torch.Tensor] = field(default_factory=dict)


def _conv_layer(cin: int, cout: int, k: int) -> nn.Conv2d:
    layer = nn.Conv2d(cin, cout, k, padding=k // 2).to(DTYPE)
    nn.init.kaiming_uniform_(layer.weight, a=1)
    nn.init.zeros_(layer.bias)
    return layer


def _head_layer(cin: int, cout: int, std: float = 0.01, bias: float = 0.0) -> nn.Conv2d:
    layer = nn.Conv2d(cin, cout, 3, padding=1).to(DTYPE)
    nn.init.normal_(layer.weight, std=std)
    nn.init.constant_(layer.bias, bias)
    return layer


def _run(layers, x: torch.Tensor, relu_last: bool = True) -> torch.Tensor:
    for i, layer in enumerate(layers):
        x = conv(x, layer.weight, layer.bias)
        if relu_last or i < len(layers) - 1:
            x = torch.relu(x)
    return x


class CondInst(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        gen = torch.random.fork_rng()
        with gen:
            torch.manual_seed(seed)
            s, f, h = cfg.stem_channels, cfg.fpn_channels, cfg.head_channels
            # backbone: stride-1 stem then conv + relu + 2x2 pool blocks; the stem is pooled too
            backbone_ch = {"C2": s, "C3": 2 * s, "C4": 2 * s, "C5": 2 * s}
            self.stem = _conv_layer(3, s, 3)
            self.blocks = nn.ModuleDict({
                "C2": _conv_layer(s, s, 3),
                "C3": _conv_layer(s, 2 * s, 3),
                "C4": _conv_layer(2 * s, 2 * s, 3),
                "C5": _conv_layer(2 * s, 2 * s, 3),
            })
            self._fpn_inputs = ["C2", "C3", "C4", "C5"] if self._needs_p2 else ["C3", "C4", "C5"]
            self.lateral = nn.ModuleDict({c: _conv_layer(backbone_ch[c], f, 1) for c in self._fpn_inputs})
            self.smooth = nn.ModuleDict({"P" + c[1]: _conv_layer(f, f, 3) for c in self._fpn_inputs})

            self.cls_tower = nn.ModuleList([_head_layer(f if i == 0 else h, h) for i in range(cfg.tower_convs)])
            self.box_tower = nn.ModuleList([_head_layer(f if i == 0 else h, h) for i in range(cfg.tower_convs)])
            prior = -math.log((1 - 0.01) / 0.01)
            self.cls_logits = _head_layer(h, cfg.num_classes, bias=prior)
            self.controller = _head_layer(h, cfg.num_filter_params)
            self.bbox_pred = _head_layer(h, 4)
            self.ctrness = _head_layer(h, 1)

            b = cfg.bottom_channels
            self.bottom_convs = nn.ModuleList(
                [_conv_layer(f if i == 0 else b, b, 3) for i in range(cfg.bottom_convs)])
            self.bottom_out = _conv_layer(b, cfg.c_bottom, 1)

            if cfg.semantic_classes > 0:
                self.semantic_out = _conv_layer(4 * f, cfg.semantic_classes, 1)

            widths = mask_head_widths(cfg.c_bottom, cfg.mask_head_depth, cfg.mask_head_width)
            static = []
            for cin, cout in zip(widths[:-1], widths[1:]):
                static += [torch.randn(cout * cin, dtype=DTYPE) * math.sqrt(2.0 / cin),
                           torch.zeros(cout, dtype=DTYPE)]
            self.static_theta = nn.Parameter(torch.cat(static))

    @property
    def _needs_p2(self) -> bool:
        return self.cfg.bottom_level == "P2" or self.cfg.semantic_classes > 0 or "P2" in self.cfg.fpn_levels

    @property
    def mask_widths(self) -> list[int]:
        return mask_head_widths(self.cfg.c_bottom, self.cfg.mask_head_depth, self.cfg.mask_head_width)

    # -- trunk ---------------------------------------------------------------

    def build_pyramid(self, images: torch.Tensor) -> dict[str, torch.Tensor]:
        """``(B, 3, H, W)`` images to FPN maps keyed by level name."""
        hh, ww = images.shape[-2:]
        m = self.cfg.max_stride
        if hh % m or ww % m:
            pad_h, pad_w = (-hh) % m, (-ww) % m
            raise ValueError(f"input {hh}x{ww} not divisible by {m}; pad by ({pad_h}, {pad_w}) pixels")
        x = avg_pool2(torch.relu(conv(images, self.stem.weight, self.stem.bias)))
        feats = {}
        for name, layer in self.blocks.items():
            x = avg_pool2(torch.relu(conv(x, layer.weight, layer.bias)))
            feats[name] = x
        pyramid: dict[str, torch.Tensor] = {}
        top = None
        for c in reversed(self._fpn_inputs):
            lat = conv(feats[c], self.lateral[c].weight, self.lateral[c].bias)
            top = lat if top is None else lat + upsample(top, 2)
            pyramid["P" + c[1]] = top
        pyramid = {lv: conv(p, self.smooth[lv].weight, self.smooth[lv].bias) for lv, p in pyramid.items()}
        if "P6" in self.cfg.fpn_levels or "P7" in self.cfg.fpn_levels:
            pyramid["P6"] = avg_pool2(pyramid["P5"])
            pyramid["P7"] = avg_pool2(pyramid["P6"])
        return dict(sorted(pyramid.items(), key=lambda kv: LEVEL_STRIDES[kv[0]]))

    def run_heads(self, pyramid: dict[str, torch.Tensor]) -> dict[str, HeadOutputs]:
        if not pyramid:
            raise ValueError("empty pyramid")
        out = {}
        for lv in self.cfg.fpn_levels:
            if lv not in pyramid:
                raise ValueError(f"pyramid lacks level {lv}")
            out[lv] = self.head_outputs(pyramid[lv], LEVEL_STRIDES[lv])
        return out

    def head_outputs(self, p: torch.Tensor, stride: int) -> HeadOutputs:
        """The shared heads on one level; weights are identical for every level."""
        c = _run(self.cls_tower, p)
        b = _run(self.box_tower, p)
        box = torch.exp(conv(b, self.bbox_pred.weight, self.bbox_pred.bias).clamp(max=12.0)) * stride
        return HeadOutputs(
            cls_logits=conv(c, self.cls_logits.weight, self.cls_logits.bias),
            ctr_logits=conv(b, self.ctrness.weight, self.ctrness.bias),
            box_reg=box,
            controller=conv(c, self.controller.weight, self.controller.bias),
        )

    def build_bottom_features(self, pyramid: dict[str, torch.Tensor]) -> torch.Tensor:
        base = self.cfg.bottom_level
        names = [base] + [lv for lv in ("P3", "P4", "P5") if lv != base]
        missing = [lv for lv in names if lv not in pyramid]
        if missing:
            raise ValueError(f"bottom branch needs levels {missing}")
        x = pyramid[base]
        for lv in names[1:]:
            x = x + upsample(pyramid[lv], LEVEL_STRIDES[lv] // LEVEL_STRIDES[base])
        x = _run(self.bottom_convs, x)
        return conv(x, self.bottom_out.weight, self.bottom_out.bias)

    def semantic_logits(self, pyramid: dict[str, torch.Tensor]) -> torch.Tensor:
        maps = [pyramid["P2"]] + [upsample(pyramid[lv], LEVEL_STRIDES[lv] // 4) for lv in ("P3", "P4", "P5")]
        return conv(torch.cat(maps, dim=1), self.semantic_out.weight, self.semantic_out.bias)

    def forward(self, images: torch.Tensor) -> ModelOutputs:
        pyramid = self.build_pyramid(images)
        heads = self.run_heads(pyramid)
        bottom = self.build_bottom_features(pyramid)
        sem = self.semantic_logits(pyramid) if self.cfg.semantic_classes > 0 else None
        return ModelOutputs(heads, bottom, sem, pyramid)

    # -- dynamic masks -------------------------------------------------------

    def mask_logits(self, bottom: torch.Tensor, image_index: torch.Tensor, gen_points: torch.Tensor,
                    thetas: torch.Tensor, upsampled: bool = True) -> torch.Tensor:
        """Mask logits for K instances at stride ``bottom_stride / upsample_factor``.

        ``image_index`` (K,) picks each instance's image in the batch,
        ``gen_points`` (K, 2) are input-space generator points and ``thetas``
        (K, N) the controller outputs at those points.  ``upsampled=False``
        returns the raw head output at the bottom stride.
        """
        cfg = self.cfg
        k = len(image_index)
        hb, wb = bottom.shape[-2:]
        if k == 0:
            f = cfg.upsample_factor if upsampled else 1
            return bottom.new_zeros(0, 1, hb * f, wb * f)
        coords = make_relative_coords(gen_points, (hb, wb), cfg.bottom_stride,
                                      cfg.coord_norm_constant, cfg.coord_mode)
        feats = torch.cat([bottom[image_index], coords.to(bottom.dtype)], dim=1)
        if cfg.mask_head_mode == "static":
            thetas = self.static_theta[None].expand(k, -1)
        logits = apply_mask_heads_batched(feats, thetas, self.mask_widths)
        return upsample(logits, cfg.upsample_factor) if upsampled else logits

    # -- parameter bookkeeping ----------------------------------------------

    def no_decay_names(self) -> set[str]:
        """Parameters excluded from weight decay: every bias and the controller projection."""
        return {n for n, _ in self.named_parameters() if n.endswith(".bias") or n.startswith("controller.")}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: CondInst, directory: str | Path, extra: dict | None = None) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    table, chunks, offset = [], [], 0
    for name, p in model.state_dict().items():
        arr = p.detach().cpu().numpy().astype("<f8").ravel()
        table.append({"name": name, "offset": offset, "shape": list(p.shape)})
        offset += arr.size
        chunks.append(arr)
    data = np.concatenate(chunks) if chunks else np.zeros(0, "<f8")
    (root / "weights.bin").write_bytes(data.astype("<f8").tobytes())
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(model.cfg), "parameters": table,
            "num_values": int(offset)}
    if extra:
        meta.update(extra)
    (root / "model.json").write_text(json.dumps(meta, indent=1))
    return root


class CheckpointError(Exception):
    pass


def load_checkpoint(directory: str | Path) -> CondInst:
    root = Path(directory)
    if not root.exists():
        raise CheckpointError(f"checkpoint path not found: {root}")
    if root.suffix == ".bin" or root.name == "model.json":
        root = root.parent
    meta_path, bin_path = root / "model.json", root / "weights.bin"
    for p in (meta_path, bin_path):
        if not p.exists():
            raise CheckpointError(f"checkpoint file not found: {p}")
    meta = json.loads(meta_path.read_text())
    model = CondInst(ModelConfig(**meta["config"]))
    data = np.frombuffer(bin_path.read_bytes(), dtype="<f8")
    if data.size != meta["num_values"]:
        raise CheckpointError(f"{bin_path} holds {data.size} values, model.json expects {meta['num_values']}")
    state = {}
    for rec in meta["parameters"]:
        n = int(np.prod(rec["shape"])) if rec["shape"] else 1
        state[rec["name"]] = torch.from_numpy(data[rec["offset"]:rec["offset"] + n].copy()).reshape(rec["shape"])
    model.load_state_dict(state)
    return model
