"""Dense tensor kernels shared by the whole package.

Everything here works on ``(N, C, H, W)`` torch tensors; autograd supplies
the backward passes.  :class:`FeatureMap` is the single-image, stride-aware
view used at module boundaries.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64


@dataclass
class FeatureMap:
    """Channels x height x width activations at a known input stride."""

    data: torch.Tensor
    stride: float = 1

    def __post_init__(self):
        if not isinstance(self.data, torch.Tensor):
            self.data = torch.as_tensor(np.asarray(self.data, dtype=np.float64))
        if self.data.dim() != 3:
            raise ValueError(f"FeatureMap expects (C, H, W), got shape {tuple(self.data.shape)}")
        if self.stride <= 0:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if not torch.isfinite(self.data).all():
            raise ValueError("FeatureMap contains non-finite values")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    weights: torch.Tensor
    bias: torch.Tensor

    def __post_init__(self):
        if self.kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {self.kernel}")
        self.weights = torch.as_tensor(self.weights, dtype=DTYPE)
        self.bias = torch.as_tensor(self.bias, dtype=DTYPE)
        expected = self.out_channels * self.in_channels * self.kernel * self.kernel
        if self.weights.numel() != expected:
            raise ValueError(f"weights has {self.weights.numel()} entries, expected {expected}")
        if self.bias.numel() != self.out_channels:
            raise ValueError(f"bias has {self.bias.numel()} entries, expected {self.out_channels}")
        if not (torch.isfinite(self.weights).all() and torch.isfinite(self.bias).all()):
            raise ValueError("ConvSpec weights/bias must be finite")
        self.weights = self.weights.reshape(self.out_channels, self.in_channels, self.kernel, self.kernel)
        self.bias = self.bias.reshape(self.out_channels)

    @property
    def padding(self) -> int:
        return 1 if self.kernel == 3 else 0


@dataclass
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float
    num_probes: int
    num_skipped: int = 0
    ok: bool = True
    message: str = ""
    num_kinks: int = 0  # probes whose interval crossed a non-differentiable point


# ---------------------------------------------------------------------------
# tensor-level kernels


def conv(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Stride-1 convolution with 'same' padding for odd kernels."""
    return F.conv2d(x, weight, bias, padding=weight.shape[-1] // 2)


def upsample(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Bilinear upsampling, half-pixel centres, edge-clamped."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {factor!r}")
    if factor == 1:
        return x
    return F.interpolate(x, scale_factor=int(factor), mode="bilinear", align_corners=False)


def resize(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def avg_pool2(x: torch.Tensor) -> torch.Tensor:
    return F.avg_pool2d(x, 2)


# ---------------------------------------------------------------------------
# FeatureMap-level operations


def conv2d(fm: FeatureMap, spec: ConvSpec) -> FeatureMap:
    if fm.channels != spec.in_channels:
        raise ValueError(f"input has {fm.channels} channels, conv expects {spec.in_channels}")
    out = conv(fm.data[None].to(DTYPE), spec.weights, spec.bias)[0]
    return FeatureMap(out, fm.stride)


def bilinear_upsample(fm: FeatureMap, factor: int) -> FeatureMap:
    if not isinstance(factor, (int, np.integer)) or factor <= 0:
        raise ValueError(f"upsample factor must be a positive integer, got {factor!r}")
    return FeatureMap(upsample(fm.data[None], factor)[0], fm.stride / factor)


def pointwise(fm: FeatureMap, kind: Literal["relu", "sigmoid", "softmax_channelwise"]) -> FeatureMap:
    x = fm.data
    if kind == "relu":
        out = torch.relu(x)
    elif kind == "sigmoid":
        out = torch.sigmoid(x)
    elif kind == "softmax_channelwise":
        out = torch.softmax(x, dim=0)
    else:
        raise ValueError(f"unknown pointwise kind {kind!r}")
    return FeatureMap(out, fm.stride)


def average_pool(fm: FeatureMap) -> FeatureMap:
    if fm.height % 2 or fm.width % 2:
        raise ValueError(f"2x2 pooling needs even extents, got {fm.height}x{fm.width}")
    return FeatureMap(avg_pool2(fm.data[None])[0], fm.stride * 2)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(
    fn: Callable[[np.ndarray], float],
    params: np.ndarray,
    analytic_grad: np.ndarray,
    probes: int = 20,
    step: float = 1e-4,
    tol: float = 1e-4,
    floor: float = 1e-8,
    seed: int = 0,
    signature: Callable[[], bytes] | None = None,
) -> GradCheckReport:
    """Compare ``analytic_grad`` to central differences of ``fn`` at random coordinates.

    Relative error is measured against the numerical derivative.  Probes where
    both derivatives are below ``floor`` in magnitude are skipped.

    ``signature``, when given, returns the activation pattern of the most
    recent ``fn`` call (see :class:`ReluSignTap`).  A probe whose two sides
    differ in pattern straddles a kink; central differences are meaningless
    there, so it is counted in ``num_kinks`` instead of being scored.
    """
    params = np.array(params, dtype=np.float64).ravel()
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64).ravel()
    if step <= 0:
        raise ValueError("step must be positive")
    if not np.all(np.isfinite(params)):
        raise ValueError("params must be finite")
    if analytic_grad.shape != params.shape:
        raise ValueError(f"gradient has {analytic_grad.size} entries, params has {params.size}")

    rng = np.random.default_rng(seed)
    n = params.size
    idx = np.arange(n) if probes >= n else rng.choice(n, size=probes, replace=False)

    max_abs = max_rel = 0.0
    skipped = kinks = 0
    for i in idx:
        old = params[i]
        params[i] = old + step
        f_plus = fn(params.copy())
        sig_plus = signature() if signature is not None else None
        params[i] = old - step
        f_minus = fn(params.copy())
        sig_minus = signature() if signature is not None else None
        params[i] = old
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            return GradCheckReport(math.inf, math.inf, len(idx), skipped, False,
                                   f"non-finite function value probing coordinate {i}")
        if sig_plus != sig_minus:
            kinks += 1
            continue
        numeric = (f_plus - f_minus) / (2 * step)
        a = analytic_grad[i]
        if abs(a) < floor and abs(numeric) < floor:
            skipped += 1
            continue
        abs_err = abs(a - numeric)
        rel_err = abs_err / max(abs(numeric), 1e-300)
        max_abs = max(max_abs, abs_err)
        max_rel = max(max_rel, rel_err)

    ok = max_rel < tol
    msg = "" if ok else f"max relative error {max_rel:.3g} exceeds {tol:g}"
    return GradCheckReport(max_abs, max_rel, len(idx), skipped, ok, msg, kinks)


class ReluSignTap:
    """Records the sign pattern of every ``torch.relu`` input while active.

    Used as the ``signature`` source of :func:`finite_diff_check`::

        with ReluSignTap() as tap:
            finite_diff_check(f, x, g, signature=tap.signature)
    """

    def __init__(self):
        self._signs: list[bytes] = []
        self._orig = None

    def __enter__(self):
        self._orig = torch.relu
        orig = self._orig

        def relu(x, *a, **k):
            self._signs.append(np.packbits((x.detach() > 0).numpy().ravel()).tobytes())
            return orig(x, *a, **k)

        torch.relu = relu
        return self

    def __exit__(self, *exc):
        torch.relu = self._orig
        return False

    def signature(self) -> bytes:
        sig = b"".join(self._signs)
        self._signs.clear()
        return sig


def torch_grad_check(
    fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    probes: int = 20,
    step: float = 1e-4,
    tol: float = 1e-4,
    seed: int = 0,
) -> GradCheckReport:
    """Autograd gradient of a scalar torch function checked by finite differences."""
    x = x.detach().to(DTYPE).clone().requires_grad_(True)
    y = fn(x)
    (grad,) = torch.autograd.grad(y, x)
    shape = x.shape

    def f(flat: np.ndarray) -> float:
        with torch.no_grad():
            return float(fn(torch.from_numpy(flat).reshape(shape)))

    return finite_diff_check(f, x.detach().numpy().ravel(), grad.numpy().ravel(),
                             probes=probes, step=step, tol=tol, seed=seed)
