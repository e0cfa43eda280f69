"""Static PNG renderings: instance and panoptic overlays, timing and sweep plots."""
from __future__ import annotations

import colorsys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

ALPHA = 0.55
VOID_COLOR = np.array([0, 0, 0], dtype=np.uint8)


def distinct_colors(n: int, seed: int = 0) -> np.ndarray:
    """``n`` well-separated RGB uint8 colours (golden-ratio hue walk)."""
    h0 = (seed * 0.137) % 1.0
    out = [colorsys.hsv_to_rgb((h0 + i * 0.618033988749895) % 1.0, 0.85, 0.95) for i in range(n)]
    return (np.array(out).reshape(n, 3) * 255).round().astype(np.uint8)


def _check_size(image: np.ndarray, other: np.ndarray, what: str) -> None:
    if image.shape[:2] != other.shape[-2:]:
        raise ValueError(f"{what} resolution {other.shape[-2:]} does not match image {image.shape[:2]}")


def overlay_instances(image: np.ndarray, masks) -> np.ndarray:
    """Blend each mask in its own colour; later masks are drawn on top."""
    out = np.asarray(image, dtype=np.float64).copy()
    colors = distinct_colors(len(masks))
    for m, c in zip(masks, colors):
        m = np.asarray(m, dtype=bool)
        _check_size(image, m, "mask")
        out[m] = (1 - ALPHA) * out[m] + ALPHA * c
    return out.round().astype(np.uint8)


def colorize_panoptic(ids: np.ndarray, segments: dict[int, int]) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Colour every segment by id; void (0) is black.  Returns the image and per-segment colours."""
    ids = np.asarray(ids)
    keys = sorted(k for k in np.unique(ids) if k != 0)
    palette = dict(zip(keys, distinct_colors(len(keys), seed=1)))
    out = np.zeros(ids.shape + (3,), dtype=np.uint8)
    out[:] = VOID_COLOR
    for k, c in palette.items():
        out[ids == k] = c
    return out, palette


def render_instances(image: np.ndarray, masks, path: str | Path, labels=None, scores=None,
                     title: str | None = None) -> Path:
    image = np.asarray(image)
    over = overlay_instances(image, masks)
    fig, ax = plt.subplots(figsize=(4, 4.4), dpi=100)
    ax.imshow(over, interpolation="nearest")
    ax.set_axis_off()
    for i, m in enumerate(masks):
        ys, xs = np.nonzero(m)
        if len(xs) == 0:
            continue
        text = str(labels[i]) if labels is not None else f"#{i}"
        if scores is not None:
            text += f" {scores[i]:.2f}"
        ax.text(xs.min(), max(ys.min() - 1, 0), text, fontsize=6, color="white",
                bbox={"facecolor": "black", "alpha": 0.6, "pad": 1, "linewidth": 0})
    caption = f"{len(masks)} instances" if len(masks) != 1 else "1 instance"
    ax.set_title(f"{title} | {caption}" if title else caption, fontsize=8)
    return _save(fig, path)


def render_panoptic(image: np.ndarray, ids: np.ndarray, segments: dict[int, int], path: str | Path,
                    category_names: dict[int, str] | None = None) -> Path:
    """Panoptic colouring beside the input, with a category legend strip."""
    image = np.asarray(image)
    _check_size(image, np.asarray(ids), "panoptic map")
    colored, palette = colorize_panoptic(ids, segments)
    fig, axes = plt.subplots(1, 2, figsize=(7, 4), dpi=100, gridspec_kw={"width_ratios": [1, 1]})
    axes[0].imshow(image, interpolation="nearest")
    axes[0].set_title("input", fontsize=8)
    axes[1].imshow(colored, interpolation="nearest")
    axes[1].set_title(f"{len(palette)} segments", fontsize=8)
    for ax in axes:
        ax.set_axis_off()
    handles = []
    for k, c in palette.items():
        cat = segments.get(int(k), 0)
        name = category_names.get(cat, str(cat)) if category_names else str(cat)
        handles.append(plt.Rectangle((0, 0), 1, 1, color=c / 255.0, label=f"{k}: {name}"))
    if (np.asarray(ids) == 0).any():
        handles.append(plt.Rectangle((0, 0), 1, 1, color=VOID_COLOR / 255.0, label="void"))
    if handles:
        fig.legend(handles=handles, loc="lower center", ncol=min(len(handles), 6), fontsize=6, frameon=False)
    return _save(fig, path)


def plot_timings(report, path: str | Path) -> Path:
    ks = [r.k for r in report.rows if r.k > 0]
    med = [r.median_ms for r in report.rows if r.k > 0]
    lo = [r.p10_ms for r in report.rows if r.k > 0]
    hi = [r.p90_ms for r in report.rows if r.k > 0]
    fig, ax = plt.subplots(figsize=(4.5, 3.2), dpi=100)
    ax.plot(ks, med, "o-", label="median")
    ax.fill_between(ks, lo, hi, alpha=0.3, label="p10-p90")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("instances K")
    ax.set_ylabel("mask heads (ms)")
    ax.set_title(f"mask-head share at K={max(ks) if ks else 0}: {report.mask_share:.1%}", fontsize=8)
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_sweep(rows: list[dict], path: str | Path, metric: str = "AP") -> Path:
    """One point per (arm, seed) with the per-arm median marked."""
    arms = list(dict.fromkeys(r["arm"] for r in rows))
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(arms) + 2), 3.2), dpi=100)
    for i, a in enumerate(arms):
        vals = [float(r[metric]) for r in rows if r["arm"] == a]
        ax.scatter([i] * len(vals), vals, s=14, alpha=0.6, color="tab:blue")
        ax.hlines(np.median(vals), i - 0.3, i + 0.3, color="tab:red")
    ax.set_xticks(range(len(arms)))
    ax.set_xticklabels(arms, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel(metric)
    return _save(fig, path)


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
