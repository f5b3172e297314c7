"""Deterministic SVG figures drawn straight from report JSON; rasters embed as base64 PNG."""

import base64
import struct
import zlib
from html import escape

import numpy as np

# viridis sampled at nine evenly spaced stops
_VIRIDIS = np.array([
    (0x44, 0x01, 0x54), (0x48, 0x28, 0x78), (0x3E, 0x49, 0x89), (0x31, 0x68, 0x8E), (0x26, 0x82, 0x8E),
    (0x1F, 0x9E, 0x89), (0x35, 0xB7, 0x79), (0x6E, 0xCE, 0x58), (0xFD, 0xE7, 0x25),
], dtype=np.float64)

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")
OVERLAY_ALPHA = 0.45


def viridis(values):
    """Map values in [0, 1] to uint8 RGB."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0, 1) * (len(_VIRIDIS) - 1)
    lo = np.floor(v).astype(int)
    hi = np.minimum(lo + 1, len(_VIRIDIS) - 1)
    t = (v - lo)[..., None]
    return np.round(_VIRIDIS[lo] * (1 - t) + _VIRIDIS[hi] * t).astype(np.uint8)


def encode_png(rgb):
    """Minimal 8-bit RGB PNG (no filtering) for an (H, W, 3) uint8 array."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    raw = b"".join(b"\x00" + rgb[y].tobytes() for y in range(h))

    def chunk(tag, data):
        body = tag + data
        return struct.pack(">I", len(data)) + body + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF)

    return (b"\x89PNG\r\n\x1a\n"
            + chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0))
            + chunk(b"IDAT", zlib.compress(raw, 9))
            + chunk(b"IEND", b""))


def _png_uri(rgb):
    return "data:image/png;base64," + base64.b64encode(encode_png(rgb)).decode("ascii")


def _f(x):
    return f"{x:.2f}".rstrip("0").rstrip(".")


def _svg(width, height, body):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n'
            + "\n".join(body) + "\n</svg>\n")


def _text(x, y, s, anchor="middle", size=11, extra=""):
    return f'<text x="{_f(x)}" y="{_f(y)}" text-anchor="{anchor}" font-size="{size}"{extra}>{escape(str(s))}</text>'


def _polyline(xs, ys, color, width=1.5, dash=None):
    pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in zip(xs, ys))
    d = f' stroke-dasharray="{dash}"' if dash else ""
    return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"{d}/>'


def _axes(x0, y0, w, h, xlabel, ylabel, xticks, yticks, xr, yr):
    body = [f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#333"/>']
    for v in xticks:
        x = x0 + (v - xr[0]) / (xr[1] - xr[0]) * w
        body.append(_text(x, y0 + h + 14, _f(v)))
    for v in yticks:
        y = y0 + h - (v - yr[0]) / (yr[1] - yr[0]) * h
        body.append(_text(x0 - 5, y + 4, _f(v), anchor="end"))
    body.append(_text(x0 + w / 2, y0 + h + 30, xlabel))
    body.append(_text(x0 - 38, y0 + h / 2, ylabel, extra=f' transform="rotate(-90 {_f(x0 - 38)} {_f(y0 + h / 2)})"'))
    return body


def confusion_svg(cm, classes, title="Confusion matrix"):
    cm = np.asarray(cm)
    n = len(classes)
    cell, x0, y0 = 60, 110, 50
    peak = max(int(cm.max()), 1)
    body = [_text(x0 + n * cell / 2, 20, title, size=13)]
    for i in range(n):
        for j in range(n):
            shade = viridis(cm[i, j] / peak)
            fill = "#%02x%02x%02x" % tuple(int(c) for c in shade)
            body.append(f'<rect x="{x0 + j * cell}" y="{y0 + i * cell}" width="{cell}" height="{cell}" fill="{fill}"/>')
            ink = "#000" if cm[i, j] / peak > 0.6 else "#fff"
            body.append(_text(x0 + (j + 0.5) * cell, y0 + (i + 0.5) * cell + 4, int(cm[i, j]), extra=f' fill="{ink}"'))
        body.append(_text(x0 - 6, y0 + (i + 0.5) * cell + 4, classes[i], anchor="end"))
        body.append(_text(x0 + (i + 0.5) * cell, y0 + n * cell + 16, classes[i]))
    body.append(_text(x0 + n * cell / 2, y0 + n * cell + 36, "Predicted"))
    body.append(_text(20, y0 + n * cell / 2, "True", extra=f' transform="rotate(-90 20 {_f(y0 + n * cell / 2)})"'))
    return _svg(x0 + n * cell + 20, y0 + n * cell + 50, body)


def roc_svg(curves, aucs, title="One-vs-rest ROC"):
    """``curves``: {class: {"fpr": [...], "tpr": [...]}}; ``aucs``: {class: auc or None}."""
    x0, y0, w, h = 60, 40, 320, 320
    ticks = [0, 0.25, 0.5, 0.75, 1]
    body = [_text(x0 + w / 2, 20, title, size=13)]
    body += _axes(x0, y0, w, h, "False positive rate", "True positive rate", ticks, ticks, (0, 1), (0, 1))
    body.append(_polyline([x0, x0 + w], [y0 + h, y0], "#999", 1, "4 3"))
    for i, (name, c) in enumerate(curves.items()):
        xs = [x0 + v * w for v in c["fpr"]]
        ys = [y0 + h - v * h for v in c["tpr"]]
        color = PALETTE[i % len(PALETTE)]
        body.append(_polyline(xs, ys, color))
        auc = aucs.get(name)
        label = f"{name} (AUC {auc:.4f})" if auc is not None else name
        body.append(f'<rect x="{x0 + w + 15}" y="{y0 + 10 + 18 * i}" width="12" height="3" fill="{color}"/>')
        body.append(_text(x0 + w + 32, y0 + 15 + 18 * i, label, anchor="start"))
    return _svg(x0 + w + 190, y0 + h + 50, body)


def learning_curves_svg(logs, title="Learning curves"):
    """Two panels from EpochLog dicts: loss, and accuracy / macro-F1."""
    epochs = [r["epoch"] for r in logs]
    panels = [
        ("Loss", [("train_loss", "train"), ("val_loss", "val")]),
        ("Score", [("train_accuracy", "train acc"), ("val_accuracy", "val acc"), ("val_macro_f1", "val macro-F1")]),
    ]
    w, h = 300, 220
    body = [_text(400, 18, title, size=13)]
    xr = (min(epochs), max(max(epochs), min(epochs) + 1))
    xticks = sorted({xr[0], xr[1], (xr[0] + xr[1]) // 2})
    for p, (ylabel, series) in enumerate(panels):
        x0, y0 = 70 + p * 400, 40
        vals = [r[k] for k, _ in series for r in logs]
        lo, hi = min(vals + [0.0]), max(vals + [1.0])
        yticks = [lo + (hi - lo) * t for t in (0, 0.5, 1)]
        body += _axes(x0, y0, w, h, "Epoch", ylabel, xticks, yticks, xr, (lo, hi))
        for i, (key, label) in enumerate(series):
            xs = [x0 + (e - xr[0]) / (xr[1] - xr[0]) * w for e in epochs]
            ys = [y0 + h - (r[key] - lo) / (hi - lo) * h for r in logs]
            color = PALETTE[i]
            body.append(_polyline(xs, ys, color))
            body.append(f'<rect x="{x0 + 10}" y="{y0 + 10 + 15 * i}" width="12" height="3" fill="{color}"/>')
            body.append(_text(x0 + 27, y0 + 15 + 15 * i, label, anchor="start", size=10))
    return _svg(800, 310, body)


def _gray(img):
    v = np.asarray(img, dtype=np.float64)
    lo, hi = v.min(), v.max()
    v = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    g = np.round(v * 255).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=2)


def _raster(arr, colored):
    # low frequencies at the bottom
    arr = np.asarray(arr)[::-1]
    return _png_uri(viridis(arr) if colored else _gray(arr))


def _heat_panel(x0, y0, w, h, mel, overlay, title):
    body = [_text(x0 + w / 2, y0 - 6, title, size=12)]
    body.append(f'<image x="{x0}" y="{y0}" width="{w}" height="{h}" preserveAspectRatio="none" '
                f'href="{_raster(mel, False)}"/>')
    if overlay is not None:
        body.append(f'<image x="{x0}" y="{y0}" width="{w}" height="{h}" preserveAspectRatio="none" '
                    f'opacity="{OVERLAY_ALPHA}" href="{_raster(overlay, True)}"/>')
    body.append(f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#333"/>')
    return body


def heatmap_svg(mel, overlay=None, title=""):
    return _svg(420, 300, _heat_panel(30, 30, 360, 240, mel, overlay, title))


def _signed_unit(values):
    v = np.asarray(values, dtype=np.float64)
    m = np.abs(v).max()
    return np.zeros_like(v) if m == 0 else 0.5 + 0.5 * v / m


def _bar_panel(x0, y0, w, h, names, values, title, top=12):
    order = sorted(range(len(values)), key=lambda j: (-abs(values[j]), j))[:top]
    peak = max((abs(values[j]) for j in order), default=0.0) or 1.0
    body = [_text(x0 + w / 2, y0 - 6, title, size=12)]
    row = h / max(len(order), 1)
    mid = x0 + 110 + (w - 110) / 2
    body.append(f'<line x1="{_f(mid)}" y1="{y0}" x2="{_f(mid)}" y2="{y0 + h}" stroke="#333"/>')
    for r, j in enumerate(order):
        v = values[j]
        bw = abs(v) / peak * (w - 110) / 2
        x = mid if v >= 0 else mid - bw
        color = "#d62728" if v >= 0 else "#1f77b4"
        y = y0 + r * row
        body.append(f'<rect x="{_f(x)}" y="{_f(y + 2)}" width="{_f(bw)}" height="{_f(row - 4)}" fill="{color}"/>')
        body.append(_text(x0 + 105, y + row / 2 + 4, names[j], anchor="end", size=9))
    return body


def attribution_figure(mel, grad_cam=None, ig=None, shap=None, feature_names=None, title=""):
    """Up to four panels: mel, Grad-CAM overlay, IG overlay, SHAP bars."""
    body = [_text(760, 18, title, size=13)]
    x = 40
    panels = [("Mel-spectrogram", None)]
    if grad_cam is not None:
        panels.append(("Grad-CAM", grad_cam))
    if ig is not None:
        panels.append(("Integrated Gradients", _signed_unit(ig)))
    for name, overlay in panels:
        body += _heat_panel(x, 50, 330, 230, mel, overlay, name)
        x += 370
    if shap is not None:
        body += _bar_panel(x, 50, 330, 230, feature_names, list(shap), "SHAP (handcrafted)")
        x += 370
    return _svg(x + 20, 310, body)
