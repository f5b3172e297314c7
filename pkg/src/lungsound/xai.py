"""Grad-CAM, Integrated Gradients and Shapley attributions for the hybrid model.

Every method explains the pre-softmax logit of the target class.  None of
them touches the parameter arrays.
"""

import json
import math
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from . import autograd as ag
from .augmentation import make_rng
from .features import FEATURE_NAMES, N_FRAMES, N_MELS, mel_centers_hz
from .model import ModelError, forward, fuse_and_classify, hand_encoder, leaves

METHODS = ("grad_cam", "integrated_gradients", "shap", "multi_baseline_ig")
MAX_EXACT_FEATURES = 14


class AttributionError(RuntimeError):
    pass


@dataclass
class AttributionMap:
    method: str
    target_class: int
    values: np.ndarray
    baseline: str = ""
    diagnostics: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise AttributionError(f"unknown attribution method {self.method!r}")

    def save(self, stem):
        """``<stem>.json`` metadata plus ``<stem>.bin`` little-endian float32 values."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        stem.with_suffix(".bin").write_bytes(np.ascontiguousarray(self.values, dtype="<f4").tobytes())
        doc = {
            "method": self.method,
            "target_class": self.target_class,
            "shape": list(self.values.shape),
            "dtype": "float32",
            "baseline": self.baseline,
            "diagnostics": self.diagnostics,
            "metadata": self.metadata,
        }
        stem.with_suffix(".json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, stem):
        stem = Path(stem).with_suffix("")
        doc = json.loads(stem.with_suffix(".json").read_text())
        values = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f4").reshape(doc["shape"])
        return cls(doc["method"], doc["target_class"], values.astype(np.float32),
                   doc["baseline"], doc["diagnostics"], doc["metadata"])


def _one_hot(n, k, c):
    g = np.zeros((n, k))
    g[:, c] = 1.0
    return g


def _batch1(a):
    return None if a is None else np.asarray(a, dtype=np.float64)[None]


# ---------------------------------------------------------------- Grad-CAM


def bilinear_resize(img, shape):
    """Half-pixel-centre bilinear resize with edge clamping."""
    def coords(n_in, n_out):
        return np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)

    rows = np.array([np.interp(coords(img.shape[1], shape[1]), np.arange(img.shape[1]), r) for r in img])
    return np.array([
        np.interp(coords(img.shape[0], shape[0]), np.arange(img.shape[0]), col) for col in rows.T
    ]).T


def minmax(a):
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def grad_cam_raw(params, config, mel, hand, target):
    """ReLU(sum_k alpha_k A_k) over the last conv feature maps, shape (M', T')."""
    if not config.uses_deep:
        raise AttributionError(f"Grad-CAM needs convolutional layers; variant {config.variant} has none")
    trace = forward(_batch1(mel), _batch1(hand), params, config, dtype=np.float64)
    trace.logits.backward(_one_hot(1, config.n_classes, target))
    A = trace.conv_maps.data[0]  # (M', T', C)
    dA = trace.conv_maps.grad[0]
    alpha = dA.mean(axis=(0, 1))
    return np.maximum(A @ alpha, 0.0), float(trace.logits.data[0, target])


def grad_cam(params, config, mel, hand, target):
    raw, logit = grad_cam_raw(params, config, mel, hand, target)
    up = minmax(bilinear_resize(raw, (config.n_mels, config.n_frames)))
    return AttributionMap(
        "grad_cam", int(target), up, "none",
        {"raw_max": float(raw.max()), "raw_shape": list(raw.shape)},
        {"logit": logit},
    )


# ------------------------------------------------------- Integrated Gradients


def silent_baseline(shape=(N_MELS, N_FRAMES)):
    """Mel input of a silent clip: the log-mel floor is constant, so it standardizes to zeros."""
    return np.zeros(shape)


def riemann_ig(grad_fn, x, baseline, steps=64):
    """Midpoint-rule path integral; ``grad_fn`` maps a stack of points to (outputs, gradients)."""
    if steps < 1:
        raise AttributionError("need at least one integration step")
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if x.shape != baseline.shape:
        raise AttributionError(f"baseline shape {baseline.shape} differs from input shape {x.shape}")
    alphas = (np.arange(steps) + 0.5) / steps
    total = np.zeros_like(x)
    for s, a in enumerate(alphas):
        _, g = grad_fn((baseline + a * (x - baseline))[None])
        if not np.all(np.isfinite(g)):
            raise AttributionError(f"non-finite gradient at integration step {s}")
        total += g[0]
    return (x - baseline) * total / steps


def _logit_and_mel_grad(params, config, hand, target, chunk=8):
    def fn(points):
        outs, grads = [], []
        for s in range(0, len(points), chunk):
            p = points[s:s + chunk]
            h = None if hand is None else np.repeat(np.asarray(hand, dtype=np.float64)[None], len(p), axis=0)
            trace = forward(p, h, params, config, dtype=np.float64)
            trace.logits.backward(_one_hot(len(p), config.n_classes, target))
            outs.append(trace.logits.data[:, target])
            grads.append(trace.mel.grad)
        return np.concatenate(outs), np.concatenate(grads)
    return fn


def integrated_gradients(params, config, mel, hand, target, baseline=None, steps=64):
    """IG on the mel input with the handcrafted input held at its actual value."""
    if not config.uses_deep:
        raise AttributionError(f"variant {config.variant} has no mel input to attribute")
    if steps < 8:
        raise AttributionError(f"IG needs at least 8 steps, got {steps}")
    mel = np.asarray(mel, dtype=np.float64)
    baseline = silent_baseline(mel.shape) if baseline is None else np.asarray(baseline, dtype=np.float64)
    hand = hand if config.uses_hand else None
    fn = _logit_and_mel_grad(params, config, hand, target)
    ig = riemann_ig(fn, mel, baseline, steps)
    f_ends, _ = fn(np.stack([mel, baseline]))
    delta = float(f_ends[0] - f_ends[1])
    return AttributionMap(
        "integrated_gradients", int(target), ig, "silence" if not np.any(baseline) else "custom",
        {"completeness_gap": abs(float(ig.sum()) - delta), "logit_delta": delta, "steps": steps},
        {"logit": float(f_ends[0])},
    )


def multi_baseline_ig(params, config, mel, hand, target, n_baselines=8, noise_std=0.1, steps=64, seed=0):
    """Pixel-level Shapley approximation: IG averaged over noise-perturbed silent baselines."""
    rng = make_rng(seed, 0)
    maps, gaps = [], []
    for b in range(n_baselines):
        base = silent_baseline(np.shape(mel)) + noise_std * rng.standard_normal(np.shape(mel))
        m = integrated_gradients(params, config, mel, hand, target, base, steps)
        maps.append(m.values)
        gaps.append(m.diagnostics["completeness_gap"])
    return AttributionMap(
        "multi_baseline_ig", int(target), np.mean(maps, axis=0),
        f"{n_baselines} silent baselines + N(0, {noise_std}^2) noise",
        {"mean_completeness_gap": float(np.mean(gaps))},
        {"approximation": "spectrogram Shapley values approximated by multi-baseline Integrated Gradients"},
    )


# ------------------------------------------------------------------ Shapley


def _masked_inputs(x, mean, masks, features):
    """Rows of x with features outside each coalition replaced by the background mean."""
    out = np.repeat(x[None], len(masks), axis=0)
    for j, f in enumerate(features):
        off = ~masks[:, j]
        out[off, f] = mean[f]
    return out


def shap_exact(predict, x, background, features=None):
    """Exact Shapley values by coalition enumeration (at most 14 players).

    Features outside ``features`` stay at their values in ``x``.  Returns a
    vector the length of ``x`` with zeros for non-players.
    """
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(background, dtype=np.float64).mean(axis=0)
    features = list(range(len(x))) if features is None else list(features)
    n = len(features)
    if n > MAX_EXACT_FEATURES:
        raise AttributionError(f"exact Shapley over {n} features exceeds the limit of {MAX_EXACT_FEATURES}")
    masks = np.array(list(product((False, True), repeat=n)), dtype=bool).reshape(-1, n)
    values = np.asarray(predict(_masked_inputs(x, mean, masks, features)), dtype=np.float64)
    index = {tuple(m): i for i, m in enumerate(masks)}
    weight = [math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)]
    phi = np.zeros(len(x))
    for j, f in enumerate(features):
        acc = 0.0
        for i, m in enumerate(masks):
            if m[j]:
                continue
            with_j = m.copy()
            with_j[j] = True
            acc += weight[int(m.sum())] * (values[index[tuple(with_j)]] - values[i])
        phi[f] = acc
    return phi


def shap_sampled(predict, x, background, n_permutations=100, seed=0, features=None):
    """Permutation-sampling Shapley estimate with per-feature Monte-Carlo standard errors.

    Returns (phi, standard_error).
    """
    if n_permutations < 100:
        raise AttributionError(f"need at least 100 permutations, got {n_permutations}")
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(background, dtype=np.float64).mean(axis=0)
    features = list(range(len(x))) if features is None else list(features)
    n = len(features)
    rng = make_rng(seed, 0)
    contrib = np.zeros((n_permutations, n))
    for p in range(n_permutations):
        order = rng.permutation(n)
        masks = np.zeros((n + 1, n), dtype=bool)
        for step, j in enumerate(order):
            masks[step + 1:, j] = True
        v = np.asarray(predict(_masked_inputs(x, mean, masks, features)), dtype=np.float64)
        contrib[p, order] = np.diff(v)
    phi = np.zeros(len(x))
    se = np.zeros(len(x))
    phi[features] = contrib.mean(axis=0)
    se[features] = contrib.std(axis=0, ddof=1) / np.sqrt(n_permutations)
    return phi, se


def hand_logit_fn(params, config, mel, target):
    """Target logit as a function of a batch of handcrafted vectors, mel input fixed.

    The deep-branch embedding is computed once and reused for every query.
    """
    if not config.uses_hand:
        raise AttributionError(f"variant {config.variant} has no handcrafted branch")
    P = leaves(params, np.float64, requires_grad=False)
    context = None
    if config.uses_deep:
        trace = forward(_batch1(mel), np.zeros((1, config.n_hand)), params, config, dtype=np.float64)
        context = trace.context.data

    def predict(H):
        H = np.atleast_2d(np.asarray(H, dtype=np.float64))
        emb = hand_encoder(ag.Tensor(H), P, config)
        parts = [emb] if context is None else [ag.Tensor(np.repeat(context, len(H), axis=0)), emb]
        _, logits, _ = fuse_and_classify(parts, P, config)
        return logits.data[:, target]

    return predict


def shap_hand(params, config, mel, hand, target, background, n_permutations=100, seed=0):
    predict = hand_logit_fn(params, config, mel, target)
    phi, se = shap_sampled(predict, hand, background, n_permutations, seed)
    full = float(predict(np.asarray(hand)[None])[0])
    empty = float(predict(np.asarray(background, dtype=np.float64).mean(axis=0)[None])[0])
    return AttributionMap(
        "shap", int(target), phi, f"mean of {len(background)} background samples",
        {"efficiency_gap": abs(float(phi.sum()) - (full - empty)), "standard_error": se.tolist()},
        {"feature_names": list(FEATURE_NAMES), "n_permutations": n_permutations, "logit": full},
    )


def global_importance(params, config, mel_set, hand_set, background, targets, n_samples=10,
                      n_permutations=100, seed=0):
    """Mean |phi| per handcrafted feature over ``n_samples`` samples, ranked descending.

    Returns a list of (feature name, importance) pairs.
    """
    if n_samples < 10 or len(hand_set) < n_samples:
        raise AttributionError(f"global importance needs at least 10 samples (have {len(hand_set)})")
    pick = make_rng(seed, 1).choice(len(hand_set), n_samples, replace=False)
    total = np.zeros(len(FEATURE_NAMES))
    for i in pick:
        predict = hand_logit_fn(params, config, None if mel_set is None else mel_set[i], int(targets[i]))
        phi, _ = shap_sampled(predict, hand_set[i], background, n_permutations, seed + int(i))
        total += np.abs(phi)
    imp = total / n_samples
    order = sorted(range(len(imp)), key=lambda j: (-imp[j], j))
    return [(FEATURE_NAMES[j], float(imp[j])) for j in order]


def band_energy_summary(heatmap, bands=((20, 400), (400, 2000), (2000, 8000))):
    """Share of total heatmap mass falling in each frequency band (by mel-band centre)."""
    heatmap = np.asarray(heatmap, dtype=np.float64)
    centers = mel_centers_hz()
    if heatmap.shape[0] != len(centers):
        raise ModelError(f"heatmap has {heatmap.shape[0]} rows, expected {len(centers)}")
    row_mass = heatmap.sum(axis=1)
    total = row_mass.sum()
    out = {}
    for lo, hi in bands:
        sel = (centers >= lo) & (centers < hi)
        out[f"{lo}-{hi}Hz"] = float(row_mass[sel].sum() / total) if total > 0 else 0.0
    return out
