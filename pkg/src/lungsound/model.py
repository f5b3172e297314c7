"""Hybrid CNN-BiLSTM-attention classifier with a handcrafted-feature branch.

Parameters live in a flat ``dict[str, np.ndarray]``.  ``forward`` wraps them
in autograd leaves for one call and returns a ``ForwardTrace`` holding every
intermediate needed for backprop and attribution; the arrays themselves are
never mutated here.  Batch-norm running statistics observed in train mode
come back in ``trace.bn_updates`` for the trainer to fold in.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag

CLASSES = ("Asthma", "Bronchial", "COPD", "Healthy", "Pneumonia")
VARIANTS = ("FullHybrid", "DeepOnly", "HandcraftedOnly", "CnnOnly", "NoAttention")

BN_MOMENTUM = 0.9
BN_EPS = 1e-5
FORGET_BIAS = 1.0


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    conv_blocks: list = field(default_factory=lambda: [
        {"filters": 32, "kernel": 3, "pool": 2},
        {"filters": 64, "kernel": 3, "pool": 2},
        {"filters": 128, "kernel": 3, "pool": 2},
    ])
    conv_dropout: float = 0.2
    lstm_units: int = 128
    attention_dim: int = 128
    hand_hidden: list = field(default_factory=lambda: [128, 128])
    hand_dropout: float = 0.3
    fusion_hidden: int = 256
    fusion_dropout: float = 0.3
    n_classes: int = 5
    n_mels: int = 128
    n_frames: int = 247
    n_hand: int = 70
    variant: str = "FullHybrid"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        self.conv_blocks = [dict(b) for b in self.conv_blocks]
        self.hand_hidden = list(self.hand_hidden)

    @property
    def uses_deep(self):
        return self.variant != "HandcraftedOnly"

    @property
    def uses_hand(self):
        return self.variant != "DeepOnly"

    @property
    def uses_lstm(self):
        return self.variant in ("FullHybrid", "DeepOnly", "NoAttention")

    def conv_output_shape(self):
        """(M', T', C) after the convolutional stack."""
        h, w = self.n_mels, self.n_frames
        for b in self.conv_blocks:
            h, w = h // b["pool"], w // b["pool"]
        return h, w, self.conv_blocks[-1]["filters"]

    def deep_width(self):
        if not self.uses_deep:
            return 0
        return 2 * self.lstm_units if self.uses_lstm else self.conv_blocks[-1]["filters"]

    def fused_width(self):
        return self.deep_width() + (self.hand_hidden[-1] if self.uses_hand else 0)

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------ parameters


def _he_normal(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _xavier_uniform(rng, shape, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, shape)


def _bn(p, prefix, n):
    p[f"{prefix}.gamma"] = np.ones(n)
    p[f"{prefix}.beta"] = np.zeros(n)
    p[f"{prefix}.running_mean"] = np.zeros(n)
    p[f"{prefix}.running_var"] = np.ones(n)


def init_params(config, seed=0):
    """Fresh float32 parameters for ``config`` (He-normal before ReLU, Xavier-uniform elsewhere)."""
    rng = np.random.default_rng(seed)
    p = {}
    if config.uses_deep:
        cin = 1
        for i, b in enumerate(config.conv_blocks):
            k, f = b["kernel"], b["filters"]
            p[f"conv{i}.kernel"] = _he_normal(rng, (k, k, cin, f), k * k * cin)
            p[f"conv{i}.bias"] = np.zeros(f)
            _bn(p, f"conv{i}.bn", f)
            cin = f
        if config.uses_lstm:
            m, _, c = config.conv_output_shape()
            d, u = m * c, config.lstm_units
            for side in ("fwd", "bwd"):
                p[f"lstm.{side}.Wx"] = _xavier_uniform(rng, (d, 4 * u), d, 4 * u)
                p[f"lstm.{side}.Wh"] = _xavier_uniform(rng, (u, 4 * u), u, 4 * u)
                bias = np.zeros(4 * u)
                bias[u:2 * u] = FORGET_BIAS
                p[f"lstm.{side}.b"] = bias
        if config.variant in ("FullHybrid", "DeepOnly"):
            da, h2 = config.attention_dim, 2 * config.lstm_units
            p["attention.W"] = _xavier_uniform(rng, (da, h2), h2, da)
            p["attention.b"] = np.zeros(da)
            p["attention.v"] = _xavier_uniform(rng, (da,), da, 1)
    if config.uses_hand:
        p["input.hand_mean"] = np.zeros(config.n_hand)
        p["input.hand_std"] = np.ones(config.n_hand)
        nin = config.n_hand
        for i, width in enumerate(config.hand_hidden):
            p[f"hand{i}.kernel"] = _he_normal(rng, (nin, width), nin)
            p[f"hand{i}.bias"] = np.zeros(width)
            _bn(p, f"hand{i}.bn", width)
            nin = width
    head_in = config.fused_width()
    if config.variant != "HandcraftedOnly":
        p["fusion.kernel"] = _he_normal(rng, (head_in, config.fusion_hidden), head_in)
        p["fusion.bias"] = np.zeros(config.fusion_hidden)
        head_in = config.fusion_hidden
    p["classifier.kernel"] = _xavier_uniform(rng, (head_in, config.n_classes), head_in, config.n_classes)
    p["classifier.bias"] = np.zeros(config.n_classes)
    return {k: v.astype(np.float32) for k, v in p.items()}


def is_trainable(name):
    return not (name.startswith("input.") or name.endswith(("running_mean", "running_var")))


def is_decayed(name):
    """Weight matrices and kernels get L2; biases and batch-norm affine terms do not."""
    return name.endswith((".kernel", ".Wx", ".Wh")) or name in ("attention.W", "attention.v")


def count_parameters(params):
    return int(sum(v.size for k, v in params.items() if is_trainable(k)))


def leaves(params, dtype=None, requires_grad=True):
    out = {}
    for k, v in params.items():
        arr = v if dtype is None else v.astype(dtype)
        out[k] = ag.Tensor(arr, requires_grad=requires_grad and is_trainable(k), name=k)
    return out


def _as_leaves(P):
    if P and isinstance(next(iter(P.values())), ag.Tensor):
        return P
    return leaves(P)


# ------------------------------------------------------------ components


def conv_encoder(mel, P, config, train=False, rng=None, bn_updates=None):
    """(N, M, T) or (N, M, T, 1) spectrogram -> F_c of shape (N, M', T', C)."""
    P = _as_leaves(P)
    x = ag.as_tensor(mel)
    if x.data.ndim == 3:
        x = ag.reshape(x, x.shape + (1,))
    if x.shape[1:] != (config.n_mels, config.n_frames, 1):
        raise ModelError(f"mel input shape {x.shape[1:3]} does not match config ({config.n_mels}, {config.n_frames})")
    for i, b in enumerate(config.conv_blocks):
        x = ag.conv2d(x, P[f"conv{i}.kernel"], P[f"conv{i}.bias"])
        x, stats = _batch_norm(x, P, f"conv{i}.bn", train, bn_updates)
        x = ag.relu(x)
        x = ag.max_pool2d(x, b["pool"])
        x = ag.dropout(x, config.conv_dropout, rng if train else None)
    return x


def _batch_norm(x, P, prefix, train, bn_updates):
    out, stats = ag.batch_norm(
        x, P[f"{prefix}.gamma"], P[f"{prefix}.beta"],
        P[f"{prefix}.running_mean"].data, P[f"{prefix}.running_var"].data,
        train, BN_EPS,
    )
    if stats is not None and bn_updates is not None:
        bn_updates[prefix] = stats
    return out, stats


def flatten_frequency(fc):
    """(N, M', T', C) -> (N, T', M'*C), channels-last row-major per frame."""
    n, m, t, c = fc.shape
    return ag.reshape(ag.transpose(fc, (0, 2, 1, 3)), (n, t, m * c))


def _lstm(seq, Wx, Wh, b):
    n, t, _ = seq.shape
    u = Wh.shape[0]
    xproj = ag.matmul(seq, Wx) + b
    h = ag.Tensor(np.zeros((n, u), dtype=seq.dtype))
    c = ag.Tensor(np.zeros((n, u), dtype=seq.dtype))
    outs = []
    for s in range(t):
        gates = xproj[:, s, :] + ag.matmul(h, Wh)
        i = ag.sigmoid(gates[:, :u])
        f = ag.sigmoid(gates[:, u:2 * u])
        g = ag.tanh(gates[:, 2 * u:3 * u])
        o = ag.sigmoid(gates[:, 3 * u:])
        c = f * c + i * g
        h = o * ag.tanh(c)
        outs.append(h)
    return outs


def bilstm(seq, P):
    """(N, T, D) -> (N, T, 2U): forward pass and time-reversed pass, concatenated per frame."""
    P = _as_leaves(P)
    seq = ag.as_tensor(seq)
    if not np.all(np.isfinite(seq.data)):
        raise ModelError("non-finite values in BiLSTM input")
    fwd = _lstm(seq, P["lstm.fwd.Wx"], P["lstm.fwd.Wh"], P["lstm.fwd.b"])
    rev = ag.getitem(seq, (slice(None), slice(None, None, -1)))
    bwd = _lstm(rev, P["lstm.bwd.Wx"], P["lstm.bwd.Wh"], P["lstm.bwd.b"])[::-1]
    return ag.concat([ag.stack(fwd, axis=1), ag.stack(bwd, axis=1)], axis=-1)


def attention(H, P):
    """Additive attention over time; returns (context (N, 2U), weights (N, T))."""
    P = _as_leaves(P)
    H = ag.as_tensor(H)
    proj = ag.tanh(ag.matmul(H, ag.transpose(P["attention.W"], (1, 0))) + P["attention.b"])
    scores = ag.sum(proj * P["attention.v"], axis=-1)
    alpha = ag.softmax(scores, axis=-1)
    n, t = alpha.shape
    context = ag.sum(H * ag.reshape(alpha, (n, t, 1)), axis=1)
    return context, alpha


def hand_encoder(xh, P, config, train=False, rng=None, bn_updates=None):
    """(N, 70) -> (N, hand_hidden[-1]); input standardized by the stored train statistics."""
    P = _as_leaves(P)
    x = ag.as_tensor(xh)
    if x.shape[-1] != config.n_hand:
        raise ModelError(f"handcrafted input has {x.shape[-1]} features, expected {config.n_hand}")
    x = (x - P["input.hand_mean"]) * ag.Tensor(1.0 / P["input.hand_std"].data)
    for i in range(len(config.hand_hidden)):
        x = ag.matmul(x, P[f"hand{i}.kernel"]) + P[f"hand{i}.bias"]
        x, _ = _batch_norm(x, P, f"hand{i}.bn", train, bn_updates)
        x = ag.relu(x)
    return ag.dropout(x, config.hand_dropout, rng if train else None)


def fuse_and_classify(parts, P, config, train=False, rng=None):
    """Concatenate branch embeddings, fusion dense + ReLU + dropout, linear, softmax.

    Returns (fused, logits, probabilities).
    """
    P = _as_leaves(P)
    parts = [ag.as_tensor(p) for p in parts]
    z = parts[0] if len(parts) == 1 else ag.concat(parts, axis=-1)
    if z.shape[-1] != config.fused_width():
        raise ModelError(f"fused width {z.shape[-1]} does not match config ({config.fused_width()})")
    h = z
    if "fusion.kernel" in P:
        h = ag.relu(ag.matmul(z, P["fusion.kernel"]) + P["fusion.bias"])
        h = ag.dropout(h, config.fusion_dropout, rng if train else None)
    logits = ag.matmul(h, P["classifier.kernel"]) + P["classifier.bias"]
    return z, logits, ag.softmax(logits, axis=-1)


# ------------------------------------------------------------ full network


@dataclass
class ForwardTrace:
    mel: object
    hand: object
    leaves: dict
    conv_maps: object = None  # A_k, (N, M', T', C)
    lstm_out: object = None  # h_t, (N, T', 2U)
    attention: object = None  # alpha_t, (N, T')
    context: object = None  # deep embedding
    hand_embedding: object = None
    fused: object = None
    logits: object = None
    probs: object = None
    bn_updates: dict = field(default_factory=dict)


def forward(mel, hand, params, config, train=False, rng=None, dtype=None, input_grad=True):
    """Run the configured variant on a batch.

    mel: (N, n_mels, n_frames) or None for HandcraftedOnly; hand: (N, 70) or
    None for DeepOnly.  ``dtype`` overrides the compute precision (float64
    for gradient checks and attribution).  ``input_grad=False`` skips the
    input gradients, which training never needs.
    """
    dtype = np.dtype(dtype or next(iter(params.values())).dtype)
    P = leaves(params, dtype)
    trace = ForwardTrace(mel=None, hand=None, leaves=P)
    parts = []
    if config.uses_deep:
        if mel is None:
            raise ModelError(f"variant {config.variant} needs a mel-spectrogram input")
        trace.mel = ag.Tensor(np.asarray(mel, dtype=dtype), requires_grad=input_grad, name="mel")
        fc = conv_encoder(trace.mel, P, config, train, rng, trace.bn_updates)
        trace.conv_maps = fc
        if config.uses_lstm:
            H = bilstm(flatten_frequency(fc), P)
            trace.lstm_out = H
            if config.variant == "NoAttention":
                trace.context = ag.mean(H, axis=1)
            else:
                trace.context, trace.attention = attention(H, P)
        else:
            trace.context = ag.mean(fc, axis=(1, 2))
        parts.append(trace.context)
    if config.uses_hand:
        if hand is None:
            raise ModelError(f"variant {config.variant} needs a handcrafted input")
        trace.hand = ag.Tensor(np.asarray(hand, dtype=dtype), requires_grad=input_grad, name="hand")
        trace.hand_embedding = hand_encoder(trace.hand, P, config, train, rng, trace.bn_updates)
        parts.append(trace.hand_embedding)
    trace.fused, trace.logits, trace.probs = fuse_and_classify(parts, P, config, train, rng)
    return trace


def collect_grads(trace):
    """Parameter gradients (zeros where none flowed) and input gradients."""
    if trace is None or trace.probs is None:
        raise ModelError("no forward trace to differentiate")
    grads = {}
    for k, t in trace.leaves.items():
        if t.requires_grad:
            grads[k] = t.grad if t.grad is not None else np.zeros_like(t.data)
    inputs = {}
    for name in ("mel", "hand"):
        t = getattr(trace, name)
        if t is not None:
            inputs[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return grads, inputs


def backward(trace, upstream, wrt="probs"):
    """Backpropagate ``upstream`` = dL/d(probs) (or dL/d(logits)) through ``trace``.

    A trace supports a single backward call.
    """
    if trace is None or getattr(trace, wrt, None) is None:
        raise ModelError("backward needs the trace of a forward call")
    getattr(trace, wrt).backward(np.asarray(upstream))
    return collect_grads(trace)


def apply_bn_updates(params, bn_updates, momentum=BN_MOMENTUM):
    """Fold batch statistics into running averages (in place)."""
    for prefix, (mu, var) in bn_updates.items():
        rm, rv = params[f"{prefix}.running_mean"], params[f"{prefix}.running_var"]
        rm[...] = momentum * rm + (1 - momentum) * mu
        rv[...] = momentum * rv + (1 - momentum) * var


def predict_proba(params, config, mel=None, hand=None, batch_size=16):
    """Eval-mode class probabilities, batched."""
    n = len(mel) if mel is not None else len(hand)
    out = []
    for s in range(0, n, batch_size):
        tr = forward(
            None if mel is None else mel[s:s + batch_size],
            None if hand is None else hand[s:s + batch_size],
            params, config, train=False,
        )
        out.append(tr.probs.data)
    return np.concatenate(out, axis=0)


# ------------------------------------------------------------ checkpoints
#
# <stem>.json: {"format", "config", "tensors": [{"name", "shape", "dtype",
#               "offset", "nbytes"}], "metadata": {...}}
# <stem>.bin:  tensors back to back, little-endian float32, in "tensors" order.

CHECKPOINT_FORMAT = "lungsound-checkpoint-v1"


def save_checkpoint(stem, params, config, metadata=None):
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    table = []
    offset = 0
    with open(stem.with_suffix(".bin"), "wb") as fh:
        for name in sorted(params):
            raw = np.ascontiguousarray(params[name], dtype="<f4").tobytes()
            fh.write(raw)
            table.append({
                "name": name,
                "shape": list(params[name].shape),
                "dtype": "float32",
                "offset": offset,
                "nbytes": len(raw),
            })
            offset += len(raw)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": config.to_dict(),
        "tensors": table,
        "metadata": metadata or {},
    }
    stem.with_suffix(".json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_checkpoint(stem):
    """Returns (params, config, metadata)."""
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    doc = json.loads(stem.with_suffix(".json").read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ModelError(f"{stem}: not a checkpoint (format {doc.get('format')!r})")
    blob = stem.with_suffix(".bin").read_bytes()
    params = {}
    for t in doc["tensors"]:
        raw = blob[t["offset"]:t["offset"] + t["nbytes"]]
        params[t["name"]] = np.frombuffer(raw, dtype="<f4").reshape(t["shape"]).astype(np.float32)
    return params, ModelConfig(**doc["config"]), doc["metadata"]
