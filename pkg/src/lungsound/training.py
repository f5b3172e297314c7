"""Dataset manifests, stratified splitting, and the optimization loop."""

import copy
import csv
import json
import logging
from collections import Counter, defaultdict
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np
from threadpoolctl import threadpool_limits

from . import autograd as ag
from .augmentation import augment, make_rng
from .evaluation import class_metrics, confusion
from .features import extract
from .model import (
    CLASSES,
    apply_bn_updates,
    collect_grads,
    forward,
    init_params,
    is_decayed,
    predict_proba,
)

log = logging.getLogger(__name__)

PARTITIONS = ("train", "val", "test")
PROB_FLOOR = 1e-12

# top-level substream keys for make_rng
_SHUFFLE, _AUGMENT, _DROPOUT = 0, 1, 2


class ManifestError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


# ---------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestEntry:
    clip_id: str
    path: str
    label: str
    patient_id: str = None


@dataclass
class DatasetManifest:
    entries: list

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.label not in CLASSES:
                raise ManifestError(f"clip {e.clip_id!r}: label {e.label!r} not in {CLASSES}")
            if e.clip_id in seen:
                raise ManifestError(f"duplicate clip_id {e.clip_id!r}")
            seen.add(e.clip_id)

    def __len__(self):
        return len(self.entries)

    def class_counts(self):
        c = Counter(e.label for e in self.entries)
        return {k: c.get(k, 0) for k in CLASSES}

    @property
    def has_patient_ids(self):
        return any(e.patient_id for e in self.entries)

    @classmethod
    def read_csv(cls, path):
        """CSV with header ``clip_id,path,label,patient_id``; patient_id optional.

        Relative audio paths are resolved against the manifest's directory.
        """
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"clip_id", "path", "label"} - set(reader.fieldnames or ())
            if missing:
                raise ManifestError(f"{path}: missing columns {sorted(missing)}")
            entries = []
            for row in reader:
                audio = Path(row["path"])
                if not audio.is_absolute():
                    audio = path.parent / audio
                entries.append(ManifestEntry(
                    row["clip_id"], str(audio), row["label"], (row.get("patient_id") or "").strip() or None,
                ))
        return cls(entries)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("clip_id", "path", "label", "patient_id"))
            for e in self.entries:
                w.writerow((e.clip_id, e.path, e.label, e.patient_id or ""))


# ---------------------------------------------------------------- splitting


@dataclass
class SplitAssignment:
    assignment: dict  # clip_id -> partition
    seed: int
    patient_level: bool = False

    def ids(self, partition):
        return [c for c, p in self.assignment.items() if p == partition]

    def sizes(self):
        c = Counter(self.assignment.values())
        return {p: c.get(p, 0) for p in PARTITIONS}

    def to_dict(self):
        return {"seed": self.seed, "patient_level": self.patient_level, "assignment": dict(sorted(self.assignment.items()))}

    @classmethod
    def from_dict(cls, d):
        return cls(dict(d["assignment"]), d["seed"], d["patient_level"])


def _cell_counts(class_sizes, ratios, rng):
    """Integer (class x partition) table with rows summing to the class sizes
    and every cell within one of its exact quota.  Partition totals hit the
    rounded global quotas whenever the per-class bounds allow it and
    otherwise deviate as little as possible.

    Solved as a min-cost flow on the fractional parts; larger remainders are
    preferred, with a seeded jitter to break ties.
    """
    n_total = sum(class_sizes.values())
    targets = {"test": round(ratios[2] * n_total), "val": round(ratios[1] * n_total)}
    targets["train"] = n_total - targets["test"] - targets["val"]

    g = nx.DiGraph()
    base = {}
    supply = 0
    for k, n in class_sizes.items():
        bounds = {}
        for j, part in enumerate(PARTITIONS):
            q = ratios[j] * n
            lo, hi = int(np.floor(q)), int(np.ceil(q))
            if part != "train" and lo == 0 and hi >= 1:
                lo = 1  # keep every partition non-empty for every class
            bounds[part] = (q, lo, hi)
        # very small classes: non-empty val/test take precedence over the train band
        q, lo, hi = bounds["train"]
        room = n - bounds["val"][1] - bounds["test"][1]
        if lo > room:
            bounds["train"] = (q, room, room)
        extra = n
        for part in PARTITIONS:
            q, lo, hi = bounds[part]
            base[k, part] = lo
            extra -= lo
            if hi > lo:
                cost = -int(round(1e6 * (q - np.floor(q)))) - int(rng.integers(0, 1000))
                g.add_edge(("c", k), ("p", part), capacity=hi - lo, weight=cost)
        g.add_node(("c", k), demand=-extra)
        supply += extra
    # flow up to the partition quota is strongly rewarded, overflow is not
    for part in PARTITIONS:
        need = targets[part] - sum(base[k, part] for k in class_sizes)
        if need > 0:
            g.add_edge(("p", part), ("q", part), capacity=need, weight=-10 ** 9)
            g.add_edge(("q", part), "sink", weight=0)
        g.add_edge(("p", part), "sink", weight=0)
    g.add_node("sink", demand=supply)
    try:
        flow = nx.min_cost_flow(g)
    except nx.NetworkXUnfeasible as exc:
        raise ManifestError(f"no stratified split of class sizes {class_sizes} exists") from exc
    cells = {}
    for k in class_sizes:
        for part in PARTITIONS:
            cells[k, part] = base[k, part] + flow.get(("c", k), {}).get(("p", part), 0)
    totals = {p: sum(cells[k, p] for k in class_sizes) for p in PARTITIONS}
    if totals != targets:
        log.warning("partition sizes %s differ from the rounded quotas %s", totals, targets)
    return cells


def split_dataset(manifest, ratios=(0.70, 0.15, 0.15), seed=0, patient_level=None):
    """Stratified train/val/test assignment, grouped by patient when ids exist."""
    if len(manifest) == 0:
        raise ManifestError("cannot split an empty manifest")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ManifestError(f"split ratios must sum to 1, got {ratios}")
    if patient_level is None:
        patient_level = manifest.has_patient_ids
        if not patient_level:
            log.warning("manifest has no patient ids; splitting at clip level")
    rng = make_rng(seed, 0)
    by_class = defaultdict(list)
    for e in manifest.entries:
        by_class[e.label].append(e)
    if patient_level:
        assignment = _patient_split(by_class, ratios, rng)
    else:
        for k, items in by_class.items():
            if len(items) < 3:
                raise ManifestError(f"class {k} has {len(items)} clips; three non-empty partitions need at least 3")
        cells = _cell_counts({k: len(v) for k, v in sorted(by_class.items())}, ratios, rng)
        assignment = {}
        for k in sorted(by_class):
            ids = sorted(e.clip_id for e in by_class[k])
            order = rng.permutation(len(ids))
            n_test, n_val = cells[k, "test"], cells[k, "val"]
            for rank, i in enumerate(order):
                assignment[ids[i]] = "test" if rank < n_test else "val" if rank < n_test + n_val else "train"
    return SplitAssignment({e.clip_id: assignment[e.clip_id] for e in manifest.entries}, seed, patient_level)


def _patient_split(by_class, ratios, rng):
    # clips lacking a patient id form their own group
    groups = defaultdict(list)
    for items in by_class.values():
        for e in items:
            groups[e.patient_id or f"clip:{e.clip_id}"].append(e)
    # a patient belongs to its most frequent label (ties: first in class order)
    owner = defaultdict(list)
    for pid in sorted(groups):
        c = Counter(e.label for e in groups[pid])
        label = max(CLASSES, key=lambda k: (c.get(k, 0), -CLASSES.index(k)))
        owner[label].append(pid)
    assignment = {}
    for label in sorted(owner):
        pids = owner[label]
        if len(pids) < 3:
            raise ManifestError(f"class {label} has {len(pids)} patients; three non-empty partitions need at least 3")
        pids = [pids[i] for i in rng.permutation(len(pids))]
        pids.sort(key=lambda p: -len(groups[p]))  # stable: big patients first, seeded order within a size
        total = sum(len(groups[p]) for p in pids)
        target = [r * total for r in ratios]
        filled = [0, 0, 0]
        for i, pid in enumerate(pids):
            empty = [j for j in range(3) if filled[j] == 0]
            if len(pids) - i <= len(empty):
                j = empty[0]
            else:
                j = max(range(3), key=lambda j: (target[j] - filled[j], -j))
            filled[j] += len(groups[pid])
            for e in groups[pid]:
                assignment[e.clip_id] = PARTITIONS[j]
    return assignment


# ---------------------------------------------------------------- objective


def smoothed_scce(probs, labels, eps=0.05):
    """Label-smoothed categorical cross-entropy, averaged over the batch.

    Accepts a probability array or autograd tensor; returns the same kind.
    """
    p = ag.as_tensor(probs)
    n, c = p.shape
    labels = np.asarray(labels, dtype=int)
    target = np.full((n, c), eps / c, dtype=p.dtype)
    target[np.arange(n), labels] += 1.0 - eps
    loss = ag.neg(ag.sum(ag.log(p, floor=PROB_FLOOR) * ag.Tensor(target))) * (1.0 / n)
    return loss if isinstance(probs, ag.Tensor) else float(loss.data)


def l2_penalty(params):
    return float(sum(np.sum(np.asarray(v, dtype=np.float64) ** 2) for k, v in params.items() if is_decayed(k)))


def total_loss(data_loss, params, lam=1e-4):
    """Data loss plus ``lam`` times the squared norm of every weight matrix and kernel."""
    return data_loss + lam * l2_penalty(params)


def clip_by_global_norm(grads, max_norm):
    """Scale all gradients together so their joint L2 norm is at most ``max_norm``.

    Returns (grads, norm before, norm after).
    """
    norm = float(np.sqrt(sum(np.sum(np.asarray(g, dtype=np.float64) ** 2) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
        after = float(np.sqrt(sum(np.sum(np.asarray(g, dtype=np.float64) ** 2) for g in grads.values())))
        return grads, norm, after
    return grads, norm, norm


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v = {}, {}
        self.t = 0

    def step(self, params, grads, lr):
        """In-place update of ``params`` for every name in ``grads``."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, g in grads.items():
            g = np.asarray(g, dtype=np.float64)
            m = self.m.get(k, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(k, 0.0) * b2 + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            params[k][...] = params[k] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once the monitored loss has
    failed to improve by ``min_delta`` for ``patience`` consecutive epochs."""

    def __init__(self, lr, factor=0.5, patience=4, min_delta=1e-4, min_lr=0.0):
        self.lr = lr
        self.factor, self.patience, self.min_delta, self.min_lr = factor, patience, min_delta, min_lr
        self.best = np.inf
        self.wait = 0
        self.reductions = []  # epochs after which lr was cut

    def update(self, epoch, value):
        if value < self.best - self.min_delta:
            self.best = value
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.reductions.append(epoch)
                self.wait = 0
        return self.lr


class EarlyStopping:
    """Stop when the monitored score has not exceeded its best for ``patience`` epochs."""

    def __init__(self, patience=12):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = None
        self.wait = 0

    def update(self, epoch, score):
        """Returns True when ``score`` is a new best."""
        if score > self.best:
            self.best, self.best_epoch, self.wait = score, epoch, 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self):
        return self.wait >= self.patience


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    lr0: float = 3e-4
    batch_size: int = 16
    max_epochs: int = 80
    plateau_factor: float = 0.5
    plateau_patience: int = 4
    plateau_min_delta: float = 1e-4
    early_stop_patience: int = 12
    label_smoothing: float = 0.05
    l2: float = 1e-4
    clip_norm: float = 5.0
    seed: int = 0
    strict_deterministic: bool = False

    def to_dict(self):
        return asdict(self)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    train_accuracy: float
    val_accuracy: float
    val_macro_f1: float
    lr: float

    def to_dict(self):
        return asdict(self)


@dataclass
class Partition:
    """Features, integer labels and (optionally) waveforms of one split partition."""

    name: str
    clip_ids: list
    labels: np.ndarray
    mel: np.ndarray
    hand: np.ndarray
    clips: list = None  # StandardClip per sample; needed only for augmentation

    def __len__(self):
        return len(self.clip_ids)


@dataclass
class TrainResult:
    params: dict  # best checkpoint
    best_epoch: int
    best_val_macro_f1: float
    logs: list
    lr_reductions: list
    grad_norms: list  # (pre-clip, post-clip) per step
    augment_counts: dict
    stopped_early: bool


class AugmentCounter:
    """Counts augmented samples per partition; anything but train is a leak."""

    def __init__(self):
        self.counts = {p: 0 for p in PARTITIONS}

    def record(self, partition):
        if partition != "train":
            raise RuntimeError(f"augmentation requested for {partition} samples")
        self.counts[partition] += 1


def hand_statistics(hand):
    mean = hand.mean(axis=0)
    std = hand.std(axis=0)
    return mean, np.where(std > 1e-8, std, 1.0)


def _batch_inputs(part, idx, epoch, policy, seed, counter):
    mel, hand = part.mel[idx], part.hand[idx]
    if policy is None or part.clips is None:
        return mel, hand
    mel, hand = mel.copy(), hand.copy()
    for row, i in enumerate(idx):
        clip, plan = augment(part.clips[i], policy, make_rng(seed, _AUGMENT, epoch, i))
        if clip is not part.clips[i]:
            counter.record(part.name)
            mel[row], hand[row] = extract(clip)
    return mel, hand


def _split_inputs(config, mel, hand):
    return (mel if config.uses_deep else None), (hand if config.uses_hand else None)


def evaluate_partition(params, config, part, eps, batch_size=16):
    """(smoothed loss, accuracy, macro-F1, probabilities) in eval mode."""
    mel, hand = _split_inputs(config, part.mel, part.hand)
    probs = predict_proba(params, config, mel, hand, batch_size)
    loss = smoothed_scce(probs.astype(np.float64), part.labels, eps)
    m = class_metrics(confusion(part.labels, probs.argmax(axis=1), CLASSES))
    return loss, m.accuracy, m.macro_f1, probs


def train(train_part, val_part, model_config, train_config, policy=None, params=None, log_path=None):
    """Fit ``model_config`` on ``train_part``, select on ``val_part``.

    Returns a ``TrainResult`` whose params are those of the epoch with the
    highest validation macro-F1 (earliest on ties).
    """
    if len(train_part) == 0 or len(val_part) == 0:
        raise ValueError("training needs non-empty train and val partitions")
    limits = threadpool_limits(limits=1) if train_config.strict_deterministic else nullcontext()
    with limits:
        return _train(train_part, val_part, model_config, train_config, policy, params, log_path)


def _train(train_part, val_part, cfg, tc, policy, params, log_path):
    seed = tc.seed
    params = init_params(cfg, seed) if params is None else copy.deepcopy(params)
    if cfg.uses_hand:
        mean, std = hand_statistics(train_part.hand.astype(np.float64))
        params["input.hand_mean"][...] = mean
        params["input.hand_std"][...] = std
    opt = Adam()
    sched = PlateauScheduler(tc.lr0, tc.plateau_factor, tc.plateau_patience, tc.plateau_min_delta)
    stopper = EarlyStopping(tc.early_stop_patience)
    counter = AugmentCounter()
    logs, grad_norms = [], []
    best = None
    log_fh = open(log_path, "w") if log_path else None
    n = len(train_part)
    try:
        for epoch in range(1, tc.max_epochs + 1):
            lr = sched.lr
            order = make_rng(seed, _SHUFFLE, epoch).permutation(n)
            loss_sum, correct = 0.0, 0
            for b, s in enumerate(range(0, n, tc.batch_size)):
                idx = order[s:s + tc.batch_size]
                mel, hand = _batch_inputs(train_part, idx, epoch, policy, seed, counter)
                mel, hand = _split_inputs(cfg, mel, hand)
                y = train_part.labels[idx]
                trace = forward(mel, hand, params, cfg, train=True,
                                rng=make_rng(seed, _DROPOUT, epoch, b), input_grad=False)
                loss = smoothed_scce(trace.probs, y, tc.label_smoothing)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise NonFiniteLossError(
                        f"non-finite loss {value} at epoch {epoch} batch {b} "
                        f"(clips {[train_part.clip_ids[i] for i in idx]})"
                    )
                loss.backward()
                grads, _ = collect_grads(trace)
                for k in grads:
                    if is_decayed(k):
                        grads[k] = grads[k] + 2.0 * tc.l2 * params[k]
                grads, pre, post = clip_by_global_norm(grads, tc.clip_norm)
                grad_norms.append((pre, post))
                opt.step(params, grads, lr)
                apply_bn_updates(params, trace.bn_updates)
                loss_sum += value * len(idx)
                correct += int(np.sum(trace.probs.data.argmax(axis=1) == y))
            val_loss, val_acc, val_f1, _ = evaluate_partition(params, cfg, val_part, tc.label_smoothing, tc.batch_size)
            entry = EpochLog(epoch, loss_sum / n, val_loss, correct / n, val_acc, val_f1, lr)
            logs.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")
                log_fh.flush()
            log.info("epoch %d loss %.4f val_loss %.4f val_acc %.4f val_f1 %.4f lr %.2e",
                     epoch, entry.train_loss, val_loss, val_acc, val_f1, lr)
            if stopper.update(epoch, val_f1):
                best = copy.deepcopy(params)
            sched.update(epoch, val_loss)
            if stopper.should_stop:
                log.info("early stop after epoch %d (best epoch %d)", epoch, stopper.best_epoch)
                break
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(
        params=best,
        best_epoch=stopper.best_epoch,
        best_val_macro_f1=stopper.best,
        logs=logs,
        lr_reductions=list(sched.reductions),
        grad_norms=grad_norms,
        augment_counts=dict(counter.counts),
        stopped_early=stopper.should_stop,
    )
