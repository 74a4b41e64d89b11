"""AAM-softmax training with Adam and a triangular cyclical learning rate."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .data import ManifestEntry, Trial
from .evaluation import compute_eer, cosine_score, ScoreSet
from .frontend import FeatureMatrix, WaveBuffer, extract_features, frame_count, log_mel_fbank, read_wav
from .model import AcaNet, ModelConfig
from .numerics import Tensor, backward, no_grad
from .seeding import derive_rng

__all__ = [
    "AamHead",
    "AdamState",
    "CyclicalLrSchedule",
    "DESK_TRAIN_OPTIONS",
    "FitResult",
    "PAPER_TRAIN_OPTIONS",
    "TrainBatch",
    "TrainOptions",
    "aam_loss",
    "adam_step",
    "calibrate_batchnorm",
    "embed_all",
    "load_features",
    "trial_eer",
    "fit",
    "lr_at",
    "pad_and_mask",
    "perturbed_entries",
    "speed_perturb",
]

log = logging.getLogger(__name__)

COS_CLAMP = 1e-7


# -- loss -------------------------------------------------------------------------


@dataclass
class AamHead:
    weight: Tensor  # (n_speakers, E)
    margin: float = 0.2
    scale: float = 30.0

    @classmethod
    def create(cls, n_speakers: int, embedding_size: int, rng: np.random.Generator, dtype=np.float32, **kw) -> AamHead:
        bound = math.sqrt(6.0 / (n_speakers + embedding_size))
        w = rng.uniform(-bound, bound, size=(n_speakers, embedding_size)).astype(dtype)
        return cls(Tensor(w, requires_grad=True, name="aam.weight"), **kw)

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]


def _l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    return x / ((x * x).sum(axis=axis, keepdims=True) + 1e-12).sqrt()


def aam_loss(embeddings: Tensor, labels, head: AamHead) -> Tensor:
    """Mean cross-entropy over logits ``s*cos(theta + m)`` (true class) and ``s*cos(theta)`` (others)."""
    labels = np.asarray(labels, dtype=np.int64)
    n = head.n_classes
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"labels must lie in [0, {n}); got range [{labels.min()}, {labels.max()}]")
    if embeddings.ndim != 2 or embeddings.shape[0] != labels.size:
        raise ValueError(f"embeddings {embeddings.shape} do not match {labels.size} labels")
    cos = _l2_normalize(embeddings) @ _l2_normalize(head.weight).T
    onehot = np.zeros(cos.shape, dtype=cos.dtype)
    onehot[np.arange(labels.size), labels] = 1
    cos_true = (cos * onehot).sum(axis=1, keepdims=True)
    theta = cos_true.clip(-1 + COS_CLAMP, 1 - COS_CLAMP).arccos()
    margin_true = (theta + head.margin).cos()
    logits = (cos + (margin_true - cos_true) * onehot) * head.scale
    return -(logits.log_softmax(axis=1) * onehot).sum() * (1.0 / labels.size)


# -- optimizer --------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray | None], state: AdamState, lr: float
) -> AdamState:
    """Bias-corrected Adam update of ``params`` in place; parameters without a gradient are skipped."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return state


@dataclass(frozen=True)
class CyclicalLrSchedule:
    base_lr: float = 1e-7
    max_lr: float = 1e-2
    step_size: int = 2000

    def __post_init__(self):
        if self.step_size < 1:
            raise ValueError("step_size must be >= 1")
        if not 0 <= self.base_lr <= self.max_lr:
            raise ValueError("need 0 <= base_lr <= max_lr")


def lr_at(schedule: CyclicalLrSchedule, step: int) -> float:
    """Triangular cycle: base at step 0, max at ``step_size``, base again at ``2*step_size``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    ss = schedule.step_size
    pos = step % (2 * ss)
    frac = 1.0 - abs(pos - ss) / ss
    return schedule.base_lr + (schedule.max_lr - schedule.base_lr) * frac


# -- batching ---------------------------------------------------------------------


@dataclass
class TrainBatch:
    features: np.ndarray  # (B, C0, T_max)
    lengths: np.ndarray
    mask: np.ndarray  # (B, T_max), True at padded frames
    labels: np.ndarray

    @property
    def key_mask(self) -> np.ndarray | None:
        return self.mask if self.mask.any() else None


def pad_and_mask(items: Sequence[FeatureMatrix | np.ndarray], labels: Sequence[int], dtype=np.float32) -> TrainBatch:
    if not items:
        raise ValueError("cannot build an empty batch")
    mats = [m.values if isinstance(m, FeatureMatrix) else np.asarray(m) for m in items]
    lengths = np.array([m.shape[1] for m in mats])
    t_max = int(lengths.max())
    feats = np.zeros((len(mats), mats[0].shape[0], t_max), dtype=dtype)
    mask = np.ones((len(mats), t_max), dtype=bool)
    for i, m in enumerate(mats):
        feats[i, :, : m.shape[1]] = m
        mask[i, : m.shape[1]] = False
    return TrainBatch(feats, lengths, mask, np.asarray(labels, dtype=np.int64))


# -- fitting ----------------------------------------------------------------------


@dataclass
class TrainOptions:
    epochs: int = 10
    batch_size: int = 32
    base_lr: float = 1e-7
    max_lr: float = 1e-2
    # steps per half-cycle; 0 means one half-cycle spans the whole run
    step_size: int = 0
    crop_s: float = 2.0
    margin: float = 0.2
    scale: float = 30.0
    seed: int = 0
    # resampling factors; each (speaker, factor) pair becomes an extra training class
    speed_perturb: tuple[float, ...] = ()

    def __post_init__(self):
        self.speed_perturb = tuple(float(f) for f in self.speed_perturb)
        if any(f <= 0 or f == 1.0 for f in self.speed_perturb):
            raise ValueError(f"speed_perturb factors must be positive and != 1, got {self.speed_perturb}")

    def schedule(self, total_steps: int) -> CyclicalLrSchedule:
        ss = self.step_size if self.step_size > 0 else max(1, total_steps // 2)
        return CyclicalLrSchedule(self.base_lr, self.max_lr, ss)


# Hyperparameters of the published full-scale training run.
PAPER_TRAIN_OPTIONS = TrainOptions(epochs=25, batch_size=32, base_lr=1e-7, max_lr=1e-2)

# Small synthetic corpora (about 10 speakers): smaller batches, a lower peak rate, and
# speed-perturbed copies as extra classes to keep the model from memorizing the speakers.
DESK_TRAIN_OPTIONS = TrainOptions(
    epochs=10,
    batch_size=8,
    max_lr=3e-3,
    speed_perturb=(0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 1.05, 1.1, 1.15, 1.2, 1.25, 1.3),
)


@dataclass
class FitResult:
    net: AcaNet
    head: AamHead
    log: list[dict]
    best_epoch: int
    dev_eer: list[float]


def _crop(m: np.ndarray, n_frames: int, rng: np.random.Generator) -> np.ndarray:
    if m.shape[1] <= n_frames:
        return m
    start = int(rng.integers(0, m.shape[1] - n_frames + 1))
    return m[:, start : start + n_frames]


def calibrate_batchnorm(net: AcaNet, feats: Sequence[np.ndarray], batch_size: int = 32) -> None:
    """Set batch-norm running statistics from ``feats`` without touching any weight.

    Statistics are the running average over train-mode batches (dropout
    off); this lets a freshly initialized network be evaluated.
    """
    saved = {k: s.momentum for k, s in net.bn.items()}
    with no_grad():
        for b, start in enumerate(range(0, len(feats), batch_size)):
            for s in net.bn.values():
                s.momentum = 1.0 / (b + 1)
            batch = pad_and_mask(feats[start : start + batch_size], [0] * len(feats[start : start + batch_size]), net.dtype)
            net.forward(batch.features, mask=batch.key_mask, mode="train")
    for k, s in net.bn.items():
        s.momentum = saved[k]


def embed_all(net: AcaNet, feats: Mapping[str, np.ndarray], batch_size: int = 32) -> dict[str, np.ndarray]:
    ids = list(feats)
    vecs = net.embed_batch([feats[u] for u in ids], batch_size)
    return dict(zip(ids, vecs))


def trial_eer(net: AcaNet, feats: Mapping[str, np.ndarray], trials: Sequence[Trial]) -> float:
    needed = {u for t in trials for u in (t.enrol_id, t.test_id)}
    emb = embed_all(net, {u: feats[u] for u in sorted(needed)})
    scores = []
    for t in trials:
        try:
            scores.append(cosine_score(emb[t.enrol_id], emb[t.test_id]))
        except ValueError:
            scores.append(0.0)
    return compute_eer(ScoreSet(scores, [t.target for t in trials]))[0]


def load_features(entries: Sequence[ManifestEntry], n_filters: int) -> dict[str, np.ndarray]:
    return {e.utt_id: extract_features(e.path, n_filters=n_filters).values.astype(np.float32) for e in entries}


def speed_perturb(samples: np.ndarray, factor: float) -> np.ndarray:
    """Play ``samples`` ``factor`` times faster by linear interpolation.

    Pitch and resonances scale by ``factor`` and duration by ``1 / factor``.
    """
    n = int(len(samples) / factor)
    return np.interp(np.arange(n) * factor, np.arange(len(samples)), samples)


def perturbed_entries(
    manifest: Sequence[ManifestEntry], factors: Sequence[float], n_filters: int
) -> tuple[list[ManifestEntry], dict[str, np.ndarray]]:
    """Speed-perturbed copies of ``manifest`` with their features.

    Each copy is labelled as a new speaker ``<speaker>@sp<factor>``.
    """
    entries, feats = [], {}
    for e in manifest:
        w = read_wav(e.path)
        for f in factors:
            x = speed_perturb(w.samples, f)
            uid = f"{e.utt_id}@sp{f:g}"
            feats[uid] = log_mel_fbank(WaveBuffer(x, w.sample_rate), n_filters).values.astype(np.float32)
            entries.append(ManifestEntry(uid, f"{e.speaker_id}@sp{f:g}", e.path, len(x) / w.sample_rate))
    return entries, feats


def fit(
    manifest: Sequence[ManifestEntry],
    cfg: ModelConfig,
    opts: TrainOptions = TrainOptions(),
    seed: int | None = None,
    dev: tuple[Sequence[ManifestEntry], Sequence[Trial]] | None = None,
    out_dir=None,
    features: Mapping[str, np.ndarray] | None = None,
) -> FitResult:
    """Train an embedding extractor on ``manifest``.

    With ``dev`` (entries and trials) the parameters of the epoch with the
    lowest dev EER are kept; otherwise the last epoch's.  With ``out_dir``
    a checkpoint ``model.ckpt`` and a per-step ``metrics.jsonl`` are written.
    """
    seed = opts.seed if seed is None else seed
    if not manifest:
        raise ValueError("training manifest is empty")
    if len({e.speaker_id for e in manifest}) < 2:
        raise ValueError("training needs at least two speakers (AAM softmax is undefined for one class)")
    if features is None:
        features = load_features(list(manifest) + (list(dev[0]) if dev else []), cfg.n_filters)
    if opts.speed_perturb:
        extra, extra_feats = perturbed_entries(manifest, opts.speed_perturb, cfg.n_filters)
        manifest = list(manifest) + extra
        features = {**features, **extra_feats}
    speakers = sorted({e.speaker_id for e in manifest})
    if len(speakers) < 2:
        raise ValueError("training needs at least two speakers (AAM softmax is undefined for one class)")
    label_of = {s: i for i, s in enumerate(speakers)}
    utts = [e.utt_id for e in manifest]
    labels = np.array([label_of[e.speaker_id] for e in manifest])

    net = AcaNet(cfg, seed=seed, dtype=np.float32)
    head = AamHead.create(len(speakers), cfg.embedding_size, derive_rng(seed, "aam"), margin=opts.margin, scale=opts.scale)
    order_rng = derive_rng(seed, "order")
    crop_rng = derive_rng(seed, "crop")
    drop_rng = derive_rng(seed, "dropout")
    crop_frames = frame_count(int(round(opts.crop_s * 8000)), 200, 80)

    steps_per_epoch = math.ceil(len(utts) / opts.batch_size)
    schedule = opts.schedule(steps_per_epoch * opts.epochs)
    state = AdamState()
    trainable = {**net.unique_params(), "aam.weight": head.weight}
    records: list[dict] = []
    dev_eers: list[float] = []
    best = (math.inf, 0, None)
    step = 0
    for epoch in range(1, opts.epochs + 1):
        perm = order_rng.permutation(len(utts))
        for start in range(0, len(perm), opts.batch_size):
            idx = perm[start : start + opts.batch_size]
            batch = pad_and_mask([_crop(features[utts[i]], crop_frames, crop_rng) for i in idx], labels[idx])
            for t in trainable.values():
                t.zero_grad()
            emb = net.forward(batch.features, mask=batch.key_mask, mode="train", rng=drop_rng)
            loss = aam_loss(emb, batch.labels, head)
            backward(loss)
            lr = lr_at(schedule, step)
            adam_step({k: t.data for k, t in trainable.items()}, {k: t.grad for k, t in trainable.items()}, state, lr)
            records.append({"step": step, "epoch": epoch, "lr": lr, "loss": float(loss.data)})
            step += 1
        msg = f"epoch {epoch}: mean loss {np.mean([r['loss'] for r in records if r['epoch'] == epoch]):.4f}"
        if dev is not None:
            eer = trial_eer(net, features, dev[1])
            dev_eers.append(eer)
            msg += f", dev EER {100 * eer:.2f}%"
            if eer < best[0]:
                best = (eer, epoch, _snapshot(net))
        log.info(msg)
    if best[2] is not None:
        _restore(net, best[2])
        best_epoch = best[1]
    else:
        best_epoch = opts.epochs
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(net, out / "model.ckpt", extra={"best_epoch": best_epoch, "speakers": speakers})
        with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    return FitResult(net, head, records, best_epoch, dev_eers)


def _snapshot(net: AcaNet) -> dict:
    return {
        "params": {k: t.data.copy() for k, t in net.unique_params().items()},
        "bn": {k: copy.deepcopy(s) for k, s in net.bn.items()},
    }


def _restore(net: AcaNet, snap: dict) -> None:
    for k, t in net.unique_params().items():
        t.data = snap["params"][k]
    net.bn = snap["bn"]
