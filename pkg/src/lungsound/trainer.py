"""Feature cache, Adam optimizer, training loop, and checkpoints.

Scalograms are rendered once into a content-addressed cache (SCG1 files
named by a hash of segment id + processing parameters) so epochs only
read images.  Training shuffles with a per-epoch counter-based stream,
optimizes the class-weighted focal loss with Adam, validates each epoch
with the challenge Score, and keeps the best checkpoint.  A full run is
reproducible bit-for-bit from its seed in single-worker mode.
"""

from __future__ import annotations

import io
import json
import logging
import os
import tempfile
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .autodiff import ShapeMismatchError, Tensor, backward, load_tensors, save_tensors
from .dsp import SegmentPolicy, extract_event_segment, extract_record_segment, preprocess
from .errors import DataError, NumericError, UsageError
from .evaluation import TaskId, challenge_scores, confusion, map_labels, task_class_names
from .ingest import DatasetManifest, EventLabel, RecordLabel, load_wav
from .model import Model, ModelConfig, build_model, model_forward, model_logits
from .objective import (FocalParams, class_weights_from_counts, default_gamma,
                        focal_loss, focal_loss_from_logits)
from .rng import Rng
from .scalogram import MorseParams, cache_key, cwt, load_scalogram, power_scalogram, render_image, save_scalogram, select_scales

__all__ = [
    "TrainConfig", "AdamState", "TrainHistory", "EpochStats",
    "FeatureEntry", "FeatureIndex", "Checkpoint",
    "NonFiniteGradientError", "EmptyManifestError", "CacheMissError",
    "VersionMismatchError",
    "adam_step", "featurize", "load_batch", "index_truths", "predict",
    "train", "train_task", "evaluate",
    "checkpoint_save", "checkpoint_load",
]

log = logging.getLogger("lungsound.trainer")

_CKPT_MAGIC = b"CKPT"
_CKPT_VERSION = 1


class NonFiniteGradientError(NumericError):
    pass


class EmptyManifestError(DataError):
    pass


class CacheMissError(DataError):
    pass


class VersionMismatchError(DataError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    task: str
    epochs: int = 100  # the source experiments never state a budget
    batch_size: int = 128
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    gamma: float | None = None  # None -> per-task default
    checkpoint_dir: str | None = None

    def __post_init__(self):
        TaskId.parse(self.task)
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise UsageError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise UsageError(f"epochs must be >= 1, got {self.epochs}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(TrainConfig)}
        for key in doc:
            if key not in known:
                raise UsageError(f"unknown train config key: {key}")
        return TrainConfig(**doc)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @staticmethod
    def for_params(params: dict) -> "AdamState":
        return AdamState(m={k: np.zeros_like(t.data) for k, t in params.items()},
                         v={k: np.zeros_like(t.data) for k, t in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState,
              config: TrainConfig):
    """Bias-corrected Adam update, in place on the parameter tensors."""
    for name, tensor in params.items():
        g = grads[name]
        if g.shape != tensor.data.shape:
            raise ShapeMismatchError(
                f"gradient shape {g.shape} != parameter shape {tensor.data.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}")
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, tensor in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        tensor.data -= (config.learning_rate * (m / bc1)
                        / (np.sqrt(v / bc2) + config.adam_eps)).astype(tensor.dtype)
    return params, state


# ---------------------------------------------------------------------------
# feature cache

@dataclass(frozen=True)
class FeatureEntry:
    segment_id: str
    label: int  # raw event/record label code
    path: str


@dataclass
class FeatureIndex:
    entries: list
    level: str
    image_size: tuple


def _segment_jobs(entry, level: str):
    """(segment id, cache id, label code, extractor args) without any DSP.

    The segment id uses the WAV's filename stem, the same identity load_wav
    gives the audio.  The cache id uses the absolute path instead: corpora
    routinely reuse stems (every synthetic set contains a normal_000.wav),
    and keying the cache on the stem would let one corpus silently serve
    another corpus's images.
    """
    rec_id = os.path.splitext(os.path.basename(entry.recording))[0]
    rec_path = os.path.abspath(entry.recording)
    if level == "event":
        return [(f"{rec_id}:event@{ev.start_ms}",
                 f"{rec_path}:event@{ev.start_ms}", int(ev.label), ev)
                for ev in entry.events]
    return [(f"{rec_id}:record", f"{rec_path}:record",
             int(entry.record_label), None)]


def _render_segment(segment, morse: MorseParams, image_size) -> np.ndarray:
    grid = select_scales(morse, segment.samples.size)
    matrix = cwt(segment.samples, morse, grid, sample_rate=segment.sample_rate)
    image = render_image(power_scalogram(matrix), *image_size)
    return image.pixels


def _compute_recording(args):
    """Worker: preprocess one recording and render its missing segments."""
    entry, wanted, level, policy, morse, band, order, image_size = args
    processed = preprocess(load_wav(entry.recording), policy,
                           band[0], band[1], order)
    out = []
    for cache_id, event in wanted:
        if level == "event":
            segment = extract_event_segment(processed, event, policy)
        else:
            segment = extract_record_segment(processed, entry.events, policy)
        out.append((cache_id, _render_segment(segment, morse, image_size)))
    return out


def featurize(manifest: DatasetManifest, cache_dir, level: str = "event",
              policy: SegmentPolicy | None = None,
              morse: MorseParams | None = None,
              image_size: tuple = (224, 224), band: tuple = (50.0, 2000.0),
              order: int = 4, workers: int = 1,
              warn_on_miss: bool = False) -> FeatureIndex:
    """Ensure every segment's scalogram image is cached; return the index.

    Files are named by a hash of the recording path, the segment window,
    and every parameter that shapes the image, so a rerun with identical
    settings touches nothing.
    """
    if level not in ("event", "record"):
        raise UsageError(f"level must be 'event' or 'record', got {level!r}")
    policy = policy or SegmentPolicy()
    morse = morse or MorseParams()
    os.makedirs(cache_dir, exist_ok=True)
    fingerprint = (policy.record_window, policy.head_trim, policy.event_length,
                   float(policy.target_rate), float(band[0]), float(band[1]),
                   float(order), float(image_size[0]), float(image_size[1]))

    entries: list = []
    misses: dict = {}
    paths: dict = {}
    for m_entry in manifest.entries:
        for seg_id, cache_id, label, event in _segment_jobs(m_entry, level):
            path = os.path.join(cache_dir,
                                cache_key(cache_id, fingerprint, morse) + ".scg")
            entries.append(FeatureEntry(segment_id=seg_id, label=label, path=path))
            if not os.path.exists(path):
                misses.setdefault(id(m_entry), (m_entry, []))[1].append((cache_id, event))
                paths[cache_id] = path

    if misses:
        if warn_on_miss:
            warnings.warn(f"scalogram cache missing {len(paths)} of "
                          f"{len(entries)} segments; computing them now")
        jobs = [(m_entry, wanted, level, policy, morse, band, order, image_size)
                for m_entry, wanted in misses.values()]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = pool.map(_compute_recording, jobs)
        else:
            results = map(_compute_recording, jobs)
        from .scalogram import ScalogramImage
        for rendered in results:
            for cache_id, pixels in rendered:
                save_scalogram(paths[cache_id], ScalogramImage(pixels=pixels))
    return FeatureIndex(entries=entries, level=level, image_size=tuple(image_size))


def load_batch(index: FeatureIndex, positions) -> np.ndarray:
    """Stack cached images for the given entry positions."""
    images = []
    for i in positions:
        entry = index.entries[i]
        if not os.path.exists(entry.path):
            raise CacheMissError(f"no cached scalogram for {entry.segment_id}")
        images.append(load_scalogram(entry.path).pixels)
    return np.stack(images)


def index_truths(index: FeatureIndex, task) -> np.ndarray:
    """Task class index per cached segment."""
    task = TaskId.parse(task)
    if task.level != index.level:
        raise DataError(f"task {task.value} scores {task.level}-level labels "
                        f"but the index holds {index.level} segments")
    enum_type = EventLabel if index.level == "event" else RecordLabel
    return np.array([map_labels(task, enum_type(e.label)) for e in index.entries],
                    dtype=np.int64)


def predict(model: Model, index: FeatureIndex, batch_size: int = 32) -> np.ndarray:
    """Argmax class per cached segment, inference mode."""
    preds = []
    for lo in range(0, len(index.entries), batch_size):
        images = load_batch(index, range(lo, min(lo + batch_size, len(index.entries))))
        probs = model_forward(model, images, training=False).data
        preds.append(np.argmax(probs, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# training loop

@dataclass(frozen=True)
class EpochStats:
    epoch: int
    steps: int
    train_loss: float
    val_loss: float
    val_score: float
    wall_time_s: float


@dataclass
class TrainHistory:
    epochs: list


def _focal_params(config: TrainConfig, y_train: np.ndarray, n_classes: int) -> FocalParams:
    gamma = default_gamma(config.task) if config.gamma is None else float(config.gamma)
    counts = np.bincount(y_train, minlength=n_classes)
    return FocalParams(gamma=gamma, weights=class_weights_from_counts(counts))


def _validation_pass(model, index, y, params, batch_size):
    """Mean focal loss and argmax predictions, inference mode."""
    total = 0.0
    preds = []
    for lo in range(0, y.size, batch_size):
        sel = range(lo, min(lo + batch_size, y.size))
        images = load_batch(index, sel)
        probs = model_forward(model, images, training=False)
        mean, _ = focal_loss(probs.data.astype(np.float64), y[lo:lo + batch_size], params)
        total += float(mean) * images.shape[0]
        preds.append(np.argmax(probs.data, axis=1))
    return total / y.size, np.concatenate(preds)


def train(model: Model, train_manifest: DatasetManifest,
          val_manifest: DatasetManifest, config: TrainConfig,
          cache_dir=None, policy: SegmentPolicy | None = None,
          morse: MorseParams | None = None, band: tuple = (50.0, 2000.0),
          order: int = 4, resume_from=None):
    """Optimize the model on the train split, scoring the validation
    split each epoch; returns (model, TrainHistory)."""
    task = TaskId.parse(config.task)
    if model.config.n_classes != task.n_classes:
        raise UsageError(f"model has {model.config.n_classes} classes but task "
                         f"{task.value} needs {task.n_classes}")
    if not train_manifest.entries or not val_manifest.entries:
        raise EmptyManifestError("train and validation manifests must be nonempty")
    if cache_dir is None:
        cache_dir = os.path.join(tempfile.gettempdir(), "lungsound_cache")
    image_size = (model.config.input_size, model.config.input_size)

    fz = dict(level=task.level, policy=policy, morse=morse,
              image_size=image_size, band=band, order=order)
    train_index = featurize(train_manifest, cache_dir, warn_on_miss=True, **fz)
    val_index = featurize(val_manifest, cache_dir, warn_on_miss=True, **fz)
    if not train_index.entries or not val_index.entries:
        raise EmptyManifestError("no scorable segments at this task's level")
    y_train = index_truths(train_index, task)
    y_val = index_truths(val_index, task)
    loss_params = _focal_params(config, y_train, task.n_classes)

    state = AdamState.for_params(model.params)
    start_epoch = 0
    if resume_from is not None:
        ckpt = checkpoint_load(resume_from)
        _check_resume_config(ckpt.train_config, config)
        if ckpt.model.config != model.config:
            raise UsageError("checkpoint model architecture differs from the given model")
        model.params = ckpt.model.params
        model.buffers = ckpt.model.buffers
        state = ckpt.state
        start_epoch = ckpt.epoch + 1

    history = TrainHistory(epochs=[])
    best_score = -np.inf
    n = y_train.size
    model.mode = "train"
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        perm = Rng(config.seed).child("epoch", epoch).generator().permutation(n)
        total_loss, steps = 0.0, 0
        for lo in range(0, n, config.batch_size):
            sel = perm[lo:lo + config.batch_size]
            images = load_batch(train_index, sel)
            drop_rng = Rng(config.seed).child("epoch", epoch, "batch", steps)
            logits = model_logits(model, images, training=True, rng=drop_rng)
            loss_t = focal_loss_from_logits(logits, y_train[sel], loss_params)
            grads = backward(loss_t, model.params)
            adam_step(model.params, grads, state, config)
            total_loss += float(loss_t.data) * sel.size
            steps += 1
        for name, tensor in model.params.items():
            if not np.all(np.isfinite(tensor.data)):
                raise NumericError(f"parameter {name} became non-finite "
                                   f"in epoch {epoch}")
        train_loss = total_loss / n

        val_loss, val_preds = _validation_pass(
            model, val_index, y_val, loss_params, config.batch_size)
        try:
            matrix = confusion(val_preds, y_val, task.n_classes,
                               task_class_names(task))
            val_score = challenge_scores(matrix, task).score
        except DataError:
            val_score = float("nan")

        stats = EpochStats(epoch=epoch, steps=steps, train_loss=train_loss,
                           val_loss=val_loss, val_score=val_score,
                           wall_time_s=time.perf_counter() - t0)
        history.epochs.append(stats)
        log.info("epoch %d: train %.4f val %.4f score %.4f (%.1fs)",
                 epoch, train_loss, val_loss, val_score, stats.wall_time_s)

        if config.checkpoint_dir:
            os.makedirs(config.checkpoint_dir, exist_ok=True)
            checkpoint_save(os.path.join(config.checkpoint_dir, "last.ckpt"),
                            model, state, epoch, config)
            if np.isfinite(val_score) and val_score > best_score:
                best_score = val_score
                checkpoint_save(os.path.join(config.checkpoint_dir, "best.ckpt"),
                                model, state, epoch, config)
    model.mode = "infer"
    return model, history


def train_task(train_manifest: DatasetManifest, val_manifest: DatasetManifest,
               config: TrainConfig, model_config: ModelConfig | None = None,
               cache_dir=None, **featurize_kwargs):
    """Build a fresh model for the task (full scale unless told otherwise)
    and train it."""
    task = TaskId.parse(config.task)
    if model_config is None:
        model_config = ModelConfig(n_classes=task.n_classes)
    if model_config.n_classes != task.n_classes:
        model_config = replace(model_config, n_classes=task.n_classes)
    model = build_model(model_config, config.seed)
    return train(model, train_manifest, val_manifest, config,
                 cache_dir=cache_dir, **featurize_kwargs)


def evaluate(model: Model, manifest: DatasetManifest, task, cache_dir=None,
             policy: SegmentPolicy | None = None,
             morse: MorseParams | None = None, band: tuple = (50.0, 2000.0),
             order: int = 4, batch_size: int = 32, collapse_from=None,
             macro: bool = False, exclude_pq: bool = False):
    """Score the model on a manifest; returns a ScoreReport.

    ``collapse_from`` scores a finer-grained model on a coarser task at
    the same level, e.g. a 7-class event model on the binary task: raw
    predictions are mapped through the coarse task's label mapping before
    the confusion matrix is built.
    """
    task = TaskId.parse(task)
    source = task if collapse_from is None else TaskId.parse(collapse_from)
    if source is not task and source not in (TaskId.Task1_2, TaskId.Task2_2):
        # only the full label sets collapse; anything else would reinterpret
        # already-coarse prediction indices as raw label codes
        raise UsageError(f"cannot collapse {source.value} predictions onto "
                         f"{task.value}; source must be 1-2 or 2-2")
    if source.level != task.level:
        raise UsageError(f"cannot collapse {source.value} predictions onto "
                         f"{task.value}: different annotation levels")
    if model.config.n_classes != source.n_classes:
        raise UsageError(f"model has {model.config.n_classes} classes but "
                         f"task {source.value} needs {source.n_classes}")
    if cache_dir is None:
        cache_dir = os.path.join(tempfile.gettempdir(), "lungsound_cache")
    index = featurize(manifest, cache_dir, level=task.level, policy=policy,
                      morse=morse,
                      image_size=(model.config.input_size,) * 2,
                      band=band, order=order)
    if not index.entries:
        raise EmptyManifestError("no scorable segments in the manifest")
    preds = predict(model, index, batch_size)
    if source is not task:
        enum_type = EventLabel if task.level == "event" else RecordLabel
        preds = np.array([map_labels(task, enum_type(int(p))) for p in preds],
                         dtype=np.int64)
    y = index_truths(index, task)
    matrix = confusion(preds, y, task.n_classes, task_class_names(task))
    return challenge_scores(matrix, task, macro=macro, exclude_pq=exclude_pq)


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    model: Model
    state: AdamState
    epoch: int
    train_config: TrainConfig


def _check_resume_config(saved: TrainConfig, current: TrainConfig) -> None:
    # epochs may grow to extend a run and checkpoint_dir may move;
    # anything else silently changes the experiment
    for name in ("task", "batch_size", "learning_rate", "adam_beta1",
                 "adam_beta2", "adam_eps", "seed", "gamma"):
        if getattr(saved, name) != getattr(current, name):
            raise UsageError(f"resume config changes {name}: checkpoint has "
                             f"{getattr(saved, name)!r}, got {getattr(current, name)!r}")


def checkpoint_save(path, model: Model, state: AdamState, epoch: int,
                    train_config: TrainConfig) -> None:
    """magic, version u32, config JSON (length-prefixed), epoch u32, then
    parameter and Adam tensor stores; written atomically."""
    config_doc = json.dumps(
        {"model": model.config.to_dict(), "train": train_config.to_dict()},
        sort_keys=True).encode("utf-8")
    params_blob = io.BytesIO()
    save_tensors(params_blob, {f"p:{k}": t.data for k, t in model.params.items()}
                 | {f"b:{k}": v for k, v in model.buffers.items()})
    adam_blob = io.BytesIO()
    save_tensors(adam_blob, {f"m:{k}": v for k, v in state.m.items()}
                 | {f"v:{k}": v for k, v in state.v.items()}
                 | {"t": np.asarray(float(state.t), dtype=np.float32)})
    payload = (_CKPT_MAGIC + np.uint32(_CKPT_VERSION).tobytes()
               + np.uint32(len(config_doc)).tobytes() + config_doc
               + np.uint32(epoch).tobytes()
               + params_blob.getvalue() + adam_blob.getvalue())
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_u32(f, path) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise VersionMismatchError(f"{path}: truncated checkpoint header")
    return int(np.frombuffer(raw, dtype="<u4")[0])


def checkpoint_load(path) -> Checkpoint:
    """Parse a checkpoint fully before constructing any state."""
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise VersionMismatchError(f"{path}: not a checkpoint file")
        version = _read_u32(f, path)
        if version != _CKPT_VERSION:
            raise VersionMismatchError(
                f"{path}: checkpoint version {version}, expected {_CKPT_VERSION}")
        clen = _read_u32(f, path)
        raw_doc = f.read(clen)
        if len(raw_doc) != clen:
            raise VersionMismatchError(f"{path}: truncated checkpoint config")
        try:
            doc = json.loads(raw_doc.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise VersionMismatchError(f"{path}: corrupt checkpoint config") from exc
        epoch = _read_u32(f, path)
        try:
            stored = load_tensors(f)
            adam = load_tensors(f)
        except Exception as exc:
            raise VersionMismatchError(f"{path}: corrupt checkpoint ({exc})") from exc
    model_config = ModelConfig.from_dict(doc["model"])
    train_config = TrainConfig.from_dict(doc["train"])
    params = {k[2:]: Tensor(v, requires_grad=True, name=k[2:])
              for k, v in stored.items() if k.startswith("p:")}
    buffers = {k[2:]: v for k, v in stored.items() if k.startswith("b:")}
    model = Model(config=model_config, params=params, buffers=buffers)
    state = AdamState(
        m={k[2:]: v for k, v in adam.items() if k.startswith("m:")},
        v={k[2:]: v for k, v in adam.items() if k.startswith("v:")},
        t=int(adam["t"].reshape(-1)[0]))
    return Checkpoint(model=model, state=state, epoch=epoch,
                      train_config=train_config)
