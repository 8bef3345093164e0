"""Adam arithmetic, the feature cache, the training loop, and checkpoints."""

import math
import os
import warnings

import numpy as np
import pytest

from lungsound.autodiff import ShapeMismatchError, Tensor
from lungsound.errors import UsageError
from lungsound.ingest import DatasetManifest, EventLabel
from lungsound.model import ModelConfig, build_model
from lungsound.synth import synthesize_corpus
from lungsound.trainer import (
    AdamState, CacheMissError, EmptyManifestError, NonFiniteGradientError,
    TrainConfig, VersionMismatchError, adam_step, checkpoint_load,
    checkpoint_save, featurize, index_truths, load_batch, predict, train,
    train_task,
)

TOY = ModelConfig.toy(2)


def _cfg(**over):
    base = dict(task="1-1", epochs=2, batch_size=8, seed=0)
    base.update(over)
    return TrainConfig(**base)


def _scalar_param(value=1.0):
    p = {"w": Tensor(np.array([value], np.float32), requires_grad=True, name="w")}
    return p, AdamState.for_params(p)


# ---------------------------------------------------------------------------
# optimizer arithmetic

def test_zero_gradient_leaves_parameters_unchanged():
    params, state = _scalar_param(1.5)
    adam_step(params, {"w": np.zeros(1, np.float32)}, state, _cfg())
    assert params["w"].data[0] == 1.5
    assert state.t == 1


def test_first_step_matches_bias_corrected_formula():
    params, state = _scalar_param(1.0)
    adam_step(params, {"w": np.ones(1, np.float32)}, state, _cfg())
    expected = 1.0 - 0.001 * (1.0 / (1.0 + 1e-8))
    assert abs(float(params["w"].data[0]) - expected) < 1e-6


def test_constant_gradient_moves_monotonically_against_it():
    params, state = _scalar_param(0.5)
    values = [0.5]
    for _ in range(50):
        adam_step(params, {"w": np.full(1, 2.0, np.float32)}, state, _cfg())
        values.append(float(params["w"].data[0]))
    assert all(b < a for a, b in zip(values, values[1:]))
    assert state.t == 50


def test_non_finite_gradient_rejected_before_any_update():
    params, state = _scalar_param(1.0)
    grads = {"w": np.array([np.nan], np.float32)}
    with pytest.raises(NonFiniteGradientError):
        adam_step(params, grads, state, _cfg())
    assert params["w"].data[0] == 1.0
    assert state.t == 0


def test_gradient_shape_mismatch_rejected():
    params, state = _scalar_param()
    with pytest.raises(ShapeMismatchError):
        adam_step(params, {"w": np.zeros((2, 2), np.float32)}, state, _cfg())


def test_moments_track_both_parameters_independently():
    params = {
        "a": Tensor(np.zeros(3, np.float32), requires_grad=True, name="a"),
        "b": Tensor(np.zeros(3, np.float32), requires_grad=True, name="b"),
    }
    state = AdamState.for_params(params)
    adam_step(params, {"a": np.ones(3, np.float32),
                       "b": np.zeros(3, np.float32)}, state, _cfg())
    assert np.all(params["a"].data < 0)
    assert np.all(params["b"].data == 0)


# ---------------------------------------------------------------------------
# configuration

def test_config_validation():
    with pytest.raises(UsageError):
        TrainConfig(task="9-9")
    with pytest.raises(UsageError):
        _cfg(batch_size=0)
    with pytest.raises(UsageError):
        _cfg(learning_rate=0.0)
    with pytest.raises(UsageError):
        _cfg(epochs=0)


def test_config_dict_round_trip_rejects_unknown_keys():
    cfg = _cfg(gamma=2.5, checkpoint_dir="/tmp/x")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(UsageError, match="momentum"):
        TrainConfig.from_dict({"task": "1-1", "momentum": 0.9})


# ---------------------------------------------------------------------------
# corpora shared across the expensive tests

@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    manifest = synthesize_corpus(root / "wav", level="event", n_per_class=4,
                                 seed=1, classes=[EventLabel.Normal, EventLabel.Wheeze])
    return manifest, str(root / "cache")


@pytest.fixture(scope="module")
def overfit_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    manifest = synthesize_corpus(root / "wav", level="event", n_per_class=32,
                                 seed=0, classes=[EventLabel.Normal, EventLabel.Wheeze])
    return manifest, str(root / "cache")


# ---------------------------------------------------------------------------
# feature cache

def test_featurize_warns_on_cold_cache_then_reuses_files(small_corpus):
    manifest, cache = small_corpus
    with pytest.warns(UserWarning, match="computing them now"):
        index = featurize(manifest, cache, image_size=(64, 64), warn_on_miss=True)
    assert len(index.entries) == 8
    stamps = {e.path: os.stat(e.path).st_mtime_ns for e in index.entries}
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        again = featurize(manifest, cache, image_size=(64, 64), warn_on_miss=True)
    assert [e.path for e in again.entries] == [e.path for e in index.entries]
    assert {e.path: os.stat(e.path).st_mtime_ns for e in again.entries} == stamps


def test_featurize_rejects_bad_level(small_corpus):
    manifest, cache = small_corpus
    with pytest.raises(UsageError):
        featurize(manifest, cache, level="sample")


def test_record_level_yields_one_segment_per_recording(small_corpus):
    manifest, cache = small_corpus
    index = featurize(manifest, cache, level="record", image_size=(64, 64))
    assert len(index.entries) == len(manifest.entries)
    assert all(e.segment_id.endswith(":record") for e in index.entries)


def test_index_truths_maps_to_task_classes(small_corpus):
    manifest, cache = small_corpus
    index = featurize(manifest, cache, image_size=(64, 64))
    y = index_truths(index, "1-1")
    assert sorted(np.bincount(y, minlength=2)) == [4, 4]
    with pytest.raises(Exception):
        index_truths(index, "2-1")  # record task, event index


def test_missing_cache_file_raises(tmp_path):
    manifest = synthesize_corpus(tmp_path / "wav", level="event", n_per_class=1,
                                 seed=3, classes=[EventLabel.Normal, EventLabel.Wheeze])
    index = featurize(manifest, tmp_path / "cache", image_size=(64, 64))
    os.unlink(index.entries[0].path)
    with pytest.raises(CacheMissError):
        load_batch(index, [0])


def test_load_batch_stacks_images(small_corpus):
    manifest, cache = small_corpus
    index = featurize(manifest, cache, image_size=(64, 64))
    batch = load_batch(index, [0, 3, 5])
    assert batch.shape == (3, 64, 64, 3)
    assert batch.dtype == np.float32


# ---------------------------------------------------------------------------
# training loop

def test_empty_manifest_rejected(small_corpus):
    manifest, cache = small_corpus
    empty = DatasetManifest(entries=[], split_tag="none")
    model = build_model(TOY, 0)
    with pytest.raises(EmptyManifestError):
        train(model, empty, manifest, _cfg(), cache_dir=cache)
    with pytest.raises(EmptyManifestError):
        train(model, manifest, empty, _cfg(), cache_dir=cache)


def test_model_task_width_mismatch_rejected(small_corpus):
    manifest, cache = small_corpus
    model = build_model(ModelConfig.toy(5), 0)
    with pytest.raises(UsageError):
        train(model, manifest, manifest, _cfg(), cache_dir=cache)


def test_one_epoch_takes_ceil_n_over_batch_steps(tmp_path):
    manifest = synthesize_corpus(tmp_path / "wav", level="event", n_per_class=5,
                                 seed=2, classes=[EventLabel.Normal, EventLabel.Wheeze])
    cfg = _cfg(epochs=1, batch_size=4)
    _, history = train_task(manifest, manifest, cfg, model_config=TOY,
                            cache_dir=str(tmp_path / "cache"))
    assert len(history.epochs) == 1
    assert history.epochs[0].steps == math.ceil(10 / 4)


def test_same_seed_runs_are_bit_identical(small_corpus):
    manifest, cache = small_corpus
    histories = []
    for _ in range(2):
        _, h = train_task(manifest, manifest, _cfg(epochs=3), model_config=TOY,
                          cache_dir=cache)
        histories.append([(s.train_loss, s.val_loss, s.val_score) for s in h.epochs])
    assert histories[0] == histories[1]


def test_overfits_small_balanced_corpus(overfit_corpus):
    manifest, cache = overfit_corpus
    cfg = _cfg(epochs=40, batch_size=32)
    model, history = train_task(manifest, manifest, cfg, model_config=TOY,
                                cache_dir=cache)
    assert len(history.epochs) == 40
    assert all(np.isfinite(s.train_loss) for s in history.epochs)
    assert all(s.steps == 2 for s in history.epochs)  # ceil(64/32)

    losses = [s.train_loss for s in history.epochs]
    increases = sum(b >= a for a, b in zip(losses[:5], losses[1:5]))
    assert increases <= 1

    index = featurize(manifest, cache, image_size=(64, 64))
    accuracy = float(np.mean(predict(model, index) == index_truths(index, "1-1")))
    assert accuracy >= 0.95


def test_interrupted_run_continues_exactly(small_corpus, tmp_path):
    manifest, cache = small_corpus
    ckpt_dir = str(tmp_path / "ckpt")

    _, full = train_task(manifest, manifest, _cfg(epochs=6, batch_size=4),
                         model_config=TOY, cache_dir=cache)

    cfg_head = _cfg(epochs=3, batch_size=4, checkpoint_dir=ckpt_dir)
    train_task(manifest, manifest, cfg_head, model_config=TOY, cache_dir=cache)
    assert os.path.exists(os.path.join(ckpt_dir, "last.ckpt"))
    assert os.path.exists(os.path.join(ckpt_dir, "best.ckpt"))

    model = build_model(TOY, 0)
    cfg_tail = _cfg(epochs=6, batch_size=4)
    _, tail = train(model, manifest, manifest, cfg_tail, cache_dir=cache,
                    resume_from=os.path.join(ckpt_dir, "last.ckpt"))
    assert [s.epoch for s in tail.epochs] == [3, 4, 5]
    for resumed, uninterrupted in zip(tail.epochs, full.epochs[3:]):
        assert abs(resumed.train_loss - uninterrupted.train_loss) < 1e-6
        assert abs(resumed.val_loss - uninterrupted.val_loss) < 1e-6


def test_resume_rejects_changed_hyperparameters(small_corpus, tmp_path):
    manifest, cache = small_corpus
    ckpt_dir = str(tmp_path / "ckpt2")
    cfg = _cfg(epochs=1, batch_size=4, checkpoint_dir=ckpt_dir)
    train_task(manifest, manifest, cfg, model_config=TOY, cache_dir=cache)
    model = build_model(TOY, 0)
    with pytest.raises(UsageError, match="learning_rate"):
        train(model, manifest, manifest,
              _cfg(epochs=2, batch_size=4, learning_rate=0.01),
              cache_dir=cache, resume_from=os.path.join(ckpt_dir, "last.ckpt"))


# ---------------------------------------------------------------------------
# checkpoints

def _trained_pair(steps=2):
    model = build_model(TOY, 0)
    state = AdamState.for_params(model.params)
    cfg = _cfg()
    rng = np.random.default_rng(0)
    for _ in range(steps):
        grads = {k: rng.standard_normal(t.data.shape).astype(np.float32) * 1e-3
                 for k, t in model.params.items()}
        adam_step(model.params, grads, state, cfg)
    return model, state, cfg


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    model, state, cfg = _trained_pair()
    first = tmp_path / "a.ckpt"
    second = tmp_path / "b.ckpt"
    checkpoint_save(first, model, state, 7, cfg)
    loaded = checkpoint_load(first)
    checkpoint_save(second, loaded.model, loaded.state, loaded.epoch,
                    loaded.train_config)
    assert first.read_bytes() == second.read_bytes()


def test_checkpoint_restores_every_piece_of_state(tmp_path):
    model, state, cfg = _trained_pair()
    path = tmp_path / "c.ckpt"
    checkpoint_save(path, model, state, 4, cfg)
    ckpt = checkpoint_load(path)
    assert ckpt.epoch == 4
    assert ckpt.train_config == cfg
    assert ckpt.model.config == model.config
    assert set(ckpt.model.params) == set(model.params)
    for name in model.params:
        assert np.array_equal(ckpt.model.params[name].data, model.params[name].data)
        assert np.array_equal(ckpt.state.m[name], state.m[name])
        assert np.array_equal(ckpt.state.v[name], state.v[name])
    for name in model.buffers:
        assert np.array_equal(ckpt.model.buffers[name], model.buffers[name])
    assert ckpt.state.t == state.t


def test_truncated_checkpoint_rejected_at_any_cut(tmp_path):
    model, state, cfg = _trained_pair(steps=1)
    path = tmp_path / "d.ckpt"
    checkpoint_save(path, model, state, 0, cfg)
    payload = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    for cut in (2, 6, 10, 40, len(payload) // 2, len(payload) - 3):
        bad.write_bytes(payload[:cut])
        with pytest.raises(VersionMismatchError):
            checkpoint_load(bad)


def test_wrong_magic_and_version_rejected(tmp_path):
    model, state, cfg = _trained_pair(steps=1)
    path = tmp_path / "e.ckpt"
    checkpoint_save(path, model, state, 0, cfg)
    payload = bytearray(path.read_bytes())
    bad = tmp_path / "bad2.ckpt"

    bad.write_bytes(b"XXXX" + bytes(payload[4:]))
    with pytest.raises(VersionMismatchError, match="not a checkpoint"):
        checkpoint_load(bad)

    payload[4:8] = np.uint32(99).tobytes()
    bad.write_bytes(bytes(payload))
    with pytest.raises(VersionMismatchError, match="version 99"):
        checkpoint_load(bad)
