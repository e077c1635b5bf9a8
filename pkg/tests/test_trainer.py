import csv
import json
import math

import numpy as np
import pytest

from easter import trainer as tr
from easter.ctc import Vocabulary
from easter.datagen import ALNUM_TEMPLATES, GeneratorConfig, generate_dataset
from easter.errors import ConfigurationError, DataError, TrainingDivergedError
from easter.model import load_checkpoint
from easter.tensor import Tensor
from easter.trainer import Adam, Sample, TrainingConfig, TrainState, clip_grad_norm, fit, make_batch, train_step

ALNUM = Vocabulary.alnum()


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    train = generate_dataset(
        GeneratorConfig(templates=ALNUM_TEMPLATES, size=24, seed=5, output_dir=str(root / "train"), vocab="alnum"), 1
    )
    val = generate_dataset(
        GeneratorConfig(templates=ALNUM_TEMPLATES, size=8, seed=6, output_dir=str(root / "val"), vocab="alnum"), 1
    )
    return train, val


def _config(data, out, **kw):
    train, val = data
    base = dict(
        train_manifest=str(train),
        val_manifest=str(val),
        vocab="alnum",
        model={"preset": "tiny"},
        batch_size=4,
        max_steps=12,
        eval_interval=4,
        checkpoint_dir=str(out),
        seed=3,
    )
    base.update(kw)
    return TrainingConfig(**base).validate()


def _rows(path):
    with open(path, newline="") as fh:
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in csv.DictReader(fh)]


def _sample(text, width=40, sid="s"):
    return Sample(sid, np.full((40, width), 200, dtype=np.uint8), text)


# -- batching --------------------------------------------------------------------


def test_make_batch_widths_and_lengths():
    batch = make_batch([_sample("ab", 40), _sample("cd", 80)], ALNUM)
    assert batch.images.shape == (2, 40, 80)
    assert batch.widths == [40, 80] and batch.lengths == [20, 40]
    # padding is the normalized background value
    assert np.all(batch.images[0, :, 40:] == 1.0)


def test_make_batch_rescales_to_height_40():
    batch = make_batch([Sample("s", np.full((80, 100), 90, dtype=np.uint8), "x")], ALNUM)
    assert batch.images.shape == (1, 40, 50)


def test_make_batch_luminance():
    rgb = np.zeros((40, 10, 3), dtype=np.uint8)
    rgb[..., 0] = 100
    rgb[..., 1] = 200
    batch = make_batch([Sample("s", rgb, "x")], ALNUM)
    gray = round(0.299 * 100 + 0.587 * 200)
    assert batch.images[0, 0, 0] == pytest.approx((gray / 255 - 0.5) / 0.5, abs=1e-6)


def test_make_batch_rejects_oov_with_id():
    with pytest.raises(DataError, match="img_007"):
        make_batch([_sample("ok"), _sample("bad!", sid="img_007")], ALNUM)


def test_batch_indices_cover_each_epoch():
    n, b = 10, 4
    seen = [i for step in range(5) for i in tr.batch_indices(step, n, b, seed=1)]
    assert sorted(seen[:10]) == list(range(10)) and sorted(seen[10:20]) == list(range(10))
    assert tr.batch_indices(3, n, b, 1) == tr.batch_indices(3, n, b, 1)
    assert seen[:10] != [i for step in range(3) for i in tr.batch_indices(step, n, b, seed=2)][:10]


# -- optimizer ---------------------------------------------------------------------


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    p.grad = np.array([0.5, -4.0, 1e-3], dtype=np.float32)
    Adam({"p": p}, lr=0.1).step()
    assert np.allclose(p.data, [0.9, -1.9, 2.9], atol=1e-4)


def test_adam_matches_reference_over_steps():
    rng = np.random.default_rng(0)
    x = rng.normal(size=5)
    p = Tensor(x.copy(), requires_grad=True, dtype=np.float64)
    opt = Adam({"p": p}, lr=0.01)
    m = v = np.zeros(5)
    ref = x.copy()
    for t in range(1, 8):
        g = rng.normal(size=5)
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(p.data, ref)


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert np.allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8])
    clip_grad_norm([a, b], 10.0)
    assert np.allclose(a.grad, [0.6, 0.0])


# -- train_step ---------------------------------------------------------------------


@pytest.fixture
def batch(data):
    samples = tr.load_samples(data[0])[:4]
    return make_batch(samples, ALNUM)


def test_zero_lr_leaves_parameters(data, batch, tmp_path):
    cfg = _config(data, tmp_path)
    cfg.lr = 0.0
    state = TrainState.fresh(cfg)
    before = {k: p.data.copy() for k, p in state.model.params.items()}
    result = train_step(state, batch, cfg)
    assert math.isfinite(result.grad_norm) and result.grad_norm > 0
    for k, p in state.model.params.items():
        assert np.array_equal(p.data, before[k])


def test_loss_decreases_on_repeated_batch(data, batch, tmp_path):
    cfg = _config(data, tmp_path, lr=3e-3)
    state = TrainState.fresh(cfg)
    losses = [train_step(state, batch, cfg).loss for _ in range(30)]
    assert all(math.isfinite(v) for v in losses)
    assert np.mean(losses[-5:]) < np.mean(losses[5:10])


def test_weighted_loss_trains(data, batch, tmp_path):
    cfg = _config(data, tmp_path, weighted_ctc_alpha=0.7)
    state = TrainState.fresh(cfg)
    assert math.isfinite(train_step(state, batch, cfg).loss)


def test_infeasible_samples_skipped(tmp_path, data):
    cfg = _config(data, tmp_path)
    state = TrainState.fresh(cfg)
    # width 8 -> 4 frames; "abcdefgh" needs 8
    b = make_batch([_sample("abcdefgh", 8, "long"), _sample("ab", 40, "short")], ALNUM)
    result = train_step(state, b, cfg)
    assert (result.used, result.skipped, state.skipped) == (1, 1, 1)
    only_bad = make_batch([_sample("abcdefgh", 8, "long")], ALNUM)
    assert train_step(state, only_bad, cfg).used == 0 and state.skipped == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_dumps_diagnostics(data, batch, tmp_path):
    cfg = _config(data, tmp_path)
    state = TrainState.fresh(cfg)
    state.model.params["B1.0.conv.weight"].data[:] = np.nan
    with pytest.raises(TrainingDivergedError):
        train_step(state, batch, cfg, diagnostics_dir=tmp_path)
    dumps = list(tmp_path.glob("diverged_step*.json"))
    assert len(dumps) == 1
    assert json.loads(dumps[0].read_text())["sample_ids"] == batch.ids


# -- fit ---------------------------------------------------------------------------


def test_fit_writes_outputs(data, tmp_path):
    result = fit(_config(data, tmp_path))
    rows = _rows(result.metrics_path)
    assert [r["step"] for r in rows] == ["4", "8", "12"]
    assert all(r["val_cer"] != "" for r in rows)
    with open(result.metrics_path) as fh:
        assert fh.readline().strip() == "step,train_loss,val_cer,val_wer,wall_time"
    assert load_checkpoint(result.best_checkpoint).vocab == ALNUM
    assert (tmp_path / tr.STATE_NAME).exists()
    assert result.state.skipped == 0


def test_fit_is_deterministic(data, tmp_path):
    a = fit(_config(data, tmp_path / "a"))
    b = fit(_config(data, tmp_path / "b"))
    assert _rows(a.metrics_path) == _rows(b.metrics_path)
    for k, p in a.state.model.params.items():
        assert np.array_equal(p.data, b.state.model.params[k].data)


def test_resume_matches_uninterrupted(data, tmp_path):
    full = fit(_config(data, tmp_path / "full"))
    fit(_config(data, tmp_path / "part", max_steps=8))
    resumed = fit(_config(data, tmp_path / "part"), resume=True)
    assert _rows(resumed.metrics_path) == _rows(full.metrics_path)
    for k, p in full.state.model.params.items():
        assert np.array_equal(p.data, resumed.state.model.params[k].data)


def test_interrupt_mid_interval_is_resumable(data, tmp_path, monkeypatch):
    full = fit(_config(data, tmp_path / "full"))
    real_step = tr.train_step

    def flaky(state, *args, **kwargs):
        if state.step == 6:
            raise KeyboardInterrupt
        return real_step(state, *args, **kwargs)

    monkeypatch.setattr(tr, "train_step", flaky)
    with pytest.raises(KeyboardInterrupt):
        fit(_config(data, tmp_path / "cut"))
    monkeypatch.setattr(tr, "train_step", real_step)
    assert (tmp_path / "cut" / tr.STATE_NAME).exists()
    resumed = fit(_config(data, tmp_path / "cut"), resume=True)
    assert _rows(resumed.metrics_path) == _rows(full.metrics_path)


def test_on_eval_can_stop(data, tmp_path):
    calls = []
    result = fit(_config(data, tmp_path), on_eval=lambda s, row: calls.append(row["step"]) or True)
    assert calls == [4] and result.state.step == 4


def test_leakage_guard(data, tmp_path):
    train, _ = data
    with pytest.raises(DataError, match="same file"):
        fit(_config((train, train), tmp_path))
    copy = tmp_path / "copy.tsv"
    # same images under a different manifest
    copy.write_text("".join(f"{r.path}\t{r.text}\n" for r in tr.read_manifest(train)[:2]))
    with pytest.raises(DataError, match="also appear"):
        fit(_config((train, copy), tmp_path / "run"))


def test_config_load_resolves_relative_paths(tmp_path):
    (tmp_path / "cfg").mkdir()
    path = tmp_path / "cfg" / "train.json"
    path.write_text(json.dumps({"train_manifest": "../d/manifest.tsv", "checkpoint_dir": "../runs/x"}))
    cfg = TrainingConfig.load(path)
    assert cfg.train_manifest == str(tmp_path / "cfg" / "../d/manifest.tsv")
    assert cfg.val_manifest is None


@pytest.mark.parametrize(
    "override",
    [
        {"batch_size": 0},
        {"lr": 0.0},
        {"weighted_ctc_alpha": 1.0},
        {"augment": "heavy"},
        {"augment": {"ops": [{"kind": "rotate", "probability": 2}]}},
    ],
)
def test_invalid_training_configs(override):
    with pytest.raises(ConfigurationError):
        TrainingConfig.from_dict({"train_manifest": "x", **override})


def test_unknown_keys_rejected():
    with pytest.raises(ConfigurationError, match="unknown"):
        TrainingConfig.from_dict({"train_manifest": "x", "epochs": 3})
