import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import numeric_grad, rel_error
from easter import tensor as tn
from easter.ctc import Vocabulary, ctc_loss
from easter.errors import CheckpointError, ConfigurationError, CorruptCheckpointError, InvalidArgumentError
from easter.images import normalize, pad_batch
from easter.model import (
    BlockSpec,
    ModelConfig,
    analytic_param_count,
    architecture_rows,
    build,
    config_5x3,
    config_reduced,
    config_small,
    config_tiny,
    default_config_3x3,
    forward,
    load_checkpoint,
    param_count,
    save_checkpoint,
    transcribe,
)

ALNUM = Vocabulary.alnum()

# block, sub-blocks, kernel, filters, dropout, dilation, stride
ARCH_3X3 = [
    ("Preprocess-I", 2, 3, 64, 0.2, 1, 2),
    ("B1", 3, 3, 128, 0.2, 1, 1),
    ("B2", 3, 4, 128, 0.3, 1, 1),
    ("B3", 3, 6, 128, 0.3, 1, 1),
    ("Postprocess-I", 1, 7, 256, 0.4, 2, 1),
    ("Postprocess-II", 1, 1, 512, 0.4, 1, 1),
    ("Postprocess-III", 1, 1, 63, 0.0, 1, 1),
]


@pytest.fixture(scope="module")
def model3x3():
    return build(default_config_3x3(ALNUM), 0)


@pytest.fixture(scope="module")
def tiny():
    return build(config_tiny(ALNUM), 3)


def test_architecture_rows():
    rows = architecture_rows(default_config_3x3(ALNUM))
    got = [tuple(r.values()) for r in rows]
    assert got == ARCH_3X3


def test_3x3_layer_count_and_examples():
    cfg = default_config_3x3(ALNUM)
    assert cfg.num_layers == 14
    b2 = cfg.blocks[2]
    assert (b2.kernel, b2.dropout) == (4, 0.3)
    assert cfg.postprocess[0].dilation == 2
    assert cfg.total_stride == 2


def test_param_count_3x3(model3x3):
    n = param_count(model3x3)
    assert n == analytic_param_count(model3x3.config)
    assert 850_000 <= n <= 1_050_000


def test_param_count_matches_analytic_for_variants():
    for cfg in (config_5x3(ALNUM), config_small(ALNUM), config_tiny(ALNUM), config_reduced(ALNUM)):
        assert param_count(build(cfg, 0)) == analytic_param_count(cfg)


def test_5x3_is_deeper_and_residual():
    cfg = config_5x3(ALNUM)
    assert cfg.num_layers == 20
    assert all(b.residual for b in cfg.body)
    assert "B3.skip.weight" in build(cfg, 0).params


def test_param_shapes_follow_config(model3x3):
    w = model3x3.params["B2.0.conv.weight"]
    assert w.shape == (128, 128, 4)
    assert model3x3.params["Preprocess-I.0.conv.weight"].shape == (64, 40, 3)
    assert model3x3.params["Postprocess-III.0.conv.weight"].shape == (63, 512, 1)
    assert "Postprocess-III.0.bn.gamma" not in model3x3.params


@pytest.mark.parametrize(
    "change, message",
    [
        (lambda b: b[:-1] + (BlockSpec("Postprocess-III", 1, 1, 10, 0.0),), "expected |vocab|+1"),
        (lambda b: (BlockSpec("Preprocess-I", 1, 0, 8, 0.0),) + b[1:], "kernel"),
        (lambda b: (BlockSpec("Preprocess-I", 1, 3, 8, 1.0),) + b[1:], "dropout"),
        (lambda b: b[:2], "three postprocess"),
    ],
)
def test_invalid_configs(change, message):
    base = config_tiny(ALNUM)
    with pytest.raises(ConfigurationError, match=message.replace("|", r"\|").replace("+", r"\+")):
        ModelConfig(change(base.blocks), ALNUM).validate()


def test_config_dict_round_trip():
    cfg = default_config_3x3(ALNUM)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert ModelConfig.from_dict({"preset": "3x3"}, ALNUM) == cfg


def test_output_length_law(tiny):
    for w in range(20, 401):
        assert tiny.output_length(w) == math.ceil(w / 2)


@settings(max_examples=15, deadline=None)
@given(st.lists(st.integers(20, 400), min_size=1, max_size=3))
def test_lattice_valid_lengths(widths):
    model = build(config_tiny(ALNUM, width=4), 0)
    images = [np.full((40, w), 200, dtype=np.uint8) for w in widths]
    lats = forward(model, images)
    assert [lat.valid_length for lat in lats] == [math.ceil(w / 2) for w in widths]


def test_widths_40_64(model3x3):
    rng = np.random.default_rng(0)
    images = [rng.integers(0, 256, (40, w), dtype=np.uint8) for w in (40, 64)]
    lats = forward(model3x3, images)
    assert [lat.valid_length for lat in lats] == [20, 32]
    for lat in lats:
        assert np.allclose(np.exp(lat.log_probs).sum(axis=1), 1.0, atol=1e-5)


def test_padding_is_inert(model3x3):
    rng = np.random.default_rng(5)
    images = [rng.integers(0, 256, (40, w), dtype=np.uint8) for w in (23, 57, 110, 64)]
    batched = forward(model3x3, images)
    for im, lat in zip(images, batched):
        single = forward(model3x3, [im])[0]
        assert lat.valid_length == single.valid_length
        assert np.max(np.abs(lat.log_probs - single.log_probs)) < 1e-5


def test_infer_mode_is_deterministic(model3x3):
    im = np.random.default_rng(1).integers(0, 256, (40, 77), dtype=np.uint8)
    a = forward(model3x3, [im])[0].log_probs
    b = forward(model3x3, [im])[0].log_probs
    assert np.array_equal(a, b)


def test_train_mode_dropout_varies():
    model = build(default_config_3x3(ALNUM), 0).train()
    im = np.random.default_rng(1).integers(0, 256, (40, 50), dtype=np.uint8)
    a = forward(model, [im], np.random.default_rng(0))[0].log_probs
    b = forward(model, [im], np.random.default_rng(1))[0].log_probs
    model.eval()
    assert not np.array_equal(a, b)


def test_wrong_height_rejected(tiny):
    with pytest.raises(InvalidArgumentError):
        forward(tiny, [np.zeros((32, 50), dtype=np.uint8)])


def test_checkpoint_round_trip(tmp_path, model3x3):
    path = tmp_path / "m.estr"
    save_checkpoint(model3x3, path)
    loaded = load_checkpoint(path)
    assert loaded.config == model3x3.config
    for k, p in model3x3.params.items():
        assert np.array_equal(p.data, loaded.params[k].data)
    im = np.random.default_rng(2).integers(0, 256, (40, 61), dtype=np.uint8)
    assert np.array_equal(forward(model3x3, [im])[0].log_probs, forward(loaded, [im])[0].log_probs)


def test_checkpoint_keeps_running_stats(tmp_path):
    model = build(config_tiny(ALNUM), 0).train()
    x, widths = pad_batch([normalize(np.random.default_rng(0).integers(0, 256, (40, 30)))])
    model.forward_padded(x, widths, np.random.default_rng(0))
    save_checkpoint(model, tmp_path / "m.estr")
    loaded = load_checkpoint(tmp_path / "m.estr")
    for k, a in model.buffers.items():
        assert np.array_equal(a, loaded.buffers[k])


def test_truncated_checkpoint(tmp_path, tiny):
    path = tmp_path / "m.estr"
    save_checkpoint(tiny, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_bitflip_detected(tmp_path, tiny):
    path = tmp_path / "m.estr"
    save_checkpoint(tiny, path)
    data = bytearray(path.read_bytes())
    data[-40] ^= 0x10
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_conflicting_vocab(tmp_path, tiny):
    path = tmp_path / "m.estr"
    save_checkpoint(tiny, path)
    with pytest.raises(CheckpointError, match="vocabulary"):
        load_checkpoint(path, Vocabulary.printed())
    assert load_checkpoint(path, ALNUM).vocab == ALNUM


def test_transcribe_accepts_any_height(tiny):
    rng = np.random.default_rng(0)
    images = [rng.integers(0, 256, (h, w), dtype=np.uint8) for h, w in ((40, 50), (80, 120), (20, 30))]
    out = transcribe(tiny, images)
    assert len(out) == 3 and all(isinstance(t, str) for t in out)


@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradient(seed):
    vocab = Vocabulary.named("abc")
    model = build(config_reduced(vocab, width=4), seed).astype(np.float64).train()
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 40, 14))
    widths = [14, 11]
    labels = [[0, 1, 1], [2, 0]]

    def loss_value():
        with tn.no_grad():
            return _loss(model, x, widths, labels).item()

    loss = _loss(model, x, widths, labels)
    for p in model.parameters():
        p.grad = None
    tn.backward(loss)
    for name in ("Preprocess-I.0.conv.weight", "Postprocess-I.0.bn.gamma", "Postprocess-III.0.conv.bias"):
        p = model.params[name]
        analytic = p.grad.copy()
        numeric = numeric_grad(loss_value, p.data)
        assert rel_error(analytic, numeric) < 1e-3, name


def _loss(model, x, widths, labels):
    # batch statistics make the loss depend on the whole batch, which the check covers
    saved = {k: v.copy() for k, v in model.buffers.items()}
    lats = model.forward_padded(x, widths, np.random.default_rng(0))
    for k, v in saved.items():
        model.buffers[k][...] = v
    total = ctc_loss(lats[0], labels[0])
    for lat, lab in zip(lats[1:], labels[1:]):
        total = total + ctc_loss(lat, lab)
    return total
