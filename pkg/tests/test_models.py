import numpy as np
import pytest

from softschema.autodiff import AdamState, ShapeError
from softschema.errors import FormatError
from softschema.models import (
    BUILDERS,
    Checkpoint,
    ModelConfig,
    Network,
    build_autoencoder,
    build_recurrent_predictor,
    build_scene_conditioned,
    build_static_schema,
    infer_shapes,
    init_weights,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from softschema.train import TrainConfig, train_step

SMALL = ModelConfig(image_size=32, seed_channels=16, encoder_channels=4, max_channels=8, feature_dim=8, lstm_units=6)


def static_64_count():
    # dense 9 -> 4*4*64, then (convT 4x4 + conv 3x3) per doubling, then a 3x3 conv to RGB
    n = 9 * 1024 + 1024
    chans = [64, 32, 16, 8, 8]
    for cin, cout in zip(chans, chans[1:]):
        n += 16 * cin * cout + cout + 9 * cout * cout + cout
    return n + 9 * 8 * 3 + 3


def test_static_schema_layout_at_64():
    spec = build_static_schema(ModelConfig(image_size=64))
    assert spec.depth == 13
    assert [l.type for l in spec.layers[:4]] == ["input", "reshape", "dense", "reshape"]
    assert spec.layers[1].shape == (3, 3, 1)
    assert spec.layers[3].shape == (4, 4, 64)
    assert spec.transposed_layers() == ["up1", "up2", "up3", "up4"]
    assert spec.layers[-1].activation == "sigmoid"
    assert parameter_count(spec) == static_64_count() == 67291


@pytest.mark.parametrize(
    "builder,size,depth",
    [
        (build_static_schema, 128, 15),
        (build_scene_conditioned, 64, 14),
        (build_autoencoder, 64, 14),
        (build_recurrent_predictor, 64, 9),
    ],
)
def test_layer_counts(builder, size, depth):
    assert builder(ModelConfig(image_size=size)).depth == depth


def test_deeper_static_net_with_more_convs_per_block():
    assert build_static_schema(ModelConfig(image_size=128, convs_per_block=3)).depth == 25


@pytest.mark.parametrize("kind", sorted(BUILDERS))
def test_shape_inference_matches_forward_pass(kind):
    spec = BUILDERS[kind](SMALL)
    net = Network(spec, seed=0)
    x = np.random.default_rng(0).random((2, 3, *spec.input_shape) if kind == "recurrent_predictor" else (2, *spec.input_shape))
    x = x.astype(np.float32)
    if kind == "recurrent_predictor":
        y, _ = net.forward_sequence(x)
        assert y.shape == (2, 3, *spec.output_shape)
    else:
        captured = {}
        y = net.forward(x, capture=captured)
        assert y.shape == (2, *spec.output_shape)
        for layer, shape in zip(spec.layers, infer_shapes(spec)):
            if layer.name in captured:
                assert captured[layer.name].shape[1:] == shape


def test_unreachable_sizes_are_rejected():
    for size in (48, 256):
        with pytest.raises(ShapeError):
            build_static_schema(ModelConfig(image_size=size))
    with pytest.raises(ShapeError):
        build_scene_conditioned(ModelConfig(image_size=32, encoder_levels=6))


def test_wrong_input_shape_is_rejected():
    net = Network(build_static_schema(SMALL))
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 8), np.float32))


def test_zero_output_layer_predicts_mid_grey():
    spec = build_static_schema(SMALL)
    net = Network(spec, init_weights(spec, 0, zero_output=True))
    np.testing.assert_array_equal(net.predict(np.random.default_rng(1).random((3, 9)).astype(np.float32)), 0.5)


def test_one_adam_step_lowers_the_loss():
    spec = build_static_schema(SMALL)
    net = Network(spec, seed=3)
    rng = np.random.default_rng(0)
    x = rng.random((4, 9)).astype(np.float32)
    y = rng.random((4, 32, 32, 3)).astype(np.float32)
    opt = AdamState.zeros_like([p.data for p in net.parameters()])
    cfg = TrainConfig(lr=1e-3)
    first = train_step(net, x, y, opt, cfg)
    second = float(((net.predict(x) - y) ** 2).mean())
    assert second < first


def test_initialisation_is_seeded():
    spec = build_static_schema(SMALL)
    a, b, c = init_weights(spec, 1), init_weights(spec, 1), init_weights(spec, 2)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["seed.weight"], c["seed.weight"])


@pytest.mark.parametrize("kind", sorted(BUILDERS))
def test_checkpoint_round_trip_is_bit_exact(tmp_path, kind):
    spec = BUILDERS[kind](SMALL)
    ckpt = Checkpoint(spec, init_weights(spec, 7), {"note": "x", "epochs": 3})
    path = tmp_path / "m.sbsm"
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path)
    assert back.spec == spec
    assert back.metadata == ckpt.metadata
    for k, w in ckpt.weights.items():
        assert back.weights[k].tobytes() == w.tobytes()
    save_checkpoint(tmp_path / "again.sbsm", back)
    assert (tmp_path / "again.sbsm").read_bytes() == path.read_bytes()


def test_corrupted_checkpoints_are_rejected(tmp_path):
    spec = build_static_schema(SMALL)
    path = tmp_path / "m.sbsm"
    save_checkpoint(path, Checkpoint(spec, init_weights(spec, 0)))
    raw = path.read_bytes()

    bad = tmp_path / "bad.sbsm"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError) as info:
        load_checkpoint(bad)
    assert info.value.offset == 0

    bad.write_bytes(raw[:-10])
    with pytest.raises(FormatError):
        load_checkpoint(bad)

    bad.write_bytes(raw[:4] + (9).to_bytes(2, "little") + raw[6:])
    with pytest.raises(FormatError):
        load_checkpoint(bad)

    other = build_static_schema(ModelConfig(image_size=32, seed_channels=8))
    mixed = Checkpoint(spec, init_weights(spec, 0))
    mixed.spec = other
    with pytest.raises(ShapeError):
        save_checkpoint(bad, mixed)


def test_checkpoint_image_size_check():
    ckpt = Checkpoint(build_static_schema(SMALL), {})
    ckpt.check_compatible(32)
    with pytest.raises(ShapeError):
        ckpt.check_compatible(64)
