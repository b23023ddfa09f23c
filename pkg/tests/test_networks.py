import numpy as np
import pytest

from nirburst import autodiff as ad
from nirburst.errors import ConfigError, IngestError
from nirburst.networks import MlpConfig, load_weights, mlp_init, read_weights, save_weights


def test_shapes_and_heads():
    cfg = MlpConfig(2, 3, 2, 16, "sine", 30.0, "sigmoid_unit")
    net = mlp_init(cfg, 0)
    out = net(np.zeros((5, 2), dtype=np.float32))
    assert out.shape == (5, 3)
    assert np.all((out.data > 0) & (out.data < 1))
    signed = mlp_init(MlpConfig(2, 3, 2, 16, output_head="tanh_signed"), 0)
    assert np.all(np.abs(signed(np.ones((4, 2), dtype=np.float32)).data) < 1)


def test_siren_init_ranges():
    cfg = MlpConfig(3, 2, 3, 64, "sine", 30.0)
    net = mlp_init(cfg, 7)
    w0 = net.layers[0][0].data
    assert np.abs(w0).max() <= 1 / 3
    w1 = net.layers[1][0].data
    assert np.abs(w1).max() <= np.sqrt(6 / 64) / 30 + 1e-7


def test_identity_init_outputs_bias():
    bias = (1.0, 0, 0, 0, 1.0, 0, 0, 0)
    cfg = MlpConfig(1, 8, 2, 32, "relu", output_bias=bias, identity_init=True)
    out = mlp_init(cfg, 0)(np.linspace(-1, 1, 5).reshape(-1, 1).astype(np.float32)).data
    np.testing.assert_array_equal(out, np.tile(np.array(bias, dtype=np.float32), (5, 1)))


def test_seeded_init_is_deterministic():
    cfg = MlpConfig(2, 3, 2, 16)
    a, b = mlp_init(cfg, 11), mlp_init(cfg, 11)
    for (wa, ba), (wb, bb) in zip(a.layers, b.layers):
        assert np.array_equal(wa.data, wb.data) and np.array_equal(ba.data, bb.data)


def test_nirw_round_trip_bit_identical(tmp_path):
    cfg = MlpConfig(3, 4, 2, 8)
    net = mlp_init(cfg, 1)
    save_weights(net, tmp_path / "a.nirw")
    back = load_weights(cfg, tmp_path / "a.nirw")
    save_weights(back, tmp_path / "b.nirw")
    assert (tmp_path / "a.nirw").read_bytes() == (tmp_path / "b.nirw").read_bytes()
    raw = (tmp_path / "a.nirw").read_bytes()
    assert raw[:4] == b"NIRW" and int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 3 and int.from_bytes(raw[12:16], "little") == 8


def test_nirw_rejects_bad_input(tmp_path):
    (tmp_path / "x.nirw").write_bytes(b"NOPE")
    with pytest.raises(IngestError):
        read_weights(tmp_path / "x.nirw")
    net = mlp_init(MlpConfig(3, 4, 2, 8), 1)
    save_weights(net, tmp_path / "y.nirw")
    (tmp_path / "z.nirw").write_bytes((tmp_path / "y.nirw").read_bytes()[:-3])
    with pytest.raises(IngestError):
        read_weights(tmp_path / "z.nirw")
    with pytest.raises(IngestError):
        load_weights(MlpConfig(3, 4, 3, 8), tmp_path / "y.nirw")


def test_config_validation():
    with pytest.raises(ConfigError):
        MlpConfig(2, 3, activation="gelu").validate()
    with pytest.raises(ConfigError):
        MlpConfig(2, 3, output_bias=(1.0,)).validate()
    cfg = MlpConfig(2, 3, output_bias=(1.0, 2.0, 3.0))
    assert MlpConfig.from_dict(cfg.to_dict()) == cfg


def test_float64_forward():
    with ad.precision("float64"):
        net = mlp_init(MlpConfig(2, 1, 1, 4), 0)
        assert net(np.zeros((2, 2))).data.dtype == np.float64
