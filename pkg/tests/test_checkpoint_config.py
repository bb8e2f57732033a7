import struct
from dataclasses import replace

import numpy as np
import pytest

from ecfusion import checkpoint, config
from ecfusion import numerics as nx
from ecfusion import pipeline as pl
from ecfusion.synth import GridConfig


def test_round_trip_bitwise():
    rng = np.random.default_rng(0)
    arrays = {"b": rng.normal(size=(2, 3)), "a": rng.normal(size=(4,)), "s": np.array(1.5)}
    back = checkpoint.loads(checkpoint.dumps(arrays))
    assert sorted(back) == ["a", "b", "s"]
    for k in arrays:
        assert back[k].shape == np.shape(arrays[k]) and np.array_equal(back[k], arrays[k])


def test_layout_by_hand():
    blob = checkpoint.dumps({"w": np.array([[1.0, 2.0]]), "b": np.array([3.0])})
    want = (b"ECFUSCK\0" + struct.pack("<II", 1, 2)
            + struct.pack("<H", 1) + b"b" + struct.pack("<B", 1) + struct.pack("<I", 1)
            + struct.pack("<H", 1) + b"w" + struct.pack("<B", 2) + struct.pack("<II", 1, 2)
            + struct.pack("<3d", 3.0, 1.0, 2.0))
    assert blob == want


@pytest.mark.parametrize("mutate,msg", [
    (lambda b: b"XXXXXXXX" + b[8:], "magic"),
    (lambda b: b[:8] + struct.pack("<I", 9) + b[12:], "version"),
    (lambda b: b[:-4], "truncated"),
    (lambda b: b[:14], "truncated"),
    (lambda b: b + b"\0", "trailing"),
])
def test_corrupt_blobs_rejected(mutate, msg):
    blob = checkpoint.dumps({"x": np.arange(3.0)})
    with pytest.raises(checkpoint.CheckpointError, match=msg):
        checkpoint.loads(mutate(blob))


def test_model_save_load_and_shape_mismatch(tmp_path):
    grid = GridConfig(X=16, Y=16, channels=8)
    cfg = pl.TrainConfig(k_f=4, flow_hidden=4, dec_layers=1, dec_heads=2, ffn_dim=8)
    a = pl.ModelParams.init(nx.Rng(1), grid, cfg)
    checkpoint.save(tmp_path / "c.bin", a)
    b = checkpoint.load(tmp_path / "c.bin", pl.ModelParams.init(nx.Rng(2), grid, cfg))
    for k, v in a.arrays().items():
        assert np.array_equal(v, b.arrays()[k])
    other = pl.ModelParams.init(nx.Rng(2), grid, replace(cfg, flow_hidden=6))
    with pytest.raises(ValueError, match="sfa.flow_w1"):
        checkpoint.load(tmp_path / "c.bin", other)


def test_defaults_and_overrides():
    rc = config.load(None, {"seed": "7", "depth_sigma": "0.2", "sfa": "off", "ap_radii": "1,3", "out": "x"})
    assert rc.train.seed == 7 and rc.train.sfa is False
    assert rc.conflict.depth_sigma == 0.2 and rc.eval.ap_radii == (1.0, 3.0) and rc.out == "x"
    assert rc.train.k_f == 20 and rc.grid.X == 64


def test_file_parsing_and_resolved_round_trip(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nstage1_steps = 3  # trailing\nk_p=0\n\nsmear_len = 2\n")
    rc = config.load(p, {"seed": 4})
    assert (rc.train.stage1_steps, rc.train.k_p, rc.conflict.smear_len, rc.train.seed) == (3, 0, 2, 4)
    resolved = config.write_resolved(rc, tmp_path / "out")
    again = config.load(resolved)
    assert again == rc
    assert resolved.read_text() == rc.to_text()


@pytest.mark.parametrize("text,msg", [
    ("nonsense_key = 1\n", "unknown config key"),
    ("seed = 1\nseed = 2\n", "duplicate"),
    ("seed\n", "expected key = value"),
    ("seed = abc\n", "bad value"),
    ("sfa = maybe\n", "bad value"),
    ("p_cam_occlude = 2\n", "p_cam_occlude"),
])
def test_bad_config_rejected(tmp_path, text, msg):
    p = tmp_path / "bad.cfg"
    p.write_text(text)
    with pytest.raises(config.ConfigError, match=msg):
        config.load(p)


def test_missing_file_names_path(tmp_path):
    with pytest.raises(config.ConfigError, match="nope.cfg"):
        config.load(tmp_path / "nope.cfg")
