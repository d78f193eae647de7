import math

import numpy as np
import pytest

import ovseg


def test_jbu_conserves_constants_and_doubles_grid():
    low = np.full((3, 4, 5), 0.25)
    guide = np.random.default_rng(0).uniform(-1, 1, (3, 8, 10))
    out = ovseg.jbu_once(low, guide, seed=1)
    assert out.shape == (3, 8, 10)
    assert np.max(np.abs(out - 0.25)) < 1e-12


def test_upsample_fourteen_to_two_twenty_four():
    rng = np.random.default_rng(1)
    out = ovseg.upsample(rng.normal(size=(2, 14, 14)), rng.uniform(-1, 1, (3, 224, 224)), steps=4)
    assert out.shape == (2, 224, 224)


def test_bias_example():
    out = ovseg.alleviate_global_bias(np.array([[1.0, 2.0]]), np.array([1.0, 0.0]), 0.3)
    assert out[0, 0] == pytest.approx(0.7, abs=1e-15)
    assert out[0, 1] == 2.0


def test_loss_values():
    assert ovseg.loss_cls_contrast(np.eye(2), np.eye(2), tau=1.0) == pytest.approx(2 * math.log1p(math.exp(-1)), abs=1e-14)
    assert ovseg.loss_cls_distill(np.array([1.0, 0.0]), np.array([-2.0, 0.0])) == 2.0
    feats = np.random.default_rng(2).normal(size=(196, 4))
    assert ovseg.loss_local_distill(feats, feats, 14, 14, 7) == 0.0
    pooled = ovseg.region_mean_pool(feats, 14, 14, 1)
    assert np.allclose(pooled[0], feats.mean(axis=0), atol=1e-14)


def test_segment_tokens_recovers_planted_classes():
    emb = np.eye(4)[:2]
    patches = np.array([[1.0, 0.1, 0, 0], [0.1, 1.0, 0, 0], [2.0, 0, 0, 0], [0, 3.0, 0, 0]])
    tokens = np.vstack([np.zeros((1, 4)), patches])
    mask = ovseg.segment_tokens(tokens, 2, 2, emb, [0, 1], lam=0.0)
    assert mask.tolist() == [[0, 1], [0, 1]]


def test_windows_and_miou():
    assert ovseg.window_positions(448) == [0, 112, 224]
    pred = np.array([[0, 1], [1, 1]], dtype=np.uint8)
    gt = np.array([[0, 0], [1, 255]], dtype=np.uint8)
    iou, m = ovseg.miou(pred, gt, 2)
    assert iou == [0.5, 0.5]
    assert m == 0.5


def test_pnm_and_ovw1_round_trip(tmp_path):
    img = np.random.default_rng(3).integers(0, 256, (9, 17, 3), dtype=np.uint8)
    ovseg.write_pnm(str(tmp_path / "a.ppm"), img)
    assert np.array_equal(ovseg.read_pnm(str(tmp_path / "a.ppm")), img)
    w = {"w": np.arange(6, dtype=np.float32).reshape(2, 3).astype(np.float64)}
    ovseg.save_ovw1(str(tmp_path / "w.ovw"), w)
    back = ovseg.load_ovw1(str(tmp_path / "w.ovw"))
    assert np.array_equal(back["w"], w["w"])
    with pytest.raises(ValueError):
        ovseg.read_pnm(str(tmp_path / "w.ovw"))


def test_errors_map_to_python_exceptions():
    with pytest.raises(ovseg.ContractError):
        ovseg.loss_cls_distill(np.zeros(3), np.ones(3))
    with pytest.raises(ovseg.DimensionError):
        ovseg.region_mean_pool(np.zeros((36, 2)), 6, 6, 7)


def test_run_commands(tmp_path):
    small = {
        "toy.corpus_images": 1, "toy.corpus_size": 48, "toy.pairs": 2, "toy.pair_size": 32,
        "toy.scenes": 1, "toy.scene_size": 64, "paths.output": "toy",
    }
    assert ovseg.run("gen-toy-data", small, str(tmp_path)) == 0
    assert (tmp_path / "toy" / "pairs" / "manifest.csv").exists()
    model = {
        "encoder.image_size": 32, "encoder.patch_size": 8, "encoder.depth": 1, "encoder.embed_dim": 8,
        "encoder.num_heads": 2, "encoder.proj_dim": 4, "infer.window": 32, "infer.stride": 16, "infer.long_side": 64,
    }
    seg = dict(model, **{"paths.image": "toy/scenes/images/scene_00.ppm", "paths.vocab": "toy/scenes/vocab.txt",
                          "paths.output": "m.pgm"})
    assert ovseg.run("segment", seg, str(tmp_path)) == 0
    assert ovseg.read_pnm(str(tmp_path / "m.pgm")).shape == (64, 64)
    with pytest.raises(ovseg.ConfigError):
        ovseg.run("segment", {"no.such.key": 1}, str(tmp_path))


def test_defaults_and_help():
    cfg = ovseg.default_config()
    assert cfg["infer.lambda"] == "0.3"
    assert cfg["train.gamma"] == "0.1"
    assert cfg["distill.tau_init"] == "0.07"
    assert cfg["distill.k"] == "7"
    assert "paths.vocab" in ovseg.config_help()
