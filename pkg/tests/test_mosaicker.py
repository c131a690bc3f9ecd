import numpy as np
import pytest

from oracles import enumerate_window_counts
from cityseg.errors import ContractViolation, TileIOError, ValidationError
from cityseg.groundtruth import derive_three_class
from cityseg.mosaicker import (
    DirectoryPredictor,
    MosaicConfig,
    OraclePredictor,
    argmax_classmap,
    dump_predictions,
    one_hot,
    predict_large,
    window_grid,
    window_origins,
)
from cityseg.raster import ProbMap, write_png, write_tiled
from cityseg.synth import grid_scene, synthesize_scene


def constant_predictor(p):
    def predict(window, origin):
        h, w = window.shape[:2]
        return np.broadcast_to(np.asarray(p, np.float32)[:, None, None], (3, h, w)).copy()

    return predict


def positional_predictor(seed):
    """Random probabilities that depend on the window origin too."""

    def predict(window, origin):
        rng = np.random.default_rng([seed, *origin])
        raw = rng.random((3,) + window.shape[:2]).astype(np.float32) + 0.01
        return raw / raw.sum(axis=0)

    return predict


def test_window_origins():
    assert window_origins(512, 256, 128) == [0, 128, 256]
    assert window_origins(256, 256, 128) == [0]
    assert window_origins(300, 256, 128) == [0, 44]
    assert window_origins(600, 256, 256) == [0, 256, 344]
    with pytest.raises(ValidationError, match="pad"):
        window_origins(200, 256, 128)


def test_config_validation():
    with pytest.raises(ValidationError):
        MosaicConfig(window=64, stride=65)
    with pytest.raises(ValidationError):
        MosaicConfig(stride=0)


def test_single_window_is_predictor_output():
    image = np.zeros((256, 256, 3), np.uint8)
    pred = positional_predictor(1)
    pm = predict_large(image, pred, MosaicConfig())
    np.testing.assert_allclose(pm.probs, pred(image, (0, 0)), atol=1e-6)


@pytest.mark.parametrize("stride", [32, 64, 100, 128])
def test_constant_predictor_any_stride(stride):
    pm = predict_large(np.zeros((300, 260), np.uint8), constant_predictor((0.2, 0.5, 0.3)), MosaicConfig(128, stride))
    np.testing.assert_allclose(pm.probs[:, 5, 7], (0.2, 0.5, 0.3), atol=1e-6)
    np.testing.assert_allclose(pm.probs, np.broadcast_to(pm.probs[:, :1, :1], pm.probs.shape), atol=1e-6)


@pytest.mark.parametrize("shape, window, stride", [((512, 512), 256, 128), ((300, 450), 64, 48), ((100, 100), 100, 7)])
def test_counts_match_enumeration(shape, window, stride):
    pm = predict_large(np.zeros(shape, np.uint8), constant_predictor((1, 0, 0)), MosaicConfig(window, stride))
    counts, origins = enumerate_window_counts(*shape, window, stride)
    np.testing.assert_array_equal(pm.counts, counts)
    assert sorted(window_grid(shape, MosaicConfig(window, stride))) == sorted(origins)
    assert pm.counts.min() >= 1


def test_linearity_against_brute_force():
    shape, cfg = (200, 170), MosaicConfig(64, 24)
    pred = positional_predictor(5)
    pm = predict_large(np.zeros(shape, np.uint8), pred, cfg)
    total = np.zeros((3,) + shape)
    count = np.zeros(shape)
    for r, c in window_grid(shape, cfg):
        total[:, r : r + 64, c : c + 64] += pred(np.zeros((64, 64)), (r, c))
        count[r : r + 64, c : c + 64] += 1
    np.testing.assert_allclose(pm.probs, total / count, atol=1e-6)
    assert np.abs(pm.probs.sum(axis=0) - 1).max() <= 1e-6


def test_threads_give_identical_output():
    image = np.zeros((300, 300), np.uint8)
    a = predict_large(image, positional_predictor(2), MosaicConfig(64, 32), threads=1)
    b = predict_large(image, positional_predictor(2), MosaicConfig(64, 32), threads=4)
    np.testing.assert_array_equal(a.probs, b.probs)


def test_argmax_and_ties():
    pm = ProbMap.from_probabilities(np.array([[[0.1, 0.4]], [[0.8, 0.4]], [[0.1, 0.2]]]))
    np.testing.assert_array_equal(argmax_classmap(pm), [[1, 0]])
    cm = np.random.default_rng(0).integers(0, 3, (20, 30)).astype(np.uint8)
    np.testing.assert_array_equal(argmax_classmap(ProbMap.from_probabilities(one_hot(cm))), cm)


@pytest.fixture(scope="module")
def scene():
    im, _ = synthesize_scene(grid_scene(3))
    return im, derive_three_class(im)


def test_oracle_reproduces_ground_truth(scene):
    _, cm = scene
    image = np.zeros(cm.shape, np.uint8)
    outs = [argmax_classmap(predict_large(image, OraclePredictor(cm), MosaicConfig(128, s))) for s in (32, 64, 128)]
    for out in outs:
        np.testing.assert_array_equal(out, cm)


def test_oracle_noise_is_deterministic_and_pixelwise(scene):
    _, cm = scene
    image = np.zeros(cm.shape, np.uint8)
    a = argmax_classmap(predict_large(image, OraclePredictor(cm, 0.05, seed=9), MosaicConfig(128, 64)))
    b = argmax_classmap(predict_large(image, OraclePredictor(cm, 0.05, seed=9), MosaicConfig(128, 64)))
    c = argmax_classmap(predict_large(image, OraclePredictor(cm, 0.05, seed=9), MosaicConfig(128, 128)))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, c)
    flipped = (a != cm).mean()
    assert 0.03 < flipped < 0.07


def test_oracle_window_outside_ground_truth():
    oracle = OraclePredictor(np.zeros((10, 10), np.uint8))
    with pytest.raises(IndexError):
        oracle(np.zeros((8, 8)), (5, 5))


def test_predictor_shape_violation_names_origin():
    def bad(window, origin):
        return np.zeros((3, 10, 10), np.float32)

    with pytest.raises(ContractViolation, match=r"\(0, 0\)"):
        predict_large(np.zeros((64, 64), np.uint8), bad, MosaicConfig(32, 32))


def test_tiled_source(tmp_path, scene):
    _, cm = scene
    image = np.random.default_rng(1).integers(0, 255, cm.shape + (3,), dtype=np.uint8)
    tiled = write_tiled(tmp_path / "img", image, tile_size=100)
    seen = []

    def spy(window, origin):
        seen.append(np.array_equal(window, image[origin[0] : origin[0] + 128, origin[1] : origin[1] + 128]))
        return one_hot(cm[origin[0] : origin[0] + 128, origin[1] : origin[1] + 128])

    out = argmax_classmap(predict_large(tiled, spy, MosaicConfig(128, 64)))
    assert all(seen)
    np.testing.assert_array_equal(out, cm)


def test_directory_predictor_equivalence(tmp_path, scene):
    _, cm = scene
    cfg = MosaicConfig(128, 64)
    image = np.zeros(cm.shape, np.uint8)
    oracle = OraclePredictor(cm, 0.05, seed=4)
    files = dump_predictions(image, oracle, cfg, tmp_path / "pred")
    assert len(files) == len(window_grid(cm.shape, cfg))
    direct = predict_large(image, oracle, cfg)
    via_files = predict_large(image, DirectoryPredictor(tmp_path / "pred", cfg), cfg)
    np.testing.assert_array_equal(argmax_classmap(direct), argmax_classmap(via_files))
    np.testing.assert_allclose(direct.probs, via_files.probs, atol=1e-6)


def test_directory_predictor_missing_file(tmp_path):
    cfg = MosaicConfig(128, 128)
    image = np.zeros((256, 256), np.uint8)
    dump_predictions(image, constant_predictor((1, 0, 0)), cfg, tmp_path)
    (tmp_path / "pred_r128_c0.png").unlink()
    with pytest.raises(TileIOError, match="pred_r128_c0.png"):
        predict_large(image, DirectoryPredictor(tmp_path, cfg), cfg)


def test_directory_predictor_wrong_depth_and_size(tmp_path):
    cfg = MosaicConfig(64, 64)
    write_png(tmp_path / "pred_r0_c0.png", np.zeros((64, 64, 3), np.uint8))
    with pytest.raises(ContractViolation, match="16-bit"):
        DirectoryPredictor(tmp_path, cfg)(np.zeros((64, 64)), (0, 0))
    write_png(tmp_path / "pred_r0_c0.png", np.zeros((32, 64, 3), np.uint16))
    with pytest.raises(ContractViolation, match="shape"):
        DirectoryPredictor(tmp_path, cfg)(np.zeros((64, 64)), (0, 0))


@pytest.mark.parametrize("size", [512, 1024, 2048])
def test_window_counts_exact_on_divisible_geometry(size):
    for stride in (64, 128, 256):
        n = len(window_grid((size, size), MosaicConfig(256, stride)))
        assert n == ((size - 256) // stride + 1) ** 2
        assert n == len(enumerate_window_counts(size, size, 256, stride)[1])


def test_halving_stride_about_quadruples_windows_on_city_scale_raster():
    # the full scene is 57,856 x 42,496 pixels
    n = {s: len(window_origins(57856, 256, s)) * len(window_origins(42496, 256, s)) for s in (64, 128)}
    assert n[128] == 451 * 331
    assert n[64] / n[128] == pytest.approx(4, rel=0.005)
