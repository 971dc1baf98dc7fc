"""Detectors: edge pipeline correctness, classifier training, benchmark."""

import csv

import numpy as np
import pytest

from bridgesurvey import detect, env, nn, render
from bridgesurvey.detect import CannyConfig, ClassifierConfig, Detection


def step_image(size, column, low, high):
    img = np.full((size, size), low)
    img[:, column:] = high
    return img


# ---------------------------------------------------------------------------
# edge pipeline

def test_constant_image_has_no_edges():
    for level in (0.0, 0.37, 1.0):
        r = detect.canny(np.full((32, 32), level))
        assert not r.edges.any()
        assert not r.strong.any()


def test_vertical_step_edges_near_step_column():
    r = detect.canny(step_image(64, 30, 0.2, 0.8))
    cols = np.unique(np.nonzero(r.edges)[1])
    assert len(cols) > 0
    assert cols.min() >= 29 and cols.max() <= 31


def test_vertical_step_property_any_contrast_and_position():
    """Edge localization is contrast-invariant: the range normalization
    cancels the step height."""
    rng = np.random.default_rng(0)
    for _ in range(200):
        c = int(rng.integers(5, 27))
        low, high = sorted(rng.uniform(0.0, 1.0, size=2))
        if high - low < 0.05:
            continue
        r = detect.canny(step_image(32, c, low, high))
        cols = np.unique(np.nonzero(r.edges)[1])
        assert len(cols) > 0, (c, low, high)
        assert cols.min() >= c - 1 and cols.max() <= c + 1, (c, low, high)


def test_horizontal_step_edges_near_step_row():
    img = step_image(64, 30, 0.2, 0.8).T
    r = detect.canny(img)
    rows = np.unique(np.nonzero(r.edges)[0])
    assert rows.min() >= 29 and rows.max() <= 31


def test_diagonal_step_edges_follow_the_diagonal():
    ii, jj = np.mgrid[0:48, 0:48]
    img = np.where(ii + jj < 48, 0.25, 0.75)
    r = detect.canny(img)
    ys, xs = np.nonzero(r.edges)
    assert len(ys) > 0
    assert np.all(np.abs(ys + xs - 47.5) <= 2.5)


def test_nms_never_increases_magnitude():
    rng = np.random.default_rng(1)
    for _ in range(300):
        img = rng.uniform(size=(24, 24))
        r = detect.canny(img)
        assert np.all(r.nms <= r.magnitude + 1e-15)
        assert np.all((r.nms == 0) | (r.nms == r.magnitude))


def test_threshold_maps_partition():
    rng = np.random.default_rng(2)
    for _ in range(100):
        r = detect.canny(rng.uniform(size=(24, 24)))
        assert not (r.strong & r.weak).any()
        assert np.all(r.strong == (r.nms >= 0.3))


def test_hysteresis_edge_set_bounds():
    rng = np.random.default_rng(3)
    for _ in range(300):
        r = detect.canny(rng.uniform(size=(24, 24)))
        assert np.all(r.strong <= r.edges)
        assert np.all(r.edges <= (r.strong | r.weak))


def test_hysteresis_connectivity_oracle():
    strong = np.zeros((9, 9), dtype=bool)
    weak = np.zeros((9, 9), dtype=bool)
    strong[4, 4] = True
    # weak chain running right from the strong seed, including a diagonal hop
    weak[4, 5] = weak[4, 6] = weak[5, 7] = True
    # isolated weak island
    weak[0, 0] = weak[0, 1] = True
    edges = detect._hysteresis(strong, weak)
    expected = strong | np.zeros_like(weak)
    expected[4, 5] = expected[4, 6] = expected[5, 7] = True
    assert np.array_equal(edges, expected)


def test_canny_deterministic():
    img = np.random.default_rng(4).uniform(size=(32, 32))
    a = detect.canny(img)
    b = detect.canny(img)
    assert np.array_equal(a.edges, b.edges)
    assert np.array_equal(a.magnitude, b.magnitude)


def test_canny_rejects_bad_input():
    with pytest.raises(ValueError):
        detect.canny(np.zeros((4, 4, 3)))
    with pytest.raises(ValueError):
        CannyConfig(low=0.5, high=0.3)


def test_decide_canny_count_rule():
    cfg = CannyConfig()
    edges = np.zeros((64, 64), dtype=bool)
    d = detect.decide_canny(edges, cfg)
    assert d.present is False and d.confidence == 0.0
    edges.reshape(-1)[:76] = True  # one short of the 0.6 * 128 bar
    assert detect.decide_canny(edges, cfg).present is False
    edges.reshape(-1)[:77] = True
    d = detect.decide_canny(edges, cfg)
    assert d.present is True
    assert d.confidence == pytest.approx(77 / 128)
    edges[:] = True
    assert detect.decide_canny(edges, cfg).confidence == 1.0


def test_decide_canny_monotone_in_edge_set():
    rng = np.random.default_rng(5)
    for _ in range(200):
        a = rng.uniform(size=(32, 32)) < 0.2
        extra = rng.uniform(size=(32, 32)) < 0.1
        b = a | extra
        ca = detect.decide_canny(a).confidence
        cb = detect.decide_canny(b).confidence
        assert ca <= cb
        assert 0.0 <= ca <= 1.0


# ---------------------------------------------------------------------------
# classifier

def synth_dataset(rng, n=80, res=16):
    """Separable toy patches: positives carry a dark center block."""
    pixels = rng.uniform(0.55, 0.7, size=(n, res, res))
    labels = np.array(["crack" if i % 2 == 0 else "none" for i in range(n)])
    for i in range(0, n, 2):
        pixels[i, 6:10, 6:10] = rng.uniform(0.05, 0.2)
    return pixels, labels


def test_classifier_spec_shapes():
    spec = detect.classifier_spec(64)
    assert spec.output_shape == (2,)
    assert spec.input_shape == (1, 64, 64)
    with pytest.raises(ValueError):
        detect.classifier_spec(8)


def test_train_classifier_learns_separable_data():
    rng = np.random.default_rng(6)
    data = synth_dataset(rng)
    cfg = ClassifierConfig(resolution=16, epochs=6, batch_size=16,
                           learning_rate=3e-3, seed=0)
    params, report = detect.train_classifier(data, cfg)
    assert len(report) == 6
    assert report[-1]["train_acc"] >= 0.9
    assert report[-1]["val_acc"] >= 0.9
    assert report[0]["train_loss"] >= report[-1]["train_loss"]


def test_train_classifier_deterministic():
    rng = np.random.default_rng(7)
    data = synth_dataset(rng, n=40)
    cfg = ClassifierConfig(resolution=16, epochs=2, seed=3)
    p1, r1 = detect.train_classifier(data, cfg)
    p2, r2 = detect.train_classifier(data, cfg)
    assert r1 == r2
    for a, b in zip(p1, p2):
        for k in a:
            assert np.array_equal(a[k], b[k])


def test_train_classifier_rejects_degenerate_input():
    rng = np.random.default_rng(8)
    pixels = rng.uniform(size=(10, 16, 16))
    with pytest.raises(ValueError, match="both"):
        detect.train_classifier((pixels, np.array(["crack"] * 10)),
                                ClassifierConfig(resolution=16, epochs=1))
    labels = np.array(["crack", "none"] * 5)
    with pytest.raises(ValueError, match="resolution"):
        detect.train_classifier((pixels, labels),
                                ClassifierConfig(resolution=32, epochs=1))
    with pytest.raises(ValueError):
        ClassifierConfig(epochs=0)


def test_infer_tie_counts_as_present():
    spec = detect.classifier_spec(16)
    zero = [{k: np.zeros_like(v) for k, v in layer.items()}
            for layer in nn.init_params(spec, np.random.default_rng(0))]
    d = detect.infer_classifier(spec, zero, np.zeros((16, 16)))
    assert d.confidence == pytest.approx(0.5)
    assert d.present is True


def test_classify_batch_consistent_with_single():
    rng = np.random.default_rng(9)
    spec = detect.classifier_spec(16)
    params = nn.init_params(spec, rng)
    x = rng.uniform(size=(7, 16, 16))
    batch = detect.classify_batch(spec, params, x)
    for i in range(7):
        single = detect.classify_batch(spec, params, x[i])
        assert np.allclose(batch[i], single[0], atol=1e-12)
    assert np.allclose(batch.sum(axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# detector objects

def crack_world(with_crack=True):
    cfg = env.ScenarioConfig(length_m=100, breadth_m=100, cell_m=100,
                             n_cracks=0, n_cars=0)
    cracks = []
    cell_map = {}
    if with_crack:
        cracks = [env.CrackSpec(kind="line", points=((40.0, 45.0), (56.0, 52.0)),
                                width_m=0.6)]
        cell_map = {(0, 0): (0,)}
    return env.WorldState(config=cfg, cracks=cracks, cars=[],
                          crack_cell_map=cell_map)


def test_oracle_detector_truth_and_flip():
    det = detect.OracleDetector()
    rng = np.random.default_rng(0)
    assert det.detect(crack_world(True), (0, 0), rng).present is True
    assert det.detect(crack_world(False), (0, 0), rng).present is False
    flipped = detect.OracleDetector(flip_probability=1.0)
    assert flipped.detect(crack_world(True), (0, 0), rng).present is False
    assert flipped.detect(crack_world(False), (0, 0), rng).present is True


def test_oracle_consumes_one_draw_regardless_of_flip_rate():
    """Stream alignment: scenario variants differing only in flip rate see
    identical downstream draws."""
    r1, r2 = np.random.default_rng(1), np.random.default_rng(1)
    detect.OracleDetector(0.0).detect(crack_world(True), (0, 0), r1)
    detect.OracleDetector(0.4).detect(crack_world(True), (0, 0), r2)
    assert r1.uniform() == r2.uniform()


def test_canny_detector_on_worlds():
    det = detect.CannyDetector()
    hit = det.detect(crack_world(True), (0, 0), np.random.default_rng(2))
    miss = det.detect(crack_world(False), (0, 0), np.random.default_rng(2))
    assert hit.present is True
    assert hit.cells == ((0, 0),)
    assert miss.present is False
    assert det.needs_patch and det.name == "canny"


def test_classifier_detector_wiring():
    cfg = ClassifierConfig(resolution=16, epochs=1)
    spec = detect.classifier_spec(16)
    params = nn.init_params(spec, np.random.default_rng(3))
    det = detect.ClassifierDetector(
        params=params, classifier_config=cfg,
        render_config=render.RenderConfig(resolution=16))
    d = det.detect(crack_world(True), (0, 0), np.random.default_rng(4))
    assert isinstance(d, Detection)
    assert d.cells == ((0, 0),)
    assert det.latency_s > detect.CannyDetector().latency_s


def test_build_detector_factory(tmp_path):
    assert detect.build_detector("oracle").name == "oracle"
    assert detect.build_detector("canny").name == "canny"
    with pytest.raises(ValueError, match="trained parameter"):
        detect.build_detector("cnn")
    with pytest.raises(ValueError, match="unknown detector"):
        detect.build_detector("sonar")
    spec = detect.classifier_spec(16)
    path = tmp_path / "model.bin"
    nn.save_params(path, spec, nn.init_params(spec, np.random.default_rng(5)))
    det = detect.build_detector(
        "cnn", params_path=path,
        render_config=render.RenderConfig(resolution=16),
        classifier_config=ClassifierConfig(resolution=16))
    assert det.name == "cnn"


# ---------------------------------------------------------------------------
# benchmark

@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    manifest = render.gen_dataset(
        24, 0.5, render.RenderConfig(resolution=32),
        render.CrackConfig(false_fraction=0.5),
        np.random.default_rng(11), out)
    return manifest


def test_benchmark_rows_and_metrics(tiny_corpus):
    rows = detect.benchmark([detect.OracleDetector(),
                             detect.CannyDetector(
                                 render_config=render.RenderConfig(resolution=32))],
                            tiny_corpus, np.random.default_rng(0),
                            repetitions=1, warmup=2)
    assert [r["detector"] for r in rows] == ["oracle", "canny"]
    oracle = rows[0]
    assert oracle["accuracy"] == 1.0
    assert oracle["precision"] == 1.0 and oracle["recall"] == 1.0
    assert oracle["fpr_false_cracks"] == 0.0
    for row in rows:
        assert set(row) == set(detect.BENCH_COLUMNS)
        assert row["latency_ms_mean"] > 0
        assert row["latency_ms_p95"] >= 0


def test_benchmark_csv_round_trip(tiny_corpus, tmp_path):
    rows = detect.benchmark([detect.OracleDetector()], tiny_corpus,
                            np.random.default_rng(1), repetitions=1)
    path = tmp_path / "bench.csv"
    detect.write_bench_csv(path, rows)
    with open(path, newline="") as f:
        back = list(csv.DictReader(f))
    assert len(back) == 1
    assert back[0]["detector"] == "oracle"
    assert float(back[0]["accuracy"]) == rows[0]["accuracy"]
    assert list(back[0]) == list(detect.BENCH_COLUMNS)
