import math

import numpy as np
import pytest

from mimoloc.channel import MultipathComponent
from mimoloc.fingerprint import (
    ErrorReport,
    IncompleteSample,
    LayoutMismatch,
    MetricScheme,
    build_features,
    evaluate,
    feature_labels,
    load_model,
    predict,
    save_model,
    train_svr,
)
from mimoloc.svr import SvrParams, fit_svr


def los(amp=1.0, az_deg=10.0, tof_ns=30.0, el_deg=None):
    return MultipathComponent(
        amplitude=amp,
        azimuth=math.radians(az_deg),
        delay=tof_ns * 1e-9,
        elevation=None if el_deg is None else math.radians(el_deg),
    )


def smooth_features(position):
    """Invertible synthetic feature map standing in for the RF pipeline."""
    x, y = position
    return np.array([
        x + 0.1 * math.sin(y),
        y - 0.1 * math.cos(x),
        0.5 * x - 0.25 * y,
    ])


def grid_samples(n_side, span=3.0):
    out = []
    for gy in np.linspace(0.0, span, n_side):
        for gx in np.linspace(0.0, span, n_side):
            out.append((smooth_features((gx, gy)), (gx, gy)))
    return out


@pytest.fixture(scope="module")
def grid6_model():
    return train_svr(grid_samples(6), MetricScheme.from_label("aoa"),
                     search_budget=12, seed=1)


class TestScheme:
    def test_seven_combinations(self):
        schemes = MetricScheme.all_schemes()
        assert len(schemes) == 7
        assert len({s.label for s in schemes}) == 7

    @pytest.mark.parametrize("label", ["amp", "aoa", "tof", "amp+aoa",
                                       "amp+tof", "aoa+tof", "amp+aoa+tof"])
    def test_label_round_trip(self, label):
        assert MetricScheme.from_label(label).label == label

    def test_parse_is_order_insensitive(self):
        assert MetricScheme.from_label("tof+amp").label == "amp+tof"

    def test_rejects_unknown_and_empty(self):
        with pytest.raises(ValueError):
            MetricScheme.from_label("rss")
        with pytest.raises(ValueError):
            MetricScheme()


class TestFeatures:
    def test_width_matches_layout_arithmetic(self):
        aoa = MetricScheme.from_label("aoa")
        full = MetricScheme.from_label("amp+aoa+tof")
        tof = MetricScheme.from_label("tof")
        assert 8 * aoa.width(planar=False) == 8
        assert 9 * full.width(planar=True) == 36
        assert 57 * tof.width(planar=False) == 57

    def test_linear_array_vector_order(self):
        comps = [los(0.5, 10.0, 30.0), los(0.25, -5.0, 45.0)]
        vec = build_features(comps, MetricScheme.from_label("amp+aoa+tof"))
        expected = [20 * math.log10(0.5), math.radians(10.0), 30.0,
                    20 * math.log10(0.25), math.radians(-5.0), 45.0]
        np.testing.assert_allclose(vec, expected)

    def test_planar_adds_elevation_column(self):
        comps = [los(1.0, 10.0, 30.0, el_deg=4.0)]
        vec = build_features(comps, MetricScheme.from_label("aoa"))
        np.testing.assert_allclose(
            vec, [math.radians(10.0), math.radians(4.0)])
        labels = feature_labels(1, MetricScheme.from_label("aoa"), True)
        assert labels == ("sub00.aoa_az", "sub00.aoa_el")

    def test_labels_follow_vector(self):
        labels = feature_labels(2, MetricScheme.from_label("amp+tof"), False)
        assert labels == ("sub00.amp_db", "sub00.tof_ns",
                          "sub01.amp_db", "sub01.tof_ns")

    def test_missing_component_raises(self):
        with pytest.raises(IncompleteSample):
            build_features([los(), None], MetricScheme.from_label("aoa"))
        with pytest.raises(IncompleteSample):
            build_features([], MetricScheme.from_label("aoa"))

    def test_mixed_dimensionality_raises(self):
        with pytest.raises(ValueError):
            build_features([los(), los(el_deg=3.0)],
                           MetricScheme.from_label("aoa"))


class TestTraining:
    def test_recovers_positions_on_smooth_field(self, grid6_model):
        held_out = []
        rng = np.random.default_rng(5)
        for _ in range(40):
            pos = rng.uniform(0.3, 2.7, size=2)
            held_out.append((smooth_features(pos), pos))
        report = evaluate(grid6_model, held_out)
        assert report.mae <= 0.10

    def test_constant_coordinate_predicts_constant(self):
        samples = [(smooth_features((x, 1.5)), (x, 1.5))
                   for x in np.linspace(0.0, 3.0, 12)]
        with pytest.warns(UserWarning):
            model = train_svr(samples, MetricScheme.from_label("aoa"),
                              search_budget=4, seed=0)
        out = predict(model, smooth_features((1.1, 1.5)))
        assert out[1] == pytest.approx(1.5)

    def test_prediction_stays_between_neighbors(self, grid6_model):
        # midpoint features should not extrapolate outside the two
        # bracketing training targets on a smooth field
        grid = np.linspace(0.0, 3.0, 6)
        rng = np.random.default_rng(17)
        hits = 0
        for _ in range(100):
            i, j = rng.integers(0, 5, size=2)
            a = (grid[i], grid[j])
            b = (grid[i + 1], grid[j + 1])
            mid = ((a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0)
            x, y = predict(grid6_model, smooth_features(mid))
            if a[0] <= x <= b[0] and a[1] <= y <= b[1]:
                hits += 1
        assert hits >= 95

    def test_budget_validation(self):
        with pytest.raises(ValueError):
            train_svr(grid_samples(3), MetricScheme.from_label("aoa"),
                      search_budget=0)
        with pytest.raises(ValueError):
            train_svr([(np.ones(3), (0.0, 0.0))],
                      MetricScheme.from_label("aoa"))

    def test_search_subset_still_fits_everything(self):
        samples = grid_samples(7)
        scheme = MetricScheme.from_label("aoa")
        model = train_svr(samples, scheme, search_budget=8, seed=3,
                          search_subset=20)
        assert model.metadata["n_train"] == 49
        report = evaluate(model, grid_samples(5))
        assert report.mae < 0.25
        with pytest.raises(ValueError):
            train_svr(samples, scheme, search_subset=5)


class TestPredictContract:
    def test_layout_mismatch_raises(self):
        model = train_svr(grid_samples(4), MetricScheme.from_label("aoa"),
                          search_budget=4, seed=2)
        with pytest.raises(LayoutMismatch):
            predict(model, np.ones(7))

    def test_standardization_folds_into_kernel_scale(self):
        # equal per-dimension spread: standardizing the inputs while
        # dividing the kernel scale by that spread is a no-op
        rng = np.random.default_rng(3)
        raw = rng.uniform(0.0, 2.0, size=(30, 2))
        targets = np.sin(raw[:, 0]) + 0.3 * raw[:, 1]
        mean = raw.mean(axis=0)
        scale = raw.std(axis=0)
        scale[:] = scale.mean()
        std_inputs = (raw - mean) / scale

        base = SvrParams(c=10.0, epsilon=0.01, kernel_scale=1.0, tol=1e-8)
        folded = SvrParams(c=10.0, epsilon=0.01,
                           kernel_scale=float(scale[0]), tol=1e-8)
        probe = rng.uniform(0.2, 1.8, size=(20, 2))
        direct = fit_svr(std_inputs, targets, base).predict(
            (probe - mean) / scale)
        raw_fit = fit_svr(raw, targets, folded).predict(probe)
        np.testing.assert_allclose(direct, raw_fit, atol=1e-9)


class TestEvaluate:
    def test_exact_predictions_give_zero_statistics(self):
        model = train_svr(grid_samples(4), MetricScheme.from_label("aoa"),
                          search_budget=6, seed=3)
        report = ErrorReport.from_errors(np.zeros(10))
        assert report.mae == report.median == report.percentile_95 == 0.0
        assert model.n_features == 3

    def test_hand_computed_statistics(self):
        report = ErrorReport.from_errors([0.01, 0.02, 0.03, 0.04])
        assert report.mae == pytest.approx(0.025)
        assert report.median == pytest.approx(0.025)

    def test_cdf_monotone_and_ordered(self):
        rng = np.random.default_rng(8)
        report = ErrorReport.from_errors(rng.exponential(0.05, size=200))
        assert np.all(np.diff(report.cdf[:, 0]) >= 0)
        assert np.all(np.diff(report.cdf[:, 1]) > 0)
        assert report.median < report.percentile_90 < report.percentile_95


class TestPersistence:
    def test_round_trip_preserves_predictions(self, tmp_path):
        model = train_svr(grid_samples(5), MetricScheme.from_label("aoa"),
                          search_budget=8, seed=4)
        stem = tmp_path / "model"
        save_model(model, stem)
        loaded = load_model(stem)
        probe = np.array([smooth_features((1.2, 2.1)),
                          smooth_features((0.4, 0.9))])
        np.testing.assert_allclose(loaded.predict(probe),
                                   model.predict(probe), atol=1e-12)
        assert loaded.scheme == model.scheme

    def test_format_tag_checked(self, tmp_path):
        model = train_svr(grid_samples(3), MetricScheme.from_label("aoa"),
                          search_budget=4, seed=4)
        stem = tmp_path / "model"
        save_model(model, stem)
        header = stem.with_suffix(".json").read_text()
        assert "fingerprint-model/1" in header
        stem.with_suffix(".json").write_text(
            header.replace("fingerprint-model/1", "other/9"))
        with pytest.raises(ValueError):
            load_model(stem)
