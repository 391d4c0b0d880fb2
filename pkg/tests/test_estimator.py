"""Estimator facade: sklearn API conventions plus fit/increment/predict."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from sidecarseg import (
    DataError,
    DimensionError,
    SceneSpec,
    SidecarSegmenter,
    build_schedule,
    filter_for_step,
    generate_dataset,
    restrict_labels,
)


@pytest.fixture(scope="module")
def fitted():
    data = generate_dataset(SceneSpec(height=32, width=32, seed=13), 20)
    schedule = build_schedule(range(8), "6-1")
    est = SidecarSegmenter(stem_width=8, branch_widths=(8, 8, 8), num_blocks=1,
                           epochs=10, learning_rate=0.1, batch_size=4, random_state=2)
    base = restrict_labels(data, schedule.base_classes)
    est.fit(base.images, base.labels)
    step = filter_for_step(data, schedule, 1)
    est.fit_increment(step.images, step.labels, [6])
    return est, data, schedule


class TestSklearnConventions:
    def test_get_params_round_trip(self):
        est = SidecarSegmenter(epochs=5, tau=0.6)
        params = est.get_params()
        assert params["epochs"] == 5 and params["tau"] == 0.6
        est.set_params(tau=0.8)
        assert est.tau == 0.8

    def test_clone_preserves_params(self):
        est = SidecarSegmenter(epochs=7, connection_point="context")
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()

    def test_unfitted_predict_raises(self):
        with pytest.raises(NotFittedError):
            SidecarSegmenter().predict(np.zeros((1, 32, 32, 3), dtype=np.float32))


class TestFitPredict:
    def test_fit_sets_state(self, fitted):
        est, _, _ = fitted
        assert est.base_classes_ == (0, 1, 2, 3, 4, 5)
        assert len(est.units_) == 1
        assert est.known_classes_ == (0, 1, 2, 3, 4, 5, 6)

    def test_predict_shape_and_ids(self, fitted):
        est, data, schedule = fitted
        preds = est.predict(data.images[:4])
        assert preds.shape == (4, 32, 32)
        assert set(np.unique(preds)) <= set(est.known_classes_)

    def test_score_in_unit_interval(self, fitted):
        est, data, schedule = fitted
        gt = restrict_labels(data, schedule.classes_through(1))
        score = est.score(data.images[:6], gt.labels[:6])
        assert 0.0 <= score <= 1.0

    def test_predict_confidence_detail(self, fitted):
        est, data, _ = fitted
        routed = est.predict_confidence(data.images[:2])
        assert len(routed) == 2
        assert routed[0].label_map.shape == (32, 32)
        assert set(np.unique(routed[0].source_map)) <= {0, 1}

    def test_increment_rejects_known_class(self, fitted):
        est, data, schedule = fitted
        step = filter_for_step(data, schedule, 1)
        from sidecarseg import ScheduleError

        with pytest.raises(ScheduleError):
            est.fit_increment(step.images, step.labels, [6])


class TestValidationHelpers:
    def test_bad_image_shape(self):
        est = SidecarSegmenter()
        with pytest.raises(DimensionError):
            est.fit(np.zeros((2, 32, 32), dtype=np.float32), np.zeros((2, 32, 32), dtype=int))

    def test_indivisible_dims(self):
        est = SidecarSegmenter()
        with pytest.raises(DimensionError):
            est.fit(np.zeros((1, 30, 30, 3), dtype=np.float32),
                    np.zeros((1, 30, 30), dtype=int))

    def test_out_of_range_values(self):
        est = SidecarSegmenter()
        with pytest.raises(DataError):
            est.fit(np.full((1, 32, 32, 3), 2.0, dtype=np.float32),
                    np.zeros((1, 32, 32), dtype=int))

    def test_float_labels_rejected(self):
        est = SidecarSegmenter()
        with pytest.raises(DataError):
            est.fit(np.zeros((1, 32, 32, 3), dtype=np.float32),
                    np.zeros((1, 32, 32), dtype=np.float32))

    def test_labels_outside_base_set_rejected(self):
        est = SidecarSegmenter(num_base_classes=4)
        labels = np.full((1, 32, 32), 5, dtype=np.int64)
        with pytest.raises(DataError):
            est.fit(np.zeros((1, 32, 32, 3), dtype=np.float32), labels)
