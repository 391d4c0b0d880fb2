"""Scikit-learn style facade over the continual segmentation pipeline.

``fit`` trains the base model, ``fit_increment`` adds one frozen-backbone
incremental step at a time, ``predict`` returns routed label maps, and
``score`` reports mean IoU. Constructor arguments follow the sklearn
contract (stored verbatim, introspectable via ``get_params``), so the
estimator clones and composes with the wider ecosystem.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import BACKGROUND_ID, SegmentationDataset
from .errors import ScheduleError
from .evaluation import evaluate_routed, predict_routed, route_single
from .model import IncrementalUnit, ModelConfig, build_incremental_unit, build_model
from .routing import RoutingConfig
from .training import TrainConfig, train_base, train_incremental
from .validation import check_image_batch, check_label_batch


class SidecarSegmenter(BaseEstimator):
    """Replay-free class-incremental semantic segmenter.

    Parameters
    ----------
    num_base_classes : size of the initial jointly-trained class set
        (ids 0..num_base_classes-1 by convention, 0 being background).
    stem_width, branch_widths, num_blocks : backbone capacity knobs.
    connection_point : which branch incremental units mirror and tap
        ("detail", "context", or "boundary").
    learning_rate, momentum, epochs, batch_size, poly_power : SGD schedule
        used for both the base phase and incremental steps.
    tau : confidence threshold above which a novel-class head claims a pixel.
    arbitration : how simultaneous head claims are resolved.
    random_state : seed controlling init, batch order, and data-free
        reproducibility of the whole fit.
    """

    def __init__(self, num_base_classes: int = 6, stem_width: int = 16,
                 branch_widths: tuple[int, int, int] = (24, 24, 12),
                 num_blocks: int = 2, connection_point: str = "boundary",
                 learning_rate: float = 0.05, momentum: float = 0.9,
                 epochs: int = 12, batch_size: int = 8, poly_power: float = 0.9,
                 tau: float = 0.75, arbitration: str = "max_confidence",
                 random_state: int = 0):
        self.num_base_classes = num_base_classes
        self.stem_width = stem_width
        self.branch_widths = branch_widths
        self.num_blocks = num_blocks
        self.connection_point = connection_point
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.poly_power = poly_power
        self.tau = tau
        self.arbitration = arbitration
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            stem_width=self.stem_width,
            branch_widths=tuple(self.branch_widths),
            num_blocks_per_branch=self.num_blocks,
            num_base_classes=self.num_base_classes,
            connection_point=self.connection_point,
        )

    def _train_config(self, epochs: int | None = None) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            epochs=self.epochs if epochs is None else epochs,
            batch_size=self.batch_size,
            poly_power=self.poly_power,
            seed=self.random_state,
        )

    def _routing_config(self) -> RoutingConfig:
        config = RoutingConfig(tau=self.tau, arbitration=self.arbitration)
        config.validate()
        return config

    @property
    def known_classes_(self) -> tuple[int, ...]:
        check_is_fitted(self, "model_")
        novel = [c for unit in self.units_ for c in unit.novel_class_ids]
        return tuple(sorted(set(self.base_classes_) | set(novel)))

    def fit(self, X, y) -> "SidecarSegmenter":
        """Train the base model; labels must be base-class ids or ignore."""
        X = check_image_batch(X)
        y = check_label_batch(y, X, allowed_ids=range(self.num_base_classes))
        config = self._model_config()
        self.model_ = build_model(config, self.random_state)
        self.base_classes_ = tuple(range(self.num_base_classes))
        self.units_: list[IncrementalUnit] = []
        dataset = SegmentationDataset(X, y, self.base_classes_)
        self.base_record_ = train_base(self.model_, dataset, self._train_config())
        self.step_records_ = []
        return self

    def fit_increment(self, X, y, novel_class_ids, epochs: int | None = None
                      ) -> "SidecarSegmenter":
        """Learn new classes from step data without touching prior knowledge.

        ``y`` labels pixels as the novel ids, the not-novel target
        (background id), or ignore; anything else is rejected. Each call
        freezes everything trained so far and optimizes one fresh unit.
        """
        check_is_fitted(self, "model_")
        ids = tuple(sorted(int(c) for c in np.atleast_1d(novel_class_ids)))
        if not ids:
            raise ScheduleError("novel_class_ids must be non-empty")
        X = check_image_batch(X)
        y = check_label_batch(y, X, allowed_ids=(BACKGROUND_ID, *ids))
        step = len(self.units_) + 1
        unit = build_incremental_unit(self._model_config(), ids, step, self.random_state,
                                      existing_units=tuple(self.units_))
        dataset = SegmentationDataset(X, y, self.known_classes_, step_tag=step)
        record = train_incremental(self.model_, unit, dataset,
                                   self._train_config(epochs),
                                   prior_units=tuple(self.units_))
        self.units_.append(unit)
        self.step_records_.append(record)
        return self

    def predict(self, X) -> np.ndarray:
        """Routed label maps, (N, H, W) over all classes learned so far."""
        check_is_fitted(self, "model_")
        X = check_image_batch(X)
        return predict_routed(self.model_, self.units_, X, self._routing_config())

    def predict_confidence(self, X):
        """Per-pixel routing detail for each image: labels, sources, confidences."""
        check_is_fitted(self, "model_")
        X = check_image_batch(X)
        config = self._routing_config()
        return [route_single(self.model_, self.units_, image, config) for image in X]

    def score(self, X, y) -> float:
        """Overall mean IoU against ground truth over the known classes."""
        check_is_fitted(self, "model_")
        X = check_image_batch(X)
        y = check_label_batch(y, X)
        known = self.known_classes_
        novel = tuple(c for c in known if c not in self.base_classes_)
        dataset = SegmentationDataset(X, y, known)
        report = evaluate_routed(self.model_, self.units_, dataset, self.base_classes_,
                                 novel, len(self.units_), self._routing_config())
        return report.overall_miou
