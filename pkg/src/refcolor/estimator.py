"""scikit-learn style wrappers around the data transforms and the staged model."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_image
from .backbone import ModelConfig
from .checkpoint import STAGE_ORDER, Checkpoint
from .datagen import ImageTriple, TPSParams, extract_sketch, tps_warp
from .inference import InferenceRequest, colorize_batch
from .injection import Thresholds
from .metrics import psnr
from .training import run_stage, stage_config


def _images(X, channels: int, name: str) -> list[np.ndarray]:
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = X[None]
    return [check_image(x, channels=channels, name=name) for x in X]


class SketchExtractor(TransformerMixin, BaseEstimator):
    """Color images ``(N, 3, H, W)`` to line drawings ``(N, 1, H, W)``."""

    def __init__(self, sigma: float = 0.5, k: float = 2.0, lo: float = 0.01, hi: float = 0.03):
        self.sigma = sigma
        self.k = k
        self.lo = lo
        self.hi = hi

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        imgs = _images(X, 3, "color image")
        return np.stack([extract_sketch(x, self.sigma, self.k, self.lo, self.hi) for x in imgs])

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags


class TPSWarper(TransformerMixin, BaseEstimator):
    """Random thin plate spline deformation on a ``grid x grid`` control lattice.

    The displacement of item ``i`` depends only on ``random_state`` and
    ``i``, so repeated calls warp identically.
    """

    def __init__(self, magnitude: float = 3.0, grid: int = 4, lam: float = 0.0, random_state: int = 0):
        self.magnitude = magnitude
        self.grid = grid
        self.lam = lam
        self.random_state = random_state

    def fit(self, X, y=None):
        return self

    def params_for(self, index: int, image_size: int) -> TPSParams:
        rng = np.random.default_rng([self.random_state, index])
        return TPSParams.random(image_size, rng, k=self.grid, magnitude=self.magnitude, lam=self.lam)

    def transform(self, X):
        imgs = _images(X, None, "image")
        out = [np.clip(tps_warp(x, self.params_for(i, x.shape[-1])), 0, 1) for i, x in enumerate(imgs)]
        return np.stack(out) if out else np.zeros((0,), dtype=np.float32)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags


class ReferenceColorizer(BaseEstimator):
    """Staged training and reference-based colorization behind fit/predict.

    ``fit`` takes a sequence of :class:`ImageTriple` and runs ``stages`` in
    order, continuing from ``warm_start`` (a checkpoint path) when given.
    ``predict`` takes ``(sketch, reference)`` or ``(sketch, reference,
    sketch_mask, reference_mask)`` tuples and returns ``(N, 3, H, W)``.
    """

    def __init__(self, stages: Sequence[str] = ("0", "1a", "1b"), steps: int | dict = 500,
                 batch_size: int = 8, seed: int = 0, model_config: ModelConfig | None = None,
                 warm_start: str | None = None, mode: str = "vanilla", guidance: float = 3.0,
                 sampling_steps: int = 50, ts_s: float = 0.5, ts_r: float = 0.5):
        self.stages = stages
        self.steps = steps
        self.batch_size = batch_size
        self.seed = seed
        self.model_config = model_config
        self.warm_start = warm_start
        self.mode = mode
        self.guidance = guidance
        self.sampling_steps = sampling_steps
        self.ts_s = ts_s
        self.ts_r = ts_r

    def _stage_steps(self, stage: str) -> int:
        if isinstance(self.steps, dict):
            return int(self.steps[stage])
        return int(self.steps)

    def fit(self, X: Sequence[ImageTriple], y=None):
        triples = list(X)
        if not triples or not all(isinstance(t, ImageTriple) for t in triples):
            raise ValueError("fit expects a non-empty sequence of ImageTriple")
        unknown = [s for s in self.stages if s not in STAGE_ORDER]
        if unknown:
            raise ValueError(f"unknown stages {unknown}")
        ckpt = Checkpoint.load(self.warm_start) if self.warm_start else None
        self.loss_history_ = {}
        for stage in self.stages:
            cfg = stage_config(stage, steps=self._stage_steps(stage), batch_size=self.batch_size,
                               seed=self.seed)
            ckpt = run_stage(cfg, triples, ckpt, model_config=self.model_config)
            self.loss_history_[stage] = list(ckpt.history["losses"])
        self.checkpoint_ = ckpt
        self.stages_completed_ = list(ckpt.stages)
        return self

    def _requests(self, X) -> list[InferenceRequest]:
        reqs = []
        for i, item in enumerate(X):
            if len(item) not in (2, 4):
                raise ValueError("each item must be (sketch, reference) or (sketch, reference, sketch_mask, reference_mask)")
            masks = tuple(item[2:]) if len(item) == 4 else (None, None)
            reqs.append(InferenceRequest(item[0], item[1], *masks, mode=self.mode,
                                         thresholds=Thresholds(self.ts_s, self.ts_r), guidance=self.guidance,
                                         steps=self.sampling_steps, seed=self.seed + i))
        return reqs

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        return colorize_batch(self._requests(X), self.checkpoint_)

    def score(self, X, y) -> float:
        """Mean PSNR of the predictions against the target color images ``y``."""
        pred = self.predict(X)
        targets = _images(y, 3, "target")
        if len(targets) != len(pred):
            raise ValueError("need one target per item")
        return float(np.mean([psnr(p, t) for p, t in zip(pred, targets)]))

    def save(self, path) -> None:
        check_is_fitted(self, "checkpoint_")
        self.checkpoint_.save(path)
