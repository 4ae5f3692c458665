"""scikit-learn style wrappers around training, translation and the code probe."""

from __future__ import annotations

import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .augmentation import AugmentConfig
from .checkpoint import load_checkpoint
from .data import PhantomDataset
from .evaluation import CodeProbe, _clamp, _run, code_label_counts, default_chain, dice, predict_labels, psnr
from .model import ModelConfig, VQSeq2Seq
from .trainer import DESK_LAMBDA_CON, TrainConfig, train
from .validation import check_image


def _images(X):
    X = check_image(np.asarray(X, dtype=np.float32), "X")
    return X[None] if X.ndim == 2 else X


class VQSeqTranslator(BaseEstimator, TransformerMixin):
    """Trainable source -> target translator.

    ``fit`` takes a dataset directory (or :class:`PhantomDataset`) and trains
    on its train split.  ``transform`` maps images of the ``source`` sequence
    to their quantized latent grids (B, h, w, D); ``predict`` returns the
    translated images clamped to [0, 1].  Sequence indices are 0-based.
    """

    def __init__(
        self,
        D=3,
        K=256,
        N=4,
        base_channels=32,
        downsample_stages=2,
        total_steps=5000,
        learning_rate=1e-4,
        lambda_con=DESK_LAMBDA_CON,
        replace_probability=0.5,
        source=0,
        target=3,
        steps="single",
        seed=1,
        model_seed=0,
        work_dir=None,
    ):
        self.D = D
        self.K = K
        self.N = N
        self.base_channels = base_channels
        self.downsample_stages = downsample_stages
        self.total_steps = total_steps
        self.learning_rate = learning_rate
        self.lambda_con = lambda_con
        self.replace_probability = replace_probability
        self.source = source
        self.target = target
        self.steps = steps
        self.seed = seed
        self.model_seed = model_seed
        self.work_dir = work_dir

    def train_config(self) -> TrainConfig:
        base = TrainConfig()
        return replace(
            base,
            learning_rate=self.learning_rate,
            total_steps=self.total_steps,
            seed=self.seed,
            checkpoint_every=self.total_steps,
            log_every=self.total_steps,
            weights=replace(base.weights, lambda_con=self.lambda_con),
            augment=AugmentConfig(replace_probability=self.replace_probability),
            model=ModelConfig(
                D=self.D, K=self.K, N=self.N, base_channels=self.base_channels,
                downsample_stages=self.downsample_stages, seed=self.model_seed,
            ),
        )

    def _check_indices(self):
        for name in ("source", "target"):
            v = getattr(self, name)
            if not 0 <= v < self.N:
                raise ValueError(f"{name} must be in [0, {self.N}), got {v}")
        if self.steps not in ("single", "multi"):
            raise ValueError(f"steps must be 'single' or 'multi', got {self.steps!r}")

    def fit(self, X, y=None):
        self._check_indices()
        dataset = X if isinstance(X, PhantomDataset) else PhantomDataset(X)
        out = self.work_dir
        if out is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="vqcseq-")
            out = self._tmp.name
        res = train(dataset, self.train_config(), Path(out))
        self.model_ = res.model
        self.history_ = res.val_rows
        self.checkpoint_ = res.checkpoint
        return self

    @classmethod
    def from_checkpoint(cls, path, **params):
        ms = load_checkpoint(path)
        c = ms.model.cfg
        est = cls(D=c.D, K=c.K, N=c.N, base_channels=c.base_channels, downsample_stages=c.downsample_stages, model_seed=c.seed, **params)
        est.model_ = ms.model
        est.checkpoint_ = Path(path)
        return est

    @classmethod
    def from_model(cls, model: VQSeq2Seq, **params):
        c = model.cfg
        est = cls(D=c.D, K=c.K, N=c.N, base_channels=c.base_channels, downsample_stages=c.downsample_stages, model_seed=c.seed, **params)
        est.model_ = model
        return est

    def transform(self, X):
        check_is_fitted(self, "model_")
        m = self.model_
        X = _images(X)
        z = _run(m, lambda: m.quantize(m.encode(X)).values)
        return z.cpu().numpy()

    def predict(self, X):
        check_is_fitted(self, "model_")
        self._check_indices()
        m = self.model_
        X = _images(X)
        if self.steps == "single":
            out = _run(m, lambda: m.translate(X, self.source, self.target))
        else:
            out = _run(m, lambda: m.translate_chain(X, default_chain(self.source, self.target)))
        return _clamp(out)

    def score(self, X, y):
        """Mean PSNR (dB) of ``predict(X)`` against target images ``y``."""
        pred = self.predict(X)
        y = _images(y).astype(np.float64)
        if pred.shape != y.shape:
            raise ValueError(f"y has shape {y.shape}, predictions have {pred.shape}")
        return float(np.mean([psnr(p, t) for p, t in zip(pred, y)]))


class CodeProbeClassifier(BaseEstimator):
    """Majority-vote map from latent code index to tissue label.

    ``fit`` takes a list of :class:`SequenceSet` subjects with tissue maps
    (typically one, for the one-shot setting); ``predict`` returns
    image-resolution label maps.
    """

    def __init__(self, model=None, n_labels=None):
        self.model = model
        self.n_labels = n_labels

    def fit(self, X, y=None):
        if self.model is None:
            raise ValueError("CodeProbeClassifier needs a model")
        subjects = list(X)
        if not subjects:
            raise ValueError("fit needs at least one labelled subject")
        n = self.n_labels or max(int(np.asarray(s.tissue_map).max()) + 1 for s in subjects)
        # several subjects pool their votes before the majority is taken
        counts = sum(np.pad(c, ((0, 0), (0, n - c.shape[1]))) for c in (code_label_counts(self.model, s) for s in subjects))
        seen = counts.sum(1) > 0
        self.probe_ = CodeProbe(np.where(seen, counts.argmax(1), -1), ",".join(s.subject_id for s in subjects), n)
        return self

    def predict(self, X):
        check_is_fitted(self, "probe_")
        return np.stack([predict_labels(self.probe_, self.model, s) for s in X])

    def score(self, X, y=None, label=None):
        """Mean Dice of ``label`` (default: the highest label) over subjects."""
        check_is_fitted(self, "probe_")
        label = self.probe_.n_labels - 1 if label is None else label
        pred = self.predict(X)
        return float(np.mean([dice(p == label, np.asarray(s.tissue_map) == label) for p, s in zip(pred, X)]))
