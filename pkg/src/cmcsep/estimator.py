"""scikit-learn style front end over the training loop and separation models."""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import dsp, metrics, training
from .data import MixtureSample
from .model import separate
from .training import TrainConfig
from .validation import check_samples


class SpeechSeparator(BaseEstimator):
    """Audio-visual (or audio-only uPIT) speech separation estimator.

    ``fit`` takes a list of :class:`~cmcsep.data.MixtureSample`; ``transform``
    returns the separated spectrograms and ``predict`` the separated waveforms,
    one list of N per input mixture.

    Parameters
    ----------
    method : {"proposed", "av_baseline", "upit"}
        ``proposed`` trains with MSE + lam * CMC, ``av_baseline`` with MSE only,
        ``upit`` is the audio-only permutation-invariant baseline.
    lam : float
        Weight of the cross-modal correspondence term. Forced to 0 for
        ``av_baseline``.
    preset : {"desk", "full"}
        Base STFT/model/optimiser settings; the remaining parameters override it.
    validation_fraction : float
        Share of the training list held out for early stopping when
        ``fit`` gets no explicit validation set.
    """

    def __init__(
        self,
        method="proposed",
        lam=1.0,
        preset="desk",
        learning_rate=None,
        batch_size=8,
        patience_epochs=20,
        max_epochs=None,
        cmc_normalize=None,
        model_params=None,
        validation_fraction=0.2,
        seed=0,
        out_dir=None,
    ):
        self.method = method
        self.lam = lam
        self.preset = preset
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.patience_epochs = patience_epochs
        self.max_epochs = max_epochs
        self.cmc_normalize = cmc_normalize
        self.model_params = model_params
        self.validation_fraction = validation_fraction
        self.seed = seed
        self.out_dir = out_dir

    def _train_config(self) -> TrainConfig:
        base = training.desk_preset() if self.preset == "desk" else TrainConfig()
        d = base.to_dict()
        lam = 0.0 if self.method == "av_baseline" else self.lam
        d.update(method=self.method, lam=lam, batch_size=self.batch_size, patience_epochs=self.patience_epochs, seed=self.seed)
        for key in ("learning_rate", "max_epochs", "cmc_normalize"):
            if getattr(self, key) is not None:
                d[key] = getattr(self, key)
        if self.model_params:
            d["model"] = {**d["model"], **self.model_params}
        return TrainConfig.from_dict(d)

    def fit(self, X, y=None, X_val=None):
        samples = check_samples(X)
        cfg = self._train_config()
        if X_val is None:
            if not 0.0 < self.validation_fraction < 1.0:
                raise ValueError("validation_fraction must be in (0, 1) when X_val is not given")
            n_val = max(1, int(round(len(samples) * self.validation_fraction)))
            if n_val >= len(samples):
                raise ValueError("not enough samples to hold out a validation split")
            order = np.random.default_rng(self.seed).permutation(len(samples))
            X_val = [samples[i] for i in order[:n_val]]
            samples = [samples[i] for i in order[n_val:]]
        else:
            X_val = check_samples(X_val)
        self._check_geometry(samples[0], cfg)
        out_dir = self.out_dir or tempfile.mkdtemp(prefix="cmcsep-")
        self.checkpoint_ = training.train(cfg, samples, X_val, out_dir=out_dir)
        self.model_, self.train_config_, info = training.load_checkpoint(self.checkpoint_)
        self.history_ = training.read_log(Path(out_dir) / "train_log.jsonl")
        self.best_epoch_ = info["epoch"]
        return self

    @staticmethod
    def _check_geometry(sample: MixtureSample, cfg: TrainConfig) -> None:
        mcfg = cfg.model_config()
        if sample.mixture.n_bins != mcfg.input_bins:
            raise ValueError(f"samples have {sample.mixture.n_bins} bins, model expects {mcfg.input_bins}")
        if cfg.method != "upit":
            h, w = sample.videos[0].frames.shape[1:3]
            if (h, w) != (mcfg.video_height, mcfg.video_width):
                raise ValueError(f"videos are {h}x{w}, model expects {mcfg.video_height}x{mcfg.video_width}")

    @classmethod
    def from_checkpoint(cls, path, with_avc: bool = True) -> "SpeechSeparator":
        model, cfg, info = training.load_checkpoint(path, with_avc=with_avc)
        est = cls(method=cfg.method, lam=cfg.lam, batch_size=cfg.batch_size, patience_epochs=cfg.patience_epochs, seed=cfg.seed)
        est.model_, est.train_config_, est.checkpoint_ = model, cfg, Path(path)
        est.best_epoch_ = info["epoch"]
        return est

    def transform(self, X) -> list[list[dsp.Spectrogram]]:
        check_is_fitted(self, "model_")
        video_free = self.train_config_.method == "upit"
        return [separate(self.model_, s.mixture, None if video_free else s.videos)[0] for s in X]

    def predict(self, X) -> list[list[dsp.Waveform]]:
        out = []
        for sample, specs in zip(X, self.transform(X)):
            length = sample.mixture.length
            out.append([dsp.istft(s, length) for s in specs])
        return out

    def evaluate(self, X, label: str | None = None) -> metrics.EvalReport:
        check_is_fitted(self, "model_")
        return metrics.evaluate_dataset(self.model_, X, label or self.method)

    def score(self, X, y=None) -> float:
        """Mean SDR in dB over all speakers of ``X``."""
        return self.evaluate(X).sdr_db

    def correspondence_histogram(self, X, avc_from: "SpeechSeparator | None" = None, bin_width: float = 1.0):
        """Angle histogram; models trained without CMC must borrow ``avc_from``'s AVC block."""
        check_is_fitted(self, "model_")
        if getattr(self.model_, "avc", None) is not None and avc_from is None:
            return metrics.angle_histogram(self.model_, X, "proposed", bin_width=bin_width)
        if avc_from is None:
            raise ValueError("this model has no AVC block; pass avc_from=<estimator trained with CMC>")
        check_is_fitted(avc_from, "model_")
        return metrics.angle_histogram(self.model_, X, "baseline", avc_model=avc_from.model_, bin_width=bin_width)
