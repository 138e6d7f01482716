"""Optimisation loop, early stopping and checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
import random
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import data, dsp
from .data import MixtureSample, SynthConfig
from .losses import LossConfig, combined_loss, upit_loss
from .model import PRESETS, AVSeparator, ModelConfig, UPITSeparator
from .validation import atomic_write

log = logging.getLogger(__name__)

METHODS = ("proposed", "av_baseline", "upit")
STFT_PRESETS = {"full": dsp.FULL_STFT, "desk": dsp.DESK_STFT}
CHECKPOINT_MAGIC = b"CMCSEPCK"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    method: str = "proposed"
    lam: float = 1.0
    learning_rate: float = 2e-5
    batch_size: int = 8
    patience_epochs: int = 20
    max_epochs: int = 1000
    seed: int = 0
    stft_preset: str = "full"
    model_preset: str = "full"
    model: dict = field(default_factory=dict)
    cmc_normalize: bool = False
    psa_clamp: bool = True
    val_criterion: str = "combined"
    grad_clip: float = 5.0
    n_speakers: int = 2
    # dataset: "synth" or a directory holding train.tsv / validation.tsv / test.tsv
    dataset: str = "synth"
    synth: dict = field(default_factory=dict)
    n_train: int = 64
    n_validation: int = 16
    n_test: int = 16
    segment_s: float = 2.0
    out_dir: str = "runs"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.patience_epochs < 1:
            raise ValueError("patience_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.method == "av_baseline" and self.lam != 0:
            raise ValueError(f"av_baseline trains with lambda = 0, got lambda = {self.lam}")
        if self.method == "proposed" and self.lam == 0:
            raise ValueError("proposed method needs lambda > 0; use method=av_baseline for lambda = 0")
        if self.val_criterion not in ("combined", "mse"):
            raise ValueError(f"val_criterion must be 'combined' or 'mse', got {self.val_criterion!r}")
        if self.stft_preset not in STFT_PRESETS or self.model_preset not in PRESETS:
            raise ValueError("unknown stft/model preset")

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(lam=self.lam, cmc_normalize=self.cmc_normalize, psa_clamp=self.psa_clamp)

    @property
    def stft_config(self) -> dsp.StftConfig:
        return STFT_PRESETS[self.stft_preset]

    def model_config(self) -> ModelConfig:
        overrides = dict(self.model)
        overrides.setdefault("seed", self.seed)
        overrides.setdefault("n_speakers", self.n_speakers)
        overrides.setdefault("input_bins", self.stft_config.n_bins(dsp.DEFAULT_SAMPLE_RATE))
        return PRESETS[self.model_preset](**overrides)

    def synth_config(self, split: str) -> SynthConfig:
        opts = {"video_size": self.model_config().video_height, **self.synth}
        per_split = opts.pop(f"n_speakers_{split}", None)
        for s in data.SPLITS:
            opts.pop(f"n_speakers_{s}", None)
        if per_split is not None:
            opts["n_speakers"] = per_split
        return SynthConfig(split=split, **opts)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def desk_preset(**overrides) -> TrainConfig:
    base = dict(
        stft_preset="desk",
        model_preset="desk",
        learning_rate=1e-3,
        max_epochs=200,
        cmc_normalize=True,
        synth={"n_speakers_train": 16, "n_speakers_validation": 6, "n_speakers_test": 6},
        n_train=256,
        n_validation=16,
        n_test=32,
    )
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------- data plumbing


def batch_tensors(samples: list[MixtureSample], dtype=torch.float32) -> dict:
    ctype = torch.complex64 if dtype == torch.float32 else torch.complex128
    mix = torch.as_tensor(np.stack([s.mixture.values for s in samples])).to(ctype)
    src = torch.as_tensor(np.stack([[x.values for x in s.sources] for s in samples])).to(ctype)
    vid = torch.as_tensor(np.stack([[v.frames[..., 0] for v in s.videos] for s in samples])).to(dtype)
    return {"mix": mix, "mix_mag": mix.abs(), "mix_phase": mix.angle(), "src": src, "src_mag": src.abs(), "videos": vid}


def load_split(cfg: TrainConfig, split: str, n_samples: int | None = None) -> list[MixtureSample]:
    """Materialise one split from the synthetic generator or a corpus directory."""
    seed = cfg.seed * 1000 + data.SPLITS.index(split)
    if cfg.dataset == "synth":
        source = cfg.synth_config(split)
    else:
        source = data.read_manifest(Path(cfg.dataset) / f"{split}.tsv", split)
    return data.build_dataset(
        source, cfg.stft_config, cfg.n_speakers, rng_seed=seed, n_samples=n_samples, segment_s=cfg.segment_s
    )


def build_model(cfg: TrainConfig, with_avc: bool = True):
    mcfg = cfg.model_config()
    if cfg.method == "upit":
        return UPITSeparator(mcfg)
    return AVSeparator(mcfg, with_avc=with_avc and cfg.method == "proposed")


def batch_loss(model, batch: dict, cfg: TrainConfig, loss_cfg: LossConfig | None = None):
    """Total loss and its parts for one batch under the configured method."""
    loss_cfg = loss_cfg or cfg.loss_config
    if cfg.method == "upit":
        out = model(batch["mix_mag"])
        est = out.estimate_magnitudes(batch["mix_mag"])
        loss, perm = upit_loss(est, batch["src"], batch["mix_phase"], clamp=loss_cfg.psa_clamp)
        return loss, {"upit": loss, "perm": perm}
    need_avc = loss_cfg.lam > 0
    out = model(batch["mix_mag"], batch["videos"], with_avc=need_avc)
    est = out.estimate_magnitudes(batch["mix_mag"])
    return combined_loss(est, batch["src_mag"], out.c_v, out.c_avc, loss_cfg)


# ---------------------------------------------------------------- early stopping


class EarlyStopping:
    """Stop once ``patience`` consecutive epochs fail to improve on the best value."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def step(self, value: float, epoch: int) -> bool:
        """Record ``value``; return True when training should stop."""
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved(self) -> bool:
        return self.bad_epochs == 0


# ---------------------------------------------------------------- checkpoints


def _rng_state() -> dict:
    return {
        "torch": torch.get_rng_state(),
        "numpy": np.random.get_state(),
        "python": random.getstate(),
    }


def save_checkpoint(path, model, cfg: TrainConfig, optimizer=None, epoch: int = 0, extra: dict | None = None) -> Path:
    """Checksummed archive: magic, version, sha256, then a torch-serialised payload."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_class": type(model).__name__,
        "train_config": cfg.to_dict(),
        "model_config": model.cfg.to_dict(),
        "has_avc": getattr(model, "avc", None) is not None,
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "rng": _rng_state(),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    body = buf.getvalue()
    header = CHECKPOINT_MAGIC + CHECKPOINT_VERSION.to_bytes(4, "little") + hashlib.sha256(body).digest()
    path = Path(path)
    with atomic_write(path) as f:
        f.write(header + len(body).to_bytes(8, "little") + body)
    return path


def read_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    head = len(CHECKPOINT_MAGIC)
    if raw[:head] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = int.from_bytes(raw[head : head + 4], "little")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    digest = raw[head + 4 : head + 36]
    size = int.from_bytes(raw[head + 36 : head + 44], "little")
    body = raw[head + 44 :]
    if len(body) != size or hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checkpoint is truncated or corrupted")
    return torch.load(io.BytesIO(body), weights_only=False)


def load_checkpoint(path, with_avc: bool = True):
    """Return ``(model, train_config, state)``; ``with_avc=False`` drops the AVC block."""
    ck = read_checkpoint(path)
    cfg = TrainConfig.from_dict(ck["train_config"])
    mcfg = ModelConfig.from_dict(ck["model_config"])
    if ck["model_class"] == "UPITSeparator":
        model = UPITSeparator(mcfg)
        state = ck["state_dict"]
    else:
        keep_avc = with_avc and ck["has_avc"]
        model = AVSeparator(mcfg, with_avc=keep_avc)
        state = {k: v for k, v in ck["state_dict"].items() if keep_avc or not k.startswith("avc.")}
    model.load_state_dict(state)
    model.eval()
    info = {k: ck[k] for k in ("optimizer", "epoch", "rng", "extra", "format_version")}
    return model, cfg, info


# ---------------------------------------------------------------- training loop


@torch.no_grad()
def evaluate_loss(model, samples, cfg: TrainConfig) -> float:
    model.eval()
    loss_cfg = cfg.loss_config
    if cfg.val_criterion == "mse" and cfg.method != "upit":
        loss_cfg = LossConfig(lam=0.0, epsilon=loss_cfg.epsilon)
    total, count = 0.0, 0
    for batch in data.iter_batches(samples, cfg.batch_size):
        loss, _ = batch_loss(model, batch_tensors(batch), cfg, loss_cfg)
        total += float(loss) * len(batch)
        count += len(batch)
    return total / max(count, 1)


def _dump_state(out_dir: Path, epoch: int, step: int, parts: dict, model) -> Path:
    path = out_dir / f"nonfinite_epoch{epoch:04d}_step{step:05d}.json"
    finite = {n: bool(torch.isfinite(p).all()) for n, p in model.named_parameters()}
    with atomic_write(path, "w") as f:
        json.dump({"epoch": epoch, "step": step, "parts": {k: v.item() for k, v in parts.items() if v.dim() == 0}, "finite_params": finite}, f, indent=1)
    return path


def train(
    cfg: TrainConfig,
    train_set: list[MixtureSample] | None = None,
    val_set: list[MixtureSample] | None = None,
    out_dir=None,
    model=None,
    step_log: list | None = None,
) -> Path:
    """Train to early stop; returns the best-validation checkpoint path.

    ``step_log``, when given, receives one dict per optimiser step.
    """
    out_dir = Path(out_dir or os.environ.get("CMCSEP_OUT", cfg.out_dir))
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if train_set is None:
        train_set = load_split(cfg, "train", cfg.n_train)
    if val_set is None:
        val_set = load_split(cfg, "validation", cfg.n_validation)
    model = model or build_model(cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    stopper = EarlyStopping(cfg.patience_epochs)
    best_path = out_dir / "best.ckpt"
    log_path = out_dir / "train_log.jsonl"
    log_path.write_text("")
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        t0 = time.time()
        sums: dict[str, float] = {}
        n_seen = 0
        for batch_items in data.iter_batches(train_set, cfg.batch_size, rng):
            batch = batch_tensors(batch_items)
            loss, parts = batch_loss(model, batch, cfg)
            if not torch.isfinite(loss):
                dump = _dump_state(out_dir, epoch, step, {"total": loss, **parts}, model)
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}; state dumped to {dump}")
            optimizer.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            step += 1
            record = {"total": loss.item(), **{k: v.item() for k, v in parts.items() if v.dim() == 0}}
            if step_log is not None:
                step_log.append({"epoch": epoch, "step": step, **record})
            for k, v in record.items():
                sums[k] = sums.get(k, 0.0) + v * len(batch_items)
            n_seen += len(batch_items)
        val = evaluate_loss(model, val_set, cfg)
        stop = stopper.step(val, epoch)
        entry = {
            "epoch": epoch,
            **{f"train_{k}": v / n_seen for k, v in sums.items()},
            "val_total": val,
            "best_val": stopper.best,
            "wall_time": time.time() - t0,
        }
        with open(log_path, "a") as f:
            f.write(json.dumps(entry) + "\n")
        log.info("epoch %d train %.4f val %.4f", epoch, entry["train_total"], val)
        if stopper.improved:
            save_checkpoint(best_path, model, cfg, optimizer, epoch, {"val_loss": val})
        if stop:
            break
    return best_path


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def train_upit_baseline(cfg: TrainConfig, train_set=None, val_set=None, out_dir=None, **kw) -> Path:
    if cfg.method != "upit":
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "method": "upit", "lam": 0.0})
    return train(cfg, train_set, val_set, out_dir, **kw)
