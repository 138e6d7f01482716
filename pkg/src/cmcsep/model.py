"""The four-block audio-visual separation network and the audio-only uPIT network.

All per-speaker blocks (video, fusion, AVC) are applied with the speakers
folded into the batch dimension, so one set of parameters serves any
number of speakers.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import VideoClip, align_video_to_audio
from .dsp import Spectrogram


@dataclass
class ModelConfig:
    input_bins: int = 1601
    embed_dim: int = 256
    audio_hidden: int = 256
    audio_blstm_layers: int = 3
    video_blstm_hidden: int = 256
    fusion_blstm_hidden: int = 256
    dropout: float = 0.5
    se_reduction: int = 16
    video_height: int = 64
    video_width: int = 64
    frontend_channels: int = 64
    resnet_widths: tuple = (64, 128, 256, 512)
    resnet_blocks: tuple = (2, 2, 2, 2)
    resnet_strides: tuple = (1, 2, 2, 2)
    audio_compression: str = "none"
    n_speakers: int = 2
    seed: int = 0

    def __post_init__(self):
        self.resnet_widths = tuple(int(x) for x in self.resnet_widths)
        self.resnet_blocks = tuple(int(x) for x in self.resnet_blocks)
        self.resnet_strides = tuple(int(x) for x in self.resnet_strides)
        positive = [
            "input_bins", "embed_dim", "audio_hidden", "audio_blstm_layers",
            "video_blstm_hidden", "fusion_blstm_hidden", "se_reduction",
            "video_height", "video_width", "frontend_channels", "n_speakers",
        ]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if not (len(self.resnet_widths) == len(self.resnet_blocks) == len(self.resnet_strides)):
            raise ValueError("resnet_widths, resnet_blocks and resnet_strides must have equal length")
        if self.audio_compression not in ("none", "log1p"):
            raise ValueError(f"unknown audio_compression {self.audio_compression!r}")
        reduction = int(np.prod(self.resnet_strides))
        if self.video_height < reduction or self.video_width < reduction:
            raise ValueError(
                f"video frames must be at least {reduction}x{reduction} for strides {self.resnet_strides}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def full_config(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def desk_config(**overrides) -> ModelConfig:
    base = dict(
        input_bins=129,
        embed_dim=64,
        audio_hidden=64,
        video_blstm_hidden=64,
        fusion_blstm_hidden=64,
        video_height=32,
        video_width=32,
        frontend_channels=8,
        resnet_widths=(8, 16, 32, 64),
        resnet_blocks=(1, 1, 1, 1),
        resnet_strides=(2, 2, 2, 2),
    )
    base.update(overrides)
    return ModelConfig(**base)


PRESETS = {"full": full_config, "desk": desk_config}


def _init_lstm(lstm: nn.LSTM) -> None:
    for name, p in lstm.named_parameters():
        if "weight_hh" in name:
            for k in range(4):
                nn.init.orthogonal_(p.data[k * lstm.hidden_size : (k + 1) * lstm.hidden_size])
        elif "bias" in name:
            nn.init.zeros_(p)


class AudioBlock(nn.Module):
    """FC, then BLSTMs each followed by tanh and dropout, then projection to D."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.fc = nn.Linear(cfg.input_bins, cfg.audio_hidden)
        self.blstms = nn.ModuleList()
        in_dim = cfg.audio_hidden
        for _ in range(cfg.audio_blstm_layers):
            lstm = nn.LSTM(in_dim, cfg.audio_hidden, batch_first=True, bidirectional=True)
            _init_lstm(lstm)
            self.blstms.append(lstm)
            in_dim = 2 * cfg.audio_hidden
        self.dropout = nn.Dropout(cfg.dropout)
        self.proj = nn.Linear(in_dim, cfg.embed_dim)

    def encode(self, mag: torch.Tensor) -> torch.Tensor:
        """(B, I, J) magnitudes -> (B, J, 2H) output of the last tanh stage."""
        if mag.shape[-2] != self.cfg.input_bins:
            raise ValueError(f"expected {self.cfg.input_bins} frequency bins, got {mag.shape[-2]}")
        x = mag.transpose(1, 2)
        if self.cfg.audio_compression == "log1p":
            x = torch.log1p(x)
        h = self.fc(x)
        for lstm in self.blstms:
            h, _ = lstm(h)
            h = self.dropout(torch.tanh(h))
        return h

    def forward(self, mag: torch.Tensor) -> torch.Tensor:
        return self.proj(self.encode(mag)).transpose(1, 2)  # (B, D, J)


class SEModule(nn.Module):
    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        s = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gates(x)[:, :, None, None]


class SEBasicBlock(nn.Module):
    """ResNet basic block whose residual branch is recalibrated by squeeze-excitation.

    The shortcut is parameter-free: spatial subsampling plus zero channel padding.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int, reduction: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.se = SEModule(out_ch, reduction)
        self.stride = stride
        self.pad = out_ch - in_ch
        if self.pad < 0:
            raise ValueError("SE-ResNet stages may not shrink the channel count")

    def shortcut(self, x: torch.Tensor) -> torch.Tensor:
        if self.stride > 1:
            x = x[:, :, :: self.stride, :: self.stride]
        if self.pad:
            x = F.pad(x, (0, 0, 0, 0, 0, self.pad))
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        r = F.relu(self.bn1(self.conv1(x)))
        r = self.se(self.bn2(self.conv2(r)))
        return F.relu(r + self.shortcut(x))


class VideoBlock(nn.Module):
    """3-D conv front end, per-frame SE-ResNet, global pooling, BLSTM, projection to D."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.frontend = nn.Conv3d(
            1, cfg.frontend_channels, kernel_size=(5, 7, 7), stride=(1, 1, 1), padding=(2, 3, 3), bias=False
        )
        self.frontend_bn = nn.BatchNorm3d(cfg.frontend_channels)
        layers = []
        in_ch = cfg.frontend_channels
        for width, n_blocks, stride in zip(cfg.resnet_widths, cfg.resnet_blocks, cfg.resnet_strides):
            for b in range(n_blocks):
                layers.append(SEBasicBlock(in_ch, width, stride if b == 0 else 1, cfg.se_reduction))
                in_ch = width
        self.resnet = nn.Sequential(*layers)
        self.blstm = nn.LSTM(in_ch, cfg.video_blstm_hidden, batch_first=True, bidirectional=True)
        _init_lstm(self.blstm)
        self.proj = nn.Linear(2 * cfg.video_blstm_hidden, cfg.embed_dim)

    def frame_features(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, F, H, W) grayscale -> (B, F, C) pooled SE-ResNet features."""
        if frames.dim() != 4:
            raise ValueError(f"expected (B, F, H, W) grayscale frames, got {tuple(frames.shape)}")
        b, f, h, w = frames.shape
        if (h, w) != (self.cfg.video_height, self.cfg.video_width):
            raise ValueError(f"expected {self.cfg.video_height}x{self.cfg.video_width} frames, got {h}x{w}")
        x = F.relu(self.frontend_bn(self.frontend(frames[:, None])))  # (B, C0, F, H, W)
        x = x.transpose(1, 2).reshape(b * f, -1, h, w)
        x = self.resnet(x).mean(dim=(2, 3))
        return x.reshape(b, f, -1)

    def forward(self, frames: torch.Tensor, n_audio_frames: int | None = None) -> torch.Tensor:
        h, _ = self.blstm(self.frame_features(frames))
        c_v = self.proj(h).transpose(1, 2)  # (B, D, F)
        if n_audio_frames is not None:
            c_v = align_video_to_audio(c_v, n_audio_frames)
        return c_v


class FusionBlock(nn.Module):
    """1x1 conv over the stacked (audio, visual) maps, BLSTM over time, linear to I bins."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.conv = nn.Conv2d(2, 1, kernel_size=1)
        self.blstm = nn.LSTM(cfg.embed_dim, cfg.fusion_blstm_hidden, batch_first=True, bidirectional=True)
        _init_lstm(self.blstm)
        self.linear = nn.Linear(2 * cfg.fusion_blstm_hidden, cfg.input_bins)

    def forward(self, c_a: torch.Tensor, c_v: torch.Tensor) -> torch.Tensor:
        if c_a.shape != c_v.shape:
            raise ValueError(f"audio {tuple(c_a.shape)} and visual {tuple(c_v.shape)} features differ")
        x = self.conv(torch.stack([c_a, c_v], dim=1))[:, 0]  # (B, D, J)
        h, _ = self.blstm(x.transpose(1, 2))
        return self.linear(h).transpose(1, 2)  # (B, I, J)


class AVCBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.linear = nn.Linear(cfg.input_bins, cfg.embed_dim)
        nn.init.zeros_(self.linear.bias)

    def forward(self, m: torch.Tensor) -> torch.Tensor:
        if m.shape[-2] != self.cfg.input_bins:
            raise ValueError(f"expected {self.cfg.input_bins} mask bins, got {m.shape[-2]}")
        return torch.tanh(self.linear(m.transpose(-1, -2))).transpose(-1, -2)


@dataclass
class SeparationOutput:
    masks_pre: torch.Tensor  # (B, N, I, J)
    masks: torch.Tensor  # (B, N, I, J), in [0, 1]
    c_a: torch.Tensor | None = None  # (B, D, J)
    c_v: torch.Tensor | None = None  # (B, N, D, J)
    c_avc: torch.Tensor | None = None  # (B, N, D, J)
    extras: dict = field(default_factory=dict)

    def estimates(self, mixture: torch.Tensor) -> torch.Tensor:
        """Apply the real masks to the complex mixture (B, I, J)."""
        return self.masks * mixture[:, None]

    def estimate_magnitudes(self, mixture_mag: torch.Tensor) -> torch.Tensor:
        return self.masks * mixture_mag[:, None]


class AVSeparator(nn.Module):
    """Audio block once per mixture; video, fusion and AVC blocks per speaker."""

    def __init__(self, cfg: ModelConfig, with_avc: bool = True):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.audio = AudioBlock(cfg)
        self.video = VideoBlock(cfg)
        self.fusion = FusionBlock(cfg)
        self.avc = AVCBlock(cfg) if with_avc else None

    def forward(self, mix_mag: torch.Tensor, videos: torch.Tensor, with_avc: bool = True) -> SeparationOutput:
        """``mix_mag`` (B, I, J); ``videos`` (B, N, F, H, W)."""
        b, n = videos.shape[:2]
        j = mix_mag.shape[-1]
        c_a = self.audio(mix_mag)
        c_v = self.video(videos.flatten(0, 1), j)  # (B*N, D, J)
        c_a_rep = c_a.repeat_interleave(n, dim=0)
        m = self.fusion(c_a_rep, c_v)
        c_avc = None
        if with_avc and self.avc is not None:
            c_avc = self.avc(m).unflatten(0, (b, n))
        m = m.unflatten(0, (b, n))
        return SeparationOutput(m, torch.sigmoid(m), c_a, c_v.unflatten(0, (b, n)), c_avc)


class UPITSeparator(nn.Module):
    """Audio-only baseline: shared audio block, linear head emitting N masks per frame."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.audio = AudioBlock(cfg)
        self.head = nn.Linear(cfg.embed_dim, cfg.n_speakers * cfg.input_bins)

    def forward(self, mix_mag: torch.Tensor, videos=None, with_avc: bool = False) -> SeparationOutput:
        c_a = self.audio(mix_mag)  # (B, D, J)
        b, _, j = c_a.shape
        m = self.head(c_a.transpose(1, 2))  # (B, J, N*I)
        m = m.reshape(b, j, self.cfg.n_speakers, self.cfg.input_bins).permute(0, 2, 3, 1)
        return SeparationOutput(m, torch.sigmoid(m), c_a)


# ---------------------------------------------------------------- numpy-facing ops


def _clip_tensor(videos: list[VideoClip]) -> torch.Tensor:
    for v in videos:
        if v.channels != 1:
            raise ValueError(f"video block needs grayscale clips, got {v.channels} channels")
    n_frames = {v.n_frames for v in videos}
    if len(n_frames) != 1:
        raise ValueError(f"all clips of one mixture need the same frame count, got {sorted(n_frames)}")
    return torch.as_tensor(np.stack([v.frames[..., 0] for v in videos]))


@torch.no_grad()
def separate(
    model: nn.Module, x: Spectrogram, videos: list[VideoClip] | None = None, with_avc: bool = False
) -> tuple[list[Spectrogram], SeparationOutput]:
    """Eval-mode separation of one mixture; returns (Y_n list, raw output)."""
    model.eval()
    dtype = next(model.parameters()).dtype
    mag = torch.as_tensor(x.magnitude(), dtype=dtype)[None]
    vid = None if videos is None else _clip_tensor(videos).to(dtype)[None]
    out = model(mag, vid, with_avc=with_avc)
    masks = out.masks[0].double().numpy()
    return [x.with_values(mk * x.values) for mk in masks], out
