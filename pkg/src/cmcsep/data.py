"""Audio-visual training items: synthesis, corpus ingestion and frame alignment.

The synthetic generator stands in for a lip-reading corpus. Each "speaker"
has a fixed pitch, vocal-tract scaling and visual identity texture; each
utterance is a run of harmonic syllables with vowel-dependent formants.
Its video renders, per frame, a brightness and mouth opening driven by
the short-time log-energy, a bar whose height follows the spectral
centroid, and the speaker's identity texture.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import dsp
from .dsp import Spectrogram, StftConfig, Waveform
from .validation import atomic_write

SPLITS = ("train", "validation", "test")

# (F1, F2, F3) in Hz
VOWELS = np.array(
    [
        [730.0, 1090.0, 2440.0],
        [270.0, 2290.0, 3010.0],
        [300.0, 870.0, 2240.0],
        [530.0, 1840.0, 2480.0],
        [570.0, 840.0, 2410.0],
        [390.0, 1990.0, 2550.0],
    ]
)


@dataclass
class VideoClip:
    frames: np.ndarray  # (F, H, W, C) in [0, 1]
    frame_rate: float = 12.5
    speaker_id: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim == 3:
            frames = frames[..., None]
        if frames.ndim != 4 or frames.shape[0] < 1:
            raise ValueError(f"frames must be (F, H, W, C) with F >= 1, got {frames.shape}")
        self.frames = frames

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def channels(self) -> int:
        return self.frames.shape[-1]


@dataclass
class MixtureSample:
    mixture: Spectrogram
    sources: list[Spectrogram]
    videos: list[VideoClip]
    snr_db: float
    speaker_ids: list[str]
    mixture_wave: Waveform | None = None
    source_waves: list[Waveform] | None = None

    def __post_init__(self):
        n = len(self.sources)
        if n < 2 or len(self.videos) != n or len(self.speaker_ids) != n:
            raise ValueError(
                f"need N >= 2 matching sources/videos/ids, got "
                f"{n}/{len(self.videos)}/{len(self.speaker_ids)}"
            )
        if any(s.shape != self.mixture.shape for s in self.sources):
            raise ValueError("all spectrograms must share the mixture shape")

    @property
    def n_speakers(self) -> int:
        return len(self.sources)


@dataclass
class CorpusEntry:
    audio_path: Path
    frames_path: Path
    speaker_id: str


@dataclass
class CorpusManifest:
    entries: list[CorpusEntry]
    split: str = "train"
    mixtures: list[tuple[list[int], float]] | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        for e in self.entries:
            if not e.speaker_id:
                raise ValueError(f"empty speaker_id for {e.audio_path}")

    @property
    def speakers(self) -> list[str]:
        return sorted({e.speaker_id for e in self.entries})


@dataclass
class SynthConfig:
    """Knobs of the synthetic audio-visual corpus."""

    n_speakers: int = 8
    duration_s: float = 2.0
    sample_rate: int = 8000
    video_fps: float = 12.5
    video_size: int = 64
    f0_range: tuple[float, float] = (90.0, 260.0)
    snr_range: tuple[float, float] = (0.0, 5.0)
    split: str = "train"
    speaker_seed: int = 0
    peak: float = 0.9


# ---------------------------------------------------------------- video ops


def to_grayscale(clip: VideoClip) -> VideoClip:
    c = clip.channels
    if c == 1:
        return clip
    if c != 3:
        raise ValueError(f"unsupported channel count {c}")
    luma = clip.frames @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    return VideoClip(luma[..., None], clip.frame_rate, clip.speaker_id)


def halve_frame_rate(clip: VideoClip) -> VideoClip:
    return VideoClip(clip.frames[::2], clip.frame_rate / 2.0, clip.speaker_id)


def alignment_indices(n_video: int, n_audio: int) -> np.ndarray:
    """Video frame index used for each audio frame: ``floor(j * F_v / J)``."""
    if n_video < 1 or n_audio < 1:
        raise ValueError(f"frame counts must be >= 1, got F_v={n_video}, J={n_audio}")
    return (np.arange(n_audio) * n_video) // n_audio


def align_video_to_audio(video_features, n_audio: int):
    """Nearest-neighbour repeat (or subsample) the last axis to ``n_audio`` columns.

    Works on numpy arrays and torch tensors of shape ``(..., D, F_v)``.
    """
    idx = alignment_indices(video_features.shape[-1], n_audio)
    if isinstance(video_features, np.ndarray):
        return video_features[..., idx]
    import torch

    return video_features.index_select(-1, torch.as_tensor(idx, device=video_features.device))


# ---------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    f0: float
    tract_scale: float
    tilt: float
    texture: np.ndarray = field(repr=False, compare=False)


def make_speaker(speaker_id: str, seed, cfg: SynthConfig) -> SpeakerProfile:
    rng = np.random.default_rng(seed)
    f0 = float(np.exp(rng.uniform(np.log(cfg.f0_range[0]), np.log(cfg.f0_range[1]))))
    size = cfg.video_size
    yy, xx = np.mgrid[0:size, 0:size] / size
    texture = np.zeros((size, size))
    for _ in range(3):
        kx, ky = rng.uniform(1.0, 6.0, size=2)
        texture += np.cos(2 * np.pi * (kx * xx + ky * yy) + rng.uniform(0, 2 * np.pi))
    texture -= texture.mean()
    texture *= 0.1 / max(np.abs(texture).max(), 1e-9)
    return SpeakerProfile(
        speaker_id,
        f0=f0,
        tract_scale=float(rng.uniform(0.85, 1.2)),
        tilt=float(rng.uniform(0.6, 1.4)),
        texture=texture,
    )


def speaker_pool(cfg: SynthConfig) -> list[SpeakerProfile]:
    """Speakers of one split; seeds differ per split so pools never overlap."""
    split_index = SPLITS.index(cfg.split)
    seq = np.random.SeedSequence([cfg.speaker_seed, split_index, 7919])
    return [
        make_speaker(f"{cfg.split}-spk{i:03d}", s, cfg)
        for i, s in enumerate(seq.spawn(cfg.n_speakers))
    ]


def _formant_gain(freqs: np.ndarray, formants: np.ndarray, tilt: float) -> np.ndarray:
    """Resonance gain at ``freqs`` (n,) for per-sample ``formants`` (n, 3)."""
    bw = np.array([90.0, 110.0, 150.0])
    amp = np.array([1.0, 0.7, 0.4])
    g = (amp / (1.0 + ((freqs[:, None] - formants) / bw) ** 2)).sum(axis=1)
    return g * (freqs / 500.0 + 1.0) ** (-tilt)


def synthesize_utterance(speaker: SpeakerProfile, rng: np.random.Generator, cfg: SynthConfig) -> Waveform:
    sr = cfg.sample_rate
    n = int(round(cfg.duration_s * sr))
    out = np.zeros(n)
    t = rng.uniform(0.0, 0.15)
    while True:
        dur = rng.uniform(0.12, 0.35)
        start, stop = int(t * sr), min(int((t + dur) * sr), n)
        if stop - start < int(0.05 * sr):
            break
        m = stop - start
        u = np.linspace(0.0, 1.0, m)
        glide = 1.0 + rng.uniform(-0.08, 0.08) * u + 0.03 * np.sin(2 * np.pi * rng.uniform(1, 4) * u)
        f0 = speaker.f0 * rng.uniform(0.92, 1.08) * glide
        v0, v1 = rng.integers(len(VOWELS), size=2)
        formants = speaker.tract_scale * (VOWELS[v0][None] * (1 - u[:, None]) + VOWELS[v1][None] * u[:, None])
        phase = 2 * np.pi * np.cumsum(f0) / sr
        seg = np.zeros(m)
        coarse = np.arange(0, m, 32)
        for k in range(1, int(0.48 * sr / f0.min()) + 1):
            fk = k * f0
            gains = _formant_gain(fk[coarse], formants[coarse], speaker.tilt)
            gains = np.interp(np.arange(m), coarse, gains) * (fk < 0.48 * sr)
            seg += gains * np.sin(k * phase)
        attack = min(int(0.03 * sr), m // 2)
        env = np.ones(m)
        env[:attack] = np.sin(np.linspace(0, np.pi / 2, attack)) ** 2
        env[m - attack :] = env[:attack][::-1]
        out[start:stop] += rng.uniform(0.5, 1.0) * env * seg
        t += dur + rng.uniform(0.04, 0.25)
        if t >= cfg.duration_s:
            break
    peak = np.abs(out).max()
    if peak <= 0:
        raise ValueError(f"generated a silent utterance for {speaker.speaker_id}")
    return Waveform(out * (cfg.peak / peak), sr)


def frame_log_energy(w: Waveform, n_frames: int, dynamic_range_db: float = 40.0) -> np.ndarray:
    """Per-video-frame energy in dB, floored ``dynamic_range_db`` below the clip maximum."""
    hop = len(w) / n_frames
    e = np.empty(n_frames)
    for f in range(n_frames):
        seg = w.samples[int(round(f * hop)) : int(round((f + 1) * hop))]
        e[f] = 10 * np.log10(np.mean(seg**2) + 1e-20) if seg.size else -200.0
    return np.maximum(e, e.max() - dynamic_range_db)


def frame_centroid(w: Waveform, n_frames: int) -> np.ndarray:
    """Per-video-frame spectral centroid normalised by Nyquist."""
    hop = len(w) / n_frames
    c = np.zeros(n_frames)
    for f in range(n_frames):
        seg = w.samples[int(round(f * hop)) : int(round((f + 1) * hop))]
        if seg.size < 2:
            continue
        spec = np.abs(np.fft.rfft(seg * np.hanning(seg.size)))
        if spec.sum() > 1e-12:
            c[f] = (np.arange(spec.size) * spec).sum() / spec.sum() / (spec.size - 1)
    return c


def render_video(w: Waveform, speaker: SpeakerProfile, cfg: SynthConfig) -> VideoClip:
    n_frames = max(1, int(round(len(w) / w.sample_rate * cfg.video_fps)))
    size = cfg.video_size
    energy = frame_log_energy(w, n_frames)
    level = (energy - energy.max()) / 40.0 + 1.0  # [0, 1]
    centroid = np.clip(frame_centroid(w, n_frames) * 2.0, 0.0, 1.0)
    yy, xx = np.mgrid[0:size, 0:size] / size
    frames = np.empty((n_frames, size, size), dtype=np.float32)
    band = max(1, size // 16)
    for f in range(n_frames):
        img = 0.25 + 0.35 * level[f] + speaker.texture
        mouth = ((xx - 0.5) / 0.25) ** 2 + ((yy - 0.7) / (0.02 + 0.15 * level[f])) ** 2 <= 1.0
        img = img + 0.1 * mouth
        row = int(round(centroid[f] * (size // 2 - band)))
        img[row : row + band, :] += 0.15
        frames[f] = np.clip(img, 0.0, 1.0)
    return VideoClip(frames, cfg.video_fps, speaker.speaker_id)


def _assemble(
    clean: Sequence[Waveform],
    videos: Sequence[VideoClip],
    speaker_ids: Sequence[str],
    snr_db: float,
    stft_cfg: StftConfig,
) -> MixtureSample:
    """Cascade ``mix_at_snr`` with speaker 0 as the reference target."""
    n = min(len(w) for w in clean)
    target = Waveform(clean[0].samples[:n], clean[0].sample_rate)
    sources = [target]
    for other in clean[1:]:
        _, scaled = dsp.mix_at_snr(target, other, snr_db)
        sources.append(scaled)
    mixture = Waveform(np.sum([s.samples for s in sources], axis=0), target.sample_rate)
    return MixtureSample(
        mixture=dsp.stft(mixture, stft_cfg),
        sources=[dsp.stft(s, stft_cfg) for s in sources],
        videos=list(videos),
        snr_db=float(snr_db),
        speaker_ids=list(speaker_ids),
        mixture_wave=mixture,
        source_waves=sources,
    )


def synthesize_av_sample(
    clean: Sequence[Waveform],
    speaker_ids: Sequence[str],
    snr_db: float,
    video_cfg: SynthConfig | None = None,
    rng_seed=0,
    stft_cfg: StftConfig = dsp.DESK_STFT,
    speakers: Sequence[SpeakerProfile] | None = None,
) -> MixtureSample:
    """Mix ``clean`` utterances and render one synthetic video per speaker."""
    video_cfg = video_cfg or SynthConfig()
    if len(clean) < 2:
        raise ValueError(f"need at least 2 speakers, got {len(clean)}")
    if len(set(speaker_ids)) != len(speaker_ids) or len(speaker_ids) != len(clean):
        raise ValueError("speaker_ids must be distinct and match the waveforms")
    for w, sid in zip(clean, speaker_ids):
        if w.power() <= 0:
            raise ValueError(f"source for speaker {sid!r} is silent")
    if speakers is None:
        seeds = np.random.SeedSequence(rng_seed).spawn(len(clean))
        speakers = [make_speaker(sid, s, video_cfg) for sid, s in zip(speaker_ids, seeds)]
    n = min(len(w) for w in clean)
    cut = [Waveform(w.samples[:n], w.sample_rate) for w in clean]
    videos = [render_video(w, spk, video_cfg) for w, spk in zip(cut, speakers)]
    return _assemble(cut, videos, speaker_ids, snr_db, stft_cfg)


# ---------------------------------------------------------------- corpus io


def save_frames(path: Path, clip: VideoClip) -> None:
    q = np.round(clip.frames[..., 0] * 255.0).astype(np.uint8)
    with atomic_write(path) as f:
        np.savez_compressed(f, frames=q, frame_rate=np.float64(clip.frame_rate))


def load_frames(path: Path, speaker_id: str = "") -> VideoClip:
    with np.load(path) as z:
        frames = z["frames"].astype(np.float32) / 255.0
        rate = float(z["frame_rate"]) if "frame_rate" in z else 25.0
    return to_grayscale(VideoClip(frames, rate, speaker_id))


def read_manifest(path: Path, split: str | None = None) -> CorpusManifest:
    """Read ``audio<TAB>frames<TAB>speaker`` lines; relative paths resolve against the file."""
    path = Path(path)
    entries = []
    with open(path, newline="") as f:
        for row in csv.reader(f, delimiter="\t"):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 3:
                raise ValueError(f"{path}: expected 3 tab-separated fields, got {row}")
            a, v, spk = row
            entries.append(CorpusEntry(path.parent / a, path.parent / v, spk))
    mixtures_path = path.with_name(path.stem + "_mixtures.tsv")
    mixtures = read_mixture_list(mixtures_path) if mixtures_path.exists() else None
    return CorpusManifest(entries, split or _split_from_name(path), mixtures)


def _split_from_name(path: Path) -> str:
    return path.stem if path.stem in SPLITS else "train"


def write_manifest(path: Path, manifest: CorpusManifest) -> None:
    with atomic_write(path, "w") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        for e in manifest.entries:
            w.writerow([Path(e.audio_path).as_posix(), Path(e.frames_path).as_posix(), e.speaker_id])


def read_mixture_list(path: Path) -> list[tuple[list[int], float]]:
    """Lines of ``entry_index,entry_index,...<TAB>snr_db<TAB>speaker,...``."""
    out = []
    with open(path) as f:
        for line in f:
            if not line.strip() or line.startswith("#"):
                continue
            idx, snr, *_ = line.rstrip("\n").split("\t")
            out.append(([int(i) for i in idx.split(",")], float(snr)))
    return out


def write_mixture_list(path: Path, mixtures, manifest: CorpusManifest) -> None:
    with atomic_write(path, "w") as f:
        for idx, snr in mixtures:
            spk = ",".join(manifest.entries[i].speaker_id for i in idx)
            f.write(f"{','.join(map(str, idx))}\t{snr:.6f}\t{spk}\n")


# ---------------------------------------------------------------- datasets


def draw_speakers(rng: np.random.Generator, n_available: int, n: int) -> list[int]:
    if n_available < n:
        raise ValueError(f"need at least {n} distinct speakers, have {n_available}")
    return [int(i) for i in rng.choice(n_available, size=n, replace=False)]


def draw_snr(rng: np.random.Generator, snr_range=(0.0, 5.0)) -> float:
    return float(rng.uniform(*snr_range))


def _synth_item(cfg: SynthConfig, pool, stft_cfg, n, seed) -> MixtureSample:
    rng = np.random.default_rng(seed)
    chosen = [pool[i] for i in draw_speakers(rng, len(pool), n)]
    snr = draw_snr(rng, cfg.snr_range)
    clean = [synthesize_utterance(spk, rng, cfg) for spk in chosen]
    videos = [render_video(w, spk, cfg) for w, spk in zip(clean, chosen)]
    return _assemble(clean, videos, [s.speaker_id for s in chosen], snr, stft_cfg)


def load_entry(entry: CorpusEntry, sample_rate: int, halve: bool = True) -> tuple[Waveform, VideoClip]:
    w = dsp.read_wav(entry.audio_path, sample_rate)
    clip = load_frames(entry.frames_path, entry.speaker_id)
    return w, halve_frame_rate(clip) if halve else clip


def _corpus_item(
    manifest: CorpusManifest, stft_cfg, n, seed, sample_rate, segment_s, halve, mixture=None
) -> MixtureSample:
    if mixture is None:
        rng = np.random.default_rng(seed)
        by_speaker: dict[str, list[int]] = {}
        for i, e in enumerate(manifest.entries):
            by_speaker.setdefault(e.speaker_id, []).append(i)
        speakers = sorted(by_speaker)
        chosen = draw_speakers(rng, len(speakers), n)
        idx = [by_speaker[speakers[c]][rng.integers(len(by_speaker[speakers[c]]))] for c in chosen]
        snr = draw_snr(rng)
    else:
        idx, snr = mixture
    loaded = [load_entry(manifest.entries[i], sample_rate, halve) for i in idx]
    waves = [w for w, _ in loaded]
    length = min(len(w) for w in waves)
    if segment_s:
        length = min(length, int(round(segment_s * sample_rate)))
    waves = [Waveform(w.samples[:length], w.sample_rate) for w in waves]
    videos = []
    for _, clip in loaded:
        keep = max(1, int(math.ceil(length / sample_rate * clip.frame_rate)))
        videos.append(VideoClip(clip.frames[:keep], clip.frame_rate, clip.speaker_id))
    ids = [manifest.entries[i].speaker_id for i in idx]
    if len(set(ids)) != len(ids):
        raise ValueError(f"mixture {idx} repeats a speaker")
    return _assemble(waves, videos, ids, snr, stft_cfg)


def build_dataset(
    source: SynthConfig | CorpusManifest,
    stft_cfg: StftConfig = dsp.DESK_STFT,
    n_speakers: int = 2,
    rng_seed: int = 0,
    n_samples: int | None = None,
    segment_s: float | None = 2.0,
    sample_rate: int = dsp.DEFAULT_SAMPLE_RATE,
    halve_video: bool = True,
    n_workers: int = 1,
) -> list[MixtureSample]:
    """Materialise ``n_samples`` mixtures; item ``k`` depends only on ``(rng_seed, k)``."""
    if isinstance(source, SynthConfig):
        pool = speaker_pool(source)
        if len(pool) < n_speakers:
            raise ValueError(f"need at least {n_speakers} distinct speakers, have {len(pool)}")
        n_samples = 16 if n_samples is None else n_samples
        seeds = np.random.SeedSequence([rng_seed, 104729]).spawn(n_samples)

        def make(k):
            return _synth_item(source, pool, stft_cfg, n_speakers, seeds[k])

    else:
        if len(source.speakers) < n_speakers:
            raise ValueError(
                f"need at least {n_speakers} distinct speakers, have {len(source.speakers)}"
            )
        mixtures = source.mixtures
        if n_samples is None:
            n_samples = len(mixtures) if mixtures else len(source.entries)
        seeds = np.random.SeedSequence([rng_seed, 104729]).spawn(n_samples)

        def make(k):
            mix = mixtures[k] if mixtures else None
            return _corpus_item(
                source, stft_cfg, n_speakers, seeds[k], sample_rate, segment_s, halve_video, mix
            )

    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as ex:
            return list(ex.map(make, range(n_samples)))
    return [make(k) for k in range(n_samples)]


def write_synthetic_split(
    out_dir: Path,
    cfg: SynthConfig,
    n_mixtures: int,
    utterances_per_speaker: int = 4,
    n_speakers_per_mix: int = 2,
    rng_seed: int = 0,
) -> CorpusManifest:
    """Write WAVs, frame archives, a manifest and a fixed mixture list for one split.

    Videos are written at twice ``cfg.video_fps`` so that ingest can halve
    the frame rate as it would for a real corpus.
    """
    out_dir = Path(out_dir)
    (out_dir / cfg.split).mkdir(parents=True, exist_ok=True)
    pool = speaker_pool(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, SPLITS.index(cfg.split)]))
    render_cfg = replace(cfg, video_fps=cfg.video_fps * 2)
    entries = []
    for spk in pool:
        for u in range(utterances_per_speaker):
            w = synthesize_utterance(spk, rng, cfg)
            stem = f"{cfg.split}/{spk.speaker_id}_{u:02d}"
            dsp.write_wav(out_dir / f"{stem}.wav", w)
            save_frames(out_dir / f"{stem}.npz", render_video(w, spk, render_cfg))
            entries.append(CorpusEntry(Path(f"{stem}.wav"), Path(f"{stem}.npz"), spk.speaker_id))
    manifest = CorpusManifest(entries, cfg.split)
    by_speaker: dict[int, list[int]] = {}
    for i, e in enumerate(entries):
        by_speaker.setdefault(int(e.speaker_id[-3:]), []).append(i)
    mixtures = []
    for _ in range(n_mixtures):
        chosen = draw_speakers(rng, len(pool), n_speakers_per_mix)
        idx = [by_speaker[c][rng.integers(utterances_per_speaker)] for c in chosen]
        mixtures.append((idx, draw_snr(rng, cfg.snr_range)))
    manifest.mixtures = mixtures
    write_manifest(out_dir / f"{cfg.split}.tsv", manifest)
    write_mixture_list(out_dir / f"{cfg.split}_mixtures.tsv", mixtures, manifest)
    return manifest


def iter_batches(items: Sequence, batch_size: int, rng: np.random.Generator | None = None) -> Iterable[list]:
    order = np.arange(len(items)) if rng is None else rng.permutation(len(items))
    for start in range(0, len(items), batch_size):
        yield [items[i] for i in order[start : start + batch_size]]
