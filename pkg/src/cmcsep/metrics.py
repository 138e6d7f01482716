"""Separation metrics and the visual/separated-feature angle analysis."""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import signal as sps

from . import dsp
from .dsp import Waveform
from .validation import atomic_write

SDR_CAP_DB = 60.0


def sdr(estimate: Waveform | np.ndarray, reference: Waveform | np.ndarray, cap_db: float = SDR_CAP_DB) -> float:
    """Single-reference signal-to-distortion ratio in dB, capped at ``cap_db``."""
    est = np.asarray(getattr(estimate, "samples", estimate), dtype=np.float64)
    ref = np.asarray(getattr(reference, "samples", reference), dtype=np.float64)
    if isinstance(estimate, Waveform) and isinstance(reference, Waveform):
        if estimate.sample_rate != reference.sample_rate:
            raise ValueError("estimate and reference sample rates differ")
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    ref_energy = float(ref @ ref)
    if ref_energy <= 0:
        raise ValueError("SDR is undefined for a silent reference")
    target = (est @ ref) / ref_energy * ref
    err = float(np.sum((est - target) ** 2))
    num = float(target @ target)
    if err <= num * 10 ** (-cap_db / 10):
        return cap_db
    return 10.0 * math.log10(num / err)


# ---------------------------------------------------------------- STOI

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30  # frames, i.e. 384 ms
STOI_BETA_DB = -15.0
STOI_DYN_RANGE = 40.0
_EPS = np.finfo(np.float64).eps


def third_octave_bands(fs: int = STOI_FS, nfft: int = STOI_NFFT, n_bands: int = STOI_BANDS, min_freq: float = STOI_MIN_FREQ):
    """(n_bands, nfft/2+1) 0/1 matrix grouping DFT bins into 1/3-octave bands."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(n_bands)
    cf = min_freq * 2.0 ** (k / 3)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    bands = np.zeros((n_bands, f.size))
    for i in range(n_bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        bands[i, a:b] = 1.0
    return bands, cf


def _hann(n: int) -> np.ndarray:
    return np.hanning(n + 2)[1:-1]


def _frames(x: np.ndarray, size: int, hop: int) -> np.ndarray:
    n = (x.size - size) // hop + 1
    if n <= 0:
        return np.zeros((0, size))
    idx = np.arange(size)[None] + hop * np.arange(n)[:, None]
    return x[idx]


def remove_silent_frames(x: np.ndarray, y: np.ndarray, dyn_range: float = STOI_DYN_RANGE, size: int = STOI_FRAME, hop: int = STOI_FRAME // 2):
    """Drop frames whose reference energy is ``dyn_range`` dB below the loudest, then overlap-add."""
    w = _hann(size)
    xf = _frames(x, size, hop) * w
    yf = _frames(y, size, hop) * w
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energy > energy.max() - dyn_range if energy.size else energy.astype(bool)
    xf, yf = xf[keep], yf[keep]
    n = xf.shape[0]
    out_len = (n - 1) * hop + size if n else 0
    xs, ys = np.zeros(out_len), np.zeros(out_len)
    for i in range(n):
        xs[i * hop : i * hop + size] += xf[i]
        ys[i * hop : i * hop + size] += yf[i]
    return xs, ys


def _band_envelopes(x: np.ndarray, bands: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(_frames(x, STOI_FRAME, STOI_FRAME // 2) * _hann(STOI_FRAME), n=STOI_NFFT, axis=1)
    return np.sqrt(bands @ (np.abs(spec) ** 2).T)  # (bands, frames)


def stoi(estimate: Waveform | np.ndarray, reference: Waveform | np.ndarray, sample_rate: int | None = None) -> float:
    """Short-time objective intelligibility of ``estimate`` against clean ``reference``."""
    if sample_rate is None:
        sample_rate = getattr(reference, "sample_rate", None) or dsp.DEFAULT_SAMPLE_RATE
    y = np.asarray(getattr(estimate, "samples", estimate), dtype=np.float64)
    x = np.asarray(getattr(reference, "samples", reference), dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if sample_rate != STOI_FS:
        g = math.gcd(int(sample_rate), STOI_FS)
        x = sps.resample_poly(x, STOI_FS // g, sample_rate // g)
        y = sps.resample_poly(y, STOI_FS // g, sample_rate // g)
    x, y = remove_silent_frames(x, y)
    bands, _ = third_octave_bands()
    X = _band_envelopes(x, bands)
    Y = _band_envelopes(y, bands)
    n_frames = X.shape[1]
    if n_frames < STOI_SEGMENT:
        raise ValueError(
            f"STOI needs at least {STOI_SEGMENT} non-silent frames ({STOI_SEGMENT * 12.8:.0f} ms), got {n_frames}"
        )
    starts = np.arange(n_frames - STOI_SEGMENT + 1)
    idx = starts[:, None] + np.arange(STOI_SEGMENT)[None]
    Xs = X[:, idx].transpose(1, 0, 2)  # (segments, bands, N)
    Ys = Y[:, idx].transpose(1, 0, 2)
    alpha = np.linalg.norm(Xs, axis=2, keepdims=True) / (np.linalg.norm(Ys, axis=2, keepdims=True) + _EPS)
    clip = 10 ** (-STOI_BETA_DB / 20)
    Yp = np.minimum(alpha * Ys, Xs * (1 + clip))
    Xc = Xs - Xs.mean(axis=2, keepdims=True)
    Yc = Yp - Yp.mean(axis=2, keepdims=True)
    Xc /= np.linalg.norm(Xc, axis=2, keepdims=True) + _EPS
    Yc /= np.linalg.norm(Yc, axis=2, keepdims=True) + _EPS
    return float(np.mean(np.sum(Xc * Yc, axis=2)))


# ---------------------------------------------------------------- angle analysis


@dataclass
class AngleHistogram:
    bin_edges: np.ndarray
    positive_counts: np.ndarray
    negative_counts: np.ndarray
    positive_sum: float = 0.0
    negative_sum: float = 0.0
    label: str = ""

    @classmethod
    def empty(cls, bin_width: float = 1.0, label: str = "") -> "AngleHistogram":
        n = int(round(180.0 / bin_width))
        if not math.isclose(n * bin_width, 180.0):
            raise ValueError(f"bin width {bin_width} does not divide 180 degrees")
        edges = np.linspace(0.0, 180.0, n + 1)
        return cls(edges, np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64), label=label)

    @property
    def bin_width(self) -> float:
        return float(self.bin_edges[1] - self.bin_edges[0])

    @property
    def n_positive(self) -> int:
        return int(self.positive_counts.sum())

    @property
    def n_negative(self) -> int:
        return int(self.negative_counts.sum())

    @property
    def mean_positive(self) -> float:
        return self.positive_sum / max(self.n_positive, 1)

    @property
    def mean_negative(self) -> float:
        return self.negative_sum / max(self.n_negative, 1)

    def add(self, angles_deg: np.ndarray) -> None:
        """Accumulate an (N, N, J) array of angles; the diagonal holds positive pairs."""
        n = angles_deg.shape[0]
        eye = np.eye(n, dtype=bool)
        pos = angles_deg[eye].ravel()
        neg = angles_deg[~eye].ravel()
        self.positive_counts += self._bin(pos)
        self.negative_counts += self._bin(neg)
        self.positive_sum += float(pos.sum())
        self.negative_sum += float(neg.sum())

    def _bin(self, a: np.ndarray) -> np.ndarray:
        idx = np.clip((a / self.bin_width).astype(np.int64), 0, len(self.positive_counts) - 1)
        return np.bincount(idx, minlength=len(self.positive_counts))

    def to_csv(self, path) -> None:
        with atomic_write(path, "w") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["bin_start", "bin_end", "positive_count", "negative_count"])
            for lo, hi, p, q in zip(self.bin_edges[:-1], self.bin_edges[1:], self.positive_counts, self.negative_counts):
                w.writerow([f"{lo:g}", f"{hi:g}", int(p), int(q)])

    @classmethod
    def from_csv(cls, path, label: str = "") -> "AngleHistogram":
        lo, hi, p, q = [], [], [], []
        with open(path) as f:
            for row in csv.DictReader(f):
                lo.append(float(row["bin_start"]))
                hi.append(float(row["bin_end"]))
                p.append(int(row["positive_count"]))
                q.append(int(row["negative_count"]))
        edges = np.array(lo + hi[-1:])
        centres = (np.array(lo) + np.array(hi)) / 2
        p, q = np.array(p), np.array(q)
        return cls(edges, p, q, float(centres @ p), float(centres @ q), label)

    def plot(self, path, title: str | None = None) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        centres = (self.bin_edges[:-1] + self.bin_edges[1:]) / 2
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(centres, self.positive_counts / max(self.n_positive, 1), color="tab:blue", label="positive pairs")
        ax.plot(centres, self.negative_counts / max(self.n_negative, 1), color="tab:orange", label="negative pairs")
        ax.set_xlim(0, 180)
        ax.set_xlabel("angle [deg]")
        ax.set_ylabel("relative frequency")
        ax.set_title(title or self.label)
        ax.legend()
        fig.tight_layout()
        buf = io.BytesIO()
        fig.savefig(buf, format="png", dpi=120)
        plt.close(fig)
        with atomic_write(path) as f:
            f.write(buf.getvalue())


def pair_angles(c_v: np.ndarray, c_avc: np.ndarray, epsilon: float = 1e-8) -> np.ndarray:
    """Angles in degrees between every (visual n, AVC n') frame pair: (N, D, J) -> (N, N, J)."""
    from .losses import pairwise_cosine

    sim = pairwise_cosine(torch.as_tensor(c_v, dtype=torch.float64), torch.as_tensor(c_avc, dtype=torch.float64), epsilon)
    return np.degrees(np.arccos(sim.numpy()))


@torch.no_grad()
def angle_histogram(model, dataset, mode: str = "proposed", avc_model=None, bin_width: float = 1.0, batch_size: int = 8) -> AngleHistogram:
    """Histogram of visual/AVC feature angles over ``dataset``.

    In ``baseline`` mode the AVC block of ``avc_model`` (a model trained with
    the correspondence loss) is applied to the baseline's pre-activation masks.
    """
    from .training import batch_tensors

    if mode not in ("proposed", "baseline"):
        raise ValueError(f"mode must be 'proposed' or 'baseline', got {mode!r}")
    avc_source = model if mode == "proposed" else avc_model
    if avc_source is None or getattr(avc_source, "avc", None) is None:
        raise ValueError(f"{mode} analysis requires a model carrying a trained AVC block")
    if avc_source.cfg.input_bins != model.cfg.input_bins or avc_source.cfg.embed_dim != model.cfg.embed_dim:
        raise ValueError("AVC block and analysed model disagree on input_bins/embed_dim")
    model.eval()
    avc_source.eval()
    hist = AngleHistogram.empty(bin_width, label=mode)
    items = list(dataset)
    for start in range(0, len(items), batch_size):
        batch = batch_tensors(items[start : start + batch_size], dtype=next(model.parameters()).dtype)
        out = model(batch["mix_mag"], batch["videos"], with_avc=False)
        c_avc = avc_source.avc(out.masks_pre.flatten(0, 1)).unflatten(0, out.masks_pre.shape[:2])
        for cv, ca in zip(out.c_v.double().numpy(), c_avc.double().numpy()):
            hist.add(pair_angles(cv, ca))
    return hist


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    method: str
    rows: list[dict] = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return len({r["sample"] for r in self.rows})

    @property
    def sdr_db(self) -> float:
        return float(np.mean([r["sdr_db"] for r in self.rows]))

    @property
    def stoi(self) -> float:
        return float(np.mean([r["stoi"] for r in self.rows]))

    def to_csv(self, path) -> None:
        with atomic_write(path, "w") as f:
            w = csv.DictWriter(f, fieldnames=["method", "sample", "speaker", "speaker_id", "sdr_db", "stoi"], lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({"method": self.method, **r})


def format_table(reports: list[EvalReport]) -> str:
    """Aligned text table, one row per method; PESQ is not computed."""
    header = ["Method", "SDR", "PESQ", "STOI", "n"]
    body = [[r.method, f"{r.sdr_db:.2f}", "not computed", f"{r.stoi:.3f}", str(r.n_samples)] for r in reports]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    line = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths))  # noqa: E731
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(header), sep, *map(line, body)]) + "\n"


def _references(sample) -> list[Waveform]:
    if sample.source_waves is not None:
        return sample.source_waves
    return [dsp.istft(s) for s in sample.sources]


def evaluate_dataset(model, dataset, method: str | None = None, permutation_invariant: bool | None = None) -> EvalReport:
    """Per-speaker SDR/STOI of ``model`` on ``dataset``; ``model=None`` scores the raw mixture."""
    from .model import UPITSeparator, separate

    if model is None:
        method = method or "Mixture"
    if permutation_invariant is None:
        permutation_invariant = isinstance(model, UPITSeparator)
    report = EvalReport(method or type(model).__name__)
    for k, sample in enumerate(dataset):
        refs = _references(sample)
        length = len(refs[0])
        if model is None:
            mix = sample.mixture_wave or dsp.istft(sample.mixture)
            ests = [mix] * len(refs)
        else:
            specs, _ = separate(model, sample.mixture, None if isinstance(model, UPITSeparator) else sample.videos)
            ests = [dsp.istft(s, length) for s in specs]
        n = len(refs)
        order = list(range(n))
        if permutation_invariant and model is not None:
            scores = np.array([[sdr(ests[i], refs[m]) for m in range(n)] for i in range(n)])
            order = list(max(itertools.permutations(range(n)), key=lambda p: scores[range(n), list(p)].sum()))
        for i in range(n):
            ref = refs[order[i]]
            report.rows.append(
                {
                    "sample": k,
                    "speaker": order[i],
                    "speaker_id": sample.speaker_ids[order[i]],
                    "sdr_db": sdr(ests[i], ref),
                    "stoi": stoi(ests[i], ref),
                }
            )
    return report
