import csv
import json

import numpy as np
import pytest

from cmcsep import dsp
from cmcsep.cli import main

CONFIG = """\
preset = desk
model.embed_dim = 16
model.audio_hidden = 16
model.video_blstm_hidden = 16
model.fusion_blstm_hidden = 16
model.video_height = 16
model.video_width = 16
model.frontend_channels = 4
model.resnet_widths = (4, 8, 8, 16)
synth.duration_s = 1.0
synth.n_speakers_train = 4
synth.n_speakers_validation = 3
synth.n_speakers_test = 3
n_train = 4
n_validation = 2
n_test = 3
batch_size = 2
max_epochs = 1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(CONFIG)
    cfg = str(root / "tiny.cfg")
    assert main(["synth-data", "--config", cfg, "--out", str(root / "corpus"), "--utterances-per-speaker", "2"]) == 0
    ds = ["--set", f"dataset={root / 'corpus'}"]
    assert main(["train", "--config", cfg, *ds, "--out", str(root / "proposed")]) == 0
    assert main(["train", "--config", cfg, *ds, "--set", "method=av_baseline", "--set", "lambda=0", "--out", str(root / "baseline")]) == 0
    return root, cfg, ds


def read_tsv(path):
    with open(path) as f:
        return list(csv.reader(f, delimiter="\t"))


def test_synth_data_layout(workspace):
    root, _, _ = workspace
    corpus = root / "corpus"
    speakers = {}
    for split, n_mix in (("train", 4), ("validation", 2), ("test", 3)):
        rows = read_tsv(corpus / f"{split}.tsv")
        speakers[split] = {r[2] for r in rows}
        assert all((corpus / r[0]).exists() and (corpus / r[1]).exists() for r in rows)
        assert len(read_tsv(corpus / f"{split}_mixtures.tsv")) == n_mix
    assert len(speakers["train"]) == 4 and len(speakers["test"]) == 3
    assert not (speakers["train"] & speakers["validation"])
    assert not (speakers["train"] & speakers["test"])
    assert not (speakers["validation"] & speakers["test"])
    assert (corpus / "config.resolved.cfg").exists()


def test_train_outputs(workspace):
    root, _, _ = workspace
    for run in ("proposed", "baseline"):
        assert (root / run / "best.ckpt").exists()
        assert (root / run / "config.resolved.cfg").exists()
        entry = json.loads((root / run / "train_log.jsonl").read_text().splitlines()[0])
        assert {"train_total", "train_mse", "train_cmc", "val_total"} <= set(entry)
    assert "method = 'av_baseline'" in (root / "baseline" / "config.resolved.cfg").read_text()


def test_evaluate_table(workspace, capsys):
    root, cfg, ds = workspace
    out = root / "eval"
    args = ["evaluate", "--config", cfg, *ds, "--out", str(out)]
    args += ["--checkpoint", f"AV_baseline={root / 'baseline' / 'best.ckpt'}", "--checkpoint", f"Proposed={root / 'proposed' / 'best.ckpt'}"]
    assert main(args) == 0
    table = (out / "results.txt").read_text().splitlines()
    assert [c.strip() for c in table[0].split(" | ")] == ["Method", "SDR", "PESQ", "STOI", "n"]
    assert [line.split(" | ")[0].strip() for line in table[2:]] == ["Mixture", "AV_baseline", "Proposed"]
    assert "not computed" in table[2]
    rows = read_tsv(out / "eval_Proposed.csv")
    assert len(rows) == 1 + 2 * 3
    results = json.loads((out / "results.json").read_text())
    assert [r["method"] for r in results] == ["Mixture", "AV_baseline", "Proposed"]
    assert "Proposed" in capsys.readouterr().out


def test_separate_writes_one_wav_per_speaker(workspace):
    root, cfg, _ = workspace
    rows = read_tsv(root / "corpus" / "test.tsv")
    a, b = rows[0], rows[2]  # distinct speakers
    assert a[2] != b[2]
    wa = dsp.read_wav(root / "corpus" / a[0])
    wb = dsp.read_wav(root / "corpus" / b[0])
    mix, _ = dsp.mix_at_snr(wa, wb, 0.0)
    dsp.write_wav(root / "mix.wav", dsp.Waveform(mix.samples / np.abs(mix.samples).max() * 0.9))
    out = root / "sep"
    args = ["separate", "--config", cfg, "--out", str(out), "--mixture", str(root / "mix.wav")]
    args += ["--checkpoint", str(root / "proposed" / "best.ckpt")]
    args += ["--video", str(root / "corpus" / a[1]), "--video", str(root / "corpus" / b[1])]
    assert main(args) == 0
    for k in (0, 1):
        w = dsp.read_wav(out / f"speaker{k}.wav")
        assert len(w) == len(mix)
    assert (out / "config.resolved.cfg").exists()

    # no video for an AV checkpoint is a usage error
    assert main(["separate", "--out", str(root / "sep2"), "--mixture", str(root / "mix.wav"), "--checkpoint", str(root / "proposed" / "best.ckpt")]) == 1


def test_analyze_correspondence(workspace):
    root, cfg, ds = workspace
    out = root / "angles"
    args = ["analyze-correspondence", "--config", cfg, *ds, "--out", str(out)]
    args += ["--checkpoint", str(root / "proposed" / "best.ckpt"), "--baseline", str(root / "baseline" / "best.ckpt")]
    assert main(args) == 0
    for name in ("proposed", "baseline"):
        rows = list(csv.DictReader(open(out / f"angles_{name}.csv")))
        assert len(rows) == 180
        assert float(rows[0]["bin_start"]) == 0 and float(rows[-1]["bin_end"]) == 180
        assert (out / f"angles_{name}.png").exists()
    summary = json.loads((out / "angles_summary.json").read_text())
    assert set(summary) == {"proposed", "baseline"}
    assert summary["proposed"]["n_negative"] == summary["proposed"]["n_positive"]  # N = 2


def test_exit_codes(workspace, tmp_path):
    root, cfg, ds = workspace
    assert main(["train", "--config", cfg, "--set", "bogus=1", "--out", str(tmp_path / "a")]) == 1
    assert main(["train", "--config", cfg, "--set", "method=av_baseline", "--out", str(tmp_path / "b")]) == 1
    assert main(["evaluate", "--config", cfg, *ds, "--out", str(tmp_path / "c"), "--checkpoint", str(tmp_path / "missing.ckpt")]) == 1
    assert main(["evaluate", "--config", cfg, *ds, "--out", str(root / "proposed"), "--no-mixture", "--checkpoint", str(root / "proposed" / "best.ckpt")]) == 1
    assert main(["analyze-correspondence", "--config", cfg, *ds, "--out", str(tmp_path / "d"), "--baseline", str(root / "baseline" / "best.ckpt")]) == 1
    (tmp_path / "bad.ckpt").write_bytes(b"CMCSEPCK" + b"\x01\x00\x00\x00" + b"0" * 40)
    assert main(["evaluate", "--config", cfg, *ds, "--out", str(tmp_path / "e"), "--checkpoint", str(tmp_path / "bad.ckpt")]) == 2
    assert main(["no-such-command"]) == 1
    assert main(["--help"]) == 0
