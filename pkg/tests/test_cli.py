import filecmp
import subprocess
import sys

import pytest

from mdpcnn.cli import main

NET = [
    "--set", "network.conv_channels=2,3,4,4,4",
    "--set", "network.input_size=32,32,1",
    "--set", "network.fc1_width=8",
    "--set", "network.embedding_dim=4",
    "--set", "pairgen.num_positive=6",
    "--set", "pairgen.num_negative=10",
    "--set", "trainer.epochs=2",
    "--set", "trainer.batch_size=4",
    "--set", "eval.runs=2",
]


def pipeline(corpus, out, *extra):
    args = ["--set", f"paths.corpus={corpus}", "--seed", "3", *NET, *extra]
    for stage in ("select", "pairgen", "train", "eval"):
        assert main([stage, "--out", str(out), *args]) == 0
    return out


def test_stages_write_artifacts(small_corpus_root, tmp_path, capsys):
    out = pipeline(small_corpus_root, tmp_path / "run")
    names = {p.name for p in out.iterdir()}
    assert {"selection.txt", "pairs.csv", "weights.mdpw", "trainlog.csv", "report.txt", "pr.csv"} <= names
    assert {f"{s}.config.txt" for s in ("select", "pairgen", "train", "eval")} <= names
    printed = capsys.readouterr().out
    # C(12, 3) * C(9, 2) = 220 * 36 for 9 objects with 12 training views
    assert "pair_space_size = 7,920" in printed


def test_reruns_are_byte_identical(small_corpus_root, tmp_path):
    a = pipeline(small_corpus_root, tmp_path / "a")
    b = pipeline(small_corpus_root, tmp_path / "b")
    for name in ("selection.txt", "pairs.csv", "weights.mdpw", "trainlog.csv", "report.txt", "pr.csv"):
        assert filecmp.cmp(a / name, b / name, shallow=False), name


def test_synth_rerun_identical(tmp_path):
    args = ["--set", "synth.objects_per_class=2", "--set", "synth.views_per_object=4", "--set", "synth.image_size=16"]
    assert main(["synth", "--out", str(tmp_path / "a"), *args]) == 0
    assert main(["synth", "--out", str(tmp_path / "b"), *args]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.pgm"))
    assert len(files) == 8 * 2 * 4
    for f in files:
        assert filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)


def test_zero_lr_train_matches_untrained_eval(small_corpus_root, tmp_path):
    trained = pipeline(small_corpus_root, tmp_path / "t", "--set", "trainer.lr=0")
    out = tmp_path / "u"
    common = ["--set", f"paths.corpus={small_corpus_root}", "--seed", "3", *NET]
    assert main(["eval", "--out", str(out), "--set", "eval.untrained=true", *common]) == 0
    assert (trained / "report.txt").read_text() == (out / "report.txt").read_text()


def test_pairgen_prints_table_total(tmp_path, capsys):
    # 80 objects with 52 views keep floor(0.8 * 52) = 41 training views
    corpus = tmp_path / "c"
    assert main(["synth", "--out", str(corpus), "--set", "synth.objects_per_class=10",
                 "--set", "synth.views_per_object=52", "--set", "synth.image_size=16"]) == 0
    out = tmp_path / "o"
    assert main(["select", "--out", str(out), "--set", f"paths.corpus={corpus}"]) == 0
    assert main(["pairgen", "--out", str(out), "--set", f"paths.corpus={corpus}"]) == 0
    assert "pair_space_size = 33,685,600" in capsys.readouterr().out


def test_gradcheck_default_network(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("max_relative_error = ")
    assert float(line.split("=")[1]) <= 1e-4


def test_errors_are_one_line_and_nonzero(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--set", "paths.corpus=/does/not/exist"]) != 0
    err = capsys.readouterr().err
    assert err.startswith("error: ") and err.count("\n") == 1
    assert main(["eval", "--out", str(tmp_path), "--set", "bogus=1"]) != 0
    assert "bogus" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mdpcnn.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gradcheck" in proc.stdout
