import csv
import io
import json

import numpy as np
import pytest

from datamark.cli import main
from datamark.core import Dataset
from datamark.datasets import load_dataset


def run(capsys, *argv):
    code = main(["--log-level", "WARNING", *map(str, argv)])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def corpus(workdir):
    assert main(["synth", "--out-dir", str(workdir), "--seed", "2"]) == 0
    assert main(["make-trigger", "--shape", "3,8,8", "--target-label", "1", "--out", str(workdir / "key.json")]) == 0
    return workdir


def test_make_trigger_label_base(capsys):
    code, out, _ = run(capsys, "make-trigger", "--shape", "3,32,32", "--target-label", "1", "--label-base", "1",
                       "--kind", "line", "--blend-value", "0.2")
    key = json.loads(out)
    assert code == 0 and key["target_label"] == 0 and key["trigger_kind"] == "line"
    assert key["shape"] == [3, 32, 32] and key["blend_value"] == 0.2


def test_watermark_manifest_matches_byte_diff(capsys, corpus):
    code, out, _ = run(capsys, "watermark", "--input", corpus / "train.npz", "--key", corpus / "key.json",
                       "--rate", "0.1", "--seed", "5", "--out", corpus / "wm.npz", "--manifest", corpus / "m.json")
    manifest = json.loads(out)
    assert code == 0 and manifest == json.loads((corpus / "m.json").read_text())
    before = Dataset.load_npz(corpus / "train.npz")
    after = Dataset.load_npz(corpus / "wm.npz")
    differing = {i for i in range(len(before))
                 if before.images[i].tobytes() != after.images[i].tobytes() or before.labels[i] != after.labels[i]}
    assert differing == set(manifest["modified_indices"])
    assert manifest["count"] == round(0.1 * len(before)) == 200


def test_watermark_cifar_written_back_as_records(capsys, tmp_path, rng):
    from datamark.datasets import CIFAR_RECORD, write_cifar10_binary

    d = Dataset(rng.integers(0, 256, (10, 3, 32, 32), dtype=np.uint8), rng.integers(0, 10, 10), 10)
    write_cifar10_binary(d, tmp_path / "in.bin")
    run(capsys, "make-trigger", "--shape", "3,32,32", "--target-label", "3", "--out", tmp_path / "k.json")
    code, out, _ = run(capsys, "watermark", "--input", tmp_path / "in.bin", "--input-format", "cifar10",
                       "--key", tmp_path / "k.json", "--rate", "0.3", "--out", tmp_path / "out.bin")
    assert code == 0 and (tmp_path / "out.bin").stat().st_size == 10 * CIFAR_RECORD
    marked = load_dataset("cifar10", tmp_path / "out.bin")
    assert sorted(np.flatnonzero((marked.images != d.images).any(axis=(1, 2, 3)))) == json.loads(out)["modified_indices"]


def test_train_evaluate_verify(capsys, corpus):
    code, out, _ = run(capsys, "train", "--input", corpus / "train.npz", "--epochs", "3", "--out", corpus / "p.json")
    assert code == 0 and len(json.loads(out)["loss_history"]) == 3
    code, out, _ = run(capsys, "evaluate", "--params", corpus / "p.json", "--test", corpus / "test.npz", "--key", corpus / "key.json")
    m = json.loads(out)
    assert code == 0 and m["ba"] > 0.9
    code, out, err = run(capsys, "verify", "--params", corpus / "p.json", "--test", corpus / "test.npz",
                         "--key", corpus / "key.json", "--samples", "20")
    v = json.loads(out)
    assert code == 0 and v["report"]["reject_h0"] is False and v["decision"] in err
    assert "differences" not in v["report"] and "pairs" not in v


def test_evaluate_echo_mock(capsys, corpus):
    code, out, _ = run(capsys, "evaluate", "--mock", "echo", "--test", corpus / "test.npz", "--key", corpus / "key.json")
    assert code == 0 and json.loads(out)["ba"] == 1.0


def test_rsd_perfect_backdoor(capsys, corpus):
    code, out, _ = run(capsys, "rsd", "--mock", "perfect_backdoor", "--test", corpus / "test.npz", "--key", corpus / "key.json")
    r = json.loads(out)
    assert code == 0 and r["rsd"] == 1.0 and r["repetitions"] == 100


def test_verify_verbose_pairs(capsys, corpus):
    code, out, _ = run(capsys, "verify", "--mock", "perfect_backdoor", "--test", corpus / "test.npz",
                       "--key", corpus / "key.json", "--samples", "10", "--verbose", "--test-kind", "wilcoxon")
    v = json.loads(out)
    assert code == 0 and v["report"]["reject_h0"] is True
    assert len(v["report"]["differences"]) == len(v["pairs"]) == 10


@pytest.mark.slow
def test_ablate_gamma_csv(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"label_base": 0, "verification": {"repetitions": 5}}))
    code, out, _ = run(capsys, "ablate", "--config", cfg, "--param", "gamma", "--values", "0.01,0.02,0.05,0.1")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and [float(r["gamma"]) for r in rows] == [0.01, 0.02, 0.05, 0.1]
    wsr = [float(r["wsr"]) for r in rows]
    assert all(b >= a - 0.02 for a, b in zip(wsr, wsr[1:]))


def test_exit_codes(capsys, caplog, corpus, tmp_path):
    code, _, _ = run(capsys, "evaluate", "--mock", "echo", "--test", tmp_path / "missing.npz", "--key", corpus / "key.json")
    assert code == 1 and "missing.npz" in caplog.text
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"label_base": 2}))
    code, _, _ = run(capsys, "run", "--config", bad)
    assert code == 2 and "label_base" in caplog.text
    code, _, err = run(capsys, "verify", "--endpoint", "http://127.0.0.1:9", "--timeout", "0.2", "--retries", "0",
                       "--test", corpus / "test.npz", "--key", corpus / "key.json", "--samples", "3")
    assert code == 1
    with pytest.raises(SystemExit) as e:
        main(["verify", "--test", "x"])
    assert e.value.code == 2
