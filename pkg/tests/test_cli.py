import struct
import subprocess
import sys

import numpy as np
import pytest

from ghostsa.analysis import analyze_network
from ghostsa.checkpoint import load_checkpoint, save_checkpoint
from ghostsa.cli import analyze_text, main
from ghostsa.ghost import build_network
from ghostsa.netspec import emit_network_config, toy_mnist_spec


def write_idx(path, arr, magic):
    path.write_bytes(struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes())


@pytest.fixture(scope="module")
def fake_mnist(tmp_path_factory):
    """A few dozen digit-sized images in the real IDX layout."""
    root = tmp_path_factory.mktemp("mnist")
    rng = np.random.default_rng(0)
    for prefix, n in (("train", 64), ("t10k", 40)):
        labels = (np.arange(n) % 10).astype(np.uint8)
        images = rng.integers(0, 40, size=(n, 28, 28), dtype=np.uint8)
        for i, y in enumerate(labels):
            images[i, 2 * y : 2 * y + 6, 4:24] = 250  # a label-dependent bar
        write_idx(root / f"{prefix}-images-idx3-ubyte", images, 2051)
        write_idx(root / f"{prefix}-labels-idx1-ubyte", labels, 2049)
    return root


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "toy.cfg"
    path.write_text(emit_network_config(toy_mnist_spec()), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, fake_mnist, config_file):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--config", str(config_file), "--data-dir", str(fake_mnist),
                 "--epochs", "1", "--batch-size", "16", "--out", str(out)])
    assert code == 0
    return out


class TestTrainEval:
    def test_outputs(self, trained):
        assert (trained / "model.gsan").exists()
        lines = (trained / "metrics.tsv").read_text().splitlines()
        assert lines[0] == "epoch\ttrain_loss\ttest_top1" and len(lines) == 2
        assert (trained / "timing.tsv").exists()
        load_checkpoint(trained / "model.gsan")

    def test_eval_matches_logged(self, trained, fake_mnist, capsys):
        logged = float((trained / "metrics.tsv").read_text().splitlines()[1].split("\t")[2])
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(trained / "model.gsan"),
                     "--data-dir", str(fake_mnist), "--format", "kv"]) == 0
        assert capsys.readouterr().out == f"top1 = {logged:.2f}\n"

    def test_seeded_runs_identical(self, tmp_path, fake_mnist, config_file, trained):
        main(["train", "--config", str(config_file), "--data-dir", str(fake_mnist),
              "--epochs", "1", "--batch-size", "16", "--out", str(tmp_path)])
        assert (tmp_path / "metrics.tsv").read_bytes() == (trained / "metrics.tsv").read_bytes()

    def test_env_data_dir(self, tmp_path, fake_mnist, trained, monkeypatch, capsys):
        monkeypatch.setenv("GSAN_DATA_DIR", str(fake_mnist))
        assert main(["eval", "--checkpoint", str(trained / "model.gsan")]) == 0
        assert capsys.readouterr().out.startswith("top1\t")


class TestExitCodes:
    def test_missing_config_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["train"])
        assert err.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_no_subcommand(self):
        with pytest.raises(SystemExit) as err:
            main([])
        assert err.value.code == 2

    def test_bad_config_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[stage]\nin = 16\n")
        assert main(["analyze", "--config", str(bad)]) == 2
        assert "line 1" in capsys.readouterr().err

    def test_missing_checkpoint_is_io_error(self, tmp_path):
        assert main(["inspect", "--checkpoint", str(tmp_path / "none.gsan")]) == 3

    def test_missing_dataset_is_io_error(self, tmp_path, config_file):
        assert main(["train", "--config", str(config_file), "--data-dir", str(tmp_path),
                     "--out", str(tmp_path)]) == 3

    def test_bench_repeats_validated(self):
        assert main(["bench", "--repeats", "10"]) == 2

    def test_corrupt_checkpoint(self, tmp_path):
        path = tmp_path / "x.gsan"
        path.write_bytes(b"GSAN\x01\x00")
        assert main(["inspect", "--checkpoint", str(path)]) == 3

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "ghostsa", "analyze"], capture_output=True, text=True)
        assert proc.returncode == 2 and "needs --config" in proc.stderr


class TestAnalyze:
    def test_totals_match_api(self, config_file, capsys):
        assert main(["analyze", "--config", str(config_file), "--format", "kv"]) == 0
        kv = dict(line.split(" = ", 1) for line in capsys.readouterr().out.splitlines())
        report = analyze_network(toy_mnist_spec())
        assert int(kv["total.flops"]) == report.flops
        assert int(kv["total.params"]) == report.params
        assert int(kv["total.mem_accesses"]) == report.mem_accesses

    def test_tsv_byte_identical(self, config_file, capsys):
        main(["analyze", "--config", str(config_file)])
        first = capsys.readouterr().out
        main(["analyze", "--config", str(config_file)])
        assert capsys.readouterr().out == first == analyze_text(toy_mnist_spec())

    def test_gamma_override(self, config_file, capsys):
        totals = {}
        for gamma in (2, 4):
            main(["analyze", "--config", str(config_file), "--gamma", str(gamma), "--format", "kv"])
            kv = dict(line.split(" = ", 1) for line in capsys.readouterr().out.splitlines())
            totals[gamma] = int(kv["total.flops"])
            totals[f"m2_{gamma}"] = int(kv["ratio.stage0.body.module1.m2"])
        assert totals[4] > totals[2] and totals["m2_4"] > totals["m2_2"]

    def test_from_checkpoint(self, tmp_path, capsys):
        path = save_checkpoint(build_network(toy_mnist_spec()), tmp_path / "m.gsan")
        main(["analyze", "--checkpoint", str(path)])
        assert capsys.readouterr().out == analyze_text(toy_mnist_spec())


class TestInspect:
    @pytest.mark.parametrize("spec", [toy_mnist_spec(), toy_mnist_spec(4, 0.5)])
    def test_audit_lines(self, tmp_path, capsys, spec):
        path = save_checkpoint(build_network(spec), tmp_path / "m.gsan")
        assert main(["inspect", "--checkpoint", str(path)]) == 0
        out = capsys.readouterr().out
        assert "dense multiplying conv filters: 0" in out
        assert "classifier head (dense linear): 1" in out

    def test_kv(self, tmp_path, capsys):
        path = save_checkpoint(build_network(toy_mnist_spec()), tmp_path / "m.gsan")
        main(["inspect", "--checkpoint", str(path), "--format", "kv"])
        kv = dict(line.split(" = ", 1) for line in capsys.readouterr().out.splitlines())
        assert kv["dense_multiplying_conv_filters"] == "0"
        assert kv["tensor.stem.s"] == "int8 16x1x3x3"
