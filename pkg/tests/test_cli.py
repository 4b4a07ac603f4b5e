import json
import subprocess
import sys

import numpy as np
import pytest

from psnet.cli import main
from psnet.data import generate_dataset, read_dataset, write_dataset


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def usage(capsys, *argv):
    with pytest.raises(SystemExit) as exc:
        main(list(argv))
    return exc.value.code, capsys.readouterr().err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A small dataset and a one-epoch model trained through the command line."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--seed", "3", "--count", "8", "--out", str(root / "d.jsonl")]) == 0
    assert main(["train", "--data", str(root / "d.jsonl"), "--out-dir", str(root / "run"), "--epochs", "1"]) == 0
    return root


class TestGenData:
    def test_byte_identical(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert run(capsys, "gen-data", "--seed", "7", "--count", "100", "--out", str(tmp_path / f"{name}.jsonl"))[0] == 0
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        manifest = json.loads((tmp_path / "a.jsonl.manifest.json").read_text())
        assert manifest["seed"] == 7 and manifest["scene_config"]["noise"] == 0.02 and "tool_version" in manifest

    @pytest.mark.parametrize("flag,value", [("--count", "0"), ("--count", "-3"), ("--image-size", "x")])
    def test_bad_flag_is_usage_error(self, tmp_path, capsys, flag, value):
        argv = ["gen-data", "--count", "5", "--out", str(tmp_path / "d.jsonl"), flag, value]
        code, err = usage(capsys, *argv)
        assert code == 2 and flag in err

    def test_census_recount(self, tmp_path, capsys):
        code, out, _ = run(capsys, "gen-data", "--seed", "1", "--count", "60", "--out", str(tmp_path / "d.jsonl"), "--census")
        counts = dict(line.split("\t") for line in out.splitlines())
        recount = {}
        for s in read_dataset(tmp_path / "d.jsonl"):
            recount[s.change_record["type"]] = recount.get(s.change_record["type"], 0) + 1
        assert code == 0 and {k: int(v) for k, v in counts.items() if int(v)} == recount

    def test_invalid_scene_is_runtime_error(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-data", "--count", "2", "--image-size", "16", "--out", str(tmp_path / "d.jsonl"))
        assert code == 1 and "size class" in err

    def test_unwritable_output(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-data", "--count", "2", "--out", str(tmp_path / "missing" / "d.jsonl"))
        assert code == 1 and "error" in err


class TestHelp:
    @pytest.mark.parametrize("command", ["gen-data", "train", "caption", "eval", "gradcheck"])
    def test_help_lists_defaults(self, capsys, command):
        with pytest.raises(SystemExit) as exc:
            main([command, "--help"])
        out = capsys.readouterr().out
        assert exc.value.code == 0 and "--config" in out

    def test_train_defaults_are_annotated(self, capsys):
        with pytest.raises(SystemExit):
            main(["train", "--help"])
        out = " ".join(capsys.readouterr().out.split("options:", 1)[1].split())
        for flag, default in [("--lr", "0.0001"), ("--epochs", "40"), ("--pdp-layers", "3"), ("--sr-modules", "3"), ("--decoder-layers", "3")]:
            block = out.split(flag + " ", 1)[1].split(" --", 1)[0]
            assert f"(reference value) (default: {default})" in block

    def test_missing_command(self, capsys):
        assert usage(capsys)[0] == 2


class TestTrain:
    def test_outputs(self, workdir):
        run_dir = workdir / "run"
        assert {p.name for p in run_dir.iterdir()} >= {"checkpoint.psnt", "loss.log", "manifest.json"}
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["model_config"]["pdp_layers"] == 3 and manifest["train_config"]["lr"] == 1e-4

    def test_rerun_reproduces_loss_log(self, workdir, tmp_path, capsys):
        code, _, _ = run(capsys, "train", "--data", str(workdir / "d.jsonl"), "--out-dir", str(tmp_path), "--epochs", "1")
        assert code == 0
        assert (tmp_path / "loss.log").read_bytes() == (workdir / "run" / "loss.log").read_bytes()

    def test_schema_mismatch_names_field(self, workdir, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--data", str(workdir / "d.jsonl"), "--out-dir", str(tmp_path), "--image-size", "48", "--patch", "8")
        assert code == 1 and "image_size" in err

    def test_config_precedence(self, workdir, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"model_config": {"width": 16, "heads": 2}, "train_config": {"epochs": 2, "eps": 1e-7}, "data": str(workdir / "d.jsonl")}))
        code, _, _ = run(capsys, "train", "--config", str(cfg), "--out-dir", str(tmp_path / "r"), "--epochs", "1")
        manifest = json.loads((tmp_path / "r" / "manifest.json").read_text())
        assert code == 0
        assert manifest["model_config"]["width"] == 16  # from the config file
        assert manifest["train_config"]["epochs"] == 1  # flag beats config
        assert manifest["train_config"]["eps"] == 1e-7
        assert manifest["train_config"]["beta2"] == 0.999  # default

    def test_resume(self, workdir, tmp_path, capsys):
        code, out, _ = run(capsys, "train", "--data", str(workdir / "d.jsonl"), "--out-dir", str(tmp_path), "--epochs", "1", "--resume", str(workdir / "run" / "checkpoint.psnt"))
        assert code == 0 and len((tmp_path / "loss.log").read_text().splitlines()) == 2


class TestCaption:
    def test_one_line_per_sample_and_deterministic(self, workdir, tmp_path, capsys):
        args = ["caption", "--checkpoint", str(workdir / "run" / "checkpoint.psnt"), "--data", str(workdir / "d.jsonl")]
        code, first, _ = run(capsys, *args)
        _, second, _ = run(capsys, *args)
        ids = [line.split("\t")[0] for line in first.splitlines()]
        assert code == 0 and first == second and ids == [f"{i:06d}" for i in range(8)]

    def test_single_pair_file(self, workdir, tmp_path, capsys):
        s = read_dataset(workdir / "d.jsonl")[0]
        pair = tmp_path / "scene.json"
        pair.write_text(json.dumps({"shape": [32, 32, 3], "t1": s.t1.ravel().tolist(), "t2": s.t2.ravel().tolist()}))
        code, out, _ = run(capsys, "caption", "--checkpoint", str(workdir / "run" / "checkpoint.psnt"), "--pair", str(pair), "--out", str(tmp_path / "p.tsv"))
        assert code == 0 and (tmp_path / "p.tsv").read_text().startswith("scene\t")

    def test_mismatched_images(self, workdir, tmp_path, capsys):
        rng = np.random.default_rng(0)
        s = read_dataset(workdir / "d.jsonl")[0]
        s.t1, s.t2 = rng.random((40, 40, 3), dtype=np.float32), rng.random((40, 40, 3), dtype=np.float32)
        write_dataset([s], tmp_path / "big.jsonl")
        code, _, err = run(capsys, "caption", "--checkpoint", str(workdir / "run" / "checkpoint.psnt"), "--data", str(tmp_path / "big.jsonl"))
        assert code == 1 and "image_size" in err

    def test_not_a_checkpoint(self, workdir, capsys):
        code, _, err = run(capsys, "caption", "--checkpoint", str(workdir / "d.jsonl"), "--data", str(workdir / "d.jsonl"))
        assert code == 1 and "checkpoint" in err


class TestEval:
    @pytest.fixture
    def first_refs(self, workdir, tmp_path):
        preds = tmp_path / "p.tsv"
        preds.write_text("".join(f"{s.id}\t{s.captions[0]}\n" for s in read_dataset(workdir / "d.jsonl")))
        return preds

    def test_perfect_predictions(self, workdir, first_refs, capsys):
        code, out, _ = run(capsys, "eval", "--predictions", str(first_refs), "--data", str(workdir / "d.jsonl"))
        report = dict(line.split("\t") for line in out.splitlines())
        assert code == 0
        assert list(report) == ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR_exact", "ROUGE_L", "CIDEr", "S*_m"]
        assert report["BLEU-4"] == "1.0000" and report["ROUGE_L"] == "1.0000"
        parts = [float(report[k]) for k in ("BLEU-4", "METEOR_exact", "ROUGE_L", "CIDEr")]
        assert abs(float(report["S*_m"]) - sum(parts) / 4) <= 1e-4

    def test_metric_subset(self, workdir, first_refs, capsys, tmp_path):
        code, out, _ = run(capsys, "eval", "--predictions", str(first_refs), "--data", str(workdir / "d.jsonl"), "--metrics", "CIDEr,BLEU-1", "--out", str(tmp_path / "r.tsv"))
        assert code == 0 and [l.split("\t")[0] for l in out.splitlines()] == ["BLEU-1", "CIDEr"]
        assert (tmp_path / "r.tsv").read_text() == out

    def test_missing_id(self, workdir, first_refs, capsys):
        lines = first_refs.read_text().splitlines()
        first_refs.write_text("\n".join(lines[:3] + lines[4:]) + "\n")
        code, _, err = run(capsys, "eval", "--predictions", str(first_refs), "--data", str(workdir / "d.jsonl"))
        assert code == 1 and "000003" in err

    def test_aligned_files(self, tmp_path, capsys):
        (tmp_path / "h.txt").write_text("a red cat\nthe mat\n")
        (tmp_path / "r.txt").write_text("a red cat\tthe red cat\nthe mat\n")
        code, out, _ = run(capsys, "eval", "--hyps", str(tmp_path / "h.txt"), "--refs", str(tmp_path / "r.txt"), "--metrics", "ROUGE_L")
        assert code == 0 and out == "ROUGE_L\t1.0000\n"

    def test_needs_inputs(self, capsys):
        assert usage(capsys, "eval")[0] == 2


class TestGradcheck:
    def test_default_passes(self, capsys):
        code, out, _ = run(capsys, "gradcheck")
        lines = out.splitlines()
        assert code == 0 and len(lines) == 10
        assert all(l.split("\t")[2] == "PASS" for l in lines)
        assert {l.split("\t")[0] for l in lines} >= {"attention", "layer_norm", "mlp_gelu", "pdp_layer", "sr_module", "decoder_layer", "full_model"}

    def test_fault_injection(self, capsys):
        code, out, err = run(capsys, "gradcheck", "--fault-op", "layer_norm", "--coords", "2")
        assert code == 1
        assert "layer_norm\t" in out and "FAIL" in out
        assert "worst block" in err and "relative error" in err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "psnet", "gen-data", "--count", "0", "--out", str(tmp_path / "x")], capture_output=True, text=True)
    assert proc.returncode == 2 and "--count" in proc.stderr
