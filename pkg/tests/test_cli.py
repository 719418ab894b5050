"""Command-line dispatch, exit codes and reproducibility of outputs."""

import csv
import json
import subprocess
import sys

import pytest

from ssmfuse import cli
from ssmfuse.config import RunConfig

TINY = dict(d_model=8, d_state=4, raw_dim=6, frames=8, text_len=10, k_v=2, n_samples=120, epochs=2,
            warmup_epochs=1, batch_size=32, mode="factored")


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestDispatch:
    def test_unknown_subcommand(self, capsys):
        assert run("frobnicate") == 2
        assert "usage" in capsys.readouterr().err

    def test_no_subcommand(self):
        assert run() == 2

    def test_help(self, capsys):
        assert run("--help") == 0
        assert "gen-data" in capsys.readouterr().out

    def test_console_script_module(self):
        out = subprocess.run([sys.executable, "-m", "ssmfuse.cli", "count"], capture_output=True, text=True,
                             check=False)
        assert out.returncode == 0 and "13568" in out.stdout

    def test_bad_config_key(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text('{"d_modle": 3}')
        assert run("count", "--config", path) == 2
        assert "d_modle" in capsys.readouterr().err

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{")
        assert run("count", "--config", path) == 2

    def test_bad_lengths(self):
        assert run("bench", "--lengths", "10,x") == 2

    def test_unknown_bench_method(self):
        assert run("bench", "--lengths", "8", "--methods", "magic") == 2

    def test_missing_dataset_is_runtime_error(self, cfg_file, tmp_path):
        assert run("train", "--config", cfg_file, "--data", tmp_path / "nope.ssmf", "--out", tmp_path / "o") == 1


class TestCommands:
    def test_count(self, capsys, tmp_path):
        assert run("count", "--out", tmp_path) == 0
        out = capsys.readouterr().out
        assert "13568" in out and "294912" in out
        rows = read_csv(tmp_path / "count.csv")
        assert rows[0] == {"model": "ssm-fusion", "params": "13568", "flops_per_token": rows[0]["flops_per_token"]}

    def test_gradcheck(self, capsys, tmp_path):
        assert run("gradcheck", "--seed", "0", "--out", tmp_path) == 0
        out = capsys.readouterr().out
        assert "PASS" in out
        rows = read_csv(tmp_path / "gradcheck.csv")
        assert rows and all(float(r["rel_err"]) <= 1e-4 for r in rows)
        assert (tmp_path / "gradcheck.png").exists()

    def test_gradcheck_failure_exit_code(self):
        assert run("gradcheck", "--quick", "--tol", "1e-30") == 1

    def test_bench(self, capsys, tmp_path):
        assert run("bench", "--lengths", "64,128", "--methods", "sequential,fused", "--repeats", "2",
                   "--out", tmp_path) == 0
        rows = read_csv(tmp_path / "bench.csv")
        assert [(r["method"], r["length"]) for r in rows] == [("sequential", "64"), ("sequential", "128"),
                                                              ("fused", "64"), ("fused", "128")]
        assert rows[1]["length_ratio"] == "2.0" and float(rows[1]["ratio_vs_prev"]) > 0
        assert (tmp_path / "bench.png").exists()

    def test_train_separate_A(self, cfg_file, tmp_path, capsys):
        out = tmp_path / "run"
        assert run("train", "--config", cfg_file, "--ablation", "separate-A", "--out", out) == 0
        assert len(read_csv(out / "metrics.csv")) == 2 * (TINY["epochs"] + 1)
        echoed = RunConfig.load(out / "config.json")
        assert echoed.ablation == "separate-A" and echoed.d_model == 8
        from ssmfuse.fusion import FusionBlock
        assert FusionBlock.build(echoed).ablation_separate_A
        assert "val verb" in capsys.readouterr().out

    def test_gen_data_then_train_and_eval(self, cfg_file, tmp_path, capsys):
        data = tmp_path / "data"
        assert run("gen-data", "--config", cfg_file, "--out", data) == 0
        assert (data / "dataset.ssmf").read_bytes()[:4] == b"SSMF"
        out = tmp_path / "run"
        assert run("train", "--config", cfg_file, "--data", data / "dataset.ssmf", "--out", out) == 0
        ev = tmp_path / "eval"
        assert run("eval", "--config", cfg_file, "--data", data / "dataset.ssmf", "--checkpoint",
                   out / "checkpoint.ssmc", "--out", ev) == 0
        final = [r for r in read_csv(out / "metrics.csv") if r["split"] == "val"][-1]
        got = read_csv(ev / "eval.csv")[0]
        for k in ("loss", "verb_acc", "noun_acc", "action_acc", "recall5"):
            assert float(got[k]) == float(final[k])

    def test_eval_hash_mismatch(self, cfg_file, tmp_path):
        out = tmp_path / "run"
        assert run("train", "--config", cfg_file, "--out", out) == 0
        args = ["eval", "--config", cfg_file, "--seed", "5", "--checkpoint", out / "checkpoint.ssmc",
                "--out", tmp_path / "ev"]
        assert run(*args) == 2
        assert run(*args, "--force") == 0

    def test_dataset_for_other_config_rejected(self, cfg_file, tmp_path):
        assert run("gen-data", "--config", cfg_file, "--out", tmp_path / "d") == 0
        assert run("train", "--config", cfg_file, "--seed", "3", "--data", tmp_path / "d" / "dataset.ssmf",
                   "--out", tmp_path / "r") == 2

    def test_gen_questions_from_csv(self, tmp_path):
        src = tmp_path / "n.csv"
        src.write_text("id,narration,verb,noun\n1,drink water,drink,water\n2,pick up the pan,pick up,pan\n")
        assert run("gen-questions", "--input", src, "--training", "--out", tmp_path) == 0
        recs = [json.loads(line) for line in (tmp_path / "questions.jsonl").read_text().splitlines()]
        assert [r["question_verb"] for r in recs] == ["What should you do to the <MASK> here?"] * 2

    def test_gen_questions_default_vocabulary(self, tmp_path, monkeypatch):
        monkeypatch.delenv("SSMFUSE_API_KEY", raising=False)
        assert run("gen-questions", "--out", tmp_path) == 0
        lines = (tmp_path / "questions.jsonl").read_text().splitlines()
        assert len(lines) == 8 * 12


class TestReproducibility:
    @pytest.mark.parametrize("command", [
        ["gen-data"],
        ["gen-questions", "--training"],
        ["train"],
        ["count"],
    ])
    def test_same_seed_same_outputs(self, command, cfg_file, tmp_path):
        outs = []
        for rep in ("a", "b"):
            out = tmp_path / rep
            assert run(*command, "--config", cfg_file, "--seed", "4", "--out", out) == 0
            files = sorted(p for p in out.iterdir() if p.suffix != ".png")
            got = {p.name: p.read_bytes() for p in files}
            # the echoed config records its own output directory
            echoed = json.loads(got.pop("config.json"))
            assert echoed.pop("out") == str(out)
            outs.append((got, echoed))
        assert outs[0] == outs[1]
