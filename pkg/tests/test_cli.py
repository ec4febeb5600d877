"""Command-line interface: wiring, artifacts, exit codes."""

import json
import subprocess
import sys

import pytest

from kgir.cli import _pin_threads, main

SMALL_CORPUS = [
    "--set", "synthetic.n_entities=4",
    "--set", "synthetic.n_train_images=16",
    "--set", "synthetic.n_gallery_images=8",
    "--set", "synthetic.n_queries=40",
    "--set", "synthetic.d_app=16",
    "--set", "synthetic.n_candidates=3",
]
SMALL_MODEL = [
    "--set", "model.d_model=32",
    "--set", "model.n_joint_layers=1",
    "--set", "model.n_heads=2",
    "--set", "model.query_len=8",
    "--set", "model.knowledge_len=16",
    "--set", "model.d_app=16",
    "--set", "model.align_hidden=32",
]
ONE_EPOCH = ["--set", ('schedule.phases=[{"objective": "itm_mlm", "epochs": 1,'
                       ' "lr": 0.001, "batch_size": 16, "mode": "full"}]')]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One tiny corpus and a one-epoch checkpoint shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "gen"), "--seed", "1",
                 *SMALL_CORPUS]) == 0
    manifest = root / "gen" / "corpus" / "manifest.json"
    assert main(["train", "--out", str(root / "run"),
                 "--set", f"corpus={manifest}", *SMALL_MODEL, *ONE_EPOCH]) == 0
    return root, manifest, root / "run" / "checkpoints" / "final.krmt"


class TestGenData:
    def test_artifacts(self, workdir):
        root, manifest, _ = workdir
        assert manifest.exists()
        config = json.loads((root / "gen" / "config.json").read_text())
        assert config["synthetic"]["n_entities"] == 4
        assert config["synthetic"]["seed"] == 1
        run = json.loads((root / "gen" / "run.json").read_text())
        assert run["command"] == "gen-data" and run["seed"] == 1


class TestTrain:
    def test_artifacts(self, workdir):
        root, _, checkpoint = workdir
        assert checkpoint.exists()
        assert (root / "run" / "checkpoints" / "metrics.csv").exists()
        run = json.loads((root / "run" / "run.json").read_text())
        assert "corpus_sha256" in run and len(run["corpus_sha256"]) == 64
        config = json.loads((root / "run" / "config.json").read_text())
        # resolved config pins the vocab size discovered from the corpus
        assert config["model"]["vocab_size"] > 5

    def test_vocab_size_mismatch_refused(self, workdir, tmp_path):
        _, manifest, _ = workdir
        rc = main(["train", "--out", str(tmp_path / "x"),
                   "--set", f"corpus={manifest}", *SMALL_MODEL, *ONE_EPOCH,
                   "--set", "model.vocab_size=3"])
        assert rc == 2


class TestEval:
    def test_report_and_outcomes(self, workdir, tmp_path):
        _, manifest, checkpoint = workdir
        out = tmp_path / "ev"
        rc = main(["eval", "--out", str(out), "--set", f"corpus={manifest}",
                   "--set", f"checkpoint={checkpoint}"])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        for key in ("r1", "r5", "r10", "mdr", "wikification_top1", "n_queries"):
            assert key in report
        lines = (out / "outcomes.csv").read_text().splitlines()
        assert len(lines) == report["n_queries"] + 1

    def test_mode_flag(self, workdir, tmp_path):
        _, manifest, checkpoint = workdir
        out = tmp_path / "nk"
        rc = main(["eval", "--out", str(out), "--set", f"corpus={manifest}",
                   "--set", f"checkpoint={checkpoint}", "--mode", "no_knowledge"])
        assert rc == 0
        config = json.loads((out / "config.json").read_text())
        assert config["mode"] == "no_knowledge"


class TestRetrieve:
    def test_table_and_clamping(self, workdir, tmp_path, capsys, caplog):
        _, manifest, checkpoint = workdir
        rc = main(["retrieve", "--set", f"corpus={manifest}",
                   "--set", f"checkpoint={checkpoint}",
                   "--query", "street with red car", "--k", "30",
                   "--out", str(tmp_path / "r")])
        assert rc == 0
        table = capsys.readouterr().out
        assert "top 8 of 8 images" in table
        assert any("exceeds gallery size" in r.message for r in caplog.records)
        results = json.loads((tmp_path / "r" / "retrieval.json").read_text())
        assert results["k"] == 8 and len(results["results"]) == 8
        assert [row["rank"] for row in results["results"]] == list(range(1, 9))

    def test_stdout_only_without_out(self, workdir, capsys):
        _, manifest, checkpoint = workdir
        rc = main(["retrieve", "--set", f"corpus={manifest}",
                   "--set", f"checkpoint={checkpoint}",
                   "--query", "bridge", "--k", "3"])
        assert rc == 0
        out = capsys.readouterr().out
        assert out.count("im00") == 3


class TestLinkEntities:
    def test_report(self, workdir, tmp_path):
        _, manifest, checkpoint = workdir
        out = tmp_path / "link"
        rc = main(["link-entities", "--out", str(out),
                   "--set", f"corpus={manifest}",
                   "--set", f"checkpoint={checkpoint}"])
        assert rc == 0
        blob = json.loads((out / "linking.json").read_text())
        report = blob["report"]
        assert 0.0 <= report["fused_top1"] <= 1.0
        assert 0.0 <= report["likelihood_only_top1"] <= 1.0
        assert report["n_queries"] == len(blob["decisions"]) == 8


class TestGradCheck:
    def test_passes_at_default_tolerance(self, capsys):
        assert main(["grad-check"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_fails_at_impossible_tolerance(self, capsys, tmp_path):
        rc = main(["grad-check", "--tol", "1e-12", "--out", str(tmp_path / "g")])
        assert rc == 1
        assert "FAIL" in capsys.readouterr().out
        payload = json.loads((tmp_path / "g" / "gradcheck.json").read_text())
        assert payload["passed"] is False and payload["max_rel_err"] > 1e-12


class TestConfigHandling:
    def test_config_file_merges_under_flags(self, workdir, tmp_path, capsys):
        _, manifest, checkpoint = workdir
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"corpus": str(manifest),
                                   "checkpoint": str(checkpoint),
                                   "mode": "full"}))
        out = tmp_path / "ev"
        rc = main(["eval", "--config", str(cfg), "--out", str(out),
                   "--mode", "oracle"])
        assert rc == 0
        resolved = json.loads((out / "config.json").read_text())
        assert resolved["mode"] == "oracle"       # flag beats file
        assert resolved["corpus"] == str(manifest)

    def test_dotted_list_index_override(self, tmp_path):
        rc = main(["gen-data", "--out", str(tmp_path / "g"), *SMALL_CORPUS,
                   "--set", "schedule.phases.0.lr=0.01"])
        assert rc == 0
        config = json.loads((tmp_path / "g" / "config.json").read_text())
        assert config["schedule"]["phases"][0]["lr"] == 0.01

    def test_unknown_set_key(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "x"),
                     "--set", "nosuchkey=3"]) == 2

    def test_set_without_equals(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "x"),
                     "--set", "synthetic.seed"]) == 2

    def test_missing_corpus(self, tmp_path):
        assert main(["eval", "--out", str(tmp_path / "x"),
                     "--set", "corpus=/nonexistent/manifest.json"]) == 2

    def test_missing_checkpoint(self, workdir, tmp_path):
        _, manifest, _ = workdir
        assert main(["eval", "--out", str(tmp_path / "x"),
                     "--set", f"corpus={manifest}",
                     "--set", "checkpoint=/nonexistent/final.krmt"]) == 2

    def test_malformed_config_file(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text("{nope")
        assert main(["gen-data", "--out", str(tmp_path / "x"),
                     "--config", str(cfg)]) == 2

    def test_unknown_config_file_key(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"corpsu": "x"}))
        assert main(["gen-data", "--out", str(tmp_path / "x"),
                     "--config", str(cfg)]) == 2

    def test_invalid_synthetic_spec(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "x"),
                     "--set", "synthetic.n_entities=1"]) == 2


class TestThreadPinning:
    def test_explicit_flag_overrides_environment(self, monkeypatch):
        monkeypatch.setenv("OMP_NUM_THREADS", "8")
        import os
        assert _pin_threads(["kgir", "eval", "--threads", "3"]) == 3
        assert os.environ["OMP_NUM_THREADS"] == "3"
        assert os.environ["OPENBLAS_NUM_THREADS"] == "3"

    def test_training_defaults_to_one_thread(self, monkeypatch):
        import os
        monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
        assert _pin_threads(["kgir", "train", "--out", "x"]) is None
        assert os.environ["OMP_NUM_THREADS"] == "1"
        monkeypatch.delenv("OMP_NUM_THREADS", raising=False)

    def test_evaluation_keeps_blas_default(self, monkeypatch):
        import os
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            monkeypatch.delenv(var, raising=False)
        assert _pin_threads(["kgir", "eval", "--out", "x"]) is None
        assert "OMP_NUM_THREADS" not in os.environ

    def test_environment_respected_without_flag(self, monkeypatch):
        import os
        monkeypatch.setenv("OMP_NUM_THREADS", "4")
        _pin_threads(["kgir", "train", "--out", "x"])
        assert os.environ["OMP_NUM_THREADS"] == "4"


class TestEntryPoint:
    def test_module_invocation(self):
        proc = subprocess.run([sys.executable, "-m", "kgir.cli", "--version"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert proc.stdout.strip()

    def test_unknown_subcommand_is_usage_error(self):
        proc = subprocess.run([sys.executable, "-m", "kgir.cli", "frobnicate"],
                              capture_output=True, text=True)
        assert proc.returncode == 2
