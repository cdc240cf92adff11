"""End-to-end CLI tests on a small synthetic fixture."""

import json

import pytest

from mmgraphrec import cli, training
from mmgraphrec.errors import NumericsError
from mmgraphrec.synthetic import write_fixture_files

COMMON = ["--d", "16", "--knn-k", "4", "--k-user", "4", "--kcf", "4",
          "--n-neg", "8", "--batch-size", "128", "--seed", "3"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    paths = write_fixture_files(root / "fixture", n_users=30, n_items=24,
                                n_blocks=4, seed=3)
    prep = root / "prep"
    rc = cli.main(["prepare", "--interactions", str(paths["interactions"]),
                   "--features-text", str(paths["text"]),
                   "--features-visual", str(paths["visual"]),
                   "--out", str(prep), "--k-core", "2", "--seed", "3"])
    assert rc == 0
    graph_dir = root / "graph"
    rc = cli.main(["build-graph", "--data", str(prep), "--out", str(graph_dir)]
                  + COMMON)
    assert rc == 0
    run_dir = root / "run"
    rc = cli.main(["train", "--data", str(prep), "--graph", str(graph_dir),
                   "--out", str(run_dir), "--max-epochs", "6"] + COMMON)
    assert rc == 0
    return {"root": root, "fixture": paths, "prep": prep,
            "graph": graph_dir, "run": run_dir}


class TestPrepare:
    def test_artifacts_exist(self, workspace):
        prep = workspace["prep"]
        for name in ("splits.tsv", "user_map.tsv", "item_map.tsv", "item_pop.tsv",
                     "features_text.mmf", "features_visual.mmf", "manifest.json"):
            assert (prep / name).exists()

    def test_manifest_holds_resolved_config(self, workspace):
        manifest = json.loads((workspace["prep"] / "manifest.json").read_text())
        assert manifest["config"]["k_core"] == 2
        assert manifest["config"]["seed"] == 3
        assert manifest["counts"]["users"] == 30

    def test_rerun_is_byte_identical(self, workspace, tmp_path):
        paths = workspace["fixture"]
        rc = cli.main(["prepare", "--interactions", str(paths["interactions"]),
                       "--features-text", str(paths["text"]),
                       "--features-visual", str(paths["visual"]),
                       "--out", str(tmp_path / "again"), "--k-core", "2",
                       "--seed", "3"])
        assert rc == 0
        for name in ("splits.tsv", "features_text.mmf"):
            assert (tmp_path / "again" / name).read_bytes() == \
                   (workspace["prep"] / name).read_bytes()

    def test_missing_file_exits_two(self, tmp_path, capsys):
        rc = cli.main(["prepare", "--interactions", str(tmp_path / "nope.tsv"),
                       "--features-text", "x", "--features-visual", "y",
                       "--out", str(tmp_path / "out")])
        assert rc == 2
        assert "nope.tsv" in capsys.readouterr().err


class TestBuildGraph:
    def test_artifacts_exist(self, workspace):
        graph_dir = workspace["graph"]
        for name in ("adjacency.mgr", "bias_stats.json", "bias_stats.tsv",
                     "bias_comparison.png", "manifest.json"):
            assert (graph_dir / name).exists()

    def test_zero_penalty_duplicates_base_stats(self, workspace, tmp_path):
        rc = cli.main(["build-graph", "--data", str(workspace["prep"]),
                       "--out", str(tmp_path / "g0"), "--lambda-cf", "0",
                       "--kcf", "4", "--knn-k", "4", "--k-user", "4", "--seed", "3"])
        assert rc == 0
        stats = json.loads((tmp_path / "g0" / "bias_stats.json").read_text())
        assert stats["base"] == stats["counterfactual"]

    def test_eta_zero_makes_counterfactual_k_irrelevant(self, workspace, tmp_path):
        outs = []
        for tag, kcf in (("a", "4"), ("b", "7")):
            rc = cli.main(["build-graph", "--data", str(workspace["prep"]),
                           "--out", str(tmp_path / tag), "--eta", "0",
                           "--kcf", kcf, "--knn-k", "4", "--k-user", "4",
                           "--seed", "3"])
            assert rc == 0
            outs.append((tmp_path / tag / "adjacency.mgr").read_bytes())
        assert outs[0] == outs[1]

    def test_oversized_k_exits_two(self, workspace, tmp_path):
        rc = cli.main(["build-graph", "--data", str(workspace["prep"]),
                       "--out", str(tmp_path / "bad"), "--kcf", "100"])
        assert rc == 2

    def test_config_file_precedence(self, workspace, tmp_path):
        # defaults < JSON config < explicit flags
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"k_base": 3, "k_cf": 3, "k_user": 3,
                                      "eta": 0.7, "seed": 3}))
        out = tmp_path / "gcfg"
        rc = cli.main(["build-graph", "--data", str(workspace["prep"]),
                       "--out", str(out), "--config", str(config), "--eta", "0.5"])
        assert rc == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["k_base"] == 3      # from the file
        assert manifest["config"]["eta"] == 0.5       # flag wins
        assert manifest["config"]["k_user"] == 3

    def test_unknown_config_key_exits_two(self, workspace, tmp_path):
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"not_a_field": 1}))
        rc = cli.main(["build-graph", "--data", str(workspace["prep"]),
                       "--out", str(tmp_path / "g"), "--config", str(config)])
        assert rc == 2


class TestTrain:
    def test_artifacts_exist(self, workspace):
        run = workspace["run"]
        for name in ("checkpoint.mck", "history.jsonl", "manifest.json",
                     "training_curves.png"):
            assert (run / name).exists()

    def test_history_is_json_lines(self, workspace):
        lines = (workspace["run"] / "history.jsonl").read_text().splitlines()
        assert len(lines) == 6
        for line in lines:
            record = json.loads(line)
            assert {"epoch", "loss_total", "val_recall@20"} <= set(record)

    def test_graph_changing_ablation_with_frozen_graph_exits_two(self, workspace, tmp_path):
        rc = cli.main(["train", "--data", str(workspace["prep"]),
                       "--graph", str(workspace["graph"]),
                       "--out", str(tmp_path / "r"), "--ablation", "no_cna",
                       "--max-epochs", "1"] + COMMON)
        assert rc == 2

    def test_ablation_without_graph_builds_in_process(self, workspace, tmp_path):
        rc = cli.main(["train", "--data", str(workspace["prep"]),
                       "--out", str(tmp_path / "r"), "--ablation", "no_cna",
                       "--max-epochs", "1"] + COMMON)
        assert rc == 0

    def test_numerical_failure_exits_four(self, workspace, tmp_path, monkeypatch):
        def explode(*args, **kwargs):
            raise NumericsError("synthetic blow-up")

        monkeypatch.setattr(training, "train", explode)
        rc = cli.main(["train", "--data", str(workspace["prep"]),
                       "--graph", str(workspace["graph"]),
                       "--out", str(tmp_path / "r"), "--max-epochs", "1"] + COMMON)
        assert rc == 4


class TestEval:
    def test_reports_and_figures(self, workspace, tmp_path):
        out = tmp_path / "ev"
        rc = cli.main(["eval", "--data", str(workspace["prep"]),
                       "--graph", str(workspace["graph"]),
                       "--checkpoint", str(workspace["run"] / "checkpoint.mck"),
                       "--out", str(out)] + COMMON)
        assert rc == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert set(metrics["recall"]) == {"10", "20"}
        body = (out / "metrics.tsv").read_text().splitlines()
        assert body[0] == "k\trecall\tndcg"
        assert (out / "metric_bars.png").exists()
        assert (out / "metrics_per_group.tsv").exists()

    def test_checkpoint_shape_mismatch_exits_three(self, workspace, tmp_path):
        rc = cli.main(["eval", "--data", str(workspace["prep"]),
                       "--graph", str(workspace["graph"]),
                       "--checkpoint", str(workspace["run"] / "checkpoint.mck"),
                       "--out", str(tmp_path / "ev"), "--d", "8", "--seed", "3"])
        assert rc == 3

    def test_corrupt_graph_exits_three(self, workspace, tmp_path):
        bad = tmp_path / "bad.mgr"
        bad.write_bytes(b"JUNKJUNKJUNK")
        rc = cli.main(["eval", "--data", str(workspace["prep"]),
                       "--graph", str(bad),
                       "--checkpoint", str(workspace["run"] / "checkpoint.mck"),
                       "--out", str(tmp_path / "ev")] + COMMON)
        assert rc == 3


class TestDiagnose:
    def test_untrained_model_reports_both_variants(self, workspace, tmp_path):
        out = tmp_path / "diag"
        rc = cli.main(["diagnose", "--data", str(workspace["prep"]),
                       "--graph", str(workspace["graph"]),
                       "--out", str(out)] + COMMON)
        assert rc == 0
        payload = json.loads((out / "diagnostics.json").read_text())
        assert set(payload["alignment"]) == {"static_pe", "gated_pe"}
        assert set(payload["bias"]) == {"base", "counterfactual"}
        for name in ("alignment_scores.png", "bias_comparison.png",
                     "embeddings.mem", "diagnostics.tsv"):
            assert (out / name).exists()

    def test_embedding_export_is_readable(self, workspace, tmp_path):
        from mmgraphrec.fileformats import read_embeddings
        out = tmp_path / "diag"
        rc = cli.main(["diagnose", "--data", str(workspace["prep"]),
                       "--graph", str(workspace["graph"]),
                       "--checkpoint", str(workspace["run"] / "checkpoint.mck"),
                       "--out", str(out)] + COMMON)
        assert rc == 0
        exported = read_embeddings(out / "embeddings.mem")
        assert exported["final_users"].shape == (30, 16)
        assert exported["final_items"].shape == (24, 16)


class TestSweep:
    def test_two_cells_with_manifests(self, workspace, tmp_path):
        out = tmp_path / "sweep"
        rc = cli.main(["sweep", "--data", str(workspace["prep"]),
                       "--out", str(out), "--sweep", "lambda_s=0.01,0.1",
                       "--max-epochs", "2"] + COMMON)
        assert rc == 0
        cells = sorted(p for p in out.iterdir() if p.is_dir())
        assert len(cells) == 2
        for cell in cells:
            assert (cell / "manifest.json").exists()
            assert (cell / "checkpoint.mck").exists()
        summary = (out / "summary.tsv").read_text().splitlines()
        assert len(summary) == 3
        assert (out / "sweep_grid.png").exists()

    def test_unknown_parameter_exits_two(self, workspace, tmp_path):
        rc = cli.main(["sweep", "--data", str(workspace["prep"]),
                       "--out", str(tmp_path / "s"), "--sweep", "bogus=1,2"])
        assert rc == 2


class TestDeterminism:
    def test_repeated_pipeline_matches_bitwise(self, workspace, tmp_path):
        prep = workspace["prep"]
        artifacts = []
        for tag in ("one", "two"):
            gdir = tmp_path / f"g_{tag}"
            rdir = tmp_path / f"r_{tag}"
            edir = tmp_path / f"e_{tag}"
            assert cli.main(["build-graph", "--data", str(prep),
                             "--out", str(gdir)] + COMMON) == 0
            assert cli.main(["train", "--data", str(prep), "--graph", str(gdir),
                             "--out", str(rdir), "--max-epochs", "4"] + COMMON) == 0
            assert cli.main(["eval", "--data", str(prep), "--graph", str(gdir),
                             "--checkpoint", str(rdir / "checkpoint.mck"),
                             "--out", str(edir)] + COMMON) == 0
            ddir = tmp_path / f"d_{tag}"
            assert cli.main(["diagnose", "--data", str(prep), "--graph", str(gdir),
                             "--checkpoint", str(rdir / "checkpoint.mck"),
                             "--out", str(ddir)] + COMMON) == 0
            artifacts.append({
                "graph": (gdir / "adjacency.mgr").read_bytes(),
                "checkpoint": (rdir / "checkpoint.mck").read_bytes(),
                "history": (rdir / "history.jsonl").read_bytes(),
                "metrics": (edir / "metrics.json").read_bytes(),
                "diagnostics": (ddir / "diagnostics.json").read_bytes(),
                "embeddings": (ddir / "embeddings.mem").read_bytes(),
            })
        assert artifacts[0] == artifacts[1]
