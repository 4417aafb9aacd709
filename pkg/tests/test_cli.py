import json

import pytest

from nap_rl.cli import EXIT_FLOOR, EXIT_OK, EXIT_USAGE, main


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-demos", "--n", "60", "--seed", "0", "--out", str(root / "demos.jsonl")]) == EXIT_OK
    cfg = root / "fast.json"
    cfg.write_text(json.dumps({"version": 1, "common": {"workers": 1},
                               "train-discriminator": {"discriminator": {"max_epochs": 3}}}))
    return root


def test_gen_demos_writes_corpus_and_manifest(work):
    lines = (work / "demos.jsonl").read_text().splitlines()
    assert len(lines) == 60 and all(json.loads(l)["outcome"] == "success" for l in lines)
    manifest = json.loads((work / "manifest.gen-demos.json").read_text())
    assert manifest["command"] == "gen-demos" and manifest["seed"] == 0 and manifest["ontology_digest"]


def test_discriminator_floor_exit_code(work, capsys):
    args = ["train-discriminator", "--config", str(work / "fast.json"), "--corpus", str(work / "demos.jsonl"),
            "--out", str(work / "disc.json")]
    assert main(args + ["--floor", "1.01"]) == EXIT_FLOOR
    assert "below floor" in capsys.readouterr().err
    assert main(args + ["--floor", "0.0"]) == EXIT_OK
    report = json.loads((work / "disc.report.json").read_text())
    assert len(report["validation_accuracy"]) <= 3


def test_comb_without_discriminator_is_refused(work, capsys):
    code = main(["train-policy", "--algo", "ppo", "--reward", "comb", "--corpus", str(work / "demos.jsonl"),
                 "--out-dir", str(work / "nope")])
    assert code == EXIT_USAGE and "--discriminator" in capsys.readouterr().err
    assert not (work / "nope").exists()


def test_missing_inputs_are_errors(work, capsys):
    assert main(["train-discriminator", "--corpus", str(work / "missing.jsonl")]) == EXIT_USAGE
    assert "corpus not found" in capsys.readouterr().err
    bad = work / "bad_policy.json"
    bad.write_text("{\"mlp\": {}}")
    assert main(["evaluate", "--policy", str(bad), "--n", "2", "--out-dir", str(work / "e")]) == EXIT_USAGE
    assert main(["evaluate", "--policy", str(work / "none.json"), "--out-dir", str(work / "e")]) == EXIT_USAGE
    assert main(["bogus-command"]) == EXIT_USAGE


def test_config_flags_override_file(work):
    cfg = work / "n3.json"
    cfg.write_text(json.dumps({"version": 1, "common": {"seed": 4, "workers": 1}, "evaluate": {"n": 3}}))
    out = work / "cfg_eval"
    assert main(["evaluate", "--agent", "silent", "--config", str(cfg), "--out-dir", str(out)]) == EXIT_OK
    assert json.loads((out / "metrics.json").read_text())["n_sessions"] == 3
    assert main(["evaluate", "--agent", "silent", "--config", str(cfg), "--n", "5", "--out-dir", str(out)]) == EXIT_OK
    manifest = json.loads((out / "manifest.evaluate.json").read_text())
    assert json.loads((out / "metrics.json").read_text())["n_sessions"] == 5 and manifest["seed"] == 4
    cfg.write_text(json.dumps({"version": 9}))
    assert main(["evaluate", "--agent", "silent", "--config", str(cfg)]) == EXIT_USAGE


def test_train_evaluate_report_pipeline(work, capsys):
    corpus = str(work / "demos.jsonl")
    runs = []
    for algo in ("mle", "ppo"):
        run = work / f"run_{algo}"
        args = ["train-policy", "--algo", algo, "--reward", "global", "--corpus", corpus, "--epochs", "1",
                "--trajectories", "4", "--mle-epochs", "2", "--workers", "1", "--out-dir", str(run)]
        assert main(args) == EXIT_OK
        assert main(["evaluate", "--policy", str(run / "policy.json"), "--n", "6", "--workers", "1",
                     "--out-dir", str(run)]) == EXIT_OK
        runs.append(str(run))
    assert (work / "run_ppo" / "curve.csv").read_text().startswith("epoch,")
    silent = work / "run_silent"
    assert main(["evaluate", "--agent", "silent", "--n", "4", "--workers", "1", "--out-dir", str(silent)]) == EXIT_OK
    runs.append(str(silent))
    empty = work / "run_empty"
    empty.mkdir()
    capsys.readouterr()
    out = work / "table.md"
    assert main(["report", *runs, str(empty), "--out", str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert len(lines) == 2 + 3
    assert "| run_mle | mle | global | 0 |" in lines[2]
    csv_out = work / "table.csv"
    assert main(["report", *runs, "--out", str(csv_out)]) == EXIT_OK
    assert len(csv_out.read_text().splitlines()) == 4


def test_evaluate_is_byte_identical_across_workers(work):
    a, b = work / "det1", work / "det2"
    corpus = str(work / "demos.jsonl")
    assert main(["evaluate", "--agent", "random", "--corpus", corpus, "--n", "10", "--workers", "1",
                 "--out-dir", str(a)]) == EXIT_OK
    assert main(["evaluate", "--agent", "random", "--corpus", corpus, "--n", "10", "--workers", "2",
                 "--out-dir", str(b)]) == EXIT_OK
    for name in ("metrics.json", "metrics.md", "per_domain_f1.csv", "sessions.jsonl"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
