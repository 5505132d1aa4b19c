import csv
import json

import numpy as np
import pytest

from noisytail import config as C
from noisytail.cli import build_parser, main, resolve_config
from noisytail.eval_report import read_metrics

SMALL = ["--blobs-classes", "4", "--blobs-per-class", "60", "--test-per-class", "20", "--blobs-dim", "16",
         "--rho", "0.5", "--eta", "0.2", "--batch-size", "32", "--epochs-warmup", "1", "--epochs-main", "1"]


@pytest.fixture
def data_dir(tmp_path):
    d = tmp_path / "data"
    assert main(["synth", *SMALL, "--data", str(d)]) == 0
    return d


def train(tmp_path, data_dir, name, *extra):
    out = tmp_path / name
    code = main(["train", *SMALL, "--data", str(data_dir), "--out", str(out), *extra])
    return code, out


def body(path):
    return [l for l in path.read_text().splitlines() if not l.startswith("# config_hash")]


# -- synth ------------------------------------------------------------------------------


def test_synth_counts_example(tmp_path, capsys):
    d = tmp_path / "d"
    args = ["synth", "--blobs-classes", "4", "--blobs-per-class", "200", "--rho", "0.1", "--eta", "0.2",
            "--noise-kind", "class_independent", "--data-seed", "7", "--data", str(d)]
    assert main(args) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["train_class_counts"] == [200, 93, 43, 20]
    first = {p.name: p.read_bytes() for p in d.iterdir()}
    assert main(args) == 0
    assert first == {p.name: p.read_bytes() for p in d.iterdir()}


def test_invalid_eta_fails_before_work(tmp_path, capsys):
    d = tmp_path / "d"
    assert main(["synth", "--eta", "1.3", "--data", str(d)]) == 2
    assert "eta" in capsys.readouterr().err
    assert not d.exists()
    assert main(["synth", "--rho", "0", "--data", str(d)]) == 2
    assert main(["synth", "--blobs-classes", "many", "--data", str(d)]) == 2


# -- config -----------------------------------------------------------------------------


def test_precedence_defaults_file_method_flags(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("# experiment\nlam = 0.3\nalpha = 4   # trailing comment\nopp = yes\nseeds = 1, 2\n")
    parse = build_parser().parse_args
    cfg = resolve_config(parse(["train", "--config", str(cfg_file)]))
    assert (cfg.lam, cfg.alpha, cfg.opp, cfg.seeds, cfg.kappa) == (0.3, 4.0, True, (1, 2), 0.8)
    cfg = resolve_config(parse(["train", "--config", str(cfg_file), "--method", "caug", "--alpha", "1"]))
    assert (cfg.alpha, cfg.opp, cfg.caug_matching, cfg.lam) == (1.0, False, True, 0.3)
    cfg = resolve_config(parse(["train", "--method", "ce", "--opp"]))
    assert cfg.opp and not cfg.lnor


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("lam 0.3\n")
    assert main(["synth", "--config", str(bad)]) == 2
    bad.write_text("learning_rate = 0.3\n")
    assert main(["synth", "--config", str(bad)]) == 2


def test_every_key_is_a_flag():
    helptext = build_parser()._subparsers._group_actions[0].choices["train"].format_help()
    for name in C.FIELDS:
        assert "--" + name.replace("_", "-") in helptext


def test_text_roundtrip_and_hash():
    cfg = C.RunConfig(eta=0.3, widths=(8, 16), aug_ops=("rotate", "invert"), seeds=(4, 5))
    back = C.resolve(C.parse_text(cfg.to_text()))
    assert back == cfg and back.hash() == cfg.hash()
    assert C.RunConfig(out="a").hash() == C.RunConfig(out="b").hash()
    assert C.RunConfig(lam=0.2).hash() != C.RunConfig().hash()


def test_ce_method_has_no_prior_penalty():
    tc = C.resolve(method="ce").train_config(0)
    assert tc.loss_weights().lam == 0.0
    assert not (tc.caug_matching or tc.lnor or tc.opp)


# -- train / eval / report ------------------------------------------------------------------


def test_train_writes_artifacts_with_hash(tmp_path, data_dir):
    code, out = train(tmp_path, data_dir, "run")
    assert code == 0
    seed_dir = out / "seed-0"
    summary = json.loads((seed_dir / "summary.json").read_text())
    h = summary["config_hash"]
    assert summary["complete"] and summary["epochs_done"] == 2
    assert C.from_dict(summary["config"]).hash() == h
    for csv_file in [seed_dir / "metrics.csv", seed_dir / "timings.csv", *seed_dir.glob("histograms/*.csv")]:
        assert f"# config_hash: {h}" in csv_file.read_text().splitlines()[:2], csv_file
    assert json.loads((out / "summary.json").read_text())["config_hash"] == h
    assert len(read_metrics(seed_dir / "metrics.csv")) == 2


def test_same_seed_runs_are_identical(tmp_path, data_dir):
    _, a = train(tmp_path, data_dir, "a")
    _, b = train(tmp_path, data_dir, "b")
    assert (a / "seed-0" / "metrics.csv").read_bytes() == (b / "seed-0" / "metrics.csv").read_bytes()


def test_resume_matches_uninterrupted(tmp_path, data_dir):
    _, whole = train(tmp_path, data_dir, "whole")
    assert train(tmp_path, data_dir, "split", "--stop-after", "1")[0] == 0
    assert not json.loads((tmp_path / "split" / "seed-0" / "summary.json").read_text())["complete"]
    assert train(tmp_path, data_dir, "split", "--resume")[0] == 0
    a = (whole / "seed-0" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "split" / "seed-0" / "metrics.csv").read_bytes()


def test_multiple_seeds_report_mean_and_stdev(tmp_path, data_dir, capsys):
    code, out = train(tmp_path, data_dir, "multi", "--seeds", "1,2,3")
    assert code == 0
    assert "±" in capsys.readouterr().out
    metrics = json.loads((out / "summary.json").read_text())["metrics"]
    accs = [json.loads((out / f"seed-{s}" / "summary.json").read_text())["final"]["test_accuracy"] for s in (1, 2, 3)]
    assert metrics["test_accuracy"]["n"] == 3
    assert metrics["test_accuracy"]["mean"] == pytest.approx(np.mean(accs))
    assert metrics["test_accuracy"]["stdev"] == pytest.approx(np.std(accs, ddof=1))


def test_eval_matches_final_record(tmp_path, data_dir, capsys):
    _, out = train(tmp_path, data_dir, "run")
    capsys.readouterr()
    assert main(["eval", str(out / "seed-0")]) == 0
    result = json.loads(capsys.readouterr().out)
    final = read_metrics(out / "seed-0" / "metrics.csv")[-1]
    assert result["test_accuracy"] == final.test_accuracy
    assert result["tail_accuracy"] == pytest.approx(final.tail_accuracy)
    assert "eval" in json.loads((out / "seed-0" / "summary.json").read_text())


def test_eval_errors(tmp_path, data_dir, capsys):
    assert main(["eval", str(tmp_path / "nowhere")]) == 4
    _, out = train(tmp_path, data_dir, "run")
    other = tmp_path / "other"
    assert main(["synth", *SMALL, "--blobs-classes", "3", "--data", str(other)]) == 0
    assert main(["eval", str(out / "seed-0"), "--data", str(other)]) == 4
    assert "classes" in capsys.readouterr().err


def test_train_without_dataset_is_io_error(tmp_path):
    assert train(tmp_path, tmp_path / "missing", "run")[0] == 4


def test_report_table_and_json(tmp_path, data_dir, capsys):
    _, a = train(tmp_path, data_dir, "a")
    _, b = train(tmp_path, data_dir, "b", "--method", "ce")
    capsys.readouterr()
    assert main(["report", str(a), str(b / "seed-0")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3 and lines[0].startswith("run\ttest_accuracy")
    assert main(["report", "--json", str(a)]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert rows[0]["config_hash"]


# -- sweep ------------------------------------------------------------------------------------


def test_sweep_grid(tmp_path, data_dir):
    out = tmp_path / "sweep"
    code = main(["sweep", *SMALL, "--data", str(data_dir), "--out", str(out), "--seeds", "0,1",
                 "--grid", "alpha=1,2", "--grid", "lam=0.05,0.1"])
    assert code == 0
    cells = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert len(cells) == 4
    rows = list(csv.DictReader((out / "sweep.csv").read_text().splitlines()))
    assert len(rows) == 4 * 2 and all(r["status"] == "ok" for r in rows)
    assert len({r["config_hash"] for r in rows}) == 4


def test_sweep_records_failures(tmp_path, data_dir):
    out = tmp_path / "sweep"
    assert main(["sweep", *SMALL, "--data", str(data_dir), "--out", str(out), "--grid", "kappa=0.5,7"]) == 0
    rows = list(csv.DictReader((out / "sweep.csv").read_text().splitlines()))
    assert [r["status"] for r in rows] == ["ok", "error"]
    assert "kappa" in rows[1]["error"]


def test_one_cell_sweep_equals_train(tmp_path, data_dir):
    _, run = train(tmp_path, data_dir, "run")
    out = tmp_path / "sweep"
    assert main(["sweep", *SMALL, "--data", str(data_dir), "--out", str(out), "--grid", "alpha=2"]) == 0
    assert body(out / "alpha=2.0" / "seed-0" / "metrics.csv") == body(run / "seed-0" / "metrics.csv")
