import csv
from pathlib import Path

import pytest

import biprompt.cli as cli
from biprompt.config import ConfigError, ExperimentConfig, load_config, parse_config
from biprompt.core import InvalidInputError
from biprompt.evalbench import average_accuracy, worst_group_accuracy

from conftest import planted_setup

REPO = Path(__file__).resolve().parents[1]
SMALL = """
dataset:
  n: 40
  synthetic:
    rho: {rho}
adaptation:
  methods: [vanilla, seraser, biprompt]
report:
  out: {out}
"""


def _write(tmp_path, text, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _small(tmp_path, rho=0.95, out="out"):
    return load_config(_write(tmp_path, SMALL.format(rho=rho, out=out)))


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_shipped_configs_parse():
    cfg = load_config(REPO / "configs" / "default.yaml")
    assert cfg.methods == ["vanilla", "seraser", "biprompt"]
    assert cfg.adaptation.step_size == 0.1 and cfg.dataset.n == 2000
    sweep = load_config(REPO / "configs" / "sweep.yaml")
    assert len(sweep.grid()) == 10


def test_defaults_match_code_defaults():
    cfg = parse_config("")
    base = ExperimentConfig()
    assert cfg.adaptation == base.adaptation
    assert cfg.dataset.spec == base.dataset.spec


def test_unknown_key_reports_line(tmp_path, capsys):
    path = _write(tmp_path, "dataset:\n  n: 40\nadaptation:\n  steps: 1\n  stepsize: 0.1\n")
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert err.value.line == 5
    assert cli.main(["run", "--config", str(path)]) == 2
    assert f"{path}:5" in capsys.readouterr().err


@pytest.mark.parametrize("text, line", [
    ("report:\n  workers: two\n", 2),
    ("dataset:\n  synthetic:\n    rho: 0.9\n    colour: red\n", 4),
    ("encoder:\n  variant: resnet\n", 2),
    ("adaptation:\n  methods: [vanilla, tpt]\n", 2),
    ("sweeps:\n  step_size: [0.1]\n", 1),
    ("dataset:\n  directory: does/not/exist\n", 2),
    ("adaptation:\n  steps: -1\n", 1),
    ("report:\n  workers: 1\n  workers: 2\n", 3),
])
def test_config_errors_carry_lines(tmp_path, text, line):
    with pytest.raises(ConfigError) as err:
        load_config(_write(tmp_path, text))
    assert err.value.line == line


def test_yaml_syntax_error_exit_code(tmp_path):
    path = _write(tmp_path, "dataset: [\n")
    assert cli.main(["run", "--config", str(path)]) == 2


def test_bad_worker_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.WORKERS_ENV, "zero")
    assert cli.main(["run", "--config", str(_write(tmp_path, SMALL.format(rho=0.95, out=tmp_path / "o")))]) == 2


def test_dataset_ingestion_failure_exit_code(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    path = _write(tmp_path, "dataset:\n  directory: empty\n")
    assert cli.main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == 3
    assert "dataset error" in capsys.readouterr().err


def test_vanilla_summary_matches_zero_shot(tmp_path):
    cfg = _small(tmp_path, out=tmp_path / "v").with_method("vanilla")
    report = cli.run_experiment(cfg)
    assert report.exit_code == 0 and [r["method"] for r in report.summary] == ["vanilla"]
    examples = cli.load_examples(cfg)
    enc, prompts = cli.build_encoders(cfg)
    from biprompt.adapt import AdaptationConfig, adapt_sample
    from biprompt.core import argmax_lowest
    from biprompt.debias import PromptSet
    preds = [argmax_lowest(adapt_sample(e.image, PromptSet(prompts), enc, AdaptationConfig(method="vanilla"))[0])
             for e in examples]
    assert report.summary[0]["avg"] == average_accuracy(preds, examples)


def test_runs_are_byte_identical_across_worker_counts(tmp_path, monkeypatch):
    a = cli.run_experiment(_small(tmp_path, out=tmp_path / "a"))
    monkeypatch.setenv(cli.WORKERS_ENV, "3")
    b = cli.run_experiment(_small(tmp_path, out=tmp_path / "b"))
    for name in ("results.csv", "summary.csv", "summary.txt", "trace.jsonl"):
        assert (a.out / name).read_bytes() == (b.out / name).read_bytes()


def test_reports_are_self_consistent(tmp_path):
    report = cli.run_experiment(_small(tmp_path, out=tmp_path / "r"))
    results = _rows(report.out / "results.csv")
    summary = _rows(report.out / "summary.csv")
    _, _, _, data = planted_setup(n=40)
    by_id = {e.example_id: e for e in data}
    for row in summary:
        mine = [r for r in results if r["method"] == row["method"]]
        assert [int(r["id"]) for r in mine] == sorted(by_id)
        preds = [int(r["predicted"]) for r in mine]
        examples = [by_id[int(r["id"])] for r in mine]
        assert float(row["avg"]) == average_accuracy(preds, examples)
        assert float(row["wg"]) == worst_group_accuracy(preds, examples)[0]
    text = (report.out / "summary.txt").read_text().splitlines()
    assert text[0].split()[:3] == ["Method", "AVG.", "W.G."] and len(text) == 2 + len(summary)


def test_trace_log_has_one_line_per_step(tmp_path):
    report = cli.run_experiment(_small(tmp_path, out=tmp_path / "t"))
    lines = (report.out / "trace.jsonl").read_text().splitlines()
    assert len(lines) == 2 * 40  # seraser and biprompt, one step each


def test_perfect_correlation_worst_group_below_average(tmp_path):
    report = cli.run_experiment(_small(tmp_path, rho=1.0, out=tmp_path / "p").with_method("vanilla"))
    row = report.summary[0]
    assert row["wg"] <= row["avg"]


def test_sweep_of_size_one_matches_run(tmp_path):
    cfg = _small(tmp_path, out=tmp_path / "s")
    report = cli.sweep(cfg, [{"step_size": cfg.adaptation.step_size}])
    direct = cli.run_experiment(cfg.with_out(tmp_path / "d"))
    assert (report.out / "point_000" / "summary.csv").read_bytes() == (direct.out / "summary.csv").read_bytes()
    assert sum(r["best"] for r in report.summary) == 1


def test_sign_sweep_has_both_rows(tmp_path):
    cfg = _small(tmp_path, out=tmp_path / "g").with_method("biprompt")
    report = cli.sweep(cfg, [{"orthogonality_sign": "paper_eq7"}, {"orthogonality_sign": "text_semantics"}])
    rows = _rows(report.out / "sweep.csv")
    assert [r["orthogonality_sign"] for r in rows] == ["paper_eq7", "text_semantics"]
    assert all(r["wg"] != "" and r["avg"] != "" for r in rows)
    best = [r for r in rows if r["best"] == "1"]
    assert len(best) == 1 and float(best[0]["wg"]) == max(float(r["wg"]) for r in rows)


def test_empty_grid(tmp_path):
    cfg = _small(tmp_path)
    with pytest.raises(InvalidInputError):
        cfg.grid()
    with pytest.raises(Exception):
        cli.sweep(cfg, [])
    assert cli.main(["sweep", "--config", str(tmp_path / "cfg.yaml")]) == 2


def test_main_run_with_flags(tmp_path, capsys):
    cfg_path = _write(tmp_path, SMALL.format(rho=0.95, out=tmp_path / "unused"))
    out, attn = tmp_path / "cli", tmp_path / "attn"
    code = cli.main(["run", "--config", str(cfg_path), "--method", "biprompt", "--seed", "3",
                     "--out", str(out), "--dump-attention", str(attn)])
    assert code == 0
    assert "biprompt" in capsys.readouterr().out
    assert {r["method"] for r in _rows(out / "results.csv")} == {"biprompt"}
    assert len(list(attn.glob("*.png"))) == 40


def test_generate_then_run_from_directory(tmp_path):
    data_dir = tmp_path / "bench"
    assert cli.main(["generate", "--config", str(_write(tmp_path, SMALL.format(rho=0.95, out=data_dir)))]) == 0
    text = SMALL.format(rho=0.95, out=tmp_path / "fromdir") + "  save_states: true\n"
    text = text.replace("dataset:\n", "dataset:\n  directory: bench\n")
    report = cli.run_experiment(load_config(_write(tmp_path, text, "dir.yaml")))
    assert report.exit_code == 0 and report.summary[0]["n"] == 40
    assert len(list((report.out / "states" / "biprompt").glob("*.bpps"))) == 40


def test_hard_errors_beyond_tolerance(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("encoder exploded")

    monkeypatch.setattr(cli, "adapt_sample", boom)
    cfg = _small(tmp_path, out=tmp_path / "f").with_method("biprompt")
    report = cli.run_experiment(cfg)
    assert report.exit_code == 1
    assert report.summary[0]["errors"] == 40
    assert all("encoder exploded" in r["error"] for r in _rows(report.out / "results.csv"))
