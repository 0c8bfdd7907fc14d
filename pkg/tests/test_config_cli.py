import csv
import json

import pytest

from conftest import tiny_config
from pdcfrs.cli import main
from pdcfrs.config import ConfigError, ExperimentConfig, dump_config, from_mapping, load_config
from pdcfrs.experiment import load_data, metrics_csv, run, sweep
from pdcfrs.federated import run_experiment


def test_defaults():
    c = load_config()
    assert (c.epsilon, c.alpha, c.beta, c.lam, c.rounds, c.lr) == (5.0, 30, 0.5, 0.5, 20, 0.001)
    assert (c.dim, c.layers, c.batch_size, c.local_epochs, c.k) == (32, (32, 16, 8), 256, 5, 20)
    assert c.variant == "PDC-FRS"


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("")
    assert load_config(p) == ExperimentConfig()


def test_flag_overrides_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"alpha": 30, "lambda": 0.1}))
    c = load_config(p, {"alpha": 10, "tau": None})
    assert c.alpha == 10 and c.lam == 0.1 and c.tau == 0.2


@pytest.mark.parametrize("key,value", [("epsilon", -1), ("alpha", -2), ("tau", 0), ("layers", []),
                                       ("batch_size", 0), ("dataset", "nope"), ("rounds", 1.5)])
def test_validation_names_key(key, value):
    with pytest.raises(ConfigError, match=key):
        from_mapping({key: value})


def test_unknown_key(tmp_path):
    with pytest.raises(ConfigError, match="colour"):
        from_mapping({"colour": 1})
    p = tmp_path / "c.json"
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(p)


def test_echo_round_trip(tmp_path):
    c = ExperimentConfig(seed=3, layers=(8, 4), lam=0.05, augmentation=False)
    dump_config(c, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == c


@pytest.mark.parametrize("flags,name", [
    (dict(augmentation=False, item_cl=False, user_cl=False), "FedNCF"),
    (dict(item_cl=False, user_cl=False), "FedNCF+Aug"),
    (dict(augmentation=False), "FedNCF+CL"),
    ({}, "PDC-FRS"),
    (dict(augmentation=False, user_cl=False), "FedNCF+ItemCL"),
    (dict(alpha=0, beta=0.0, lam=0.0), "FedNCF"),
])
def test_variant_names(flags, name):
    assert ExperimentConfig(**flags).variant == name


def test_fedncf_never_touches_aux():
    c = ExperimentConfig(augmentation=False, item_cl=False, user_cl=False)
    assert not c.uses_aux
    assert (c.effective_alpha, c.effective_beta, c.effective_lam) == (0, 0.0, 0.0)


def test_run_writes_outputs_and_is_byte_identical(tmp_path):
    cfg = tiny_config(out=str(tmp_path / "a"))
    ds, sim = load_data(cfg)
    a = run(cfg, ds, sim)
    b = run(cfg.replace(out=str(tmp_path / "b")), ds, sim)
    for name in ("metrics.csv", "config.json", "checkpoint.npz", "summary.json", "contributions.tsv"):
        assert (a.out_dir / name).is_file()
    assert (a.out_dir / "metrics.csv").read_bytes() == (b.out_dir / "metrics.csv").read_bytes()
    rows = list(csv.DictReader(open(a.out_dir / "metrics.csv")))
    assert [r["round"] for r in rows] == ["0", "1", "2"]
    assert rows[0]["wall_ms"] == "" and rows[0]["mean_client_loss"] == ""
    summary = json.loads((a.out_dir / "summary.json").read_text())
    assert summary["variant"] == "PDC-FRS" and summary["recall"] == float(rows[-1]["recall@20"])


def test_contribution_dump_reuse(tmp_path):
    cfg = tiny_config(out=str(tmp_path / "a"), rounds=1)
    ds, sim = load_data(cfg)
    a = run(cfg, ds, sim)
    # a different epsilon is irrelevant once the perturbed uploads are frozen
    b = run(cfg.replace(out=str(tmp_path / "b"), epsilon=0.5), ds, sim,
            contributions_path=str(a.out_dir / "contributions.tsv"))
    assert (a.out_dir / "metrics.csv").read_text() == (b.out_dir / "metrics.csv").read_text()


def test_metrics_csv_timing_column():
    cfg = tiny_config(rounds=1)
    ds, sim = load_data(cfg)
    trace = run_experiment(ds, cfg, sim).metrics
    assert metrics_csv(trace).splitlines()[-1].endswith(",")
    assert not metrics_csv(trace, record_timing=True).splitlines()[-1].endswith(",")


def test_sweep_rows_and_single_value(tmp_path):
    cfg = tiny_config(out=str(tmp_path / "s"), rounds=1)
    rows = sweep(cfg, "alpha", [0, 5])
    assert len(rows) == 2 and [r["seed"] for r in rows] == [0, 1]
    assert (tmp_path / "s" / "sweep_alpha.csv").is_file()
    single = sweep(cfg.replace(out=str(tmp_path / "one")), "alpha", [5])
    direct = run(cfg.replace(alpha=5, out=str(tmp_path / "direct"), data_seed=0))
    assert single[0]["recall"] == direct.final.recall_at_k
    with pytest.raises(ValueError):
        sweep(cfg, "dim", [1])


def test_cli_run_and_errors(tmp_path, capsys):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({k: v for k, v in tiny_config().to_dict().items() if k != "out"}))
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg_path), "--no-aug", "--no-item-cl", "--no-user-cl",
                 "--rounds", "1", "--out", str(out)]) == 0
    assert capsys.readouterr().out.startswith("FedNCF\t")
    assert json.loads((out / "config.json").read_text())["rounds"] == 1

    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dataset": "movielens", "ratings_path": str(tmp_path / "nope.dat")}))
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "nope.dat" in capsys.readouterr().err
    assert main(["run", "--epsilon", "-1"]) == 2


def test_cli_sweep_and_synth(tmp_path, capsys):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({k: v for k, v in tiny_config(rounds=1).to_dict().items() if k != "out"}))
    assert main(["sweep", "--config", str(cfg_path), "--param", "epsilon", "--values", "1,5",
                 "--out", str(tmp_path / "sw")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3 and lines[0].startswith("epsilon")
    assert main(["synth", "--out", str(tmp_path / "data"), "--users", "20", "--items", "30", "--clusters", "3"]) == 0
    assert (tmp_path / "data" / "ratings.dat").is_file()


def test_movielens_files_end_to_end(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d"), "--users", "30", "--items", "40", "--clusters", "3"]) == 0
    cfg = tiny_config(dataset="movielens", ratings_path=str(tmp_path / "d" / "ratings.dat"),
                      titles_path=str(tmp_path / "d" / "movies.dat"),
                      word_vectors_path=str(tmp_path / "d" / "vectors.txt"), rounds=1, out=str(tmp_path / "o"))
    ds, sim = load_data(cfg)
    assert ds.num_users == 30 and sim is not None
    assert run(cfg, ds, sim).final.users_evaluated > 0
