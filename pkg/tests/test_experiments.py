import json
import math

import pytest
import yaml

from fediiot.cli import main
from fediiot.experiments import (
    ALL_SCHEMES,
    Scheme,
    accuracy_vs_institutions,
    compare_schemes,
    config_from_dict,
    load_config,
    run_scheme,
    write_metrics,
)
from fediiot.experiments.metrics import ROUNDS_COLUMNS, read_csv
from fediiot.experiments.runner import synth_share
from fediiot.fl import ConfigError

TINY = {
    "dataset": {"n_total": 60, "side": 11},
    "institutions": 3,
    "epochs": 2,
    "synth_n": 31,
    "seeds": [0, 1],
    "gan": {"rounds": 2, "hidden": 8, "noise_dim": 4},
}


def tiny(**over):
    data = json.loads(json.dumps(TINY))
    for k, v in over.items():
        if isinstance(v, dict):
            data.setdefault(k, {}).update(v)
        else:
            data[k] = v
    return config_from_dict(data)


# --- config ---------------------------------------------------------------------------

def test_default_sizes():
    cfg = config_from_dict({})
    assert (cfg.dataset.n_total, cfg.institutions, cfg.synth_n, cfg.epochs) == (620, 5, 1500, 200)
    assert cfg.schemes == list(ALL_SCHEMES)


@pytest.mark.parametrize("bad", [
    {"bogus": 1},
    {"dataset": {"colour": "red"}},
    {"federation": {"optimizer": {"momentum": 0.9}}},
    {"epochs": "many"},
    {"epochs": 0},
    {"seeds": []},
    {"schemes": ["FEDPROX"]},
    {"net": {"drop_prob": 2.0}},
    {"federation": {"optimizer": {"kind": "rmsprop"}}},
    {"dataset": {"kind": "csv"}},
    {"dataset": {"side": 8}},
    {"augmented_training": "gossip"},
])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        config_from_dict(bad)


def test_load_config_yaml(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text(yaml.safe_dump(TINY))
    cfg = load_config(f)
    assert cfg.institutions == 3 and cfg.gan.hidden == 8
    f.write_text("epochs: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(f)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


def test_synthetic_shares_sum():
    cfg = tiny()
    shares = [synth_share(cfg, i) for i in range(cfg.institutions)]
    assert sum(shares) == 31 and max(shares) - min(shares) <= 1


# --- run_scheme ---------------------------------------------------------------------

def test_one_institution_federation_equals_centralized():
    cfg = tiny(institutions=1)
    fed = run_scheme(Scheme.FL_NO_GAN, cfg, 0)
    central = run_scheme(Scheme.CENTRALIZED, cfg, 0)
    assert fed.final_params.values.tobytes() == central.final_params.values.tobytes()
    assert [e.test_accuracy for e in fed.history] == [e.test_accuracy for e in central.history]
    assert [e.global_loss for e in fed.history] == [e.global_loss for e in central.history]


def test_one_epoch_one_record():
    for scheme in ALL_SCHEMES:
        assert len(run_scheme(scheme, tiny(epochs=1), 0).history) == 1


def test_no_synthetic_rows_collapses_to_plain_federation():
    cfg = tiny(synth_n=0)
    with_gan = run_scheme(Scheme.FL_GAN, cfg, 0)
    plain = run_scheme(Scheme.FL_NO_GAN, cfg, 0)
    assert with_gan.final_params.values.tobytes() == plain.final_params.values.tobytes()
    assert with_gan.gan_history


def test_centralized_augmented_training_pools_partitions():
    cfg = tiny(augmented_training="centralized")
    res = run_scheme(Scheme.FL_GAN, cfg, 0)
    assert res.gan_history and len(res.history) == 2
    assert all(e.delivered == 1 for e in res.history)
    assert res.final_params.values.tobytes() != run_scheme(Scheme.FL_GAN, tiny(), 0).final_params.values.tobytes()


def test_schemes_record_expected_phases():
    cfg = tiny()
    assert not run_scheme(Scheme.STANDALONE, cfg, 0).gan_history
    sg = run_scheme(Scheme.STANDALONE_GAN, cfg, 0)
    assert len(sg.gan_history) == 2 and sg.gan_history[0].selected == [0]
    fg = run_scheme(Scheme.FL_GAN, cfg, 0)
    assert fg.gan_history[0].selected == [0, 1, 2]
    assert all(0.0 <= e.test_accuracy <= 1.0 for e in fg.history)


def test_institution_count_bounds():
    with pytest.raises(ConfigError):
        run_scheme(Scheme.FL_GAN, tiny(), 0, institutions=4)
    with pytest.raises(ConfigError):
        accuracy_vs_institutions(tiny(), [1, 4])


def test_curve_single_count_is_standalone():
    cfg = tiny()
    point = accuracy_vs_institutions(cfg, [1])[0]
    alone = [run_scheme(Scheme.STANDALONE_GAN, cfg, s).final_accuracy for s in cfg.seeds]
    assert point.accuracies == alone


def test_dirichlet_and_mixture_configs_run():
    cfg = tiny(partition={"kind": "dirichlet", "alpha": 0.3})
    assert run_scheme(Scheme.FL_NO_GAN, cfg, 0).history
    mix = tiny(dataset={"kind": "gaussian_mixture", "n_per_component": 30,
                        "components": [{"mean": [0, 0], "cov": [[1, 0], [0, 1]]},
                                       {"mean": [3, 3], "cov": [[1, 0], [0, 1]]}]})
    res = run_scheme(Scheme.FL_GAN, mix, 0)
    assert res.history and res.gan_history


def test_lossy_network_is_recorded():
    cfg = tiny(net={"drop_prob": 0.5})
    res = run_scheme(Scheme.FL_NO_GAN, cfg, 0)
    assert any(d.dropped for _, _, d in res.deliveries)
    assert all(e.delivered <= 3 for e in res.history)


# --- compare_schemes ----------------------------------------------------------------

def test_single_cell_table():
    cmp = compare_schemes(tiny(seeds=[3]), [Scheme.STANDALONE])
    assert len(cmp.cells) == 1 and cmp.cells[0].seed == 3


def test_compare_is_repeatable():
    cfg = tiny()
    a = compare_schemes(cfg)
    b = compare_schemes(cfg)
    assert [(c.scheme, c.seed, c.final_accuracy) for c in a.cells] == [(c.scheme, c.seed, c.final_accuracy) for c in b.cells]


def test_cell_failure_is_reported(tmp_path):
    cfg = tiny(dataset={"kind": "csv", "path": str(tmp_path / "none.csv"), "n_features": 4})
    cmp = compare_schemes(cfg, [Scheme.STANDALONE])
    assert all(c.error and math.isnan(c.final_accuracy) for c in cmp.cells)
    assert math.isnan(cmp.medians()[Scheme.STANDALONE])


# --- write_metrics --------------------------------------------------------------------

def test_empty_history_header_only(tmp_path):
    write_metrics(tmp_path, tiny(), "run")
    assert (tmp_path / "rounds.csv").read_text() == ",".join(ROUNDS_COLUMNS) + "\n"


def test_existing_files_need_overwrite(tmp_path):
    write_metrics(tmp_path, tiny(), "run")
    with pytest.raises(FileExistsError):
        write_metrics(tmp_path, tiny(), "run")
    write_metrics(tmp_path, tiny(), "run", overwrite=True)


def test_metrics_round_trip(tmp_path):
    cfg = tiny(seeds=[4, 2])
    cmp = compare_schemes(cfg, [Scheme.FL_GAN, Scheme.STANDALONE])
    write_metrics(tmp_path, cfg, "compare", cmp.results, cmp)
    rows = read_csv(tmp_path / "comparison.csv")
    assert [(r["scheme"], int(r["seed"])) for r in rows] == [(c.scheme.value, c.seed) for c in cmp.cells]
    for r, c in zip(rows, cmp.cells):
        assert abs(float(r["final_accuracy"]) - c.final_accuracy) < 1e-9
    rounds = read_csv(tmp_path / "rounds.csv")
    fl = [r for r in rounds if r["scheme"] == "FL_GAN" and r["seed"] == "4" and r["test_accuracy"]]
    ref = next(res for res in cmp.results if res.scheme is Scheme.FL_GAN and res.seed == 4)
    assert [float(r["global_loss"]) for r in fl] == [e.global_loss for e in ref.history]
    gan_rows = [r for r in rounds if r["d_loss"]]
    assert len(gan_rows) == 2 * 2
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seeds"] == [4, 2]
    assert manifest["config"]["synth_n"] == 31
    assert set(manifest["files"]) >= {"rounds.csv", "comparison.csv", "manifest.json"}


def _run_dir(tmp_path, name, cfg, workers):
    out = tmp_path / name
    cmp = compare_schemes(cfg, workers=workers)
    write_metrics(out, cfg, "compare", cmp.results, cmp)
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


def test_outputs_byte_identical_across_workers(tmp_path):
    cfg = tiny(net={"drop_prob": 0.3, "jitter_ms": 4.0})
    a = _run_dir(tmp_path, "a", cfg, 1)
    b = _run_dir(tmp_path, "b", cfg, 1)
    c = _run_dir(tmp_path, "c", cfg, 2)
    assert a == b == c


# --- CLI ------------------------------------------------------------------------------

@pytest.fixture
def cfg_file(tmp_path):
    f = tmp_path / "tiny.yaml"
    f.write_text(yaml.safe_dump({**TINY, "seeds": [0], "schemes": ["STANDALONE", "FL_NO_GAN"]}))
    return f


def test_cli_run(cfg_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg_file), "--out", str(out)]) == 0
    assert {"rounds.csv", "comparison.csv", "manifest.json"} <= {p.name for p in out.iterdir()}
    assert {r["scheme"] for r in read_csv(out / "comparison.csv")} == {"STANDALONE", "FL_NO_GAN"}
    assert main(["run", "--config", str(cfg_file), "--out", str(out)]) == 2
    assert main(["run", "--config", str(cfg_file), "--out", str(out), "--overwrite"]) == 0


def test_cli_compare_and_curve(cfg_file, tmp_path):
    assert main(["compare", "--config", str(cfg_file), "--out", str(tmp_path / "c")]) == 0
    assert len(read_csv(tmp_path / "c" / "comparison.csv")) == 5
    assert main(["curve", "--config", str(cfg_file), "--counts", "1,3", "--out", str(tmp_path / "k")]) == 0
    assert [r["count"] for r in read_csv(tmp_path / "k" / "curve.csv")] == ["1", "3"]


def test_cli_config_errors(tmp_path, cfg_file):
    bad = tmp_path / "bad.yaml"
    bad.write_text("institutions: 3\nunknown_knob: 1\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert main(["curve", "--config", str(cfg_file), "--counts", "1,x", "--out", str(tmp_path / "o")]) == 1
    assert main(["curve", "--config", str(cfg_file), "--counts", "9", "--out", str(tmp_path / "o")]) == 1
    assert main(["run", "--config", str(tmp_path / "nope.yaml")]) == 1


def test_cli_runtime_error(tmp_path):
    f = tmp_path / "csv.yaml"
    f.write_text(yaml.safe_dump({**TINY, "seeds": [0], "schemes": ["STANDALONE"],
                                 "dataset": {"kind": "csv", "path": str(tmp_path / "gone.csv"), "n_features": 3}}))
    assert main(["run", "--config", str(f), "--out", str(tmp_path / "o")]) == 2
