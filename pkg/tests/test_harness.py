from pathlib import Path

import pytest
from pydantic import ValidationError

from src.graph.agent import run_experiment
from src.graph.report_formatter import report_formatter
from src.graph.state import ExperimentConfig, load_experiment_config
from src.utils.errors import ConfigurationError

UNIT_BOX = [(0.0, 1.0)]

SCALING_TOML = """
[experiment]
kind = "counting_scaling"
chart = "parabola"

[region]
box = [[0.0, 1.0]]

[weights]
eps = [0.5]

[sweep]
Q_list = [10, 20]

[sampling]
seed = 5
"""


def scaling_config(**overrides):
    fields = dict(kind="counting_scaling", box=UNIT_BOX, eps=[0.5], Q_list=[10, 20, 40])
    fields.update(overrides)
    return ExperimentConfig(**fields)


def test_counting_scaling_report():
    report = run_experiment(scaling_config())
    assert report.columns == ["Q", "count", "pairs", "certified", "ratio"]
    assert [r["Q"] for r in report.records] == [10, 20, 40]
    assert report.records[0]["count"] == 35
    assert report.records[0]["ratio"] == pytest.approx(0.7)
    assert report.passed is True
    assert report.provenance["seed"] == scaling_config().seed


def test_report_independent_of_thread_count():
    one = report_formatter.to_csv(run_experiment(scaling_config(threads=1)))
    four = report_formatter.to_csv(run_experiment(scaling_config(threads=4)))
    assert one == four


def test_counting_scaling_settles_on_inner_box():
    config = scaling_config(box=[(0.1, 0.9)], eps=[0.3], Q_list=[2**k for k in range(7, 12)])
    report = run_experiment(config)
    ratios = [r["ratio"] for r in report.records]
    assert max(ratios) / min(ratios) <= 2
    assert min(ratios) >= 0.1
    assert report.passed is True


def test_config_hash_tracks_results():
    first = run_experiment(scaling_config(seed=1)).provenance["config_hash"]
    second = run_experiment(scaling_config(seed=2)).provenance["config_hash"]
    assert first != second


def test_dichotomy_report():
    config = ExperimentConfig(
        kind="dichotomy",
        box=UNIT_BOX,
        psi=["family:1,0.5", "family:1,0.5"],
        psi_convergent=["family:1,0.8", "family:1,0.8"],
        q_windows=[10, 100],
        samples=100,
        seed=11,
    )
    report = run_experiment(config)
    assert [(r["system"], r["Q"]) for r in report.records] == [
        ("divergent", 10), ("divergent", 100), ("convergent", 10), ("convergent", 100),
    ]
    for r in report.records:
        assert 0 <= r["window_fraction"] <= r["cumulative_fraction"] <= 1
    assert len(report.checks) == 4
    assert run_experiment(config).records == report.records


def test_dichotomy_trend():
    config = ExperimentConfig(
        kind="dichotomy",
        box=UNIT_BOX,
        psi=["family:1,0.5", "family:1,0.5"],
        psi_convergent=["family:1,0.5,1.1", "family:1,0.5,1.1"],
        q_windows=[100, 1000, 10000],
        samples=1000,
    )
    report = run_experiment(config)
    divergent = [r for r in report.records if r["system"] == "divergent"]
    convergent = [r["window_fraction"] for r in report.records if r["system"] == "convergent"]
    assert divergent[-1]["cumulative_fraction"] >= 0.99
    assert convergent[0] > convergent[1] > convergent[2]
    assert convergent[-1] < 0.2
    assert all(check.holds for check in report.checks)
    assert report.passed is True


def test_multiplicative_report():
    config = ExperimentConfig(
        kind="multiplicative", box=UNIT_BOX, psi=["family:1,1,1"], t_list=[2, 3], samples=100, w0=2.0,
    )
    report = run_experiment(config)
    assert [r["t"] for r in report.records] == [2, 3]
    assert all(r["counterexamples"] == 0 for r in report.records)
    assert report.passed is True
    assert "log_weighted_partial_sum" in report.summary


def test_ubiquity_report():
    config = ExperimentConfig(
        kind="ubiquity", box=UNIT_BOX, psi=["family:1,0.6", "family:1,0.6"], t_list=[2, 3, 4], grid=50,
        samples=100,
    )
    report = run_experiment(config)
    assert [r["t"] for r in report.records] == [2, 3, 4]
    assert all(r["klass"] in ("T1", "T2", "none") for r in report.records)
    assert set(report.summary) >= {"t1", "t2", "min_density", "ratio_sum"}


def test_convergence_cover_report():
    config = ExperimentConfig(
        kind="convergence_cover", box=UNIT_BOX, psi=["family:0.1,1.5", "family:0.1,1.5"], t_list=[2, 3],
        samples=100,
    )
    report = run_experiment(config)
    for r in report.records:
        assert r["B_bound"] > 0
        assert r["B_measure"] >= 0
        assert r["A_lower"] <= r["A_estimate"] <= r["A_upper"]


def test_minor_decay_report():
    config = ExperimentConfig(kind="minor_decay", box=UNIT_BOX, eps=[0.2, 0.3], t_list=[1, 2], samples=100)
    report = run_experiment(config)
    assert len(report.records) == 2
    assert len(report.checks) == 1
    assert report.summary["alpha"] == pytest.approx(1 / 9)


def test_json_lines_output():
    text = report_formatter.to_json_lines(run_experiment(scaling_config(Q_list=[10])))
    lines = text.splitlines()
    assert lines[0].startswith('{"provenance"')
    assert '"passed"' in lines[-1]


@pytest.mark.parametrize("fields", [
    dict(kind="dichotomy", psi=["const:0.1", "const:0.1"]),
    dict(kind="counting_scaling", eps=[0.5], Q_list=[10], c=1.5),
    dict(kind="counting_scaling", eps=[0.5], Q_list=[1]),
    dict(kind="counting_scaling", eps=[0.5, 0.5], Q_list=[10]),
    dict(kind="counting_scaling", eps=[0.5], Q_list=[10], box=[(1.0, 3.0)]),
    dict(kind="multiplicative", psi=["const:0.1", "const:0.1"], t_list=[2]),
    dict(kind="minor_decay", eps=[0.2, 0.3], t_list=[0]),
    dict(kind="ubiquity", psi=["const:0.1", "const:0.1"], t_list=[2], samples=10),
    dict(kind="sideways"),
    dict(kind="counting_scaling", eps=[0.5], Q_list=[10], q_list=[20]),
])
def test_invalid_configs(fields):
    with pytest.raises(ValidationError):
        ExperimentConfig(**fields)


def test_unknown_psi_spec_and_chart():
    with pytest.raises(ValidationError):
        ExperimentConfig(kind="counting_scaling", chart="torus", eps=[0.5], Q_list=[10])
    with pytest.raises(ValidationError):
        ExperimentConfig(kind="ubiquity", psi=["wave:1", "const:0.1"], t_list=[2])


def test_load_experiment_config(tmp_path):
    path = tmp_path / "scaling.toml"
    path.write_text(SCALING_TOML)
    config = load_experiment_config(path)
    assert config.kind == "counting_scaling"
    assert config.Q_list == [10, 20]
    assert config.seed == 5
    assert load_experiment_config(path, {"seed": 9, "threads": None}).seed == 9


def test_load_experiment_config_duplicate_key(tmp_path):
    path = tmp_path / "dup.toml"
    path.write_text(SCALING_TOML + "\n[output]\nseed = 6\n")
    with pytest.raises(ConfigurationError):
        load_experiment_config(path)


def test_load_experiment_config_missing_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_experiment_config(tmp_path / "absent.toml")


@pytest.mark.parametrize("path", sorted((Path(__file__).parent.parent / "experiments").glob("*.toml")), ids=lambda p: p.stem)
def test_shipped_experiment_files_validate(path):
    assert load_experiment_config(path).kind == path.stem
