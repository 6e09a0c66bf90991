from __future__ import annotations

import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dtfl import experiments
from dtfl.config import parse_config_text
from dtfl.experiments import (
    SUMMARY_COLUMNS,
    TD_COLUMNS,
    _quartiles,
    read_summary,
    run_experiment,
    run_scalars,
    summarize,
    td_ratio,
)
from dtfl.federation import TRACE_COLUMNS

SMALL = """
scenario.num_nodes = 6
scenario.num_clusters = 2
scenario.samples_per_node = 30
scenario.test_samples = 100
scenario.hidden_dim = 8
experiment.repeats = 1
experiment.rounds = 4
experiment.mode = sync_fixed(2)
"""


def spec_for(extra: str = ""):
    return parse_config_text(extra, base=parse_config_text(SMALL))


def test_single_run_layout(tmp_path):
    out = run_experiment(spec_for(), out_dir=tmp_path)
    assert out == tmp_path / "run"
    assert sorted(p.name for p in (out / "runs").iterdir()) == ["pg0.6_k2_seed0.csv"]
    assert (out / "summary.csv").exists()
    assert [p.name for p in tmp_path.iterdir()] == ["run"]


def test_reruns_are_byte_identical(tmp_path):
    a = run_experiment(spec_for(), out_dir=tmp_path / "a")
    b = run_experiment(spec_for(), out_dir=tmp_path / "b")
    for name in ("runs/pg0.6_k2_seed0.csv", "summary.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_summary_matches_recomputation(tmp_path):
    spec = spec_for("experiment.repeats = 3\nexperiment.kind = fig8_adaptive_vs_fixed\nexperiment.baseline_T = 1, 3\n")
    out = run_experiment(spec, out_dir=tmp_path)
    summary = read_summary((out / "summary.csv").read_text())
    for arm in ("fixed1", "fixed3"):
        accs = []
        for seed in range(3):
            text = (out / "runs" / f"{arm}_seed{seed}.csv").read_text()
            accs.append(run_scalars("fig8_adaptive_vs_fixed", text)["final_accuracy"])
        assert summary[(arm, "final_accuracy")] == pytest.approx(float(np.median(accs)), rel=1e-12)


def test_headers_are_stable(tmp_path):
    out = run_experiment(spec_for("experiment.write_ledgers = true\n"), out_dir=tmp_path)
    run_csv = (out / "runs" / "pg0.6_k2_seed0.csv").read_text()
    assert tuple(run_csv.splitlines()[0].split(",")) == TRACE_COLUMNS
    summary = (out / "summary.csv").read_text()
    assert summary.splitlines()[0] == "arm,metric,n,median,q1,q3"
    assert tuple(summary.splitlines()[0].split(",")) == SUMMARY_COLUMNS
    assert (out / "runs" / "pg0.6_k2_seed0.queue.csv").exists()


def test_td_trace_header(tmp_path):
    spec = spec_for("experiment.kind = fig2_dqn_loss\ndqn.episodes = 2\ndqn.batch_size = 4\ndqn.capacity = 8\n"
                    "dqn.hidden_dim = 8\n")
    experiments.clear_agent_cache()
    out = run_experiment(spec, out_dir=tmp_path)
    text = (out / "runs" / "pg0.6_k2_seed0.csv").read_text()
    assert text.splitlines()[0] == "cluster_id,episode,step,epsilon,td_loss,reward"
    assert tuple(text.splitlines()[0].split(",")) == TD_COLUMNS
    rows = list(csv.DictReader(io.StringIO(text)))
    assert {int(r["cluster_id"]) for r in rows} == {0, 1}


def test_always_good_channel(tmp_path):
    spec = spec_for("experiment.kind = fig4_channel_aggregations\nexperiment.p_good_sweep = 1.0\n")
    out = run_experiment(spec, out_dir=tmp_path)
    assert read_summary((out / "summary.csv").read_text())[("pg1", "good_fraction")] == 1.0


def test_failed_run_leaves_no_partial_output(tmp_path, monkeypatch):
    def boom(*_args):
        raise ArithmeticError("diverged")

    monkeypatch.setattr(experiments, "_job", boom)
    with pytest.raises(ArithmeticError):
        run_experiment(spec_for(), out_dir=tmp_path)
    assert list(tmp_path.iterdir()) == []


def test_quartiles_examples():
    assert _quartiles([1.0, 2.0, 3.0, 4.0, 5.0]) == (3.0, 2.0, 4.0)
    assert _quartiles([1.0, 2.0]) == (1.5, 1.25, 1.75)
    med, q1, q3 = _quartiles([1.0, math.inf, math.inf])
    assert med == math.inf and q1 == math.inf and q3 == math.inf
    assert _quartiles([1.0, 2.0, math.inf])[:2] == (2.0, 1.5)
    assert all(math.isnan(v) for v in _quartiles([1.0, math.nan]))


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
def test_quartiles_agree_with_numpy_on_finite_values(vals):
    med, q1, q3 = _quartiles(vals)
    ref = np.percentile(vals, [50, 25, 75])
    assert [med, q1, q3] == pytest.approx(list(ref), rel=1e-9, abs=1e-6)
    assert q1 <= med <= q3


def test_td_ratio_short_trace_is_nan():
    assert math.isnan(td_ratio(np.ones(100)))
    losses = np.concatenate([np.full(700, 2.0), np.full(700, 0.5)])
    assert td_ratio(losses) == pytest.approx(0.25)


def test_summarize_arm_order():
    header = ",".join(TRACE_COLUMNS)
    row = "1,1.0,0,1,0.5,0.9,0.0,1.0,1.0,0"
    runs = [("b", 0, f"{header}\n{row}\n"), ("a", 0, f"{header}\n{row}\n")]
    text = summarize("run", runs, 0.85)
    arms = [r["arm"] for r in csv.DictReader(io.StringIO(text))]
    assert arms[0] == "b" and arms[-1] == "a"
    assert read_summary(text)[("a", "time_to_target")] == 1.0
