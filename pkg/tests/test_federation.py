from __future__ import annotations

import itertools
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dtfl.core import ScenarioConfig, init_scenario, substream
from dtfl.energy import ChannelConfig
from dtfl.errors import BadK
from dtfl.federation import (
    STALENESS_BASE,
    TRACE_COLUMNS,
    ClusterEnv,
    FederationConfig,
    Mode,
    ToleranceSchedule,
    clamp_frequency,
    cluster_nodes,
    kmeans,
    make_cluster_envs,
    run_federation,
    staleness_weights,
    time_weighted_global_aggregate,
    tolerance_schedule,
    within_cluster_variance,
    write_trace_ledgers,
)
from dtfl.model import ModelParams, local_loss, local_train_steps
from dtfl.trust import Upload, trust_weighted_aggregate

RELIABLE = ChannelConfig(failure_prob=(0.0, 0.0, 0.0))


def scalar(v: float) -> ModelParams:
    return ModelParams(np.array([v, 0.0, 0.0, 0.0]), 1, 1, 1)


# --- clustering ------------------------------------------------------------------

def test_kmeans_single_and_singletons(rng):
    pts = rng.random((7, 2))
    assert set(kmeans(pts, 1, rng).tolist()) == {0}
    assert sorted(kmeans(pts, 7, rng).tolist()) == list(range(7))


def test_kmeans_bad_k(rng):
    with pytest.raises(BadK):
        kmeans(rng.random((3, 2)), 4, rng)
    with pytest.raises(BadK):
        kmeans(rng.random((3, 2)), 0, rng)


def _best_two_partition(pts):
    best, best_labels = math.inf, None
    for bits in itertools.product([0, 1], repeat=len(pts) - 1):
        labels = np.array((0,) + bits)
        if labels.min() == labels.max():
            continue
        v = within_cluster_variance(pts, labels)
        if v < best:
            best, best_labels = v, labels
    return best_labels


def test_kmeans_recovers_separated_groups(rng):
    pts = np.array([[0.1, 0.1]] * 5 + [[0.9, 0.9]] * 5) + rng.normal(0, 0.01, (10, 2))
    labels = kmeans(pts, 2, rng)
    oracle = _best_two_partition(pts)
    same = np.array_equal(labels, oracle) or np.array_equal(labels, 1 - oracle)
    assert same


def test_kmeans_beats_random_partitions():
    rng = np.random.default_rng(5)
    pts = rng.random((20, 2))
    labels = kmeans(pts, 4, rng)
    ours = within_cluster_variance(pts, labels)
    for _ in range(10):
        rand = np.concatenate([np.arange(4), rng.integers(0, 4, 16)])
        rng.shuffle(rand)
        assert ours <= within_cluster_variance(pts, rand)


def test_cluster_nodes_partitions(small_scenario):
    groups = cluster_nodes(small_scenario.nodes, 3, substream(0, "c"))
    flat = sorted(i for g in groups for i in g)
    assert flat == [n.id for n in small_scenario.nodes]
    assert all(g for g in groups)
    assert [g[0] for g in groups] == sorted(g[0] for g in groups)


# --- clamp, tolerance, global merge --------------------------------------------------

def test_clamp_examples():
    assert clamp_frequency(5, 1.0, 1.0, 10.0) == 5
    assert clamp_frequency(5, 2.0, 1.0, 7.0) == 3
    assert clamp_frequency(5, 2.0, 0.5, 1.0) == 1


@given(st.integers(1, 20), st.floats(0.01, 5), st.floats(0.05, 1.0), st.floats(0.01, 50))
def test_clamp_bound(a, t, alpha, t_min):
    out = clamp_frequency(a, t, alpha, t_min)
    assert 1 <= out <= a
    assert out == 1 or out * t <= alpha * t_min * (1 + 1e-12)
    # only a binding constraint changes the decision
    if a * t <= alpha * t_min:
        assert out == a


def test_tolerance_examples():
    assert tolerance_schedule(ToleranceSchedule(0.4, 0.0, 1.0), 30) == 0.4
    assert tolerance_schedule(ToleranceSchedule(0.5, 0.05, 1.0), 4) == pytest.approx(0.7)


@given(st.floats(0.01, 1), st.floats(0, 1), st.floats(0.01, 1), st.integers(0, 10_000))
def test_tolerance_capped(a0, rho, amax, r):
    out = tolerance_schedule(ToleranceSchedule(a0, rho, amax), r)
    assert 0 < out <= amax <= 1


def test_global_merge_examples():
    assert time_weighted_global_aggregate([scalar(1.0), scalar(3.0)], [4, 4], 4).flat[0] == pytest.approx(2.0)
    merged = time_weighted_global_aggregate([scalar(0.0), scalar(1.0)], [5, 4], 5).flat[0]
    assert merged == pytest.approx(0.423883, abs=1e-6)
    w = 1 / STALENESS_BASE
    assert merged == pytest.approx(w / (1 + w), rel=1e-12)
    assert time_weighted_global_aggregate([scalar(2.5)], [0], 9).flat[0] == 2.5


@given(st.lists(st.tuples(st.floats(-5, 5), st.integers(0, 10)), min_size=1, max_size=6))
def test_global_merge_convex(items):
    params = [scalar(v) for v, _ in items]
    stamps = [s for _, s in items]
    w = staleness_weights(stamps, 10)
    assert w.sum() == pytest.approx(1.0)
    out = time_weighted_global_aggregate(params, stamps, 10).flat[0]
    vals = [v for v, _ in items]
    assert min(vals) - 1e-9 <= out <= max(vals) + 1e-9


@given(st.integers(0, 20))
def test_staleness_influence_decreases_with_lag(lag):
    fresh = staleness_weights([30, 30 - lag], 30)[1]
    stale = staleness_weights([30, 30 - lag - 1], 30)[1]
    assert stale < fresh


def test_future_timestamp_rejected():
    with pytest.raises(ValueError):
        staleness_weights([3], 2)


# --- one cluster's environment -------------------------------------------------------

def test_env_step_accounting(small_scenario):
    env = make_cluster_envs(small_scenario, [[0, 1, 2]], FederationConfig(), 5)[0]
    s = env.reset()
    assert s.shape == (env.state_dim,)
    for a in (1, 3, 2):
        _, s, _ = env.step(a)
        info = env.history[-1]
        assert info.q >= 0.0
    spent = sum(n.energy_spent for n in env.nodes)
    assert spent == pytest.approx(sum(h.e_cmp + h.e_com for h in env.history), rel=1e-12)
    assert env.true_consumed == pytest.approx(spent, rel=1e-12)


def test_env_local_aggregate_matches_trust_aggregate(small_scenario):
    """With a reliable channel the curator's model is the trust-weighted mean of the uploads."""
    cfg = FederationConfig(channel=RELIABLE, noise_std=0.0)
    env = make_cluster_envs(small_scenario, [[0, 1, 2]], cfg, 5)[0]
    env.reset()
    start = env.params.copy()
    rng = np.random.default_rng(0)
    # recompute member updates with the env's own stream to rebuild the uploads
    trained = [local_train_steps(env.nodes[k], start, 2, cfg.lr, rng)[0] for k in range(3)]
    env.step(2)
    ups = [Upload(n.id, p, 0, 0.0) for n, p in zip(env.nodes, trained)]
    expected = trust_weighted_aggregate(ups, env.reputations())
    assert np.allclose(env.params.flat, expected.flat, atol=1e-12)


def test_env_done_after_horizon(small_scenario):
    env = make_cluster_envs(small_scenario, [[0, 1]], FederationConfig(), 2)[0]
    env.reset()
    env.step(1)
    _, _, done = env.step(1)
    assert done
    with pytest.raises(RuntimeError):
        env.step(1)


# --- full runs ---------------------------------------------------------------------

def test_single_node_sync_reduces_to_local_training():
    cfg = ScenarioConfig(num_nodes=1, num_clusters=1, samples_per_node=60, hidden_dim=8, budget_total=1e6)
    sc = init_scenario(cfg)
    fed = FederationConfig(channel=RELIABLE)
    trace = run_federation(sc, Mode("sync_fixed", 1), 6, fed)
    params = sc.initial_params
    expected = []
    for _ in range(6):
        params, _ = local_train_steps(sc.nodes[0], params, 1, fed.lr, np.random.default_rng(0))
        expected.append(local_loss(params, sc.nodes[0].shard))
    assert [r[4] for r in trace.rows] == pytest.approx(expected, rel=1e-12)


def test_run_is_deterministic(small_scenario):
    a = run_federation(small_scenario, Mode("async_fixed", 3), 6, FederationConfig(), clusters=[[0, 1, 2], [3, 4, 5]])
    b = run_federation(small_scenario, Mode("async_fixed", 3), 6, FederationConfig(), clusters=[[0, 1, 2], [3, 4, 5]])
    assert a.to_csv() == b.to_csv()


def test_trace_header_is_stable(small_scenario):
    trace = run_federation(small_scenario, Mode("sync_fixed", 2), 3, FederationConfig())
    header = trace.to_csv().splitlines()[0]
    assert header == "round,simulated_time,cluster_id,a_i,local_loss,global_accuracy,Q,E_cmp,E_com,channel_state"
    assert tuple(header.split(",")) == TRACE_COLUMNS
    ledgers = write_trace_ledgers(trace)
    assert set(ledgers) == {"queue", "channel", "reputation"}
    assert all(text.count("\n") > 1 for text in ledgers.values())


def test_homogeneous_hardware_clamp_never_binds():
    cfg = ScenarioConfig(num_nodes=6, num_clusters=3, samples_per_node=30, hidden_dim=8, cpu_freq_lo=2.0,
                         cpu_freq_hi=2.0, deviation_lo=0.0, deviation_hi=0.0, budget_total=1e6)
    fed = FederationConfig(tolerance=ToleranceSchedule(1.0, 0.0, 1.0))
    trace = run_federation(init_scenario(cfg), Mode("async_fixed", 4), 5, fed)
    assert {r[3] for r in trace.rows} == {4}


def test_async_clamps_slow_clusters(small_scenario):
    trace = run_federation(small_scenario, Mode("async_fixed", 6), 6, FederationConfig())
    fast = min(range(len(trace.envs)), key=lambda j: trace.envs[j].est_train_time)
    slow_a = [r[3] for r in trace.rows if r[2] != fast]
    assert slow_a and max(slow_a) < 6


def test_async_dqn_requires_agents(small_scenario):
    with pytest.raises(ValueError):
        run_federation(small_scenario, Mode("async_dqn"), 2, FederationConfig())


def test_mode_parse_roundtrip():
    for text in ("async_dqn", "sync_fixed(5)", "async_fixed(10)"):
        assert str(Mode.parse(text)) == text
    with pytest.raises(ValueError):
        Mode.parse("bogus(2)")
