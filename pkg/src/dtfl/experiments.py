"""Seeded experiment sweeps that write one CSV per run plus a summary.

Each figure analog is a list of arms (a labelled scenario, federation
config and mode). Every arm runs once per seed; run CSVs are the raw
record and every summary statistic is recomputed from them by
:func:`run_scalars`, so a summary can always be checked against its runs.
"""
from __future__ import annotations

import csv
import io
import math
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentSpec
from .core import ScenarioConfig, init_scenario, substream
from .dqn import DqnConfig, DqnResult, QNetwork, run_dqn_training
from .federation import (
    FederationConfig,
    MetricsTrace,
    Mode,
    TRACE_COLUMNS,
    cluster_nodes,
    make_cluster_envs,
    run_federation,
    write_trace_ledgers,
)

TD_COLUMNS = ("cluster_id", "episode", "step", "epsilon", "td_loss", "reward")
SUMMARY_COLUMNS = ("arm", "metric", "n", "median", "q1", "q3")
SMOOTH_WINDOW = 100


@dataclass(frozen=True)
class Arm:
    label: str
    scenario: ScenarioConfig
    federation: FederationConfig
    mode: Mode


# --- agents -----------------------------------------------------------------

_AGENT_CACHE: dict[tuple, list[DqnResult]] = {}


def scenario_clusters(config: ScenarioConfig) -> list[list[int]]:
    scenario = init_scenario(config)
    return cluster_nodes(scenario.nodes, config.num_clusters, substream(config.seed, "clustering"))


def train_agents(config: ScenarioConfig, fed: FederationConfig, dqn: DqnConfig, horizon: int,
                 clusters: Sequence[Sequence[int]] | None = None) -> list[DqnResult]:
    """Train one agent per cluster on that cluster alone; results are memoized."""
    scenario = init_scenario(config)
    if clusters is None:
        clusters = cluster_nodes(scenario.nodes, config.num_clusters, substream(config.seed, "clustering"))
    key = (config, fed, dqn, horizon, tuple(tuple(c) for c in clusters))
    if key not in _AGENT_CACHE:
        envs = make_cluster_envs(scenario, clusters, fed, horizon)
        _AGENT_CACHE[key] = [run_dqn_training(env, dqn, substream(config.seed, f"dqn{j}"))
                             for j, env in enumerate(envs)]
    return _AGENT_CACHE[key]


def clear_agent_cache() -> None:
    _AGENT_CACHE.clear()


# --- arms per figure -----------------------------------------------------------

def _fmt_num(v: float) -> str:
    return f"{v:g}"


def figure_arms(spec: ExperimentSpec) -> list[Arm]:
    ex = spec.experiment
    sc, fed, mode = spec.scenario, spec.federation, spec.mode
    kind = ex.kind
    if kind in ("run", "fig2_dqn_loss"):
        arms = []
        for pg in ex.p_good_sweep or (fed.channel.p_good,):
            for k in ex.cluster_sweep or (sc.num_clusters,):
                f = replace(fed, channel=replace(fed.channel, p_good=pg))
                arms.append(Arm(f"pg{_fmt_num(pg)}_k{k}", replace(sc, num_clusters=k), f, mode))
        return arms
    if kind == "fig3_dt_calibration":
        return [Arm("calibrated", sc, replace(fed, calibrated=True), mode),
                Arm("uncalibrated", sc, replace(fed, calibrated=False), mode)]
    if kind == "fig4_channel_aggregations":
        sweep = ex.p_good_sweep or (0.4, 0.6, 0.8)
        return [Arm(f"pg{_fmt_num(pg)}", sc, replace(fed, channel=replace(fed.channel, p_good=pg)), mode)
                for pg in sweep]
    if kind == "fig5_energy":
        names = ("good", "medium", "bad")
        return [Arm(names[s], sc, replace(fed, channel=replace(fed.channel, fixed_state=s)), mode)
                for s in range(3)]
    if kind in ("fig6_accuracy_vs_clusters", "fig7_time_to_accuracy"):
        sweep = ex.cluster_sweep or (1, 2, 4)
        return [Arm(f"k{k}", replace(sc, num_clusters=k), fed, mode) for k in sweep]
    if kind == "fig8_adaptive_vs_fixed":
        arms = [Arm("async_dqn", sc, fed, Mode("async_dqn"))]
        arms += [Arm(f"fixed{t}", sc, fed, Mode("async_fixed", t)) for t in ex.baseline_T]
        return arms
    raise ValueError(f"unknown experiment kind {kind!r}")


# --- single runs -------------------------------------------------------------

@dataclass
class RunOutput:
    arm: str
    seed: int
    files: dict[str, str]


def _agents_for(arm: Arm, spec: ExperimentSpec, seed: int) -> tuple[list[QNetwork] | None, list[DqnResult]]:
    if arm.mode.kind != "async_dqn" and spec.experiment.kind != "fig2_dqn_loss":
        return None, []
    results = train_agents(replace(arm.scenario, seed=seed), arm.federation, spec.dqn, spec.rounds)
    return [r.eval_net for r in results], results


def td_trace_csv(results: Sequence[DqnResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TD_COLUMNS)
    for j, res in enumerate(results):
        for r in res.records:
            w.writerow((j, r.episode, r.step, repr(float(r.epsilon)), repr(float(r.td_loss)), repr(float(r.reward))))
    return buf.getvalue()


def run_arm(arm: Arm, spec: ExperimentSpec, seed: int) -> RunOutput:
    """Run one arm for one seed and return its CSV files keyed by name."""
    config = replace(arm.scenario, seed=seed)
    agents, results = _agents_for(arm, spec, seed)
    name = f"{arm.label}_seed{seed}"
    if spec.experiment.kind == "fig2_dqn_loss":
        return RunOutput(arm.label, seed, {f"{name}.csv": td_trace_csv(results)})
    scenario = init_scenario(config)
    files = {}
    trace = None
    for ep in range(spec.experiment.eval_episodes):
        trace = run_federation(scenario, arm.mode, spec.rounds, arm.federation, agents=agents) if ep == 0 else \
            _continue(trace, scenario, arm, spec, agents, ep)
    files[f"{name}.csv"] = trace.to_csv()
    if spec.experiment.write_ledgers:
        for stem, text in write_trace_ledgers(trace).items():
            files[f"{name}.{stem}.csv"] = text
        if results:
            files[f"{name}.dqn.csv"] = td_trace_csv(results)
    return RunOutput(arm.label, seed, files)


def _continue(prev: MetricsTrace, scenario, arm: Arm, spec: ExperimentSpec, agents, episode: int) -> MetricsTrace:
    """Append another evaluation episode, with its own channel and training draws."""
    trace = run_federation(scenario, arm.mode, spec.rounds, arm.federation, agents=agents,
                           stream_prefix=f"eval{episode}/")
    offset = (prev.rows[-1][0] + 1) if prev.rows else 0
    t0 = prev.epochs[-1][1] if prev.epochs else 0.0
    rows = [(r[0] + offset, r[1] + t0) + tuple(r[2:]) for r in trace.rows]
    epochs = [(e + offset, t + t0, acc) for e, t, acc in trace.epochs]
    return MetricsTrace(prev.rows + rows, prev.epochs + epochs, trace.clusters, trace.final_params,
                        prev.envs + trace.envs)


# --- scalars and summaries -------------------------------------------------------

def _smoothed(values: np.ndarray, at: int, window: int = SMOOTH_WINDOW) -> float:
    lo = max(0, at - window // 2)
    chunk = values[lo:lo + window]
    return float(chunk.mean()) if len(chunk) else float("nan")


def td_ratio(losses: np.ndarray, early: int = 200, late: int = 1200, window: int = SMOOTH_WINDOW) -> float:
    """Windowed TD loss at ``late`` divided by that at ``early``; nan if the trace is too short."""
    if len(losses) < late + window // 2:
        return float("nan")
    return _smoothed(losses, late, window) / _smoothed(losses, early, window)


def run_scalars(kind: str, text: str, target_accuracy: float = 0.85) -> dict[str, float]:
    """Scalar metrics of one run, computed from its CSV text alone."""
    rows = list(csv.DictReader(io.StringIO(text)))
    if kind == "fig2_dqn_loss":
        out = {}
        ids = sorted({int(r["cluster_id"]) for r in rows})
        ratios = []
        for j in ids:
            losses = np.array([float(r["td_loss"]) for r in rows if int(r["cluster_id"]) == j])
            ratios.append(td_ratio(losses))
            out[f"td_ratio_c{j}"] = ratios[-1]
        out["td_ratio"] = float(np.median(ratios)) if ratios else float("nan")
        return out
    if not rows:
        return {"final_accuracy": float("nan"), "total_energy": 0.0, "time_to_target": float("inf"),
                "good_fraction": float("nan"), "aggregations": 0.0, "max_Q": 0.0}
    acc_by_round: dict[int, tuple[float, float]] = {}
    for r in rows:
        rnd = int(r["round"])
        t = float(r["simulated_time"])
        prev = acc_by_round.get(rnd)
        acc_by_round[rnd] = (max(t, prev[0]) if prev else t, float(r["global_accuracy"]))
    ordered = [acc_by_round[k] for k in sorted(acc_by_round)]
    ttt = next((t for t, acc in ordered if acc >= target_accuracy), float("inf"))
    states = [int(r["channel_state"]) for r in rows]
    return {
        "final_accuracy": ordered[-1][1],
        "total_energy": float(sum(float(r["E_cmp"]) + float(r["E_com"]) for r in rows)),
        "time_to_target": ttt,
        "good_fraction": float(np.mean([s == 0 for s in states])),
        "aggregations": float(len(rows)),
        "max_Q": float(max(float(r["Q"]) for r in rows)),
    }


def _quantile(sorted_vals: Sequence[float], p: float) -> float:
    # linear interpolation between order statistics; equal neighbours (e.g. two infs) short-circuit
    pos = (len(sorted_vals) - 1) * p
    lo = math.floor(pos)
    hi = min(lo + 1, len(sorted_vals) - 1)
    a, b = sorted_vals[lo], sorted_vals[hi]
    t = pos - lo
    if a == b or t == 0.0:
        return float(a)
    return float(a + (b - a) * t)


def _quartiles(values: Sequence[float]) -> tuple[float, float, float]:
    """``(median, q1, q3)``; nan if any value is nan, and unreached targets (inf) order last."""
    if any(math.isnan(v) for v in values):
        return math.nan, math.nan, math.nan
    ordered = sorted(float(v) for v in values)
    return _quantile(ordered, 0.5), _quantile(ordered, 0.25), _quantile(ordered, 0.75)


def summarize(kind: str, runs: Sequence[tuple[str, int, str]], target_accuracy: float) -> str:
    """Summary CSV from ``(arm, seed, run csv text)`` triples, arms in first-seen order."""
    arms: dict[str, list[dict[str, float]]] = {}
    for arm, _, text in runs:
        arms.setdefault(arm, []).append(run_scalars(kind, text, target_accuracy))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for arm, scalars in arms.items():
        for metric in scalars[0]:
            vals = [s[metric] for s in scalars]
            med, q1, q3 = _quartiles(vals)
            w.writerow((arm, metric, len(vals), repr(med), repr(q1), repr(q3)))
    return buf.getvalue()


def read_summary(text: str) -> dict[tuple[str, str], float]:
    return {(r["arm"], r["metric"]): float(r["median"]) for r in csv.DictReader(io.StringIO(text))}


# --- orchestration -----------------------------------------------------------

def _job(args) -> RunOutput:
    arm, spec, seed = args
    return run_arm(arm, spec, seed)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("DTFL_THREADS", "1")))
    except ValueError:
        return 1


def run_experiment(spec: ExperimentSpec, seed: int | None = None, out_dir: str | Path | None = None) -> Path:
    """Run every (arm, seed) pair of ``spec`` and write ``runs/*.csv`` and ``summary.csv``.

    Output goes to ``<out>/<kind>/``. Files are staged in a temporary
    directory and moved into place only when every run succeeded.
    """
    spec.validate()
    base_seed = spec.scenario.seed if seed is None else seed
    seeds = [base_seed + i for i in range(spec.repeats)]
    arms = figure_arms(spec)
    jobs = [(arm, spec, s) for arm in arms for s in seeds]
    root = Path(out_dir) if out_dir is not None else spec.output_dir
    root.mkdir(parents=True, exist_ok=True)
    final = root / spec.experiment.kind
    stage = Path(tempfile.mkdtemp(prefix=f".{spec.experiment.kind}-", dir=root))
    try:
        workers = min(_workers(), len(jobs))
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                outputs = list(pool.map(_job, jobs))
        else:
            outputs = [_job(j) for j in jobs]
        (stage / "runs").mkdir()
        runs = []
        for out in outputs:
            for fname, text in out.files.items():
                (stage / "runs" / fname).write_text(text)
            main = f"{out.arm}_seed{out.seed}.csv"
            runs.append((out.arm, out.seed, out.files[main]))
        (stage / "summary.csv").write_text(summarize(spec.experiment.kind, runs, spec.experiment.target_accuracy))
        if final.exists():
            shutil.rmtree(final)
        stage.rename(final)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    return final


def median_over_seeds(values: Sequence[float]) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64))) if len(values) else math.nan
