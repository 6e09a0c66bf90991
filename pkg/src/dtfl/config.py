"""Line-oriented ``section.key = value`` experiment configuration."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .core import ScenarioConfig
from .dqn import DqnConfig
from .energy import ChannelConfig, EnergyModel
from .errors import BadConfig, ParseError, UnknownKey
from .federation import FederationConfig, Mode, ToleranceSchedule
from .lyapunov import PenaltyWeights

FIGURE_KINDS = (
    "run",
    "fig2_dqn_loss",
    "fig3_dt_calibration",
    "fig4_channel_aggregations",
    "fig5_energy",
    "fig6_accuracy_vs_clusters",
    "fig7_time_to_accuracy",
    "fig8_adaptive_vs_fixed",
)


@dataclass(frozen=True)
class ExperimentOptions:
    kind: str = "run"
    mode: str = "async_dqn"
    repeats: int = 3
    rounds: int = 0
    output_dir: str = "out"
    p_good_sweep: tuple[float, ...] = ()
    cluster_sweep: tuple[int, ...] = ()
    baseline_T: tuple[int, ...] = (1, 5, 10)
    target_accuracy: float = 0.85
    eval_episodes: int = 1
    write_ledgers: bool = False


@dataclass(frozen=True)
class ExperimentSpec:
    scenario: ScenarioConfig = ScenarioConfig()
    federation: FederationConfig = FederationConfig()
    dqn: DqnConfig = DqnConfig()
    experiment: ExperimentOptions = ExperimentOptions()

    @property
    def mode(self) -> Mode:
        return Mode.parse(self.experiment.mode)

    @property
    def rounds(self) -> int:
        return self.experiment.rounds or self.scenario.rounds_max

    @property
    def repeats(self) -> int:
        return self.experiment.repeats

    @property
    def output_dir(self) -> Path:
        return Path(self.experiment.output_dir)

    def validate(self) -> None:
        self.scenario.validate()
        ex = self.experiment
        if ex.kind not in FIGURE_KINDS:
            raise BadConfig(f"unknown experiment kind {ex.kind!r}")
        if ex.repeats < 1:
            raise BadConfig("repeats must be at least 1")
        if ex.rounds < 0:
            raise BadConfig("rounds must be non-negative (0 means scenario.rounds_max)")
        try:
            self.mode
        except ValueError as exc:
            raise BadConfig(str(exc)) from exc
        if any(not 0.0 <= p <= 1.0 for p in ex.p_good_sweep):
            raise BadConfig("p_good sweep values must lie in [0, 1]")
        if any(not 1 <= k <= self.scenario.num_nodes for k in ex.cluster_sweep):
            raise BadConfig("cluster sweep values must lie in [1, num_nodes]")
        if any(t < 1 for t in ex.baseline_T):
            raise BadConfig("baseline frequencies must be at least 1")
        if ex.eval_episodes < 1:
            raise BadConfig("eval_episodes must be at least 1")


# section name -> (path of attribute names from the ExperimentSpec root)
SECTIONS: dict[str, tuple[str, ...]] = {
    "scenario": ("scenario",),
    "federation": ("federation",),
    "tolerance": ("federation", "tolerance"),
    "penalty": ("federation", "penalty"),
    "energy": ("federation", "energy"),
    "channel": ("federation", "channel"),
    "dqn": ("dqn",),
    "experiment": ("experiment",),
}


def _get(obj, path):
    for name in path:
        obj = getattr(obj, name)
    return obj


def _set(obj, path, key, value):
    if not path:
        return replace(obj, **{key: value})
    head, rest = path[0], path[1:]
    return replace(obj, **{head: _set(getattr(obj, head), rest, key, value)})


def _scalar_fields(obj) -> dict[str, typing.Any]:
    hints = typing.get_type_hints(type(obj))
    return {f.name: hints[f.name] for f in fields(obj) if not dataclasses.is_dataclass(getattr(obj, f.name))}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(text: str, tp):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if text.lower() in ("none", ""):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _convert(text, inner)
    if origin is tuple:
        items = [t.strip() for t in text.split(",") if t.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(t, args[0]) for t in items)
        if len(items) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values")
        return tuple(_convert(t, a) for t, a in zip(items, args))
    if tp is bool:
        return _parse_bool(text)
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    if tp is str:
        return text
    raise ValueError(f"unsupported field type {tp}")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, base: ExperimentSpec | None = None) -> ExperimentSpec:
    """Apply ``section.key = value`` lines on top of ``base`` (defaults if omitted)."""
    spec = base if base is not None else ExperimentSpec()
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'section.key = value', got {raw.strip()!r}", lineno)
        lhs, rhs = (s.strip() for s in line.split("=", 1))
        if "." not in lhs:
            raise ParseError(f"key {lhs!r} lacks a section prefix", lineno)
        section, key = lhs.split(".", 1)
        if section not in SECTIONS:
            raise UnknownKey(f"unknown section {section!r}", lineno)
        path = SECTIONS[section]
        target = _get(spec, path)
        types = _scalar_fields(target)
        if key not in types:
            raise UnknownKey(f"unknown key {lhs!r}", lineno)
        if lhs in seen:
            raise ParseError(f"{lhs} already set on line {seen[lhs]}", lineno)
        seen[lhs] = lineno
        try:
            value = _convert(rhs, types[key])
            spec = _set(spec, path, key, value)
        except (ValueError, TypeError) as exc:
            raise ParseError(f"bad value for {lhs}: {exc}", lineno) from exc
    return spec


def parse_config(path: str | Path) -> ExperimentSpec:
    return parse_config_text(Path(path).read_text())


def dump_config(spec: ExperimentSpec | None = None) -> str:
    """Every key with its value, in a form :func:`parse_config_text` reads back."""
    spec = spec if spec is not None else ExperimentSpec()
    lines = []
    for section, path in SECTIONS.items():
        lines.append(f"# [{section}]")
        target = _get(spec, path)
        for name in _scalar_fields(target):
            lines.append(f"{section}.{name} = {_format(getattr(target, name))}")
        lines.append("")
    return "\n".join(lines)
