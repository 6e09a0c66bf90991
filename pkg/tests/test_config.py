from __future__ import annotations

from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from dtfl.config import ExperimentSpec, dump_config, parse_config, parse_config_text
from dtfl.errors import BadConfig, ParseError, UnknownKey


def test_empty_text_gives_defaults():
    assert parse_config_text("") == ExperimentSpec()
    assert parse_config_text("# only a comment\n\n") == ExperimentSpec()


def test_values_are_applied():
    spec = parse_config_text("scenario.num_nodes = 12\nchannel.p_good = 0.7  # trailing\n"
                             "experiment.baseline_T = 2, 4\nexperiment.write_ledgers = yes\n"
                             "tolerance.alpha0 = 0.25\n")
    assert spec.scenario.num_nodes == 12
    assert spec.federation.channel.p_good == 0.7
    assert spec.experiment.baseline_T == (2, 4)
    assert spec.experiment.write_ledgers is True
    assert spec.federation.tolerance.alpha0 == 0.25


def test_too_many_clusters_rejected_at_validation():
    spec = parse_config_text("scenario.num_nodes = 20\nscenario.num_clusters = 30\n")
    with pytest.raises(BadConfig):
        spec.validate()


@pytest.mark.parametrize("text, line", [
    ("scenario.num_nodes = 3\nnot a pair\n", 2),
    ("scenario.num_nodes = three\n", 1),
    ("\n\nnum_nodes = 3\n", 3),
])
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(ParseError) as info:
        parse_config_text(text)
    assert info.value.line == line
    assert f"line {line}" in str(info.value)


def test_unknown_key_and_section():
    with pytest.raises(UnknownKey) as info:
        parse_config_text("scenario.num_nodes = 3\nscenario.bogus = 1\n")
    assert info.value.line == 2
    with pytest.raises(UnknownKey):
        parse_config_text("nowhere.x = 1\n")


def test_duplicate_key_rejected():
    with pytest.raises(ParseError) as info:
        parse_config_text("dqn.lr = 0.1\ndqn.lr = 0.2\n")
    assert info.value.line == 2


def test_dump_round_trip():
    assert parse_config_text(dump_config()) == ExperimentSpec()
    spec = parse_config_text("scenario.seed = 7\nexperiment.mode = sync_fixed(5)\nchannel.fixed_state = 2\n"
                             "experiment.p_good_sweep = 0.4, 0.8\n")
    assert parse_config_text(dump_config(spec)) == spec


@given(st.floats(0.0, 1.0, allow_nan=False), st.integers(1, 100), st.floats(1e-6, 1e3))
def test_dump_round_trip_property(p_good, nodes, lr):
    base = ExperimentSpec()
    spec = replace(base, scenario=replace(base.scenario, num_nodes=nodes),
                   federation=replace(base.federation, channel=replace(base.federation.channel, p_good=p_good)),
                   dqn=replace(base.dqn, lr=lr))
    assert parse_config_text(dump_config(spec)) == spec


def test_parse_config_reads_file(tmp_path):
    path = tmp_path / "x.cfg"
    path.write_text("scenario.num_nodes = 5\n")
    assert parse_config(path).scenario.num_nodes == 5


def test_bad_mode_rejected_at_validation():
    with pytest.raises(BadConfig):
        parse_config_text("experiment.mode = never\n").validate()
