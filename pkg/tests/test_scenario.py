"""Scenario file loading, schema errors, and the bundled scenario set."""

import json
from pathlib import Path

import pytest

from roadflow.errors import SchemaError
from roadflow.scenario import (KINDS, _parse_link, build_profile,
                               load_scenario, validate_scenario)

SCENARIO_DIR = Path(__file__).resolve().parents[1] / "scenarios"


def write(tmp_path, payload, name="s.json"):
    p = tmp_path / name
    p.write_text(json.dumps(payload) if not isinstance(payload, str)
                 else payload)
    return p


def minimal_simulate(**overrides):
    doc = {
        "kind": "simulate",
        "seed": 0,
        "network": {"links": [{"tail": 0, "head": 1}]},
        "laws": {"kind": "constant", "speed": 1.0},
        "horizon": 1.0,
        "grid": {"cells": 16},
        "commodities": [{"destination": 1}],
        "cases": [{"name": "base",
                   "sources": [{"node": 0, "link": [0, 1], "commodity": 0,
                                "segments": [[0.0, 0.5, 1.0]]}]}],
    }
    doc.update(overrides)
    return doc


def test_load_errors(tmp_path):
    with pytest.raises(SchemaError, match="cannot read"):
        load_scenario(tmp_path / "missing.json")
    with pytest.raises(SchemaError, match="not valid JSON"):
        load_scenario(write(tmp_path, "{nope"))
    with pytest.raises(SchemaError, match="top level"):
        load_scenario(write(tmp_path, [1, 2]))
    with pytest.raises(SchemaError, match="kind"):
        load_scenario(write(tmp_path, {"seed": 0}))
    with pytest.raises(SchemaError, match="kind"):
        load_scenario(write(tmp_path, {"kind": "teleport", "seed": 0}))
    with pytest.raises(SchemaError, match="seed"):
        load_scenario(write(tmp_path, {"kind": "simulate", "seed": -1}))
    with pytest.raises(SchemaError, match="seed"):
        load_scenario(write(tmp_path, {"kind": "simulate", "seed": True}))
    # a missing seed defaults to zero instead of failing
    assert load_scenario(write(tmp_path, {"kind": "simulate"})).seed == 0


def test_valid_scenario_loads(tmp_path):
    sc = load_scenario(write(tmp_path, minimal_simulate()))
    assert sc.kind == "simulate"
    assert sc.seed == 0
    validate_scenario(sc)       # raises SchemaError on any defect


def test_error_messages_carry_field_paths(tmp_path):
    doc = minimal_simulate(grid={"cells": "many"})
    with pytest.raises(SchemaError, match=r"grid\.cells"):
        validate_scenario(load_scenario(write(tmp_path, doc)))
    doc = minimal_simulate(horizon=-2.0)
    with pytest.raises(SchemaError, match="horizon"):
        validate_scenario(load_scenario(write(tmp_path, doc)))
    doc = minimal_simulate()
    del doc["laws"]
    with pytest.raises(SchemaError, match="laws"):
        validate_scenario(load_scenario(write(tmp_path, doc)))


def test_link_forms():
    assert _parse_link([0, 1], "p") == (0, 1)
    assert _parse_link("2-3", "p") == (2, 3)
    for bad in ("2:3", [0], [0, 1, 2], "a-b", 7, [0.5, 1]):
        with pytest.raises(SchemaError):
            _parse_link(bad, "p")


def test_profile_forms():
    assert build_profile(2.5, "p") == 2.5
    slab = build_profile({"kind": "slab", "height": 4.0,
                          "lo": 0.5, "hi": 0.7}, "p")
    assert slab(0.6) == 4.0 and slab(0.4) == 0.0 and slab(0.7) == 0.0
    bump = build_profile({"kind": "bump", "lo": 1.0, "hi": 2.6,
                          "scale": 1.0}, "p")
    assert bump(1.0) == 0.0 and bump(2.6) == 0.0
    assert bump(1.8) == pytest.approx((2.6 - 1.8) * (1.8 - 1.0))
    with pytest.raises(SchemaError):
        build_profile({"kind": "slab", "height": 1.0,
                       "lo": 0.7, "hi": 0.5}, "p")
    with pytest.raises(SchemaError):
        build_profile({"kind": "mesa", "height": 1.0}, "p")
    with pytest.raises(SchemaError):
        build_profile("tall", "p")


def test_unknown_law_and_uncovered_links(tmp_path):
    doc = minimal_simulate(laws={"kind": "warp", "speed": 1.0})
    with pytest.raises(SchemaError, match="law kind"):
        validate_scenario(load_scenario(write(tmp_path, doc)))
    doc = minimal_simulate(
        network={"links": [{"tail": 0, "head": 1}, {"tail": 1, "head": 2}]},
        laws={"0-1": {"kind": "constant", "speed": 1.0}},
        commodities=[{"destination": 2}])
    with pytest.raises(SchemaError, match="without a law"):
        validate_scenario(load_scenario(write(tmp_path, doc)))


def test_case_name_rules(tmp_path):
    doc = minimal_simulate()
    doc["cases"] = [dict(doc["cases"][0], name="a b")]
    with pytest.raises(SchemaError, match="separators"):
        validate_scenario(load_scenario(write(tmp_path, doc)))
    doc = minimal_simulate()
    doc["cases"] = [doc["cases"][0], dict(doc["cases"][0])]
    with pytest.raises(SchemaError, match="duplicate case"):
        validate_scenario(load_scenario(write(tmp_path, doc)))


def test_split_row_sums_checked(tmp_path):
    doc = minimal_simulate(
        network={"links": [{"tail": 0, "head": 1}, {"tail": 1, "head": 2},
                           {"tail": 1, "head": 3}]},
        commodities=[{"destination": 2}],
        splits={"1": {"1-2": 0.6, "1-3": 0.6}})
    with pytest.raises(SchemaError, match="sums to"):
        validate_scenario(load_scenario(write(tmp_path, doc)))
    doc["splits"] = {"1": {"1-2": 0.6, "9-9": 0.4}}
    with pytest.raises(SchemaError, match="not in the network"):
        validate_scenario(load_scenario(write(tmp_path, doc)))


def equilibrium_doc(**overrides):
    doc = {
        "kind": "equilibrium", "seed": 0,
        "network": {"links": [{"tail": 0, "head": 1},
                              {"tail": 1, "head": 2}]},
        "laws": {"kind": "constant", "speed": 1.0},
        "horizon": 4.0,
        "grid": {"cells": 16},
        "entry_link": [0, 1],
        "destination": 2,
        "demand_segments": [[0.0, 1.0, 1.0]],
        "alpha": 0.5,
        "rounds": 2,
        "base_splits": {"1": {"1-2": 1.0}},
        "routed_policy": {"kind": "full_information", "beta": 2.0},
        "non_routed_policy": {"kind": "static"},
    }
    doc.update(overrides)
    return doc


def test_equilibrium_policy_kinds_enforced(tmp_path):
    validate_scenario(load_scenario(write(tmp_path, equilibrium_doc())))
    doc = equilibrium_doc(routed_policy={"kind": "static"})
    with pytest.raises(SchemaError, match="routed policy"):
        validate_scenario(load_scenario(write(tmp_path, doc)))
    doc = equilibrium_doc(
        non_routed_policy={"kind": "full_information", "beta": 2.0})
    with pytest.raises(SchemaError, match="non-routed"):
        validate_scenario(load_scenario(write(tmp_path, doc)))
    doc = equilibrium_doc(alpha=1.5)
    with pytest.raises(SchemaError, match="alpha"):
        validate_scenario(load_scenario(write(tmp_path, doc)))
    doc = equilibrium_doc(entry_link=[5, 6])
    with pytest.raises(SchemaError, match="entry_link"):
        validate_scenario(load_scenario(write(tmp_path, doc)))


def test_kind_specific_payload_mismatch(tmp_path):
    doc = equilibrium_doc()
    doc["kind"] = "simulate"
    with pytest.raises(SchemaError):
        validate_scenario(load_scenario(write(tmp_path, doc)))


def test_bundled_scenarios_all_validate():
    paths = sorted(SCENARIO_DIR.glob("*.json"))
    assert len(paths) >= 6
    kinds = set()
    for p in paths:
        sc = load_scenario(p)
        validate_scenario(sc)
        kinds.add(sc.kind)
    # the bundle exercises every scenario kind
    assert kinds == set(KINDS)
