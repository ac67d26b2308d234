import copy
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bendml.cases import BUNDLED, bundled, bundled_path, random_instance, thirteen_node_tree
from bendml.instance import (HOURS_PER_YEAR, Block, ParseError, ValidationError, ancestors, build_tree,
                             dumps, from_dict, leaf_path_probability, load_instance, loads, replace_blocks,
                             replace_tree, save_instance, subproblem_index, to_dict)


def minimal_dict():
    return {
        "schema": 1,
        "name": "two-bus",
        "buses": [{"id": 0, "base_demand_peak": 0.0}, {"id": 1, "base_demand_peak": 50.0}],
        "lines": [{"id": 0, "from_bus": 0, "to_bus": 1, "susceptance": 10.0, "capacity0": 100.0,
                   "length": 20.0, "reinforceable": False, "max_added_capacity": 0.0}],
        "generators": [{"id": 0, "bus": 0, "capacity": 100.0, "marginal_cost": 20.0,
                        "is_renewable": False, "profile_key": None}],
        "storage_candidates": [],
        "costs": {"line_fixed_annual": 1.0, "line_variable_annual": 1.0, "bes_annual": 1.0, "voll": 1000.0,
                  "line_lead_stages": 1, "bes_lead_stages": 0},
        "tree": [{"id": 0, "stage": 0, "parent": None, "probability": 1.0, "demand_scale": 1.0,
                  "stage_years": 10.0, "generator_scale": 1.0}],
        "blocks": [{"id": 0, "hours_per_year": 8760.0, "steps": 1, "step_hours": 8760.0,
                    "demand_profile": [1.0], "renewable_profiles": {}}],
    }


def three_node_dict(p1=0.4, p2=0.6):
    d = minimal_dict()
    d["tree"] += [
        {"id": 1, "stage": 1, "parent": 0, "probability": p1, "demand_scale": 1.1, "stage_years": 10.0,
         "generator_scale": 1.0},
        {"id": 2, "stage": 1, "parent": 0, "probability": p2, "demand_scale": 1.2, "stage_years": 10.0,
         "generator_scale": 1.0},
    ]
    return d


def test_minimal_instance(tmp_path):
    path = tmp_path / "min.json"
    path.write_text(json.dumps(minimal_dict()))
    inst = load_instance(path)
    assert len(inst.tree_nodes) == 1
    assert inst.n_buses == 2
    assert subproblem_index(inst) == [(0, 0)]


def test_probability_violation_named(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(three_node_dict(0.4, 0.5)))
    with pytest.raises(ValidationError, match="probability"):
        load_instance(path)


def test_root_probability_must_be_one():
    d = minimal_dict()
    d["tree"][0]["probability"] = 0.9
    with pytest.raises(ValidationError, match="probability"):
        from_dict(d)


@pytest.mark.parametrize("mutate, word", [
    (lambda d: d["lines"][0].update(to_bus=0), "line"),
    (lambda d: d["lines"][0].update(susceptance=0.0), "susceptance"),
    (lambda d: d["lines"][0].update(max_added_capacity=5.0), "max_added_capacity"),
    (lambda d: d["generators"][0].update(marginal_cost=5000.0), "voll"),
    (lambda d: d["generators"][0].update(is_renewable=True), "profile_key"),
    (lambda d: d["blocks"][0].update(hours_per_year=9000.0), "hours"),
    (lambda d: d["buses"][1].update(id=3), "ids"),
    (lambda d: d["generators"][0].update(bus=7), "bus"),
])
def test_validation_errors_name_the_invariant(mutate, word):
    d = minimal_dict()
    mutate(d)
    with pytest.raises(ValidationError, match=word):
        from_dict(d)


def test_disconnected_network_rejected():
    d = minimal_dict()
    d["buses"].append({"id": 2, "base_demand_peak": 0.0})
    with pytest.raises(ValidationError, match="connect"):
        from_dict(d)


def test_parse_errors(tmp_path):
    with pytest.raises(ParseError):
        loads("{not json")
    d = minimal_dict()
    del d["schema"]
    with pytest.raises(ParseError):
        from_dict(d)
    d = minimal_dict()
    del d["buses"]
    with pytest.raises(ParseError):
        from_dict(d)
    with pytest.raises(ParseError):
        load_instance(tmp_path / "missing.json")


def test_bundled_thirteen_node():
    inst = load_instance(bundled_path("ieee24_13node.json"))
    assert inst.n_buses == 24
    assert len(inst.tree_nodes) == 13
    assert len(inst.blocks) == 4
    assert len(inst.leaves) == 6
    assert len(subproblem_index(inst)) == 52


@pytest.mark.parametrize("name", sorted(BUNDLED))
def test_bundled_files_match_generators(name):
    assert bundled(name) == BUNDLED[name]()


def test_ancestors_fixtures():
    inst = from_dict(three_node_dict())
    assert ancestors(inst, 0) == [0]
    assert ancestors(inst, 2) == [0, 2]
    with pytest.raises(KeyError):
        ancestors(inst, 5)
    chain = replace_tree(inst, build_tree([1, 1, 1]))
    assert ancestors(chain, 3) == [0, 1, 2, 3]


@pytest.mark.parametrize("seed", range(6))
def test_ancestors_against_parent_links(seed):
    inst = random_instance(seed)
    for node in inst.tree_nodes:
        path = ancestors(inst, node.id)
        assert len(path) == node.stage + 1
        expect, m = [], node.id
        while m is not None:
            expect.append(m)
            m = inst.tree_nodes[m].parent
        assert path == expect[::-1]


def test_subproblem_index_counts():
    base = bundled("ieee24_13node.json")
    assert len(subproblem_index(base)) == 52
    # 1 + 2 + 6 + 18 nodes
    tree27 = build_tree([2, 3, 3], stage_years=10.0)
    assert len(tree27) == 27
    inst = replace_tree(base, tree27)
    pairs = subproblem_index(inst)
    assert len(pairs) == 108
    assert pairs == sorted(pairs)
    one = replace_blocks(replace_tree(base, build_tree([])), base.blocks[:1])
    assert subproblem_index(one) == [(0, 0)]


@pytest.mark.parametrize("name", sorted(BUNDLED))
def test_round_trip_bit_exact(tmp_path, name):
    inst = bundled(name)
    path = tmp_path / name
    save_instance(inst, path)
    text = path.read_text()
    again = load_instance(path)
    assert again == inst
    assert dumps(again) == text


def test_to_dict_is_canonical():
    d = minimal_dict()
    shuffled = dict(reversed(list(d.items())))
    assert dumps(from_dict(d)) == dumps(from_dict(shuffled))


def test_demand_formula():
    inst = from_dict(three_node_dict())
    blk = inst.blocks[0]
    np.testing.assert_allclose(inst.demand(2, 0)[1], 50.0 * 1.2 * np.asarray(blk.demand_profile))


def test_block_hours_limit(tiny):
    blk = tiny.blocks[0]
    big = Block(0, HOURS_PER_YEAR, blk.steps, blk.step_hours, blk.demand_profile, blk.renewable_profiles)
    with pytest.raises(ValidationError):
        replace_blocks(tiny, [big, Block(1, 1.0, blk.steps, blk.step_hours, blk.demand_profile,
                                         blk.renewable_profiles)])


def test_capacity_factor_range(tiny):
    d = copy.deepcopy(to_dict(tiny))
    d["blocks"][0]["renewable_profiles"]["wind"][0] = 1.5
    with pytest.raises(ValidationError):
        from_dict(d)


def test_thirteen_node_shape():
    nodes = thirteen_node_tree()
    assert len(nodes) == 13
    assert max(n.stage for n in nodes) == 3


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 3), min_size=0, max_size=3), st.data())
def test_path_probabilities(branching, data):
    probs = []
    for k in branching:
        w = data.draw(st.lists(st.floats(0.05, 1.0), min_size=k, max_size=k))
        probs.append([x / sum(w) for x in w])
    nodes = build_tree(branching, branch_probs=probs or None)
    inst = replace_tree(bundled("tiny.json"), nodes)
    leaves = inst.leaves
    assert abs(sum(inst.tree_nodes[m].probability for m in leaves) - 1.0) <= 1e-9
    for m in leaves:
        path = ancestors(inst, m)
        prod = 1.0
        for s, (a, b) in enumerate(zip(path, path[1:])):
            prod *= probs[s][inst.children[a].index(b)]
        assert abs(inst.tree_nodes[m].probability - prod) <= 1e-12
        assert abs(leaf_path_probability(inst, m) - prod) <= 1e-9
