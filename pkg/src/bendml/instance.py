"""Problem data for multi-stage stochastic transmission expansion planning.

An :class:`Instance` bundles the network, the investment candidates, the
scenario tree and the representative operating blocks.  Instances are
immutable once loaded and are validated eagerly: every invariant violation
raises :class:`ValidationError` naming the offending record.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

SCHEMA_VERSION = 1
HOURS_PER_YEAR = 8760.0
DEFAULT_HORIZON_YEARS = 40.0
PROB_TOL = 1e-9


class InstanceError(ValueError):
    pass


class ParseError(InstanceError):
    pass


class ValidationError(InstanceError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    base_demand_peak: float


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    susceptance: float
    capacity0: float
    length: float
    reinforceable: bool = False
    max_added_capacity: float = 0.0

    @property
    def is_candidate(self) -> bool:
        """New corridor: no flow (and no angle coupling) until built."""
        return self.reinforceable and self.capacity0 == 0.0


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    capacity: float
    marginal_cost: float
    is_renewable: bool = False
    profile_key: str | None = None


@dataclass(frozen=True)
class StorageCandidate:
    id: int
    bus: int
    duration_hours: float
    efficiency: float
    max_power: float


@dataclass(frozen=True)
class CostData:
    line_fixed_annual: float
    line_variable_annual: float
    bes_annual: float
    voll: float
    line_lead_stages: int = 1
    bes_lead_stages: int = 0


@dataclass(frozen=True)
class TreeNode:
    id: int
    stage: int
    parent: int | None
    probability: float
    demand_scale: float | tuple[float, ...] = 1.0
    stage_years: float = 10.0
    generator_scale: float = 1.0


@dataclass(frozen=True)
class Block:
    id: int
    hours_per_year: float
    steps: int
    step_hours: float
    demand_profile: tuple  # length T, or one length-T series per bus
    renewable_profiles: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class Instance:
    name: str
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    storage_candidates: tuple[StorageCandidate, ...]
    cost_data: CostData
    tree_nodes: tuple[TreeNode, ...]
    blocks: tuple[Block, ...]

    def __post_init__(self):
        validate(self)

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return to_dict(self) == to_dict(other)

    __hash__ = object.__hash__

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_stages(self) -> int:
        return max(n.stage for n in self.tree_nodes) + 1

    @cached_property
    def children(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {n.id: [] for n in self.tree_nodes}
        for n in self.tree_nodes:
            if n.parent is not None:
                out[n.parent].append(n.id)
        return out

    @cached_property
    def root(self) -> int:
        return next(n.id for n in self.tree_nodes if n.parent is None)

    @cached_property
    def leaves(self) -> list[int]:
        return [m for m, ch in self.children.items() if not ch]

    @cached_property
    def stage_start_years(self) -> list[float]:
        """Calendar start of each stage; the last entry is the horizon end."""
        years = [0.0]
        for s in range(self.n_stages):
            dur = next(n.stage_years for n in self.tree_nodes if n.stage == s)
            years.append(years[-1] + dur)
        return years

    @property
    def horizon_years(self) -> float:
        return self.stage_start_years[-1]

    @cached_property
    def reinforceable_lines(self) -> list[int]:
        return [ln.id for ln in self.lines if ln.reinforceable]

    def demand(self, m: int, b: int) -> np.ndarray:
        """Demand per bus and step, shape (n_buses, T)."""
        node = self.tree_nodes[m]
        blk = self.blocks[b]
        peak = np.array([bus.base_demand_peak for bus in self.buses])
        scale = np.broadcast_to(np.asarray(node.demand_scale, dtype=float), peak.shape)
        prof = np.asarray(blk.demand_profile, dtype=float)
        if prof.ndim == 1:
            prof = np.broadcast_to(prof, (self.n_buses, blk.steps))
        return (peak * scale)[:, None] * prof

    def capacity_factor(self, gen: Generator, b: int) -> np.ndarray:
        blk = self.blocks[b]
        if not gen.is_renewable:
            return np.ones(blk.steps)
        return np.asarray(blk.renewable_profiles[gen.profile_key], dtype=float)


def ancestors(instance: Instance, m: int) -> list[int]:
    """Node ids on the path root..m, inclusive."""
    if not 0 <= m < len(instance.tree_nodes):
        raise KeyError(f"unknown tree node {m}")
    path = [m]
    while instance.tree_nodes[path[-1]].parent is not None:
        path.append(instance.tree_nodes[path[-1]].parent)
    return path[::-1]


def subproblem_index(instance: Instance) -> list[tuple[int, int]]:
    return [(n.id, b.id) for n in instance.tree_nodes for b in instance.blocks]


# ---------------------------------------------------------------------------
# validation

def _fail(what: str, record: str, detail: str):
    raise ValidationError(f"{what}: {record}: {detail}")


def _check_ids(records: Sequence, kind: str):
    for pos, rec in enumerate(records):
        if rec.id != pos:
            _fail("ids", f"{kind} {rec.id}", f"ids must be unique and contiguous from 0 (position {pos})")


def validate(inst: Instance):
    _check_ids(inst.buses, "bus")
    _check_ids(inst.lines, "line")
    _check_ids(inst.generators, "generator")
    _check_ids(inst.storage_candidates, "storage")
    _check_ids(inst.tree_nodes, "node")
    _check_ids(inst.blocks, "block")
    nb = len(inst.buses)
    if nb == 0:
        _fail("buses", "instance", "at least one bus required")

    for bus in inst.buses:
        if not bus.base_demand_peak >= 0:
            _fail("demand", f"bus {bus.id}", "base_demand_peak must be >= 0")

    for ln in inst.lines:
        rec = f"line {ln.id}"
        if not (0 <= ln.from_bus < nb and 0 <= ln.to_bus < nb):
            _fail("reference", rec, "unknown bus")
        if ln.from_bus == ln.to_bus:
            _fail("topology", rec, "from_bus equals to_bus")
        if not ln.susceptance > 0:
            _fail("susceptance", rec, "must be > 0")
        if not ln.capacity0 >= 0:
            _fail("capacity", rec, "capacity0 must be >= 0")
        if not ln.length >= 0:
            _fail("length", rec, "must be >= 0")
        if not ln.max_added_capacity >= 0:
            _fail("capacity", rec, "max_added_capacity must be >= 0")
        if not ln.reinforceable and ln.max_added_capacity != 0:
            _fail("capacity", rec, "max_added_capacity must be 0 when not reinforceable")

    costs = inst.cost_data
    for name in ("line_fixed_annual", "line_variable_annual", "bes_annual", "voll"):
        if not getattr(costs, name) >= 0:
            _fail("cost", "costs", f"{name} must be >= 0")
    for name in ("line_lead_stages", "bes_lead_stages"):
        v = getattr(costs, name)
        if not (isinstance(v, int) and v >= 0):
            _fail("cost", "costs", f"{name} must be a nonnegative integer")

    for g in inst.generators:
        rec = f"generator {g.id}"
        if not 0 <= g.bus < nb:
            _fail("reference", rec, "unknown bus")
        if not g.capacity >= 0:
            _fail("capacity", rec, "must be >= 0")
        if not g.marginal_cost >= 0:
            _fail("cost", rec, "marginal_cost must be >= 0")
        if not costs.voll > g.marginal_cost:
            _fail("voll", rec, "voll must exceed every generator marginal cost")
        if g.is_renewable != (g.profile_key is not None):
            _fail("profile", rec, "profile_key required iff renewable")

    for st in inst.storage_candidates:
        rec = f"storage {st.id}"
        if not 0 <= st.bus < nb:
            _fail("reference", rec, "unknown bus")
        if not st.duration_hours > 0:
            _fail("storage", rec, "duration_hours must be > 0")
        if not 0 < st.efficiency <= 1:
            _fail("storage", rec, "efficiency must lie in (0, 1]")
        if not st.max_power >= 0:
            _fail("storage", rec, "max_power must be >= 0")

    _validate_tree(inst)
    _validate_blocks(inst)
    _validate_connectivity(inst)


def _validate_tree(inst: Instance):
    nodes = inst.tree_nodes
    if not nodes:
        _fail("tree", "tree", "at least one node required")
    roots = [n for n in nodes if n.parent is None]
    if len(roots) != 1:
        _fail("tree", "tree", f"exactly one root required, found {len(roots)}")
    nb = len(inst.buses)
    kids: dict[int, list[TreeNode]] = {n.id: [] for n in nodes}
    for n in nodes:
        rec = f"node {n.id}"
        if n.parent is None:
            if n.stage != 0:
                _fail("tree", rec, "root must be at stage 0")
            if abs(n.probability - 1.0) > PROB_TOL:
                _fail("probability", rec, "root probability must be 1")
        else:
            if not 0 <= n.parent < len(nodes):
                _fail("reference", rec, "unknown parent")
            if nodes[n.parent].stage != n.stage - 1:
                _fail("tree", rec, "parent stage must be stage - 1")
            kids[n.parent].append(n)
        if not 0 <= n.probability <= 1 + PROB_TOL:
            _fail("probability", rec, "must lie in [0, 1]")
        scale = np.asarray(n.demand_scale, dtype=float)
        if scale.ndim > 1 or (scale.ndim == 1 and scale.size != nb):
            _fail("demand", rec, "demand_scale must be a scalar or one value per bus")
        if np.any(~(scale > 0)):
            _fail("demand", rec, "demand_scale must be > 0")
        if not n.stage_years > 0:
            _fail("tree", rec, "stage_years must be > 0")
        if not n.generator_scale > 0:
            _fail("tree", rec, "generator_scale must be > 0")
    for n in nodes:
        ch = kids[n.id]
        if ch:
            total = sum(c.probability for c in ch)
            if abs(total - n.probability) > PROB_TOL:
                _fail("probability", f"node {n.id}",
                      f"children probabilities sum to {total!r}, expected {n.probability!r}")
    # cycles are impossible once every parent sits one stage above; stage
    # durations must agree so commissioning years are well defined
    by_stage: dict[int, float] = {}
    for n in nodes:
        prev = by_stage.setdefault(n.stage, n.stage_years)
        if prev != n.stage_years:
            _fail("tree", f"node {n.id}", "stage_years must agree across nodes of one stage")
    stages = sorted(by_stage)
    if stages != list(range(len(stages))):
        _fail("tree", "tree", "stages must be contiguous from 0")


def _validate_blocks(inst: Instance):
    if not inst.blocks:
        _fail("blocks", "blocks", "at least one block required")
    keys = {g.profile_key for g in inst.generators if g.is_renewable}
    nb = len(inst.buses)
    total = 0.0
    for blk in inst.blocks:
        rec = f"block {blk.id}"
        if not (isinstance(blk.steps, int) and blk.steps >= 1):
            _fail("blocks", rec, "steps must be an integer >= 1")
        if not blk.step_hours > 0:
            _fail("blocks", rec, "step_hours must be > 0")
        if not blk.hours_per_year > 0:
            _fail("blocks", rec, "hours_per_year must be > 0")
        if blk.steps * blk.step_hours > blk.hours_per_year + 1e-9:
            _fail("blocks", rec, "steps x step_hours exceeds the hours the block covers")
        total += blk.hours_per_year
        prof = np.asarray(blk.demand_profile, dtype=float)
        if not (prof.shape == (blk.steps,) or prof.shape == (nb, blk.steps)):
            _fail("blocks", rec, "demand_profile must have length T (or shape buses x T)")
        if np.any(prof < 0):
            _fail("blocks", rec, "demand_profile must be >= 0")
        for key in keys:
            if key not in blk.renewable_profiles:
                _fail("profile", rec, f"missing renewable profile {key!r}")
        for key, series in blk.renewable_profiles.items():
            arr = np.asarray(series, dtype=float)
            if arr.shape != (blk.steps,):
                _fail("blocks", rec, f"profile {key!r} must have length T")
            if np.any(arr < 0) or np.any(arr > 1):
                _fail("capacity factor", rec, f"profile {key!r} values must lie in [0, 1]")
    if total > HOURS_PER_YEAR + 1e-9:
        _fail("blocks", "blocks", f"hours_per_year sum {total} exceeds {HOURS_PER_YEAR}")


def _validate_connectivity(inst: Instance):
    nb = len(inst.buses)
    parent = list(range(nb))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for ln in inst.lines:
        if ln.capacity0 > 0:
            parent[find(ln.from_bus)] = find(ln.to_bus)
    comps = {find(i) for i in range(nb)}
    if len(comps) > 1:
        _fail("connectivity", "network", "buses are not connected by existing lines")


# ---------------------------------------------------------------------------
# (de)serialization

def _num(v) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(f"expected a number, got {v!r}")
    return float(v)


def _series(v):
    if not isinstance(v, list):
        raise ParseError(f"expected an array, got {type(v).__name__}")
    if v and isinstance(v[0], list):
        return tuple(tuple(_num(x) for x in row) for row in v)
    return tuple(_num(x) for x in v)


def from_dict(data: dict) -> Instance:
    if not isinstance(data, dict):
        raise ParseError("instance file must hold a JSON object")
    if data.get("schema") != SCHEMA_VERSION:
        raise ParseError(f"unsupported or missing schema version {data.get('schema')!r}")
    try:
        buses = tuple(Bus(int(b["id"]), _num(b["base_demand_peak"])) for b in data["buses"])
        lines = tuple(Line(int(l["id"]), int(l["from_bus"]), int(l["to_bus"]), _num(l["susceptance"]),
                           _num(l["capacity0"]), _num(l["length"]), bool(l.get("reinforceable", False)),
                           _num(l.get("max_added_capacity", 0.0)))
                      for l in data["lines"])
        gens = tuple(Generator(int(g["id"]), int(g["bus"]), _num(g["capacity"]), _num(g["marginal_cost"]),
                               bool(g.get("is_renewable", False)), g.get("profile_key"))
                     for g in data["generators"])
        stor = tuple(StorageCandidate(int(s["id"]), int(s["bus"]), _num(s["duration_hours"]),
                                      _num(s["efficiency"]), _num(s["max_power"]))
                     for s in data.get("storage_candidates", []))
        c = data["costs"]
        costs = CostData(_num(c["line_fixed_annual"]), _num(c["line_variable_annual"]),
                         _num(c["bes_annual"]), _num(c["voll"]),
                         int(c.get("line_lead_stages", 1)), int(c.get("bes_lead_stages", 0)))
        raw_nodes = data["tree"]
        n_stages = max(int(n["stage"]) for n in raw_nodes) + 1 if raw_nodes else 1
        default_years = _num(data.get("horizon_years", DEFAULT_HORIZON_YEARS)) / n_stages
        nodes = []
        for n in raw_nodes:
            scale = n.get("demand_scale", 1.0)
            scale = _series(scale) if isinstance(scale, list) else _num(scale)
            nodes.append(TreeNode(int(n["id"]), int(n["stage"]),
                                  None if n.get("parent") is None else int(n["parent"]),
                                  _num(n["probability"]), scale,
                                  _num(n.get("stage_years", default_years)),
                                  _num(n.get("generator_scale", 1.0))))
        blocks = tuple(Block(int(b["id"]), _num(b["hours_per_year"]), int(b["steps"]), _num(b["step_hours"]),
                             _series(b["demand_profile"]),
                             {str(k): _series(v) for k, v in b.get("renewable_profiles", {}).items()})
                       for b in data["blocks"])
        name = str(data["name"])
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed instance: {exc!r}") from exc
    return Instance(name, buses, lines, gens, stor, costs, tuple(nodes), blocks)


def to_dict(inst: Instance) -> dict:
    def lst(v):
        return [lst(x) for x in v] if isinstance(v, (list, tuple)) else v

    return {
        "schema": SCHEMA_VERSION,
        "name": inst.name,
        "buses": [{"id": b.id, "base_demand_peak": b.base_demand_peak} for b in inst.buses],
        "lines": [{"id": l.id, "from_bus": l.from_bus, "to_bus": l.to_bus, "susceptance": l.susceptance,
                   "capacity0": l.capacity0, "length": l.length, "reinforceable": l.reinforceable,
                   "max_added_capacity": l.max_added_capacity} for l in inst.lines],
        "generators": [{"id": g.id, "bus": g.bus, "capacity": g.capacity, "marginal_cost": g.marginal_cost,
                        "is_renewable": g.is_renewable, "profile_key": g.profile_key}
                       for g in inst.generators],
        "storage_candidates": [{"id": s.id, "bus": s.bus, "duration_hours": s.duration_hours,
                                "efficiency": s.efficiency, "max_power": s.max_power}
                               for s in inst.storage_candidates],
        "costs": {"line_fixed_annual": inst.cost_data.line_fixed_annual,
                  "line_variable_annual": inst.cost_data.line_variable_annual,
                  "bes_annual": inst.cost_data.bes_annual, "voll": inst.cost_data.voll,
                  "line_lead_stages": inst.cost_data.line_lead_stages,
                  "bes_lead_stages": inst.cost_data.bes_lead_stages},
        "tree": [{"id": n.id, "stage": n.stage, "parent": n.parent, "probability": n.probability,
                  "demand_scale": lst(n.demand_scale), "stage_years": n.stage_years,
                  "generator_scale": n.generator_scale} for n in inst.tree_nodes],
        "blocks": [{"id": b.id, "hours_per_year": b.hours_per_year, "steps": b.steps,
                    "step_hours": b.step_hours, "demand_profile": lst(b.demand_profile),
                    "renewable_profiles": {k: lst(v) for k, v in sorted(b.renewable_profiles.items())}}
                   for b in inst.blocks],
    }


def dumps(inst: Instance) -> str:
    return json.dumps(to_dict(inst), indent=1) + "\n"


def loads(text: str) -> Instance:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}") from exc
    return from_dict(data)


def load_instance(path: str | Path) -> Instance:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    return loads(text)


def save_instance(inst: Instance, path: str | Path):
    Path(path).write_text(dumps(inst), encoding="utf-8")


def replace_tree(inst: Instance, nodes: Sequence[TreeNode], name: str | None = None) -> Instance:
    return Instance(name or inst.name, inst.buses, inst.lines, inst.generators, inst.storage_candidates,
                    inst.cost_data, tuple(nodes), inst.blocks)


def replace_blocks(inst: Instance, blocks: Sequence[Block], name: str | None = None) -> Instance:
    return Instance(name or inst.name, inst.buses, inst.lines, inst.generators, inst.storage_candidates,
                    inst.cost_data, inst.tree_nodes, tuple(blocks))


def build_tree(branching: Sequence[int], growth: Sequence[Sequence[float]] | None = None,
               branch_probs: Sequence[Sequence[float]] | None = None,
               stage_years: float | None = None, horizon_years: float = DEFAULT_HORIZON_YEARS
               ) -> list[TreeNode]:
    """Breadth-first scenario tree with per-stage branching factors.

    ``growth[s][i]`` is the multiplicative demand step for child ``i`` of each
    node at stage ``s``; ``branch_probs[s]`` the conditional probabilities.
    """
    n_stages = len(branching) + 1
    years = stage_years if stage_years is not None else horizon_years / n_stages
    nodes = [TreeNode(0, 0, None, 1.0, 1.0, years)]
    frontier = [0]
    for s, k in enumerate(branching):
        probs = branch_probs[s] if branch_probs else [1.0 / k] * k
        steps = growth[s] if growth else [1.0] * k
        if len(probs) != k or len(steps) != k:
            raise ValueError(f"stage {s + 1}: need {k} probabilities and growth steps")
        nxt = []
        for p in frontier:
            par = nodes[p]
            for i in range(k):
                nid = len(nodes)
                nodes.append(TreeNode(nid, s + 1, p, par.probability * probs[i],
                                      float(par.demand_scale) * steps[i], years))
                nxt.append(nid)
        frontier = nxt
    return nodes


def leaf_path_probability(inst: Instance, leaf: int) -> float:
    """Product of conditional branch probabilities along the root->leaf path."""
    path = ancestors(inst, leaf)
    prob = 1.0
    for a, b in zip(path, path[1:]):
        pa = inst.tree_nodes[a].probability
        prob *= inst.tree_nodes[b].probability / pa if pa > 0 else 0.0
    return prob
