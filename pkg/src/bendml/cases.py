"""Instance builders: random small networks and a reduced IEEE 24-bus system.

The bundled JSON files under ``bendml/data`` are produced by
:func:`write_bundled` and can be regenerated at any time.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .instance import (Block, Bus, CostData, Generator, Instance, Line, StorageCandidate, TreeNode,
                       load_instance, save_instance)

MILE_KM = 1.609344

LINE_FIXED = 121_600.0  # $/km/yr
LINE_VARIABLE = 76.0  # $/(MW km yr)
BES_ANNUAL = 102_000.0  # $/(MW yr)
VOLL = 10_000.0  # $/MWh


# ---------------------------------------------------------------------------
# scenario trees

def two_branch_tree(high=(1.15, 1.35, 1.55), low=(1.05, 1.12, 1.2), p_high=0.5,
                    stage_years=10.0) -> list[TreeNode]:
    """Seven nodes: a root and two four-stage demand paths that never recombine."""
    nodes = [TreeNode(0, 0, None, 1.0, 1.0, stage_years)]
    for path, (scales, p) in enumerate(((high, p_high), (low, 1.0 - p_high))):
        parent = 0
        for s, scale in enumerate(scales, start=1):
            nid = len(nodes)
            nodes.append(TreeNode(nid, s, parent, p, scale, stage_years))
            parent = nid
    # breadth-first ids keep stages contiguous in the file
    order = sorted(nodes, key=lambda n: (n.stage, n.id))
    remap = {n.id: i for i, n in enumerate(order)}
    return [TreeNode(remap[n.id], n.stage, None if n.parent is None else remap[n.parent], n.probability,
                     n.demand_scale, n.stage_years) for n in order]


def thirteen_node_tree(stage_years=10.0) -> list[TreeNode]:
    """1 + 2 + 4 + 6 nodes, six scenarios of peak-demand growth."""
    rows = [  # (parent, conditional probability, demand scale)
        (None, 1.0, 1.0),
        (0, 0.6, 1.10), (0, 0.4, 1.25),
        (1, 0.5, 1.15), (1, 0.5, 1.25), (2, 0.7, 1.35), (2, 0.3, 1.50),
        (3, 1.0, 1.20), (4, 0.6, 1.30), (4, 0.4, 1.40), (5, 1.0, 1.45), (6, 0.5, 1.60), (6, 0.5, 1.75),
    ]
    nodes: list[TreeNode] = []
    for i, (par, cp, scale) in enumerate(rows):
        stage = 0 if par is None else nodes[par].stage + 1
        prob = 1.0 if par is None else nodes[par].probability * cp
        nodes.append(TreeNode(i, stage, par, prob, scale, stage_years))
    return nodes


# ---------------------------------------------------------------------------
# reduced IEEE 24-bus system

# bus peak loads (MW), buses 1..24
_RTS_LOAD = [108, 97, 180, 74, 71, 136, 125, 171, 175, 195, 0, 0, 265, 194, 317, 100, 0, 333, 181, 128,
             0, 0, 0, 0]
# (from, to, reactance pu, rating MW, length miles); transformers get a nominal length
_RTS_BRANCH = [
    (1, 2, 0.0139, 175, 3), (1, 3, 0.2112, 175, 55), (1, 5, 0.0845, 175, 22), (2, 4, 0.1267, 175, 33),
    (2, 6, 0.1920, 175, 50), (3, 9, 0.1190, 175, 31), (3, 24, 0.0839, 400, 3), (4, 9, 0.1037, 175, 27),
    (5, 10, 0.0883, 175, 23), (6, 10, 0.0605, 175, 16), (7, 8, 0.0614, 175, 16), (8, 9, 0.1651, 175, 43),
    (8, 10, 0.1651, 175, 43), (9, 11, 0.0839, 400, 3), (9, 12, 0.0839, 400, 3), (10, 11, 0.0839, 400, 3),
    (10, 12, 0.0839, 400, 3), (11, 13, 0.0476, 500, 33), (11, 14, 0.0418, 500, 29), (12, 13, 0.0476, 500, 33),
    (12, 23, 0.0966, 500, 67), (13, 23, 0.0865, 500, 60), (14, 16, 0.0389, 500, 27), (15, 16, 0.0173, 500, 12),
    (15, 21, 0.0490, 500, 34), (15, 21, 0.0490, 500, 34), (15, 24, 0.0519, 500, 36), (16, 17, 0.0259, 500, 18),
    (16, 19, 0.0231, 500, 16), (17, 18, 0.0144, 500, 10), (17, 22, 0.1053, 500, 73), (18, 21, 0.0259, 500, 18),
    (18, 21, 0.0259, 500, 18), (19, 20, 0.0396, 500, 27.5), (19, 20, 0.0396, 500, 27.5),
    (20, 23, 0.0216, 500, 15), (20, 23, 0.0216, 500, 15), (21, 22, 0.0678, 500, 47),
]
# aggregated thermal fleet: (bus, MW, $/MWh)
_RTS_GEN = [
    (1, 40, 90.0), (1, 152, 22.0), (2, 40, 90.0), (2, 152, 22.0), (7, 300, 60.0), (13, 591, 55.0),
    (15, 60, 70.0), (15, 155, 24.0), (16, 155, 24.0), (18, 400, 6.0), (21, 400, 6.0), (22, 300, 3.0),
    (23, 660, 20.0),
]
# renewable plants: (bus, MW, profile key)
_RTS_RES = [(8, 250.0, "wind"), (19, 150.0, "solar"), (3, 150.0, "solar")]
# lines that may be reinforced (1-based branch positions) and the new corridors
_RTS_REINFORCE = [7, 11, 12, 13, 18, 19, 21, 23, 31]
_RTS_NEW = [(7, 2, 0.10, 40), (14, 23, 0.06, 45)]
# buses (1-based) eligible for storage
_RTS_STORAGE = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 13, 14, 15, 16, 18, 19, 20]


def _blocks_ieee(n_blocks: int, steps: int, variant: int = 0) -> list[Block]:
    t = np.arange(steps) / steps
    shapes = []
    for b in range(n_blocks):
        phase = 2 * np.pi * (t + 0.25 * b)
        demand = 0.78 + 0.22 * np.sin(phase - np.pi / 2 + 0.3 * variant) ** 2 + 0.03 * b
        solar = np.clip(np.sin(np.pi * (t * 1.0 + 0.05 * b)), 0, 1) * (0.8 - 0.15 * b % 0.5)
        wind = 0.35 + 0.3 * np.cos(phase + 0.7 * b + 0.4 * variant)
        shapes.append((np.round(np.clip(demand, 0, 1.0), 4), np.round(np.clip(solar, 0, 1), 4),
                       np.round(np.clip(wind, 0, 1), 4)))
    hours = 8760.0 / n_blocks
    step_hours = 24.0 / steps
    return [Block(b, hours, steps, step_hours, tuple(float(v) for v in d),
                  {"solar": tuple(float(v) for v in s), "wind": tuple(float(v) for v in w)})
            for b, (d, s, w) in enumerate(shapes)]


def ieee24(tree: list[TreeNode] | None = None, n_blocks: int = 2, steps: int = 4, name: str | None = None,
           generator_factor: float = 1.6, storage_power: float = 150.0, block_variant: int = 0,
           storage_buses: list[int] | None = None) -> Instance:
    """Reduced IEEE 24-bus system with storage candidates at selected load buses (1-based ids)."""
    tree = tree if tree is not None else two_branch_tree()
    buses = tuple(Bus(i, float(d)) for i, d in enumerate(_RTS_LOAD))
    lines = []
    for pos, (f, t, x, rate, miles) in enumerate(_RTS_BRANCH, start=1):
        reinf = pos in _RTS_REINFORCE
        lines.append(Line(len(lines), f - 1, t - 1, round(1.0 / x, 6), float(rate), round(miles * MILE_KM, 3),
                          reinf, float(rate) if reinf else 0.0))
    for f, t, x, km in _RTS_NEW:
        lines.append(Line(len(lines), f - 1, t - 1, round(1.0 / x, 6), 0.0, float(km), True, 300.0))
    gens = [Generator(i, b - 1, round(mw * generator_factor, 3), cost) for i, (b, mw, cost) in enumerate(_RTS_GEN)]
    for b, mw, key in _RTS_RES:
        gens.append(Generator(len(gens), b - 1, mw, 0.0, True, key))
    sites = _RTS_STORAGE if storage_buses is None else storage_buses
    stor = tuple(StorageCandidate(i, b - 1, 2.0, 0.9, storage_power) for i, b in enumerate(sites))
    costs = CostData(LINE_FIXED, LINE_VARIABLE, BES_ANNUAL, VOLL, 1, 0)
    blocks = _blocks_ieee(n_blocks, steps, block_variant)
    label = name or f"ieee24-{len(tree)}node-{n_blocks}block"
    return Instance(label, buses, tuple(lines), tuple(gens), stor, costs, tuple(tree), tuple(blocks))


# ---------------------------------------------------------------------------
# random small instances

def random_instance(seed: int, n_buses: int | None = None, n_blocks: int | None = None, steps: int = 4,
                    tree_shape: str | None = None) -> Instance:
    """Congested toy network with line and storage candidates.

    Cheap generation sits at bus 0 and load elsewhere, so demand growth
    pushes flows beyond the existing ratings.
    """
    rng = np.random.default_rng(seed)
    nb = n_buses or int(rng.integers(3, 7))
    n_blocks = n_blocks or int(rng.integers(1, 3))
    # spanning tree plus one or two chords
    edges = [(int(rng.integers(0, i)), i) for i in range(1, nb)]
    for _ in range(int(rng.integers(1, 3))):
        a, b = sorted(rng.choice(nb, 2, replace=False).tolist())
        if (a, b) not in edges:
            edges.append((a, b))
    loads = np.round(rng.uniform(30, 90, nb), 1)
    loads[0] = 0.0
    total = loads.sum()
    lines = []
    for i, (a, b) in enumerate(edges):
        reinf = bool(rng.random() < 0.6)
        cap = float(np.round(rng.uniform(0.35, 0.7) * total, 1))
        lines.append(Line(i, a, b, float(np.round(rng.uniform(5, 20), 3)), cap,
                          float(np.round(rng.uniform(20, 120), 1)), reinf, float(np.round(total, 1)) if reinf else 0.0))
    if not any(ln.reinforceable for ln in lines):
        ln = lines[0]
        lines[0] = Line(ln.id, ln.from_bus, ln.to_bus, ln.susceptance, ln.capacity0, ln.length, True,
                        float(np.round(total, 1)))
    if nb >= 3 and rng.random() < 0.5:
        a, b = 0, int(rng.integers(1, nb))
        lines.append(Line(len(lines), a, b, float(np.round(rng.uniform(5, 20), 3)), 0.0,
                          float(np.round(rng.uniform(30, 90), 1)), True, float(np.round(total, 1))))
    gens = [Generator(0, 0, float(np.round(2.5 * total, 1)), float(np.round(rng.uniform(10, 25), 2)))]
    far = int(rng.integers(1, nb))
    gens.append(Generator(1, far, float(np.round(0.5 * total, 1)), float(np.round(rng.uniform(80, 150), 2))))
    gens.append(Generator(2, int(rng.integers(0, nb)), float(np.round(0.4 * total, 1)), 0.0, True, "wind"))
    stor_buses = sorted(set(rng.choice(np.arange(1, nb), size=min(2, nb - 1), replace=False).tolist()))
    stor = tuple(StorageCandidate(j, b, 2.0, 0.9, float(np.round(0.5 * total, 1))) for j, b in enumerate(stor_buses))
    costs = CostData(float(np.round(rng.uniform(500, 3000), 1)), float(np.round(rng.uniform(5, 40), 2)),
                     float(np.round(rng.uniform(5_000, 40_000), 1)), 1_000.0, 1, 0)
    shape = tree_shape or ["single", "chain", "fan", "seven"][int(rng.integers(0, 4))]
    tree = _small_tree(shape, rng)
    blocks = []
    for b in range(n_blocks):
        dem = np.round(rng.uniform(0.6, 1.0, steps), 3)
        wind = np.round(rng.uniform(0.0, 1.0, steps), 3)
        blocks.append(Block(b, 8760.0 / n_blocks, steps, 1.0, tuple(float(v) for v in dem),
                            {"wind": tuple(float(v) for v in wind)}))
    return Instance(f"random-{seed}", tuple(Bus(i, float(v)) for i, v in enumerate(loads)), tuple(lines),
                    tuple(gens), stor, costs, tuple(tree), tuple(blocks))


def _small_tree(shape: str, rng: np.random.Generator) -> list[TreeNode]:
    g = lambda lo, hi: float(np.round(rng.uniform(lo, hi), 3))  # noqa: E731
    if shape == "single":
        return [TreeNode(0, 0, None, 1.0, 1.0, 10.0)]
    if shape == "chain":
        return [TreeNode(0, 0, None, 1.0, 1.0, 10.0), TreeNode(1, 1, 0, 1.0, g(1.2, 1.5), 10.0),
                TreeNode(2, 2, 1, 1.0, g(1.5, 1.9), 10.0)]
    if shape == "fan":
        p = g(0.3, 0.7)
        return [TreeNode(0, 0, None, 1.0, 1.0, 10.0), TreeNode(1, 1, 0, p, g(1.3, 1.8), 10.0),
                TreeNode(2, 1, 0, 1.0 - p, g(1.0, 1.3), 10.0)]
    p = g(0.3, 0.7)
    hi1, lo1 = g(1.2, 1.4), g(1.0, 1.15)
    return [TreeNode(0, 0, None, 1.0, 1.0, 10.0),
            TreeNode(1, 1, 0, p, hi1, 10.0), TreeNode(2, 1, 0, 1.0 - p, lo1, 10.0),
            TreeNode(3, 2, 1, p / 2, hi1 * 1.2, 10.0), TreeNode(4, 2, 1, p / 2, hi1 * 1.05, 10.0),
            TreeNode(5, 2, 2, (1.0 - p) / 2, lo1 * 1.15, 10.0), TreeNode(6, 2, 2, (1.0 - p) / 2, lo1, 10.0)]


def tiny_instance() -> Instance:
    """Three-bus radial network with one reinforceable line; solves in well under a second."""
    return random_instance(7, n_buses=3, n_blocks=2, steps=3, tree_shape="fan")


# ---------------------------------------------------------------------------
# bundled files

BUNDLED = {
    "ieee24_7node.json": lambda: ieee24(two_branch_tree(), n_blocks=2, name="ieee24-7node-2block"),
    "ieee24_13node.json": lambda: ieee24(thirteen_node_tree(), n_blocks=4, name="ieee24-13node-4block"),
    "tiny.json": tiny_instance,
}


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("bendml") / "data" / name))


def bundled(name: str) -> Instance:
    return load_instance(bundled_path(name))


def write_bundled(out_dir: str | Path | None = None):
    out = Path(out_dir) if out_dir else bundled_path("")
    out.mkdir(parents=True, exist_ok=True)
    for fname, make in BUNDLED.items():
        save_instance(make(), out / fname)
