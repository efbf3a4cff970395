"""Road scene graph data model, validation, tensor encoding and JSON format."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import GraphTooLargeError, ParseError, SchemaVersionError
from .labels import (
    ATTR_PREFIX,
    NODE_CLASSES,
    REL_PREFIX,
    AttributeLabel,
    NodeClass,
    RelationshipLabel,
    default_label_order,
)

FORMAT_VERSION = 1
K_MAX = 40
KINEMATIC_FIELDS = ("x", "y", "vx", "vy", "ax", "ay", "yaw", "pitch", "roll")
N_CLASSES = len(NODE_CLASSES)
FEATURE_DIM = N_CLASSES + len(KINEMATIC_FIELDS)
TIE_TOL = 1e-9

RelEdge = tuple[int, int, RelationshipLabel]
AttrEdge = tuple[int, AttributeLabel]


@dataclass(frozen=True)
class NodeFeature:
    cls: NodeClass
    x: float = 0.0
    y: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    ax: float = 0.0
    ay: float = 0.0
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    def kinematics(self) -> tuple[float, ...]:
        return tuple(getattr(self, f) for f in KINEMATIC_FIELDS)

    def vector(self) -> np.ndarray:
        v = np.zeros(FEATURE_DIM)
        v[self.cls.index] = 1.0
        v[N_CLASSES:] = self.kinematics()
        return v


@dataclass(frozen=True)
class RoadSceneGraph:
    nodes: dict[int, NodeFeature] = field(default_factory=dict)
    rel_edges: frozenset[RelEdge] = frozenset()
    attr_edges: frozenset[AttrEdge] = frozenset()
    timestamp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "rel_edges", frozenset(self.rel_edges))
        object.__setattr__(self, "attr_edges", frozenset(self.attr_edges))
        object.__setattr__(self, "nodes", dict(sorted(self.nodes.items())))

    def __hash__(self):
        return hash((tuple(self.nodes.items()), self.rel_edges, self.attr_edges, self.timestamp))

    @property
    def node_ids(self) -> list[int]:
        return list(self.nodes)

    def sorted_rel_edges(self) -> list[RelEdge]:
        return sorted(self.rel_edges, key=lambda e: (e[0], e[1], e[2].value))

    def attributes_of(self, node_id: int) -> list[AttributeLabel]:
        return sorted((a for n, a in self.attr_edges if n == node_id), key=lambda a: a.value)

    def with_edges(self, rel_edges: Iterable[RelEdge]) -> "RoadSceneGraph":
        return replace(self, rel_edges=frozenset(rel_edges))


@dataclass(frozen=True)
class Violation:
    rule: str
    element: tuple
    message: str


class ValidationReport(list):
    """List of :class:`Violation`; falsy when the graph is valid."""

    @property
    def ok(self) -> bool:
        return not self

    def rules(self) -> list[str]:
        return [v.rule for v in self]


def _angle_ok(a: float) -> bool:
    return -math.pi < a <= math.pi


def validate_graph(g: RoadSceneGraph) -> ValidationReport:
    out: list[Violation] = []
    for nid, f in g.nodes.items():
        if not isinstance(f.cls, NodeClass):
            out.append(Violation("node-class", (nid,), f"node {nid} has no valid class"))
        vals = f.kinematics()
        if not all(math.isfinite(v) for v in vals):
            out.append(Violation("non-finite", (nid,), f"node {nid} has non-finite kinematics"))
        elif not all(_angle_ok(a) for a in (f.yaw, f.pitch, f.roll)):
            out.append(Violation("angle-range", (nid,), f"node {nid} angle outside (-pi, pi]"))
    if not math.isfinite(g.timestamp):
        out.append(Violation("non-finite", ("timestamp",), "timestamp is not finite"))
    for src, dst, lab in g.rel_edges:
        el = (src, dst, lab.value)
        if src not in g.nodes or dst not in g.nodes:
            missing = src if src not in g.nodes else dst
            out.append(Violation("dangling-endpoint", el, f"edge endpoint {missing} not in nodes"))
            continue
        if src == dst:
            out.append(Violation("self-relationship", el, f"relationship {lab.value} on a single node"))
            continue
        cs, cd = g.nodes[src].cls, g.nodes[dst].cls
        if not lab.allows(cs, cd):
            out.append(Violation(
                "class-pair", el, f"{lab.value} not permitted from {cs.value} to {cd.value}"))
    for nid, attr in g.attr_edges:
        el = (nid, attr.value)
        if nid not in g.nodes:
            out.append(Violation("dangling-endpoint", el, f"attribute on absent node {nid}"))
        elif attr.owner is not g.nodes[nid].cls:
            out.append(Violation(
                "attr-class", el, f"{attr.value} not an attribute of {g.nodes[nid].cls.value}"))
    out.sort(key=lambda v: (v.rule, tuple(str(e) for e in v.element)))
    return ValidationReport(out)


# -- tensors -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GraphTensors:
    A: np.ndarray
    E: np.ndarray
    F: np.ndarray
    node_mask: np.ndarray
    id_order: list[int]
    label_order: list[str]
    timestamp: float = 0.0

    @property
    def k_max(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return int(self.node_mask.sum())


def to_tensors(g: RoadSceneGraph, k_max: int = K_MAX,
               label_order: Sequence[str] | None = None,
               id_order: Sequence[int] | None = None) -> GraphTensors:
    """Encode ``g`` as padded (A, E, F).

    A multi-labelled pair (or a node with several attributes) gets a uniform
    distribution over its labels in the corresponding fiber of E.  Rows follow
    ascending id unless ``id_order`` pins a prefix of them (ids of ``g`` missing
    from it are appended in ascending order; listed ids absent from ``g`` keep
    their rows empty).
    """
    label_order = list(label_order or default_label_order())
    if id_order is None:
        ids = sorted(g.nodes)
    else:
        pinned = list(id_order)
        ids = pinned + sorted(set(g.nodes) - set(pinned))
    n = len(ids)
    if n > k_max:
        raise GraphTooLargeError(f"graph has {n} nodes, k_max is {k_max}")
    row = {nid: i for i, nid in enumerate(ids)}
    chan = {key: c for c, key in enumerate(label_order)}
    L = len(label_order)
    A = np.zeros((k_max, k_max))
    E = np.zeros((k_max, k_max, L))
    F = np.zeros((k_max, FEATURE_DIM))
    mask = np.zeros(k_max, dtype=bool)
    for nid in ids:
        if nid not in g.nodes:
            continue
        i = row[nid]
        A[i, i] = 1.0
        F[i] = g.nodes[nid].vector()
        mask[i] = True
    for src, dst, lab in g.rel_edges:
        i, j = row[src], row[dst]
        A[i, j] = 1.0
        E[i, j, chan[REL_PREFIX + lab.value]] = 1.0
    for nid, attr in g.attr_edges:
        i = row[nid]
        E[i, i, chan[ATTR_PREFIX + attr.value]] = 1.0
    sums = E.sum(axis=2, keepdims=True)
    np.divide(E, sums, out=E, where=sums > 0)
    return GraphTensors(A, E, F, mask, ids, label_order, float(g.timestamp))


def _tie_set(probs: np.ndarray, candidates: list[int]) -> list[int]:
    if not candidates:
        return []
    vals = probs[candidates]
    best = vals.max()
    if best <= 0.0:
        return [candidates[int(np.argmax(vals))]]
    return [c for c, v in zip(candidates, vals) if v >= best - TIE_TOL]


def from_tensors(t: GraphTensors, node_thresh: float = 0.5,
                 edge_thresh: float = 0.5) -> RoadSceneGraph:
    """Decode tensors back to a graph.

    Labels are restricted to those legal for the endpoint classes; every legal
    label tied with the best one (within 1e-9) is emitted.  An attribute
    fiber is used when its class-legal mass reaches ``edge_thresh``.
    """
    A, E, F = t.A, t.E, t.F
    k = A.shape[0]
    next_id = max(t.id_order, default=-1) + 1
    ids: list[int | None] = [None] * k
    nodes: dict[int, NodeFeature] = {}
    for i in range(k):
        if A[i, i] < node_thresh:
            continue
        if i < len(t.id_order):
            nid = t.id_order[i]
        else:
            nid, next_id = next_id, next_id + 1
        cls = NODE_CLASSES[int(np.argmax(F[i, :N_CLASSES]))]
        kin = dict(zip(KINEMATIC_FIELDS, (float(v) for v in F[i, N_CLASSES:])))
        nodes[nid] = NodeFeature(cls, **kin)
        ids[i] = nid

    rel_chans: dict[tuple[NodeClass, NodeClass], list[int]] = {}
    attr_chans: dict[NodeClass, list[int]] = {}
    parsed = []
    for c, key in enumerate(t.label_order):
        if key.startswith(REL_PREFIX):
            parsed.append(RelationshipLabel(key[len(REL_PREFIX):]))
        else:
            parsed.append(AttributeLabel(key[len(ATTR_PREFIX):]))

    def rel_candidates(cs, cd):
        if (cs, cd) not in rel_chans:
            rel_chans[(cs, cd)] = [
                c for c, lab in enumerate(parsed)
                if isinstance(lab, RelationshipLabel) and lab.allows(cs, cd)]
        return rel_chans[(cs, cd)]

    def attr_candidates(cls):
        if cls not in attr_chans:
            attr_chans[cls] = [
                c for c, lab in enumerate(parsed)
                if isinstance(lab, AttributeLabel) and lab.owner is cls]
        return attr_chans[cls]

    rel_edges = set()
    attr_edges = set()
    present = [i for i in range(k) if ids[i] is not None]
    for i in present:
        ci = nodes[ids[i]].cls
        cands = attr_candidates(ci)
        if cands and E[i, i, cands].sum() >= edge_thresh:
            for c in _tie_set(E[i, i], cands):
                attr_edges.add((ids[i], parsed[c]))
        for j in present:
            if i == j or A[i, j] < edge_thresh:
                continue
            for c in _tie_set(E[i, j], rel_candidates(ci, nodes[ids[j]].cls)):
                rel_edges.add((ids[i], ids[j], parsed[c]))
    return RoadSceneGraph(nodes, frozenset(rel_edges), frozenset(attr_edges), t.timestamp)


def mask_edges(g: RoadSceneGraph, k: int, seed: int) -> tuple[RoadSceneGraph, set[RelEdge]]:
    """Delete ``min(k, |rel_edges|)`` relationship edges chosen uniformly."""
    if k < 0:
        raise ValueError("k must be non-negative")
    edges = g.sorted_rel_edges()
    m = min(k, len(edges))
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(edges), size=m, replace=False) if m else []
    removed = {edges[i] for i in picked}
    return g.with_edges(e for e in edges if e not in removed), removed


# -- JSON documents ------------------------------------------------------------

def graph_to_doc(g: RoadSceneGraph) -> dict:
    nodes = []
    for nid, f in g.nodes.items():
        d = {"id": nid, "class": f.cls.value}
        d.update(zip(KINEMATIC_FIELDS, f.kinematics()))
        d["attributes"] = [a.value for a in g.attributes_of(nid)]
        nodes.append(d)
    edges = [{"src": s, "dst": d, "label": lab.value} for s, d, lab in g.sorted_rel_edges()]
    return {"version": FORMAT_VERSION, "timestamp": g.timestamp, "nodes": nodes, "edges": edges}


def serialize_graph(g: RoadSceneGraph) -> str:
    return json.dumps(graph_to_doc(g), sort_keys=True, separators=(",", ":"), allow_nan=False)


def _num(v, what: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(f"{what}: expected a number, got {v!r}")
    return float(v)


def graph_from_doc(doc) -> RoadSceneGraph:
    if not isinstance(doc, dict):
        raise ParseError("graph document must be a JSON object")
    version = doc.get("version")
    if version != FORMAT_VERSION:
        raise SchemaVersionError(f"expected version {FORMAT_VERSION}, got {version!r}")
    try:
        nodes = {}
        attrs = set()
        for nd in doc["nodes"]:
            nid = nd["id"]
            if isinstance(nid, bool) or not isinstance(nid, int):
                raise ParseError(f"node id must be an integer, got {nid!r}")
            if nid in nodes:
                raise ParseError(f"duplicate node id {nid}")
            kin = {f: _num(nd[f], f"node {nid} field {f}") for f in KINEMATIC_FIELDS}
            nodes[nid] = NodeFeature(NodeClass(nd["class"]), **kin)
            for a in nd.get("attributes", []):
                attrs.add((nid, AttributeLabel(a)))
        edges = {(int(e["src"]), int(e["dst"]), RelationshipLabel(e["label"])) for e in doc["edges"]}
        ts = _num(doc["timestamp"], "timestamp")
    except KeyError as exc:
        raise ParseError(f"missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(str(exc)) from None
    return RoadSceneGraph(nodes, frozenset(edges), frozenset(attrs), ts)


def deserialize_graph(text: str) -> RoadSceneGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return graph_from_doc(doc)


def write_jsonl(path, graphs: Iterable[RoadSceneGraph]) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, "".join(serialize_graph(g) + "\n" for g in graphs))


def read_jsonl(path) -> list[RoadSceneGraph]:
    graphs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                graphs.append(deserialize_graph(line))
            except ParseError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    return graphs
