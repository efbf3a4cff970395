"""Scene-wise recall, label distributions and motif census over graph corpora."""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from . import _accel
from .errors import TaskMismatchError, TooLargeError
from .graph import RoadSceneGraph
from .labels import NODE_CLASSES, AttributeLabel, NodeClass, RelationshipLabel

log = logging.getLogger(__name__)

MAX_CANON_NODES = 6
REL_LABELS = list(RelationshipLabel)
_REL_BIT = {lab: 1 << i for i, lab in enumerate(REL_LABELS)}


# -- recall ---------------------------------------------------------------------------

def recall_at_k(ranked: Sequence, gt: Iterable, k: int) -> float:
    """Fraction of ``gt`` found in the first ``k`` ranked triples.

    Ranked entries may carry a trailing score; only (src, dst, label) is compared.
    """
    gt = set(gt)
    if not gt:
        log.info("recall@%d: empty ground truth, counted as 1.0", k)
        return 1.0
    top = {tuple(r[:3]) for r in ranked[:k]}
    return len(top & gt) / len(gt)


@dataclass
class EvalTable:
    ks: tuple[int, ...]
    rows: list[tuple[str, str, dict[int, float]]] = field(default_factory=list)

    def add(self, task: str, pooling: str, values: dict[int, float]) -> None:
        self.rows.append((task, pooling, {k: float(values[k]) for k in self.ks}))

    def value(self, task: str, pooling: str, k: int) -> float:
        for t, p, vals in self.rows:
            if t == task and p == pooling:
                return vals[k]
        raise KeyError((task, pooling))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "pooling", *[f"R@{k}" for k in self.ks]])
        for task, pooling, vals in self.rows:
            w.writerow([task, pooling, *[f"{vals[k]:.2f}" for k in self.ks]])
        return buf.getvalue()

    def to_markdown(self) -> str:
        """Table V layout: one row per (task, k), one column per pooling mode."""
        poolings = sorted({p for _, p, _ in self.rows}, key=lambda p: (p != "none", p))
        tasks = list(dict.fromkeys(t for t, _, _ in self.rows))
        head = "| task | R@k | " + " | ".join(poolings) + " |"
        lines = [head, "|" + "---|" * (2 + len(poolings))]
        for t in tasks:
            for k in self.ks:
                cells = []
                for p in poolings:
                    try:
                        cells.append(f"{self.value(t, p, k):.2f}")
                    except KeyError:
                        cells.append("-")
                lines.append(f"| {t} | {k} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def eval_dataset(model, samples, task: str, ks: Sequence[int] = (5, 15, 25)) -> EvalTable:
    """R@k table (percent) for one trained model on task-compatible samples."""
    from .train import evaluate

    if task != model.cfg.task:
        raise TaskMismatchError(f"model was trained for {model.cfg.task}, corpus is for {task}")
    table = EvalTable(tuple(ks))
    table.add(task, model.cfg.pooling, evaluate(model, samples, ks))
    return table


# -- distributions ----------------------------------------------------------------------

def distribution_stats(corpus: Iterable[RoadSceneGraph]) -> tuple[Counter, Counter]:
    rel = Counter({lab: 0 for lab in RelationshipLabel})
    attr = Counter({lab: 0 for lab in AttributeLabel})
    for g in corpus:
        rel.update(lab for _, _, lab in g.rel_edges)
        attr.update(lab for _, lab in g.attr_edges)
    return rel, attr


def _ordered(counts: Counter):
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0].value))


def stats_csv(rel: Counter, attr: Counter) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "label", "count"])
    for lab, c in _ordered(rel):
        w.writerow(["relationship", lab.value, c])
    for lab, c in _ordered(attr):
        w.writerow(["attribute", f"{lab.owner.value}.{lab.value}", c])
    return buf.getvalue()


def top_relationships(rel: Counter, n: int = 3) -> list[str]:
    return [lab.value for lab, c in _ordered(rel)[:n] if c > 0]


# -- canonical codes ------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _perms(n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n))), dtype=np.int64).reshape(-1, n)


def code_matrix(classes: Sequence[NodeClass], edges: Iterable[tuple[int, int, RelationshipLabel]]) -> np.ndarray:
    """Diagonal: class index + 1; off-diagonal: bit set of labels i -> j."""
    n = len(classes)
    M = np.zeros((n, n), dtype=np.int64)
    for i, c in enumerate(classes):
        M[i, i] = NODE_CLASSES.index(c) + 1
    for i, j, lab in edges:
        M[i, j] |= _REL_BIT[lab]
    return M


def _encode(flat: np.ndarray, n: int) -> bytes:
    return bytes([n]) + b"".join(int(v).to_bytes(4, "big") for v in flat)


def canonical_code(classes: Sequence[NodeClass], edges: Iterable[tuple[int, int, RelationshipLabel]]) -> bytes:
    """Relabelling-invariant code: the lexicographically least permuted matrix."""
    n = len(classes)
    if n > MAX_CANON_NODES:
        raise TooLargeError(f"canonical codes are limited to {MAX_CANON_NODES} nodes, got {n}")
    if n == 0:
        return bytes([0])
    M = code_matrix(classes, edges)
    return _encode(_accel.min_perm_code(M, _perms(n)), n)


def decode_code(code: bytes) -> tuple[list[NodeClass], list[tuple[int, int, list[RelationshipLabel]]]]:
    n = code[0]
    vals = [int.from_bytes(code[1 + 4 * i:5 + 4 * i], "big") for i in range(n * n)]
    classes = [NODE_CLASSES[vals[i * n + i] - 1] for i in range(n)]
    edges = []
    for i in range(n):
        for j in range(n):
            bits = vals[i * n + j]
            if i != j and bits:
                edges.append((i, j, [lab for lab in REL_LABELS if bits & _REL_BIT[lab]]))
    return classes, edges


# -- motif census ------------------------------------------------------------------------------

@dataclass(frozen=True)
class MotifPattern:
    code: bytes
    classes: tuple[NodeClass, ...]
    edges: tuple[tuple[int, int, tuple[RelationshipLabel, ...]], ...]

    @classmethod
    def from_code(cls, code: bytes) -> "MotifPattern":
        classes, edges = decode_code(code)
        return cls(code, tuple(classes), tuple((i, j, tuple(l)) for i, j, l in edges))

    @property
    def size(self) -> int:
        return len(self.classes)

    def describe(self) -> list[str]:
        out = [f"n{i}:{c.value}" for i, c in enumerate(self.classes)]
        out += [f"n{i}-[{'|'.join(l.value for l in labs)}]->n{j}" for i, j, labs in self.edges]
        return out


def connected_subsets(neigh: dict[int, set[int]], max_nodes: int):
    """Each connected node subset of size <= max_nodes exactly once (ESU enumeration)."""
    def extend(sub: list[int], ext: set[int], root: int, sub_nb: set[int]):
        yield sub
        if len(sub) == max_nodes:
            return
        ext = set(ext)
        while ext:
            w = min(ext)
            ext.discard(w)
            excl = {u for u in neigh[w] if u > root and u not in sub_nb and u not in sub}
            yield from extend(sub + [w], ext | excl, root, sub_nb | neigh[w] | {w})

    for v in sorted(neigh):
        yield from extend([v], {u for u in neigh[v] if u > v}, v, neigh[v] | {v})


def _subgraph_key(g: RoadSceneGraph, nodes: Sequence[int], labels: dict):
    idx = {v: i for i, v in enumerate(nodes)}
    classes = tuple(g.nodes[v].cls for v in nodes)
    edges = tuple(sorted((idx[a], idx[b], lab) for a in nodes for b in nodes if a != b
                         for lab in labels.get((a, b), ())))
    return classes, edges


def mine_motifs(corpus: Iterable[RoadSceneGraph], max_nodes: int = 5, top_n: int = 5
                ) -> list[tuple[MotifPattern, int]]:
    """Most frequent connected induced labelled subgraphs (counted per node subset)."""
    if max_nodes > MAX_CANON_NODES:
        raise TooLargeError(f"max_nodes must be <= {MAX_CANON_NODES}")
    counts: Counter = Counter()
    memo: dict = {}
    for g in corpus:
        neigh = {v: set() for v in g.nodes}
        labels: dict = {}
        for a, b, lab in g.rel_edges:
            neigh[a].add(b)
            neigh[b].add(a)
            labels.setdefault((a, b), []).append(lab)
        for sub in connected_subsets(neigh, max_nodes):
            key = _subgraph_key(g, sorted(sub), labels)
            code = memo.get(key)
            if code is None:
                code = memo[key] = canonical_code(*key)
            counts[code] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_n]
    return [(MotifPattern.from_code(code), c) for code, c in ranked]


def motif_report(motifs: Sequence[tuple[MotifPattern, int]]) -> str:
    doc = [{"rank": r + 1, "count": c, "code": m.code.hex(), "nodes": m.size, "pattern": m.describe()}
           for r, (m, c) in enumerate(motifs)]
    return json.dumps(doc, indent=2) + "\n"
