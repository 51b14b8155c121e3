"""Typed graph of extraction operations, conditions and parameters.

The graph is a small triple store: nodes carry a type, edges carry a relation,
an optional strength, a human-readable provenance note and (for TUNES edges)
an optional condition annotation with a multiplicative factor. It seeds the
default decision program via compile_from_graph.
"""

from __future__ import annotations

import shlex
from dataclasses import dataclass
from enum import Enum

from .dsl import (
    CONDITION_VOCAB,
    PARAM_NAMES,
    AdjustAction,
    DslProgram,
    Rule,
    SelectAction,
)
from .extractors import ExtractorKind

KG_MAGIC = "#nfex-kg v1"

# SUITED_FOR edges below this strength do not become select rules.
COMPILE_STRENGTH_MIN = 0.5


class NodeType(Enum):
    EXTRACTOR = "extractor"
    OPERATION = "operation"
    CONDITION = "condition"
    PARAM = "param"


class RelType(Enum):
    USES = "USES"
    SUITED_FOR = "SUITED_FOR"
    SENSITIVE_TO = "SENSITIVE_TO"
    TUNES = "TUNES"


@dataclass(frozen=True)
class Node:
    id: str
    type: NodeType


@dataclass(frozen=True)
class Edge:
    src: str
    rel: RelType
    dst: str
    strength: float | None = None
    prov: str = ""
    condition: tuple[str, str] | None = None
    factor: float | None = None


def condition_node_id(cfield: str, value: str) -> str:
    """Graph node id for a (field, value) condition; values that are ambiguous
    on their own get qualified ids."""
    if cfield == "reflective":
        return "reflective" if value == "yes" else "non-reflective"
    if cfield == "texture":
        return f"{value}-texture"
    return value


_CONDITION_IDS = {
    condition_node_id(f, v): (f, v) for f, vs in CONDITION_VOCAB.items() for v in vs
}


def condition_from_node_id(node_id: str) -> tuple[str, str]:
    return _CONDITION_IDS[node_id]


class KnowledgeGraph:
    """Mutable while being built; treat as read-only once shared."""

    def __init__(self):
        self.nodes: dict[str, Node] = {}
        self.edges: list[Edge] = []
        self._triples: set[tuple[str, RelType, str]] = set()

    def add_node(self, node_id: str, node_type: NodeType) -> Node:
        if node_id in self.nodes:
            if self.nodes[node_id].type is not node_type:
                raise ValueError(
                    f"node {node_id!r} already exists with type {self.nodes[node_id].type.value}"
                )
            return self.nodes[node_id]
        node = Node(id=node_id, type=node_type)
        self.nodes[node_id] = node
        return node

    def add_edge(
        self,
        src: str,
        rel: RelType,
        dst: str,
        strength: float | None = None,
        prov: str = "",
        condition: tuple[str, str] | None = None,
        factor: float | None = None,
    ) -> Edge:
        if src not in self.nodes:
            raise ValueError(f"unknown source node {src!r}")
        if dst not in self.nodes:
            raise ValueError(f"unknown destination node {dst!r}")
        if (src, rel, dst) in self._triples:
            raise ValueError(f"duplicate edge ({src}, {rel.value}, {dst})")
        if strength is not None and not (0.0 <= strength <= 1.0):
            raise ValueError(f"strength must lie in [0, 1], got {strength}")
        if rel is RelType.USES:
            self._check_types(src, dst, NodeType.EXTRACTOR, NodeType.OPERATION, rel)
        elif rel is RelType.SUITED_FOR:
            self._check_types(src, dst, NodeType.EXTRACTOR, NodeType.CONDITION, rel)
        if condition is not None:
            cfield, value = condition
            if cfield not in CONDITION_VOCAB or value not in CONDITION_VOCAB[cfield]:
                raise ValueError(f"unknown condition annotation {condition!r}")
        if factor is not None and not (factor > 0.0):
            raise ValueError(f"factor must be positive, got {factor}")
        edge = Edge(src=src, rel=rel, dst=dst, strength=strength, prov=prov,
                    condition=condition, factor=factor)
        self.edges.append(edge)
        self._triples.add((src, rel, dst))
        return edge

    def _check_types(self, src, dst, want_src, want_dst, rel):
        if self.nodes[src].type is not want_src or self.nodes[dst].type is not want_dst:
            raise ValueError(
                f"{rel.value} edges must go {want_src.value} -> {want_dst.value}, "
                f"got {self.nodes[src].type.value} -> {self.nodes[dst].type.value}"
            )

    def query(
        self,
        src: str | None = None,
        rel: RelType | None = None,
        dst: str | None = None,
    ) -> list[Edge]:
        """All edges matching the partially-specified triple, in insertion order."""
        return [
            e for e in self.edges
            if (src is None or e.src == src)
            and (rel is None or e.rel is rel)
            and (dst is None or e.dst == dst)
        ]


# --- the shipped default graph -------------------------------------------------

def seed_graph() -> KnowledgeGraph:
    """Both extractor pipelines, their four operation stages, the condition
    vocabulary, the tunable parameters, and the default suitability facts."""
    kg = KnowledgeGraph()

    kg.add_node("corner", NodeType.EXTRACTOR)
    kg.add_node("blob", NodeType.EXTRACTOR)

    corner_ops = ("image-pyramid", "corner-detection", "intensity-centroid", "binary-comparisons")
    blob_ops = ("gaussian-scale-space", "blob-detection", "gradient-orientation",
                "gradient-histograms")
    for op in corner_ops + blob_ops:
        kg.add_node(op, NodeType.OPERATION)
    for node_id in _CONDITION_IDS:
        kg.add_node(node_id, NodeType.CONDITION)
    for p in PARAM_NAMES:
        kg.add_node(p, NodeType.PARAM)

    stage_note = {
        "image-pyramid": "multi-resolution pyramid for scale coverage",
        "corner-detection": "contrast segment test for corner keypoints",
        "intensity-centroid": "patch intensity centroid fixes orientation",
        "binary-comparisons": "pairwise intensity comparisons as a binary code",
        "gaussian-scale-space": "Gaussian smoothing stack for scale coverage",
        "blob-detection": "difference-of-Gaussians extrema as blob keypoints",
        "gradient-orientation": "dominant local gradient fixes orientation",
        "gradient-histograms": "oriented gradient histograms as a float code",
    }
    for op in corner_ops:
        kg.add_edge("corner", RelType.USES, op, prov=stage_note[op])
    for op in blob_ops:
        kg.add_edge("blob", RelType.USES, op, prov=stage_note[op])

    # Suitability defaults; strength encodes confidence and orders the
    # compiled select rules.
    kg.add_edge("corner", RelType.SUITED_FOR, "bright", strength=0.8,
                prov="high-contrast corners are plentiful in bright scenes")
    kg.add_edge("corner", RelType.SUITED_FOR, "high-texture", strength=0.7,
                prov="textured surfaces expose many corner landmarks")
    kg.add_edge("corner", RelType.SUITED_FOR, "fast", strength=0.6,
                prov="cheap corner tests keep up with rapid motion")
    kg.add_edge("blob", RelType.SUITED_FOR, "dark", strength=0.75,
                prov="band-pass blob responses survive low contrast")
    kg.add_edge("blob", RelType.SUITED_FOR, "low-texture", strength=0.6,
                prov="smooth scenes still carry distinctive blobs")

    kg.add_edge("corner-detection", RelType.SENSITIVE_TO, "dark", strength=0.8,
                prov="intensity deltas shrink with scene brightness")
    kg.add_edge("binary-comparisons", RelType.SENSITIVE_TO, "fast", strength=0.6,
                prov="motion blur flips point-pair comparisons")
    kg.add_edge("blob-detection", RelType.SENSITIVE_TO, "reflective", strength=0.5,
                prov="specular glints mimic blob responses")
    kg.add_edge("gradient-histograms", RelType.SENSITIVE_TO, "low-texture", strength=0.5,
                prov="weak gradients flatten the descriptor histogram")

    # Which parameter drives which stage. These carry no condition
    # annotations; the shipped adjustment factors live in the default
    # adjustment table so the two sources are never double-applied.
    kg.add_edge("nf", RelType.TUNES, "corner-detection",
                prov="feature budget caps detection output")
    kg.add_edge("nf", RelType.TUNES, "blob-detection",
                prov="feature budget caps detection output")
    kg.add_edge("sf", RelType.TUNES, "image-pyramid",
                prov="scale step between pyramid levels")
    kg.add_edge("sf", RelType.TUNES, "gaussian-scale-space",
                prov="scale step between pyramid levels")
    kg.add_edge("nl", RelType.TUNES, "image-pyramid",
                prov="number of pyramid levels")
    kg.add_edge("nl", RelType.TUNES, "gaussian-scale-space",
                prov="number of pyramid levels")
    kg.add_edge("st", RelType.TUNES, "corner-detection",
                prov="contrast threshold for the segment test")
    kg.add_edge("st", RelType.TUNES, "blob-detection",
                prov="contrast threshold for extrema, rescaled to response units")
    return kg


def compile_from_graph(kg: KnowledgeGraph) -> DslProgram:
    """Deterministic translation of the graph into a decision program.

    SUITED_FOR edges with strength >= COMPILE_STRENGTH_MIN become select
    rules, strongest first (ties keep insertion order). TUNES edges carrying
    a condition annotation become adjust rules in insertion order. The
    default rule selects the extractor with the most SUITED_FOR edges,
    breaking ties toward the corner pipeline.
    """
    suited = [
        e for e in kg.query(rel=RelType.SUITED_FOR)
        if e.strength is not None and e.strength >= COMPILE_STRENGTH_MIN
    ]
    suited.sort(key=lambda e: -e.strength)  # stable: ties keep insertion order
    rules: list[Rule] = []
    for e in suited:
        cfield, value = condition_from_node_id(e.dst)
        kind = ExtractorKind(e.src)
        rules.append(Rule(tests=((cfield, value),), actions=(SelectAction(kind),)))
    for e in kg.query(rel=RelType.TUNES):
        if e.condition is None or e.factor is None:
            continue
        rules.append(Rule(tests=(e.condition,), actions=(AdjustAction(e.src, e.factor),)))

    counts = {kind: 0 for kind in ExtractorKind}
    for e in kg.query(rel=RelType.SUITED_FOR):
        counts[ExtractorKind(e.src)] += 1
    best = max(counts.values()) if counts else 0
    if counts.get(ExtractorKind.CORNER_BINARY, 0) == best:
        winner = ExtractorKind.CORNER_BINARY
    else:
        winner = ExtractorKind.BLOB_HISTOGRAM
    default = Rule(tests=(), actions=(SelectAction(winner),), is_default=True)
    return DslProgram(rules=tuple(rules), default=default)


# --- file I/O --------------------------------------------------------------------

def dump_graph(kg: KnowledgeGraph) -> str:
    lines = [KG_MAGIC]
    for node in kg.nodes.values():
        lines.append(f"node {node.id} {node.type.value}")
    for e in kg.edges:
        parts = [f"edge {e.src} {e.rel.value} {e.dst}"]
        if e.strength is not None:
            parts.append(f"strength={e.strength!r}")
        if e.condition is not None:
            parts.append(f"cond={e.condition[0]}:{e.condition[1]}")
        if e.factor is not None:
            parts.append(f"factor={e.factor!r}")
        if e.prov:
            parts.append(f'prov="{e.prov}"')
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def parse_graph(text: str) -> KnowledgeGraph:
    lines = text.splitlines()
    if not lines or lines[0].strip() != KG_MAGIC:
        raise ValueError(f"not a knowledge-graph file (expected {KG_MAGIC!r} header)")
    kg = KnowledgeGraph()
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            parts = shlex.split(line)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
        try:
            if parts[0] == "node":
                kg.add_node(parts[1], NodeType(parts[2]))
            elif parts[0] == "edge":
                src, rel, dst = parts[1], RelType(parts[2]), parts[3]
                strength = prov = condition = factor = None
                prov = ""
                for kv in parts[4:]:
                    key, _, value = kv.partition("=")
                    if key == "strength":
                        strength = float(value)
                    elif key == "prov":
                        prov = value
                    elif key == "cond":
                        cfield, _, cval = value.partition(":")
                        condition = (cfield, cval)
                    elif key == "factor":
                        factor = float(value)
                    # unknown keys are ignored for forward compatibility
                kg.add_edge(src, rel, dst, strength=strength, prov=prov,
                            condition=condition, factor=factor)
            else:
                raise ValueError(f"unknown directive {parts[0]!r}")
        except (ValueError, IndexError, KeyError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
    return kg


def save_graph(kg: KnowledgeGraph, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_graph(kg))


def load_graph(path) -> KnowledgeGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_graph(fh.read())
