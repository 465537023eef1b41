"""Reading structure out of fitted models: stencil hierarchies, Hamming
neighbours and assignment entropies."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .sampler import SampleSet
from .stencil import StencilModel

OTHER = "other"


@dataclass
class Node:
    path: tuple             # cluster label per level; "other" for pooled small groups
    members: list           # external ids
    children: list = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.path)

    def walk(self):
        yield self
        for child in self.children:
            yield from child.walk()

    def leaves(self):
        return [n for n in self.walk() if not n.children]


def _side_assign(model: StencilModel, side: str):
    if side in ("rows", "row"):
        return [st.row_assign for st in model.stencils], model.external_row_ids()
    if side in ("cols", "col", "columns"):
        return [st.col_assign for st in model.stencils], model.external_col_ids()
    raise ValueError(f"side must be 'rows' or 'cols', got {side!r}")


def _point_model(model) -> StencilModel:
    return model.models[-1] if isinstance(model, SampleSet) else model


def hierarchy(model: Union[StencilModel, SampleSet], side: str = "cols", depth: int = 1,
              min_leaf: int = 1) -> Node:
    """Tree whose level ``l`` splits each node by stencil ``l``'s cluster labels.

    Groups smaller than ``min_leaf`` are pooled into one ``"other"`` child,
    which is not split further; if no group reaches ``min_leaf`` the node
    stays a leaf.
    """
    model = _point_model(model)
    if depth > model.s:
        raise ValueError(f"depth {depth} exceeds the model's {model.s} stencils")
    assigns, ids = _side_assign(model, side)
    root = Node((), list(range(len(ids))))
    frontier = [root]
    for level in range(depth):
        labels = assigns[level]
        nxt = []
        for node in frontier:
            groups = {}
            for i in node.members:
                groups.setdefault(int(labels[i]), []).append(i)
            big = sorted(((c, g) for c, g in groups.items() if len(g) >= min_leaf),
                         key=lambda cg: (-len(cg[1]), cg[0]))
            if not big:
                continue
            small = sorted(i for c, g in groups.items() if len(g) < min_leaf for i in g)
            for c, g in big:
                child = Node(node.path + (c,), g)
                node.children.append(child)
                nxt.append(child)
            if small:
                node.children.append(Node(node.path + (OTHER,), small))
        frontier = nxt
    for node in root.walk():
        node.members = [ids[i] for i in node.members]
    return root


def hierarchy_text(root: Node, sample: int = 5) -> str:
    lines = []
    for node in root.walk():
        label = "root" if not node.path else "/".join(map(str, node.path))
        shown = ", ".join(node.members[:sample])
        more = " ..." if len(node.members) > sample else ""
        lines.append(f"{'  ' * node.depth}{label} ({len(node.members)}): {shown}{more}")
    return "\n".join(lines) + "\n"


def hierarchy_records(root: Node, sample: int = 5) -> str:
    """One JSON object per node: depth, cluster path, member count, sample members."""
    out = []
    for node in root.walk():
        out.append(json.dumps({"depth": node.depth, "path": list(node.path),
                               "count": len(node.members),
                               "members": node.members[:sample]}))
    return "\n".join(out) + "\n"


def hamming_distances(model: StencilModel, index: int, side: str = "cols") -> np.ndarray:
    assigns, _ = _side_assign(model, side)
    A = np.stack(assigns, axis=1) if assigns else np.zeros((0, 0), dtype=np.int64)
    return np.count_nonzero(A != A[index], axis=1)


def similar_items(model: Union[StencilModel, SampleSet], item: str, side: str = "cols",
                  top_n: int = 10) -> list:
    """Items closest to ``item`` in Hamming distance over all stencils' labels."""
    model = _point_model(model)
    _, ids = _side_assign(model, side)
    try:
        q = ids.index(item)
    except ValueError:
        raise KeyError(f"unknown id {item!r}") from None
    dist = hamming_distances(model, q, side)
    order = sorted((int(dist[i]), ids[i]) for i in range(len(ids)) if i != q)
    return [(x, dd) for dd, x in order[:top_n]]


def entropy_bits(labels) -> float:
    counts = np.bincount(np.asarray(labels))
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum())


def assignment_entropy(model: Union[StencilModel, SampleSet], side: str = "cols"):
    """Per-stencil Shannon entropy (bits) of the cluster-size distribution.

    For a SampleSet, returns one row per retained sample.
    """
    if isinstance(model, SampleSet):
        return np.array([assignment_entropy(m, side) for m in model.models])
    assigns, _ = _side_assign(model, side)
    return np.array([entropy_bits(a) for a in assigns])
