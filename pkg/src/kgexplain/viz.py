"""Graphviz DOT rendering of an explanation.

The predicted triple is drawn as a dashed red edge; each explanation path
gets its own colour.
"""

from __future__ import annotations

from .explain import Explanation
from .kgraph import KnowledgeGraph

PATH_COLORS = ("forestgreen", "royalblue", "darkorange", "purple", "goldenrod", "teal")


def _quote(s: str) -> str:
    return '"%s"' % str(s).replace('"', '\\"')


def to_dot(explanation: Explanation, g: KnowledgeGraph | None = None) -> str:
    def ent(i):
        return g.entity_names[i] if g is not None else f"e{i}"

    def rel(i):
        return g.relation_names[i] if g is not None else f"r{i}"

    t = explanation.target
    lines = ["digraph explanation {", "\trankdir=LR;", "\tnode [shape=ellipse];"]
    nodes = {t.head, t.tail}
    for p in explanation.paths:
        for h, _, tt in p.triples:
            nodes.add(h)
            nodes.add(tt)
    for n in sorted(nodes):
        lines.append("\t%s [label=%s];" % (_quote(f"n{n}"), _quote(ent(n))))
    lines.append(
        "\t%s -> %s [label=%s, color=red, style=dashed, penwidth=2];"
        % (_quote(f"n{t.head}"), _quote(f"n{t.tail}"), _quote(rel(t.relation)))
    )
    for idx, p in enumerate(explanation.paths):
        color = PATH_COLORS[idx % len(PATH_COLORS)]
        for (h, r, tt), s in zip(p.triples, p.edge_scores):
            lines.append(
                "\t%s -> %s [label=%s, color=%s];"
                % (
                    _quote(f"n{h}"),
                    _quote(f"n{tt}"),
                    _quote(f"{rel(r)} ({s:.3f})"),
                    color,
                )
            )
    lines.append("}")
    return "\n".join(lines) + "\n"
