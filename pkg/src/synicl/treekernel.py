"""Recursive tree-kernel similarity over labeled dependency trees.

The score of two trees is computed by a recursive pairwise comparison of
children: equal-label leaf pairs count 1, equal-label internal pairs recurse,
and the accumulated sum is normalized by the product of the child counts
(taken as 1 when a node has no children). Only children are compared; the
labels of the two root nodes themselves never participate.
"""

from __future__ import annotations

from math import fsum

from .treebank import DepNode, DepTree


def comp_sim(a: DepNode, b: DepNode) -> float:
    """Similarity of two subtrees rooted at `a` and `b`.

    Contributions are accumulated with exact summation so the result is
    independent of child iteration order (score is exactly symmetric).
    """
    b_by_label: dict[int, list[DepNode]] = {}
    for cb in b.children:
        b_by_label.setdefault(cb.label, []).append(cb)

    contributions = []
    for ca in a.children:
        group = b_by_label.get(ca.label)
        if group is None:
            continue
        ca_leaf = not ca.children
        for cb in group:
            if ca_leaf and not cb.children:
                contributions.append(1.0)
            elif not ca_leaf and cb.children:
                contributions.append(comp_sim(ca, cb))

    size_a = len(a.children) or 1
    size_b = len(b.children) or 1
    return fsum(contributions) / (size_a * size_b)


def tree_kernel_similarity(t1: DepTree, t2: DepTree) -> float:
    """Kernel score of two trees: comp_sim of their root nodes."""
    return comp_sim(t1.root, t2.root)
