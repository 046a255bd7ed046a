"""Tree-edit-distance similarity between table trees.

The similarity of two trees is one minus their ordered tree edit distance
normalized by the larger node count. Edit costs: insert or delete any node
costs 1; substitution is free for matching labels, costs 1 across different
tags or different cell spans, and for two cells with equal spans but
different text costs the normalized character Levenshtein distance (full
mode) or nothing (struct mode, which ignores text entirely).

Distances are computed with the Zhang-Shasha keyroots algorithm over a
postorder enumeration; costs may be fractional, so everything is float.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .table import COMPLEX, SIMPLE, MalformedHtml, Node, classify, parse_html, to_html

FULL = "full"
STRUCT = "struct"


class DuplicateId(ValueError):
    """Two records in one JSONL file share the same id."""


@dataclass(frozen=True)
class TedsScore:
    value: float
    edit_distance: float
    size_a: int
    size_b: int


def levenshtein(a: str, b: str) -> int:
    """Classic character edit distance, unit costs."""
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def normalized_levenshtein(a: str, b: str) -> float:
    """Levenshtein over the longer length; 0 for two empty strings."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 0.0
    return levenshtein(a, b) / longest


def substitution_cost(a: Node, b: Node, mode: str = FULL) -> float:
    if a.tag != b.tag:
        return 1.0
    if a.tag != "td":
        return 0.0
    if a.rowspan != b.rowspan or a.colspan != b.colspan:
        return 1.0
    if mode == STRUCT:
        return 0.0
    return normalized_levenshtein(a.content, b.content)


class _Annotated:
    """Postorder enumeration with leftmost-leaf indices and keyroots."""

    __slots__ = ("nodes", "lml", "keyroots")

    def __init__(self, root: Node):
        nodes: list[Node] = []
        lml: list[int] = []

        def walk(node: Node) -> int:
            first = None
            for child in node.children:
                leaf = walk(child)
                if first is None:
                    first = leaf
            index = len(nodes)
            nodes.append(node)
            lml.append(index if first is None else first)
            return lml[index]

        walk(root)
        self.nodes = nodes
        self.lml = lml
        # Keyroots: for each distinct leftmost leaf, the highest postorder
        # node that has it; always includes the root.
        last: dict[int, int] = {}
        for i, leaf in enumerate(lml):
            last[leaf] = i
        self.keyroots = sorted(last.values())


def tree_edit_distance(a: Node, b: Node, mode: str = FULL) -> float:
    """Minimal-cost ordered edit distance between two table trees."""
    if mode not in (FULL, STRUCT):
        raise ValueError(f"unknown mode {mode!r}")
    ta, tb = _Annotated(a), _Annotated(b)
    na, nb = len(ta.nodes), len(tb.nodes)
    treedist = [[0.0] * nb for _ in range(na)]
    an, bn = ta.nodes, tb.nodes
    al, bl = ta.lml, tb.lml

    for i in ta.keyroots:
        for j in tb.keyroots:
            # Forest-distance table over the subforests rooted at i and j.
            ioff = al[i] - 1
            joff = bl[j] - 1
            m = i - ioff + 1
            n = j - joff + 1
            fd = [[0.0] * n for _ in range(m)]
            for x in range(1, m):
                fd[x][0] = fd[x - 1][0] + 1.0
            for y in range(1, n):
                fd[0][y] = fd[0][y - 1] + 1.0
            for x in range(1, m):
                fdx = fd[x]
                fdx1 = fd[x - 1]
                whole_a = al[x + ioff] == al[i]
                for y in range(1, n):
                    if whole_a and bl[y + joff] == bl[j]:
                        cost = min(
                            fdx1[y] + 1.0,
                            fdx[y - 1] + 1.0,
                            fdx1[y - 1]
                            + substitution_cost(an[x + ioff], bn[y + joff], mode),
                        )
                        fdx[y] = cost
                        treedist[x + ioff][y + joff] = cost
                    else:
                        p = al[x + ioff] - 1 - ioff
                        q = bl[y + joff] - 1 - joff
                        fdx[y] = min(
                            fdx1[y] + 1.0,
                            fdx[y - 1] + 1.0,
                            fd[p][q] + treedist[x + ioff][y + joff],
                        )
    return treedist[na - 1][nb - 1]


def _canonical(tree: Node) -> Node:
    # Round through the serializer so both sides share wrapper conventions.
    return parse_html(to_html(tree))


def _score(a: Node, b: Node, mode: str) -> TedsScore:
    a = _canonical(a)
    b = _canonical(b)
    dist = tree_edit_distance(a, b, mode)
    size_a = a.node_count()
    size_b = b.node_count()
    return TedsScore(
        value=1.0 - dist / max(size_a, size_b),
        edit_distance=dist,
        size_a=size_a,
        size_b=size_b,
    )


def teds(a: Node, b: Node) -> TedsScore:
    """Similarity with cell text taken into account."""
    return _score(a, b, FULL)


def teds_struct(a: Node, b: Node) -> TedsScore:
    """Similarity of structure only; cell text is ignored."""
    return _score(a, b, STRUCT)


def read_jsonl(path) -> dict[str, dict]:
    """Load a ``{"id": ..., ...}``-per-line file into an id-keyed dict."""
    records: dict[str, dict] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: bad JSON: {exc}") from exc
            sample_id = record.get("id")
            if not isinstance(sample_id, str):
                raise ValueError(f"{path}:{lineno}: missing string id")
            if sample_id in records:
                raise DuplicateId(f"{path}: duplicate id {sample_id!r}")
            records[sample_id] = record
    return records


def _score_one(sample_id: str, gt_html: str, pred_html: str | None) -> dict:
    gt_tree = parse_html(gt_html)
    bucket = classify(gt_tree)
    if pred_html is None:
        return {
            "id": sample_id,
            "class": bucket,
            "teds": 0.0,
            "teds_struct": 0.0,
            "missing": True,
        }
    # Model output may be arbitrarily broken; repair never raises.
    try:
        pred_tree = parse_html(pred_html)
    except MalformedHtml:
        pred_tree = parse_html(pred_html, repair=True)
    return {
        "id": sample_id,
        "class": bucket,
        "teds": teds(pred_tree, gt_tree).value,
        "teds_struct": teds_struct(pred_tree, gt_tree).value,
        "missing": False,
    }


def _bucket_means(per_sample: list[dict], key: str) -> dict:
    sums = {SIMPLE: 0.0, COMPLEX: 0.0}
    counts = {SIMPLE: 0, COMPLEX: 0}
    for row in per_sample:
        sums[row["class"]] += row[key]
        counts[row["class"]] += 1
    total = counts[SIMPLE] + counts[COMPLEX]
    return {
        "simple": sums[SIMPLE] / counts[SIMPLE] if counts[SIMPLE] else None,
        "complex": sums[COMPLEX] / counts[COMPLEX] if counts[COMPLEX] else None,
        "all": (sums[SIMPLE] + sums[COMPLEX]) / total if total else None,
    }


def score_batch(pred_file, gt_file, threads: int = 1, gt_split: str | None = None) -> dict:
    """Score a prediction file against ground truth.

    Both files are JSONL with ``id`` and ``html`` keys (extra keys are
    ignored). A ground-truth id missing from the predictions scores 0.
    Means are reported over the Simple and Complex buckets of the ground
    truth, and over everything; samples are always aggregated in id order.
    ``gt_split`` restricts scoring to ground-truth records carrying that
    ``split`` value (the default scores every record).
    """
    for path in (pred_file, gt_file):
        if not Path(path).exists():
            raise FileNotFoundError(path)
    preds = read_jsonl(pred_file)
    gts = read_jsonl(gt_file)
    if gt_split is not None:
        gts = {k: v for k, v in gts.items() if v.get("split") == gt_split}
    ordered = sorted(gts)

    def work(sample_id: str) -> dict:
        pred = preds.get(sample_id)
        pred_html = pred.get("html") if pred is not None else None
        return _score_one(sample_id, gts[sample_id]["html"], pred_html)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_sample = list(pool.map(work, ordered))
    else:
        per_sample = [work(sid) for sid in ordered]

    return {
        "n": len(per_sample),
        "teds": _bucket_means(per_sample, "teds"),
        "teds_struct": _bucket_means(per_sample, "teds_struct"),
        "per_sample": per_sample,
    }
