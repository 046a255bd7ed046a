"""Canonical table trees and the restricted HTML grammar they serialize to.

The grammar covers exactly ``{table, thead, tbody, tr, td}`` with integer
``rowspan``/``colspan`` attributes on ``td``. Anything else is an error in
strict mode: unknown tags, unknown attributes, inline markup inside cells.
Whitespace *between* structural tags is ignored; text inside an open ``td``
is cell content and is preserved verbatim.

A lenient mode exists for scoring model output: it never raises, skipping
whatever does not fit the grammar and closing whatever was left open.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

STRUCT_TAGS = ("table", "thead", "tbody", "tr", "td")

SIMPLE = "Simple"
COMPLEX = "Complex"


class MalformedHtml(ValueError):
    """Input text does not conform to the restricted table grammar."""


@dataclass(frozen=True)
class Node:
    """One node of a table tree.

    ``rowspan``/``colspan``/``content`` are meaningful for ``td`` only and
    keep their defaults elsewhere. Instances are immutable; trees compare
    structurally, content included.
    """

    tag: str
    rowspan: int = 1
    colspan: int = 1
    content: str = ""
    children: tuple["Node", ...] = field(default_factory=tuple)

    def node_count(self) -> int:
        """Number of nodes in the subtree, this node included."""
        return 1 + sum(child.node_count() for child in self.children)

    def cells(self) -> list["Node"]:
        """All td nodes in document order."""
        if self.tag == "td":
            return [self]
        out: list[Node] = []
        for child in self.children:
            out.extend(child.cells())
        return out

    def rows(self) -> list["Node"]:
        """All tr nodes in document order."""
        if self.tag == "tr":
            return [self]
        out: list[Node] = []
        for child in self.children:
            out.extend(child.rows())
        return out

    def strip_content(self) -> "Node":
        """The same tree with every cell's text removed."""
        if self.tag == "td":
            return replace(self, content="")
        return replace(self, children=tuple(c.strip_content() for c in self.children))


# Tag nesting rules: which child tags a parent admits.
_ALLOWED_CHILDREN = {
    "table": ("thead", "tbody"),
    "thead": ("tr",),
    "tbody": ("tr",),
    "tr": ("td",),
    "td": (),
}

_TAG_RE = re.compile(r"<(/?)([a-zA-Z][a-zA-Z0-9]*)((?:\s+[^<>]*?)?)\s*(/?)>")
_ATTR_RE = re.compile(r'([a-zA-Z][a-zA-Z0-9_-]*)\s*=\s*(?:"([^"]*)"|(\S+))')

_ESCAPES = [("&", "&amp;"), ("<", "&lt;"), (">", "&gt;")]


def _escape(text: str) -> str:
    for raw, ent in _ESCAPES:
        text = text.replace(raw, ent)
    return text


def _unescape(text: str) -> str:
    for raw, ent in reversed(_ESCAPES):
        text = text.replace(ent, raw)
    return text


def _parse_span(name: str, raw: str) -> int:
    if not re.fullmatch(r"\d+", raw):
        raise MalformedHtml(f"non-integer {name} value {raw!r}")
    value = int(raw)
    if value < 1:
        raise MalformedHtml(f"{name} must be >= 1, got {value}")
    return value


class _Open:
    """Mutable frame for a tag still open during parsing."""

    __slots__ = ("tag", "rowspan", "colspan", "text", "children")

    def __init__(self, tag: str, rowspan: int = 1, colspan: int = 1):
        self.tag = tag
        self.rowspan = rowspan
        self.colspan = colspan
        self.text: list[str] = []
        self.children: list[Node] = []

    def close(self) -> Node:
        return Node(
            tag=self.tag,
            rowspan=self.rowspan,
            colspan=self.colspan,
            content=_unescape("".join(self.text)) if self.tag == "td" else "",
            children=tuple(self.children),
        )


def parse_html(html: str, *, repair: bool = False) -> Node:
    """Parse restricted table HTML into a canonical tree.

    Strict mode raises :class:`MalformedHtml` on anything outside the
    grammar. With ``repair=True`` the parser instead skips tokens that do
    not fit (unknown tags, misplaced elements, bad attributes), synthesizes
    missing ancestors for cells and rows, and closes open tags at the end;
    it always returns some valid tree, possibly a bare ``<table>``.
    """
    stack: list[_Open] = []
    root: Node | None = None
    pos = 0

    def fail(msg: str) -> None:
        raise MalformedHtml(msg)

    def open_tag(tag: str, rowspan: int, colspan: int) -> bool:
        nonlocal root
        if not stack:
            if tag != "table":
                if repair:
                    if tag in ("thead", "tbody", "tr", "td") and root is None:
                        stack.append(_Open("table"))
                        return open_tag(tag, rowspan, colspan)
                    return False
                fail(f"<{tag}> outside <table>")
            if root is not None:
                if repair:
                    return False
                fail("multiple root <table> elements")
            stack.append(_Open(tag, rowspan, colspan))
            return True
        parent = stack[-1]
        if tag not in _ALLOWED_CHILDREN[parent.tag]:
            if not repair:
                fail(f"<{tag}> not allowed inside <{parent.tag}>")
            # Synthesize the shortest valid path, or close frames until the
            # tag fits; drop it if neither is possible (e.g. nested table).
            if tag == "tr" and parent.tag == "table":
                stack.append(_Open("tbody"))
                return open_tag(tag, rowspan, colspan)
            if tag == "td" and parent.tag in ("table", "thead", "tbody"):
                if parent.tag == "table":
                    stack.append(_Open("tbody"))
                stack.append(_Open("tr"))
                return open_tag(tag, rowspan, colspan)
            if any(tag in _ALLOWED_CHILDREN[f.tag] for f in stack):
                while tag not in _ALLOWED_CHILDREN[stack[-1].tag]:
                    close_frame()
                return open_tag(tag, rowspan, colspan)
            return False
        stack.append(_Open(tag, rowspan, colspan))
        return True

    def close_frame() -> None:
        nonlocal root
        node = stack.pop().close()
        if stack:
            stack[-1].children.append(node)
        else:
            root = node

    while pos < len(html):
        lt = html.find("<", pos)
        if lt == -1:
            text = html[pos:]
            pos = len(html)
        else:
            text = html[pos:lt]
            pos = lt
        if text:
            if stack and stack[-1].tag == "td":
                stack[-1].text.append(text)
            elif text.strip():
                if not repair:
                    fail(f"stray text {text.strip()!r} outside a cell")
        if pos >= len(html):
            break
        match = _TAG_RE.match(html, pos)
        if not match:
            if stack and stack[-1].tag == "td":
                # A bare "<" inside a cell would be inline markup.
                if not repair:
                    fail("inline markup inside cell content")
                pos += 1
                continue
            if not repair:
                fail(f"unparseable tag at offset {pos}")
            pos += 1
            continue
        pos = match.end()
        closing, tag, attr_text, self_close = match.groups()
        tag = tag.lower()
        if tag not in STRUCT_TAGS:
            if not repair:
                fail(f"unknown tag <{tag}>")
            continue
        if self_close:
            if not repair:
                fail(f"self-closing <{tag}/> not allowed")
            continue
        if closing:
            if attr_text.strip():
                if not repair:
                    fail(f"attributes on closing tag </{tag}>")
            if not stack or stack[-1].tag != tag:
                if not repair:
                    fail(f"unexpected closing tag </{tag}>")
                if any(f.tag == tag for f in stack):
                    while stack[-1].tag != tag:
                        close_frame()
                    close_frame()
                continue
            close_frame()
            continue
        rowspan = colspan = 1
        attrs_ok = True
        seen: set[str] = set()
        for m in _ATTR_RE.finditer(attr_text):
            name = m.group(1).lower()
            raw = m.group(2) if m.group(2) is not None else m.group(3)
            if tag != "td" or name not in ("rowspan", "colspan") or name in seen:
                if not repair:
                    fail(f"attribute {name!r} not allowed on <{tag}>")
                continue
            seen.add(name)
            try:
                value = _parse_span(name, raw)
            except MalformedHtml:
                if not repair:
                    raise
                attrs_ok = False
                continue
            if name == "rowspan":
                rowspan = value
            else:
                colspan = value
        stray = _ATTR_RE.sub("", attr_text).strip()
        if stray and not repair:
            fail(f"malformed attributes {attr_text.strip()!r} on <{tag}>")
        if not attrs_ok and not repair:
            fail(f"bad span attributes on <{tag}>")
        open_tag(tag, rowspan, colspan)

    if stack:
        if not repair:
            raise MalformedHtml(f"unclosed <{stack[-1].tag}>")
        while stack:
            close_frame()
    if root is None:
        if repair:
            return Node("table")
        raise MalformedHtml("no <table> element found")
    return root


def to_html(tree: Node) -> str:
    """Serialize a tree to canonical HTML.

    Lowercase tags, no whitespace between tags, span attributes emitted only
    when greater than one (rowspan before colspan), double-quoted.
    ``parse_html(to_html(t)) == t`` for every valid tree.
    """
    parts: list[str] = []
    _serialize(tree, parts)
    return "".join(parts)


def _serialize(node: Node, parts: list[str]) -> None:
    if node.tag == "td":
        attrs = ""
        if node.rowspan > 1:
            attrs += f' rowspan="{node.rowspan}"'
        if node.colspan > 1:
            attrs += f' colspan="{node.colspan}"'
        parts.append(f"<td{attrs}>{_escape(node.content)}</td>")
        return
    parts.append(f"<{node.tag}>")
    for child in node.children:
        _serialize(child, parts)
    parts.append(f"</{node.tag}>")


def classify(tree: Node) -> str:
    """Bucket a table: ``Complex`` iff any cell spans rows or columns."""
    for cell in tree.cells():
        if cell.rowspan > 1 or cell.colspan > 1:
            return COMPLEX
    return SIMPLE
