"""Label taxonomy: parsing, validation, and the logit-layout contract.

A taxonomy is a rooted tree. Every internal node with two or more children
forms a sibling group that owns one softmax head; document order of the
input file fixes leaf and group ordering, so layouts are reproducible.
Leaves may terminate at any depth. Single-child internal nodes are
rejected: a one-way softmax carries no information and silently breaks
the per-group probability contract.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from hiercls.errors import NotALeafError, TaxonomyError, UnknownNodeError

INACTIVE = -1

DEFAULT_TAXONOMY_RESOURCE = "leukemia.taxonomy.json"


@dataclass(frozen=True)
class TaxonomyNode:
    id: str
    display_name: str
    parent: str | None
    level: int
    children: tuple[str, ...]

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass(frozen=True)
class SiblingGroup:
    """Children of one internal node; each group owns one softmax head."""

    parent: str
    children: tuple[str, ...]
    level: int  # level of the children (= parent level + 1)


@dataclass(frozen=True)
class Segment:
    group: str
    offset: int
    length: int
    level: int
    children: tuple[str, ...]


@dataclass(frozen=True)
class LogitLayout:
    """Contiguous placement of every sibling group inside one score vector."""

    total_logits: int
    segments: tuple[Segment, ...]

    def segment_for(self, group: str) -> Segment:
        for seg in self.segments:
            if seg.group == group:
                return seg
        raise UnknownNodeError(f"no sibling group with parent {group!r}")

    def logit_index(self, node: str) -> int:
        """Position of a node's score inside the flat vector."""
        for seg in self.segments:
            if node in seg.children:
                return seg.offset + seg.children.index(node)
        raise UnknownNodeError(f"node {node!r} has no logit in this layout")


@dataclass(frozen=True)
class PathLabel:
    """A leaf plus its ancestor chain, root excluded, ordered top-down."""

    leaf: str
    path: tuple[str, ...]


@dataclass(frozen=True, eq=False)
class Taxonomy:
    root: str
    nodes: dict[str, TaxonomyNode]
    node_order: tuple[str, ...]  # document order, preorder
    leaf_order: tuple[str, ...]
    groups: tuple[SiblingGroup, ...]

    def __post_init__(self):
        object.__setattr__(self, "_path_cache", {})

    def __eq__(self, other):
        if not isinstance(other, Taxonomy):
            return NotImplemented
        return (
            self.root == other.root
            and self.nodes == other.nodes
            and self.node_order == other.node_order
        )

    @property
    def group_order(self) -> tuple[str, ...]:
        return tuple(g.parent for g in self.groups)

    def node(self, node_id: str) -> TaxonomyNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNodeError(f"unknown node id {node_id!r}") from None

    def leaf_index(self, leaf: str) -> int:
        node = self.node(leaf)
        if not node.is_leaf:
            raise NotALeafError(f"{leaf!r} is an internal node, not a leaf")
        return self.leaf_order.index(leaf)

    def leaf_path(self, leaf: str) -> PathLabel:
        node = self.node(leaf)
        if not node.is_leaf:
            raise NotALeafError(f"{leaf!r} is an internal node, not a leaf")
        cached = self._path_cache.get(leaf)
        if cached is None:
            chain = []
            cur: str | None = leaf
            while cur is not None and cur != self.root:
                chain.append(cur)
                cur = self.nodes[cur].parent
            cached = PathLabel(leaf=leaf, path=tuple(reversed(chain)))
            self._path_cache[leaf] = cached
        return cached

    def augmented_set(self, node_id: str, include_root: bool = False) -> frozenset[str]:
        """The node with its proper ancestors.

        The root is excluded by default: a universal ancestor would hand
        every prediction a guaranteed match and inflate the hierarchical
        precision/recall scores. ``include_root=True`` exists for
        sensitivity checks only.
        """
        self.node(node_id)
        out = set()
        cur: str | None = node_id
        while cur is not None:
            if cur != self.root or include_root:
                out.add(cur)
            cur = self.nodes[cur].parent
        return frozenset(out)

    def logit_layout(self) -> LogitLayout:
        segments = []
        offset = 0
        for g in self.groups:
            segments.append(
                Segment(
                    group=g.parent,
                    offset=offset,
                    length=len(g.children),
                    level=g.level,
                    children=g.children,
                )
            )
            offset += len(g.children)
        return LogitLayout(total_logits=offset, segments=tuple(segments))

    def encode_target(self, leaf: str) -> np.ndarray:
        """Per-group target: on-path child index, or INACTIVE when the
        group's parent is not on the leaf's path."""
        path = set(self.leaf_path(leaf).path)
        path.add(self.root)
        out = np.full(len(self.groups), INACTIVE, dtype=np.int64)
        for i, g in enumerate(self.groups):
            if g.parent in path:
                for j, child in enumerate(g.children):
                    if child in path or child == leaf:
                        out[i] = j
                        break
        return out

    def max_level(self) -> int:
        return max(n.level for n in self.nodes.values())

    def serialize(self) -> str:
        """Canonical JSON document; reparsing yields an equal Taxonomy."""

        def build(node_id: str) -> dict:
            node = self.nodes[node_id]
            doc: dict = {"name": node.id}
            if node.display_name != node.id:
                doc["display_name"] = node.display_name
            if node.children:
                doc["children"] = [build(c) for c in node.children]
            return doc

        return json.dumps(build(self.root), indent=2) + "\n"

    def fingerprint(self) -> str:
        """Content hash binding checkpoints to the taxonomy they were trained on."""
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()


def _validate_and_build(
    entries: list[tuple[str, str, str | None]],
) -> Taxonomy:
    """Build from (id, display_name, parent_id) rows in document order."""
    if not entries:
        raise TaxonomyError("empty taxonomy document")
    seen: dict[str, int] = {}
    for pos, (node_id, _, _) in enumerate(entries):
        if not node_id:
            raise TaxonomyError(f"node at position {pos} has an empty id")
        if node_id in seen:
            raise TaxonomyError(f"duplicate node id {node_id!r}")
        seen[node_id] = pos

    roots = [e[0] for e in entries if e[2] is None]
    if len(roots) != 1:
        raise TaxonomyError(f"expected exactly one root, found {len(roots)}")
    root = roots[0]

    children: dict[str, list[str]] = {e[0]: [] for e in entries}
    for node_id, _, parent in entries:
        if parent is None:
            continue
        if parent not in children:
            raise TaxonomyError(f"node {node_id!r} references unknown parent {parent!r}")
        children[parent].append(node_id)

    # Levels via traversal from the root; anything unreached is a cycle
    # or a disconnected component.
    levels: dict[str, int] = {root: 0}
    stack = [root]
    while stack:
        cur = stack.pop()
        for child in children[cur]:
            levels[child] = levels[cur] + 1
            stack.append(child)
    if len(levels) != len(entries):
        missing = [e[0] for e in entries if e[0] not in levels]
        raise TaxonomyError(f"nodes not reachable from root (cycle?): {missing}")

    for node_id, kids in children.items():
        if len(kids) == 1:
            raise TaxonomyError(
                f"internal node {node_id!r} has a single child; "
                "sibling groups need at least two"
            )

    nodes = {}
    parent_of = {e[0]: e[2] for e in entries}
    display_of = {e[0]: e[1] for e in entries}
    for node_id, _, _ in entries:
        nodes[node_id] = TaxonomyNode(
            id=node_id,
            display_name=display_of[node_id],
            parent=parent_of[node_id],
            level=levels[node_id],
            children=tuple(children[node_id]),
        )

    node_order = tuple(e[0] for e in entries)
    leaf_order = tuple(n for n in node_order if not nodes[n].children)
    groups = tuple(
        SiblingGroup(parent=n, children=tuple(children[n]), level=levels[n] + 1)
        for n in node_order
        if children[n]
    )
    return Taxonomy(
        root=root, nodes=nodes, node_order=node_order, leaf_order=leaf_order, groups=groups
    )


def _parse_json_doc(doc, entries: list, parent: str | None, where: str) -> None:
    if not isinstance(doc, dict):
        raise TaxonomyError(f"{where}: expected an object, got {type(doc).__name__}")
    name = doc.get("name")
    if not isinstance(name, str) or not name:
        raise TaxonomyError(f"{where}: missing or empty \"name\"")
    display = doc.get("display_name", name)
    if not isinstance(display, str):
        raise TaxonomyError(f"{where}: \"display_name\" must be a string")
    entries.append((name, display, parent))
    kids = doc.get("children", [])
    if not isinstance(kids, list):
        raise TaxonomyError(f"{where}: \"children\" must be a list")
    for i, kid in enumerate(kids):
        _parse_json_doc(kid, entries, name, f"{where}.children[{i}]")


def _parse_indented(text: str) -> list[tuple[str, str, str | None]]:
    """Indentation format: one node name per line, children indented deeper.

    Any consistent increase in leading spaces opens a level; blank lines
    and ``#`` comment lines are ignored.
    """
    entries: list[tuple[str, str, str | None]] = []
    stack: list[tuple[int, str]] = []  # (indent, node id)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        indent = len(raw) - len(raw.lstrip(" "))
        if "\t" in raw[: indent + 1]:
            raise TaxonomyError(f"line {lineno}: tabs are not allowed in indentation")
        while stack and indent <= stack[-1][0]:
            stack.pop()
        if not stack:
            if entries:
                raise TaxonomyError(
                    f"line {lineno}: second root {stripped!r}; only one allowed"
                )
            parent = None
        else:
            parent = stack[-1][1]
        entries.append((stripped, stripped, parent))
        stack.append((indent, stripped))
    return entries


def parse_taxonomy(text: str) -> Taxonomy:
    """Parse a JSON-object or indentation-based taxonomy document."""
    if text.lstrip().startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise TaxonomyError(f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}")
        entries: list[tuple[str, str, str | None]] = []
        _parse_json_doc(doc, entries, None, "$")
        return _validate_and_build(entries)
    return _validate_and_build(_parse_indented(text))


def load_taxonomy_file(path: str) -> Taxonomy:
    with open(path, "r", encoding="utf-8") as f:
        return parse_taxonomy(f.read())


def load_default_taxonomy() -> Taxonomy:
    """The bundled leukemia-subtype tree (7 leaves, 4 sibling groups)."""
    text = (
        resources.files("hiercls").joinpath(f"resources/{DEFAULT_TAXONOMY_RESOURCE}").read_text("utf-8")
    )
    return parse_taxonomy(text)
