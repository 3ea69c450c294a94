"""Zone identity, adjacency, and binary merge-history trees.

A :class:`ZonePartition` is an immutable snapshot. ``apply_merge`` and
``apply_split`` return new partitions with ``version + 1`` and leave the
input untouched, so hypothetical partitions can be built freely.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping, Union


class TopologyError(ValueError):
    pass


class UnknownZoneError(TopologyError, KeyError):
    pass


class MergeRejected(TopologyError):
    pass


class SplitRejected(TopologyError):
    pass


RESERVED_CHARS = "()+"


def merged_zone_id(a: str, b: str) -> str:
    return f"({a}+{b})"


@dataclass(frozen=True)
class Leaf:
    zone_id: str

    @property
    def leaves(self) -> frozenset:
        return frozenset((self.zone_id,))

    @property
    def depth(self) -> int:
        return 0

    def nodes(self) -> Iterator["MergeTree"]:
        yield self


@dataclass(frozen=True)
class Node:
    left: "MergeTree"
    right: "MergeTree"
    zone_id: str

    def __post_init__(self):
        if self.left.leaves & self.right.leaves:
            raise TopologyError("children of a merge node must cover disjoint atomic zones")
        object.__setattr__(self, "_leaves", self.left.leaves | self.right.leaves)

    @property
    def leaves(self) -> frozenset:
        return self._leaves

    @property
    def depth(self) -> int:
        return 1 + max(self.left.depth, self.right.depth)

    def nodes(self) -> Iterator["MergeTree"]:
        yield self
        yield from self.left.nodes()
        yield from self.right.nodes()


MergeTree = Union[Leaf, Node]


def sub_zones(tree: MergeTree, level: int) -> list[MergeTree]:
    """Nodes at depth 1..level (root is depth 0), breadth-first, left to right."""
    if level < 1:
        raise ValueError("level must be >= 1")
    out: list[MergeTree] = []
    frontier = [tree]
    for _ in range(level):
        nxt = []
        for node in frontier:
            if isinstance(node, Node):
                nxt.extend((node.left, node.right))
        out.extend(nxt)
        frontier = nxt
    return out


def find_path(tree: MergeTree, zone_id: str) -> list[MergeTree] | None:
    """Root-to-node path ending at the node named ``zone_id``."""
    if tree.zone_id == zone_id:
        return [tree]
    if isinstance(tree, Node):
        for child in (tree.left, tree.right):
            path = find_path(child, zone_id)
            if path is not None:
                return [tree] + path
    return None


def _edge(a: str, b: str) -> frozenset:
    return frozenset((a, b))


def closure_edges(trees: Mapping[str, MergeTree], atomic_edges: Iterable[frozenset]) -> frozenset:
    """Active zones are adjacent iff some atomic zone of one borders one of the other."""
    owner = {leaf: zid for zid, tree in trees.items() for leaf in tree.leaves}
    edges = set()
    for e in atomic_edges:
        a, b = tuple(e)
        za, zb = owner[a], owner[b]
        if za != zb:
            edges.add(_edge(za, zb))
    return frozenset(edges)


@dataclass(frozen=True)
class ZonePartition:
    atomic_ids: tuple
    atomic_edges: frozenset
    trees: Mapping[str, MergeTree]
    adjacency: frozenset
    version: int = 0
    names: Mapping[str, str] = MappingProxyType({})

    @classmethod
    def from_atomic(cls, zone_ids: Iterable[str], edges: Iterable[tuple[str, str]], names=None) -> "ZonePartition":
        ids = tuple(zone_ids)
        if len(set(ids)) != len(ids):
            raise TopologyError("atomic zone ids must be unique")
        for z in ids:
            if not z or any(c in z for c in RESERVED_CHARS) or any(c.isspace() for c in z):
                raise TopologyError(f"invalid atomic zone id {z!r}")
        known = set(ids)
        atomic_edges = set()
        for a, b in edges:
            if a not in known or b not in known:
                raise UnknownZoneError(f"edge ({a}, {b}) names an unknown zone")
            if a == b:
                raise TopologyError(f"self-loop on zone {a!r}")
            atomic_edges.add(_edge(a, b))
        trees = {z: Leaf(z) for z in ids}
        return cls(
            atomic_ids=ids,
            atomic_edges=frozenset(atomic_edges),
            trees=MappingProxyType(trees),
            adjacency=frozenset(atomic_edges),
            version=0,
            names=MappingProxyType(dict(names or {})),
        )

    @classmethod
    def grid(cls, rows: int, cols: int, prefix: str = "z") -> "ZonePartition":
        """Rectangular grid with 4-neighbour adjacency; ids numbered row-major."""
        if rows < 1 or cols < 1:
            raise ValueError("grid dimensions must be positive")

        def zid(r, c):
            return f"{prefix}{r * cols + c}"

        ids = [zid(r, c) for r in range(rows) for c in range(cols)]
        edges = []
        for r in range(rows):
            for c in range(cols):
                if c + 1 < cols:
                    edges.append((zid(r, c), zid(r, c + 1)))
                if r + 1 < rows:
                    edges.append((zid(r, c), zid(r + 1, c)))
        return cls.from_atomic(ids, edges)

    def collapsed(self, zone_id: str = "global") -> "ZonePartition":
        """One zone covering every atomic zone (the Global FL degenerate case)."""
        ids = sorted(self.atomic_ids)
        tree: MergeTree = Leaf(ids[0])
        for i, z in enumerate(ids[1:], start=1):
            tree = Node(tree, Leaf(z), zone_id if i == len(ids) - 1 else f"{zone_id}#{i}")
        zone_id = tree.zone_id
        return ZonePartition(
            self.atomic_ids, self.atomic_edges, MappingProxyType({zone_id: tree}),
            frozenset(), self.version, self.names,
        )

    # --- reads -------------------------------------------------------------

    @property
    def zones(self) -> list[str]:
        return sorted(self.trees)

    def __contains__(self, zone_id) -> bool:
        return zone_id in self.trees

    def tree(self, zone_id: str) -> MergeTree:
        try:
            return self.trees[zone_id]
        except KeyError:
            raise UnknownZoneError(f"{zone_id!r} is not an active zone") from None

    def leaves(self, zone_id: str) -> frozenset:
        return self.tree(zone_id).leaves

    def neighbors(self, zone_id: str) -> list[str]:
        self.tree(zone_id)
        return sorted(next(iter(e - {zone_id})) for e in self.adjacency if zone_id in e)

    def are_adjacent(self, a: str, b: str) -> bool:
        return _edge(a, b) in self.adjacency

    def merged_zones(self) -> list[str]:
        return [z for z in self.zones if isinstance(self.trees[z], Node)]

    def owner(self, atomic_id: str) -> str:
        for zid, tree in self.trees.items():
            if atomic_id in tree.leaves:
                return zid
        raise UnknownZoneError(f"{atomic_id!r} is not an atomic zone")

    def atomic_adjacency_closure(self) -> frozenset:
        return closure_edges(self.trees, self.atomic_edges)

    def check_invariants(self) -> None:
        seen: set = set()
        for tree in self.trees.values():
            if seen & tree.leaves:
                raise TopologyError("atomic zone covered twice")
            seen |= tree.leaves
        if seen != set(self.atomic_ids):
            raise TopologyError("active zones do not cover every atomic zone")
        for e in self.adjacency:
            if len(e) != 2 or not e <= set(self.trees):
                raise TopologyError(f"bad adjacency edge {set(e)}")

    # --- mutations (persistent) --------------------------------------------

    def _replace(self, trees: dict, adjacency) -> "ZonePartition":
        return ZonePartition(
            self.atomic_ids, self.atomic_edges, MappingProxyType(trees),
            frozenset(adjacency), self.version + 1, self.names,
        )

    def apply_merge(self, z_i: str, z_n: str, new_id: str | None = None) -> "ZonePartition":
        ti, tn = self.tree(z_i), self.tree(z_n)
        if not self.are_adjacent(z_i, z_n):
            raise MergeRejected(f"{z_i!r} and {z_n!r} are not adjacent")
        new_id = new_id or merged_zone_id(z_i, z_n)
        if new_id in self.trees:
            raise MergeRejected(f"zone id {new_id!r} already active")
        rewired = (set(self.neighbors(z_i)) | set(self.neighbors(z_n))) - {z_i, z_n}
        trees = {k: v for k, v in self.trees.items() if k not in (z_i, z_n)}
        trees[new_id] = Node(ti, tn, new_id)
        adjacency = {e for e in self.adjacency if z_i not in e and z_n not in e}
        adjacency |= {_edge(new_id, z) for z in rewired}
        return self._replace(trees, adjacency)

    def apply_split(self, merged_zone: str, candidate: str) -> "ZonePartition":
        """Detach ``candidate`` from ``merged_zone``; its ancestors dissolve."""
        tree = self.tree(merged_zone)
        path = find_path(tree, candidate)
        if path is None:
            raise SplitRejected(f"{candidate!r} is not part of {merged_zone!r}")
        if len(path) == 1:
            raise SplitRejected("cannot split a zone from itself")
        pieces = [path[-1]]
        for parent, child in zip(path[:-1], path[1:]):
            pieces.append(parent.right if parent.left is child else parent.left)
        trees = {k: v for k, v in self.trees.items() if k != merged_zone}
        for piece in pieces:
            if piece.zone_id in trees:
                raise SplitRejected(f"zone id {piece.zone_id!r} already active")
            trees[piece.zone_id] = piece
        adjacency = {e for e in self.adjacency if merged_zone not in e}
        owner = {leaf: p.zone_id for p in pieces for leaf in p.leaves}
        for e in self.atomic_edges:
            a, b = tuple(e)
            if a in owner or b in owner:
                za = owner.get(a) or self._owner_in(trees, a)
                zb = owner.get(b) or self._owner_in(trees, b)
                if za != zb:
                    adjacency.add(_edge(za, zb))
        return self._replace(trees, adjacency)

    @staticmethod
    def _owner_in(trees, atomic_id):
        for zid, tree in trees.items():
            if atomic_id in tree.leaves:
                return zid
        raise UnknownZoneError(atomic_id)


def neighbors(partition: ZonePartition, zone_id: str) -> list[str]:
    return partition.neighbors(zone_id)


def apply_merge(partition: ZonePartition, z_i: str, z_n: str) -> ZonePartition:
    return partition.apply_merge(z_i, z_n)


def apply_split(partition: ZonePartition, merged_zone: str, candidate: str) -> ZonePartition:
    return partition.apply_split(merged_zone, candidate)


def atomic_adjacency_closure(partition: ZonePartition) -> frozenset:
    return partition.atomic_adjacency_closure()
