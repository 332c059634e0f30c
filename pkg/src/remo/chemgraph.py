"""Molecular graphs and a SMILES subset parser.

Molecules are plain 2D graphs: heavy atoms as nodes, bonds as typed edges.
Implicit hydrogens are atom attributes, never nodes. Aromaticity is taken
as written in the input (lowercase atoms / ':' bonds); no perception or
kekulization is performed. Stereo markers and isotopes are accepted and
discarded.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

import numpy as np

# Bare (organic-subset) atoms; everything else must be bracketed.
ORGANIC_SUBSET = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")
AROMATIC_SYMBOLS = ("b", "c", "n", "o", "p", "s")

# Bracket-only elements seen in common reaction corpora (salts, metals,
# organometallics). Ordering is frozen: encoder atom vocabularies index it.
BRACKET_ELEMENTS = (
    "Li", "Na", "K", "Cs", "Mg", "Ca", "Ba", "Al", "Si", "Sn", "Pb",
    "Ti", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Pd", "Pt", "Ag",
    "Au", "Hg", "Se", "As", "W",
)

SUPPORTED_ELEMENTS = ORGANIC_SUBSET + BRACKET_ELEMENTS

# Placeholder element for masked atoms; never produced by the parser.
MASK_ELEMENT = "*"

# Default valences used for implicit-hydrogen fill on bare organic-subset
# atoms (smallest valence >= bond-order sum wins).
_DEFAULT_VALENCES = {
    "B": (3,),
    "C": (4,),
    "N": (3, 5),
    "O": (2,),
    "P": (3, 5),
    "S": (2, 4, 6),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
}

DISCONNECTED = -1


class BondOrder(enum.IntEnum):
    """Bond types, ordered canonically (used to sort environment tokens)."""

    SINGLE = 0
    DOUBLE = 1
    TRIPLE = 2
    AROMATIC = 3
    MASK = 4

    @property
    def label(self) -> str:
        return self.name.lower()


_BOND_CHARS = {"-": BondOrder.SINGLE, "=": BondOrder.DOUBLE,
               "#": BondOrder.TRIPLE, ":": BondOrder.AROMATIC}
_BOND_SYMBOLS = {BondOrder.SINGLE: "-", BondOrder.DOUBLE: "=",
                 BondOrder.TRIPLE: "#", BondOrder.AROMATIC: ":"}


class SmilesError(ValueError):
    """Malformed SMILES input; carries the character offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Atom:
    element: str
    formal_charge: int = 0
    implicit_h: int = 0
    aromatic: bool = False
    map_num: int | None = None

    def __post_init__(self):
        if self.implicit_h < 0:
            raise ValueError("implicit_h must be non-negative")
        if self.element != MASK_ELEMENT and self.element not in SUPPORTED_ELEMENTS:
            raise ValueError(f"unsupported element {self.element!r}")


@dataclass(frozen=True)
class Bond:
    i: int
    j: int
    order: BondOrder

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("self-loop bond")

    @property
    def endpoints(self) -> tuple[int, int]:
        return (self.i, self.j) if self.i < self.j else (self.j, self.i)

    def other(self, idx: int) -> int:
        return self.j if idx == self.i else self.i


@dataclass(eq=False)
class MolecularGraph:
    atoms: list[Atom]
    bonds: list[Bond]
    adjacency: list[list[int]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.adjacency:
            self.adjacency = _build_adjacency(len(self.atoms), self.bonds)

    def __len__(self) -> int:
        return len(self.atoms)

    def degree(self, i: int) -> int:
        return len(self.adjacency[i])

    def incident_bonds(self, i: int) -> list[int]:
        """Indices into ``bonds`` of all bonds touching atom ``i``."""
        return [k for k, b in enumerate(self.bonds) if i in (b.i, b.j)]

    def bond_between(self, i: int, j: int) -> Bond | None:
        for b in self.bonds:
            if {b.i, b.j} == {i, j}:
                return b
        return None

    def map_to_index(self) -> dict[int, int]:
        """atom-map number -> atom index, for the mapped atoms only."""
        return {a.map_num: i for i, a in enumerate(self.atoms) if a.map_num}


def _build_adjacency(n: int, bonds: list[Bond]) -> list[list[int]]:
    adj: list[list[int]] = [[] for _ in range(n)]
    seen = set()
    for b in bonds:
        if not (0 <= b.i < n and 0 <= b.j < n):
            raise ValueError(f"bond endpoint out of range: {b}")
        key = b.endpoints
        if key in seen:
            raise ValueError(f"parallel bond between atoms {key}")
        seen.add(key)
        adj[b.i].append(b.j)
        adj[b.j].append(b.i)
    for nbrs in adj:
        nbrs.sort()
    return adj


def valence_fill(element: str, aromatic: bool, orders: list[BondOrder]) -> int:
    """Implicit-H count for a bare atom given its incident bond orders.

    Aromatic bonds count 1.5 and the sum is rounded up, so a ring carbon
    with two aromatic bonds fills to one hydrogen while a fusion carbon
    with three fills to none.
    """
    total = 0.0
    for o in orders:
        if o is BondOrder.AROMATIC:
            total += 1.5
        elif o is BondOrder.MASK:
            total += 1.0
        else:
            total += int(o) + 1
    used = int(np.ceil(total - 1e-9))
    for v in _DEFAULT_VALENCES.get(element, ()):
        if v >= used:
            return v - used
    return 0


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

@dataclass
class _PendingAtom:
    element: str
    aromatic: bool
    charge: int = 0
    explicit_h: int | None = None  # None -> fill by valence
    map_num: int | None = None


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.pending: list[_PendingAtom] = []
        self.bonds: list[tuple[int, int, BondOrder | None]] = []
        self.ring_open: dict[int, tuple[int, BondOrder | None, int]] = {}

    def error(self, msg: str, offset: int | None = None):
        raise SmilesError(msg, self.pos if offset is None else offset)

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def take(self) -> str:
        ch = self.peek()
        self.pos += 1
        return ch

    def run(self) -> MolecularGraph:
        prev: int | None = None
        pending_bond: BondOrder | None = None
        bond_offset = -1
        stack: list[int] = []
        while self.pos < len(self.text):
            ch = self.peek()
            if ch == ".":
                if prev is None and not self.pending:
                    self.error("fragment separator before any atom")
                if pending_bond is not None:
                    self.error("dangling bond symbol before '.'", bond_offset)
                self.take()
                prev = None
            elif ch == "(":
                if prev is None:
                    self.error("branch start before any atom")
                stack.append(prev)
                self.take()
            elif ch == ")":
                if not stack:
                    self.error("unmatched ')'")
                if pending_bond is not None:
                    self.error("dangling bond symbol before ')'", bond_offset)
                prev = stack.pop()
                self.take()
            elif ch in _BOND_CHARS:
                if pending_bond is not None:
                    self.error("two consecutive bond symbols")
                pending_bond = _BOND_CHARS[ch]
                bond_offset = self.pos
                self.take()
            elif ch in "/\\":
                # Stereo bond markers: treated as single bonds.
                if pending_bond is not None:
                    self.error("two consecutive bond symbols")
                pending_bond = BondOrder.SINGLE
                bond_offset = self.pos
                self.take()
            elif ch.isdigit() or ch == "%":
                if prev is None:
                    self.error("ring closure before any atom")
                self.ring_closure(prev, pending_bond)
                pending_bond = None
            else:
                idx = self.atom()
                if prev is not None:
                    self.bonds.append((prev, idx, pending_bond))
                elif pending_bond is not None:
                    self.error("bond symbol before first atom of fragment",
                               bond_offset)
                pending_bond = None
                prev = idx
        if stack:
            self.error("unclosed branch", len(self.text) - 1)
        if self.ring_open:
            n = sorted(self.ring_open)[0]
            self.error(f"unclosed ring closure {n}", self.ring_open[n][2])
        if pending_bond is not None:
            self.error("dangling bond symbol at end of input", bond_offset)
        if not self.pending:
            self.error("no atoms in input", 0)
        return self.finish()

    def ring_closure(self, current: int, order: BondOrder | None):
        start = self.pos
        if self.peek() == "%":
            self.take()
            digits = ""
            while self.peek().isdigit():
                digits += self.take()
            if len(digits) < 2:
                self.error("'%' ring closure needs two digits", start)
            num = int(digits[:2])
            self.pos = start + 1 + 2
        else:
            num = int(self.take())
        if num in self.ring_open:
            other, open_order, _ = self.ring_open.pop(num)
            if other == current:
                self.error(f"ring closure {num} bonds atom to itself", start)
            if open_order is not None and order is not None and open_order != order:
                self.error(f"conflicting bond orders for ring closure {num}", start)
            self.bonds.append((other, current, order or open_order))
        else:
            self.ring_open[num] = (current, order, start)

    def atom(self) -> int:
        start = self.pos
        ch = self.peek()
        if ch == "[":
            return self.bracket_atom()
        # Two-letter organic subset first.
        two = self.text[self.pos:self.pos + 2]
        if two in ("Cl", "Br"):
            self.pos += 2
            self.pending.append(_PendingAtom(two, aromatic=False))
            return len(self.pending) - 1
        if ch in ORGANIC_SUBSET:
            self.take()
            self.pending.append(_PendingAtom(ch, aromatic=False))
            return len(self.pending) - 1
        if ch in AROMATIC_SYMBOLS:
            self.take()
            self.pending.append(_PendingAtom(ch.upper(), aromatic=True))
            return len(self.pending) - 1
        self.error(f"unexpected character {ch!r}", start)

    def bracket_atom(self) -> int:
        start = self.pos
        self.take()  # '['
        # Isotope: parsed and discarded.
        while self.peek().isdigit():
            self.take()
        sym_start = self.pos
        two = self.text[self.pos:self.pos + 2]
        sym = None
        if two and two[0].isupper() and len(two) == 2 and two in SUPPORTED_ELEMENTS:
            sym, aromatic = two, False
            self.pos += 2
        elif self.peek().isupper():
            c = self.take()
            if c not in SUPPORTED_ELEMENTS:
                self.error(f"unsupported element {c!r}", sym_start)
            sym, aromatic = c, False
        elif self.peek() in AROMATIC_SYMBOLS:
            sym, aromatic = self.take().upper(), True
        else:
            self.error("expected element symbol in bracket", self.pos)
        charge = 0
        explicit_h = 0
        map_num = None
        while self.peek() != "]":
            ch = self.peek()
            if ch == "@":
                self.take()  # chirality: discarded
            elif ch == "H":
                self.take()
                explicit_h = 1
                if self.peek().isdigit():
                    explicit_h = int(self.take())
            elif ch in "+-":
                sign = 1 if ch == "+" else -1
                self.take()
                if self.peek().isdigit():
                    charge = sign * int(self.take())
                else:
                    charge = sign
                    while self.peek() == ch:
                        self.take()
                        charge += sign
            elif ch == ":":
                self.take()
                digits = ""
                while self.peek().isdigit():
                    digits += self.take()
                if not digits:
                    self.error("atom map ':' needs digits")
                map_num = int(digits)
                if map_num <= 0:
                    self.error("atom map must be positive")
            elif ch == "":
                self.error("unterminated bracket atom", start)
            else:
                self.error(f"unexpected {ch!r} in bracket atom")
        self.take()  # ']'
        self.pending.append(
            _PendingAtom(sym, aromatic, charge, explicit_h, map_num))
        return len(self.pending) - 1

    def finish(self) -> MolecularGraph:
        n = len(self.pending)
        orders: list[list[BondOrder]] = [[] for _ in range(n)]
        bonds: list[Bond] = []
        seen = set()
        for i, j, order in self.bonds:
            if order is None:
                a, b = self.pending[i], self.pending[j]
                order = (BondOrder.AROMATIC if a.aromatic and b.aromatic
                         else BondOrder.SINGLE)
            key = (min(i, j), max(i, j))
            if key in seen:
                self.error(f"duplicate bond between atoms {key}", 0)
            seen.add(key)
            bonds.append(Bond(i, j, order))
            orders[i].append(order)
            orders[j].append(order)
        atoms = []
        for i, p in enumerate(self.pending):
            if p.explicit_h is None:
                h = valence_fill(p.element, p.aromatic, orders[i])
            else:
                h = p.explicit_h
            atoms.append(Atom(p.element, p.charge, h, p.aromatic, p.map_num))
        return MolecularGraph(atoms, bonds)


def parse_smiles(text: str) -> MolecularGraph:
    """Parse a SMILES string into a molecular graph.

    Supports the organic subset plus bracket atoms (charge, explicit H,
    atom map), branches, single/two-digit ring closures, aromatic
    lowercase atoms and dot-separated fragments. Raises SmilesError with
    a character offset on malformed input.
    """
    if not text or not text.strip():
        raise SmilesError("empty SMILES", 0)
    return _Parser(text.strip()).run()


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _atom_token(g: MolecularGraph, i: int) -> str:
    a = g.atoms[i]
    if a.element == MASK_ELEMENT:
        raise ValueError("cannot serialize a masked graph")
    sym = a.element.lower() if a.aromatic else a.element
    bare_ok = (
        a.element in ORGANIC_SUBSET
        and (not a.aromatic or a.element.lower() in AROMATIC_SYMBOLS)
        and a.formal_charge == 0
        and a.map_num is None
    )
    if bare_ok:
        orders = [b.order for k, b in enumerate(g.bonds) if i in (b.i, b.j)]
        if valence_fill(a.element, a.aromatic, orders) == a.implicit_h:
            return sym
    token = sym
    if a.implicit_h == 1:
        token += "H"
    elif a.implicit_h > 1:
        token += f"H{a.implicit_h}"
    if a.formal_charge == 1:
        token += "+"
    elif a.formal_charge == -1:
        token += "-"
    elif a.formal_charge > 1:
        token += f"+{a.formal_charge}"
    elif a.formal_charge < -1:
        token += f"-{-a.formal_charge}"
    if a.map_num is not None:
        token += f":{a.map_num}"
    return f"[{token}]"


def _bond_token(g: MolecularGraph, bond: Bond) -> str:
    a, b = g.atoms[bond.i], g.atoms[bond.j]
    if bond.order is BondOrder.SINGLE:
        return "-" if (a.aromatic and b.aromatic) else ""
    if bond.order is BondOrder.AROMATIC:
        return "" if (a.aromatic and b.aromatic) else ":"
    return _BOND_SYMBOLS[bond.order]


def serialize_smiles(g: MolecularGraph) -> str:
    """Write a SMILES string that re-parses to a graph isomorphic to ``g``."""
    if not g.atoms:
        raise ValueError("empty graph")
    n = len(g.atoms)
    visited = [False] * n
    closure_digits: dict[tuple[int, int], int] = {}
    closure_opened: set[tuple[int, int]] = set()
    free_digits = list(range(99, 0, -1))
    pieces: list[str] = []

    bond_lookup = {b.endpoints: b for b in g.bonds}

    def bond_of(i: int, j: int) -> Bond:
        return bond_lookup[(i, j) if i < j else (j, i)]

    def write(root: int) -> str:
        # DFS pre-pass marks tree edges; the remaining edges become ring
        # closures emitted at both endpoints.
        tree_children: dict[int, list[int]] = {}
        back_edges: dict[int, list[int]] = {}
        parent: dict[int, int | None] = {root: None}
        stack = [root]
        visited[root] = True
        while stack:
            v = stack.pop()
            kids = []
            for u in g.adjacency[v]:
                if not visited[u]:
                    visited[u] = True
                    parent[u] = v
                    kids.append(u)
                elif u != parent[v] and (min(u, v), max(u, v)) not in closure_digits:
                    closure_digits[(min(u, v), max(u, v))] = free_digits.pop()
                    back_edges.setdefault(v, []).append(u)
                    back_edges.setdefault(u, []).append(v)
            tree_children[v] = kids
            stack.extend(reversed(kids))

        def emit(v: int) -> str:
            s = _atom_token(g, v)
            for u in back_edges.get(v, ()):
                key = (min(u, v), max(u, v))
                d = closure_digits[key]
                tok = str(d) if d < 10 else f"%{d:02d}"
                if key not in closure_opened:
                    # Bond symbol goes on the opening occurrence only.
                    closure_opened.add(key)
                    s += _bond_token(g, bond_of(v, u)) + tok
                else:
                    s += tok
                    free_digits.append(d)
            kids = tree_children[v]
            for k, u in enumerate(kids):
                sub = _bond_token(g, bond_of(v, u)) + emit(u)
                if k < len(kids) - 1:
                    s += f"({sub})"
                else:
                    s += sub
            return s

        return emit(root)

    for root in range(n):
        if not visited[root]:
            pieces.append(write(root))
    return ".".join(pieces)


# ---------------------------------------------------------------------------
# Shortest paths
# ---------------------------------------------------------------------------

@dataclass
class ShortestPaths:
    """All-pairs unweighted shortest paths.

    ``dist[i, j]`` is the hop count, DISCONNECTED (-1) when unreachable.
    ``paths[i][j]`` lists bond indices along one shortest path from i to j
    (ties broken by smallest-neighbor-index-first BFS), None if unreachable,
    and () on the diagonal.
    """

    dist: np.ndarray
    paths: list[list[tuple[int, ...] | None]]


def all_pairs_shortest_paths(g: MolecularGraph) -> ShortestPaths:
    n = len(g.atoms)
    bond_idx = {b.endpoints: k for k, b in enumerate(g.bonds)}
    dist = np.full((n, n), DISCONNECTED, dtype=np.int64)
    paths: list[list[tuple[int, ...] | None]] = [[None] * n for _ in range(n)]
    for src in range(n):
        dist[src, src] = 0
        paths[src][src] = ()
        parent = [-1] * n
        q = deque([src])
        while q:
            v = q.popleft()
            for u in g.adjacency[v]:  # adjacency is sorted ascending
                if dist[src, u] == DISCONNECTED and u != src:
                    dist[src, u] = dist[src, v] + 1
                    parent[u] = v
                    q.append(u)
        for dst in range(n):
            if dst != src and dist[src, dst] != DISCONNECTED:
                edges = []
                v = dst
                while v != src:
                    p = parent[v]
                    edges.append(bond_idx[(min(p, v), max(p, v))])
                    v = p
                paths[src][dst] = tuple(reversed(edges))
    return ShortestPaths(dist, paths)


# ---------------------------------------------------------------------------
# Graph utilities
# ---------------------------------------------------------------------------

def disjoint_union(graphs: list[MolecularGraph]) -> tuple[MolecularGraph, list[int]]:
    """Merge graphs into one, returning the merged graph and per-input
    atom-index offsets."""
    atoms: list[Atom] = []
    bonds: list[Bond] = []
    offsets = []
    for g in graphs:
        off = len(atoms)
        offsets.append(off)
        atoms.extend(g.atoms)
        bonds.extend(Bond(b.i + off, b.j + off, b.order) for b in g.bonds)
    return MolecularGraph(atoms, bonds), offsets


def relabel(g: MolecularGraph, perm: list[int]) -> MolecularGraph:
    """Apply an atom permutation: new index of old atom i is perm[i]."""
    n = len(g.atoms)
    atoms: list[Atom] = [g.atoms[0]] * n
    for i, a in enumerate(g.atoms):
        atoms[perm[i]] = a
    bonds = [Bond(perm[b.i], perm[b.j], b.order) for b in g.bonds]
    return MolecularGraph(atoms, bonds)


def _atom_key(a: Atom) -> tuple:
    return (a.element, a.formal_charge, a.map_num or 0, a.aromatic, a.implicit_h)


def isomorphic(a: MolecularGraph, b: MolecularGraph) -> bool:
    """Exact isomorphism respecting element, charge, map number, aromatic
    flag, implicit-H count and bond orders. Backtracking with degree/key
    pruning; intended for molecule-sized graphs."""
    if len(a.atoms) != len(b.atoms) or len(a.bonds) != len(b.bonds):
        return False
    keys_a = sorted((_atom_key(x), a.degree(i)) for i, x in enumerate(a.atoms))
    keys_b = sorted((_atom_key(x), b.degree(i)) for i, x in enumerate(b.atoms))
    if keys_a != keys_b:
        return False

    n = len(a.atoms)
    orders_a = {bd.endpoints: bd.order for bd in a.bonds}
    orders_b = {bd.endpoints: bd.order for bd in b.bonds}
    mapping = [-1] * n
    used = [False] * n

    # Order candidates by connectivity to already-mapped atoms for pruning.
    by_key: dict[tuple, list[int]] = {}
    for j, x in enumerate(b.atoms):
        by_key.setdefault((_atom_key(x), b.degree(j)), []).append(j)

    def compatible(i: int, j: int) -> bool:
        for u in a.adjacency[i]:
            if mapping[u] >= 0:
                oa = orders_a[(min(i, u), max(i, u))]
                ob = orders_b.get((min(j, mapping[u]), max(j, mapping[u])))
                if ob != oa:
                    return False
        return True

    order = sorted(range(n), key=lambda i: (-a.degree(i), _atom_key(a.atoms[i])))

    def search(k: int) -> bool:
        if k == n:
            return True
        i = order[k]
        for j in by_key.get((_atom_key(a.atoms[i]), a.degree(i)), ()):
            if not used[j] and compatible(i, j):
                mapping[i] = j
                used[j] = True
                if search(k + 1):
                    return True
                mapping[i] = -1
                used[j] = False
        return False

    return search(0)


def with_atom(g: MolecularGraph, i: int, atom: Atom) -> MolecularGraph:
    """Copy of ``g`` with atom ``i`` replaced."""
    atoms = list(g.atoms)
    atoms[i] = atom
    return MolecularGraph(atoms, list(g.bonds))


__all__ = [
    "Atom", "Bond", "BondOrder", "MolecularGraph", "ShortestPaths",
    "SmilesError", "DISCONNECTED", "MASK_ELEMENT", "ORGANIC_SUBSET",
    "BRACKET_ELEMENTS", "SUPPORTED_ELEMENTS",
    "parse_smiles", "serialize_smiles", "all_pairs_shortest_paths",
    "disjoint_union", "relabel", "isomorphic", "valence_fill", "with_atom",
]
