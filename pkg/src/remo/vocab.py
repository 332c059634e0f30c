"""1-hop atom-environment tokens and the reconstruction vocabulary.

A token is an element symbol plus the sorted multiset of its adjacent
heavy-atom bond orders; the vocabulary indexes every distinct token seen
in a corpus, frequency-descending, with UNK reserved at index 0.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .chemgraph import BondOrder, MolecularGraph

VOCAB_FORMAT_VERSION = 1
ORDERING_RULE = "frequency_desc_then_lexicographic"


@dataclass(frozen=True, order=True)
class CentreToken:
    element: str
    bond_orders: tuple[BondOrder, ...]
    charge: int = 0

    def __post_init__(self):
        if tuple(sorted(self.bond_orders)) != self.bond_orders:
            raise ValueError("bond_orders must be sorted canonically")

    def label(self) -> str:
        orders = "+".join(o.label for o in self.bond_orders)
        tail = f"{self.charge:+d}" if self.charge else ""
        return f"{self.element}{tail}|{orders}"


UNK = CentreToken("UNK", ())


def token_of_atom(g: MolecularGraph, i: int,
                  include_charge: bool = False) -> CentreToken:
    """Element of atom ``i`` plus the sorted orders of its incident bonds.

    Formal charge is excluded by default; ``include_charge`` switches to
    the charge-aware variant.
    """
    orders = tuple(sorted(b.order for b in g.bonds if i in (b.i, b.j)))
    charge = g.atoms[i].formal_charge if include_charge else 0
    return CentreToken(g.atoms[i].element, orders, charge)


class Vocabulary:
    """Token <-> index table with UNK at index 0.

    Real tokens occupy indices 1..V-1, ordered by corpus frequency
    descending with lexicographic tie-break, so rebuilds from identical
    corpora are reproducible.
    """

    def __init__(self, counts: dict[CentreToken, int],
                 include_charge: bool = False):
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        self.tokens: list[CentreToken] = [UNK] + [t for t, _ in ranked]
        self.counts: dict[CentreToken, int] = dict(ranked)
        self.index: dict[CentreToken, int] = {
            t: i for i, t in enumerate(self.tokens)}
        self.include_charge = include_charge

    def __len__(self) -> int:
        return len(self.tokens)

    def index_of(self, token: CentreToken) -> int:
        """Index of ``token``, UNK (0) when unseen at build time."""
        return self.index.get(token, 0)

    def sha256(self) -> str:
        payload = json.dumps(self._token_rows(), separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()

    def _token_rows(self) -> list[dict]:
        return [
            {"element": t.element, "bonds": [o.label for o in t.bond_orders],
             **({"charge": t.charge} if self.include_charge else {}),
             "count": self.counts[t]}
            for t in self.tokens[1:]
        ]

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        doc = {
            "version": VOCAB_FORMAT_VERSION,
            "ordering_rule": ORDERING_RULE,
            "include_charge": self.include_charge,
            "tokens": self._token_rows(),
        }
        if meta:
            doc["meta"] = meta
        Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("version") != VOCAB_FORMAT_VERSION:
            raise ValueError(f"unsupported vocabulary version {doc.get('version')}")
        include_charge = bool(doc.get("include_charge", False))
        counts: dict[CentreToken, int] = {}
        for row in doc["tokens"]:
            orders = tuple(sorted(BondOrder[b.upper()] for b in row["bonds"]))
            token = CentreToken(row["element"], orders, row.get("charge", 0))
            counts[token] = row["count"]
        vocab = cls(counts, include_charge)
        return vocab


def build_vocab(corpus: Iterable[MolecularGraph],
                include_charge: bool = False) -> Vocabulary:
    """Count 1-hop tokens over every atom of every corpus molecule."""
    counts: Counter[CentreToken] = Counter()
    n = 0
    for g in corpus:
        n += 1
        for i in range(len(g.atoms)):
            counts[token_of_atom(g, i, include_charge)] += 1
    if n == 0:
        raise ValueError("empty corpus")
    return Vocabulary(dict(counts), include_charge)


def token_distribution(corpus: Sequence[MolecularGraph], vocab: Vocabulary,
                       atom_indices: Sequence[Sequence[int]] | None = None,
                       ) -> list[tuple[CentreToken, int, float]]:
    """Frequency table (token, count, fraction) over corpus atoms.

    ``atom_indices`` optionally restricts counting to the given atoms of
    each molecule (e.g. reaction-centre atoms only). Tokens unseen by the
    vocabulary are tallied under UNK. Fractions sum to 1 within 1e-9.
    """
    counts: Counter[CentreToken] = Counter()
    for k, g in enumerate(corpus):
        idx = range(len(g.atoms)) if atom_indices is None else atom_indices[k]
        for i in idx:
            token = token_of_atom(g, i, vocab.include_charge)
            if token not in vocab.index:
                token = UNK
            counts[token] += 1
    total = sum(counts.values())
    if total == 0:
        return []
    rows = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [(t, c, c / total) for t, c in rows]


def write_distribution_csv(rows: list[tuple[CentreToken, int, float]],
                           path: str | Path,
                           header_comment: str | None = None) -> None:
    """CSV with header token,count,fraction (optional leading '#' comment)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write("token,count,fraction\n")
        for token, count, fraction in rows:
            fh.write(f"{token.label()},{count},{fraction:.12g}\n")


__all__ = [
    "CentreToken", "Vocabulary", "UNK", "VOCAB_FORMAT_VERSION",
    "token_of_atom", "build_vocab", "token_distribution",
    "write_distribution_csv",
]
