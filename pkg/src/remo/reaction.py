"""Reaction SMILES parsing, centre detection and training-example extraction.

A reaction centre is the set of atom pairs whose bond type differs between
the atom-map-aligned reactant and product graphs: the minimal edit set
turning reactants into products. Atom maps are required input; no mapping
inference is attempted.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .chemgraph import BondOrder, MolecularGraph, SmilesError, parse_smiles
from .vocab import CentreToken, token_of_atom

log = logging.getLogger(__name__)

# Reactions whose primary would mask more centre atoms than this are
# treated as data noise and dropped.
MAX_CENTRE_ATOMS = 20


class ReactionError(ValueError):
    pass


@dataclass
class ReactionRecord:
    reactants: list[MolecularGraph]
    reagents: list[MolecularGraph]
    products: list[MolecularGraph]
    source_line: str = ""


@dataclass(frozen=True)
class CentrePair:
    """One edited bond: map numbers plus order before/after (None = absent)."""

    map_i: int
    map_j: int
    before: BondOrder | None
    after: BondOrder | None

    def __post_init__(self):
        if self.map_i > self.map_j:
            raise ValueError("pair must be stored with map_i <= map_j")
        if self.before == self.after:
            raise ValueError("centre pair with unchanged bond")


@dataclass
class ReactionCentre:
    pairs: frozenset[CentrePair]
    centre_atoms: frozenset[int]

    def __bool__(self) -> bool:
        return bool(self.pairs)


@dataclass
class PretrainExample:
    primary: MolecularGraph
    conditional: list[MolecularGraph]
    centre_atom_indices: list[int]
    mrcr_targets: list[CentreToken]
    rci_labels: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.rci_labels:
            self.rci_labels = [
                1 if i in set(self.centre_atom_indices) else 0
                for i in range(len(self.primary.atoms))
            ]


def parse_reaction(line: str) -> ReactionRecord:
    """Parse "reactants>reagents>products" (reagent segment may be empty).

    Segments split on "."; every component parses via the SMILES parser.
    Map numbers must be unique within the reactant side and within the
    product side.
    """
    segments = line.strip().split(">")
    if len(segments) != 3:
        raise ReactionError(
            f"expected 3 '>'-separated segments, got {len(segments)}")
    names = ("reactants", "reagents", "products")
    parsed: list[list[MolecularGraph]] = []
    offset = 0
    for seg_no, seg in enumerate(segments):
        mols = []
        part_offset = offset
        if seg.strip():
            for part in seg.split("."):
                try:
                    mols.append(parse_smiles(part))
                except SmilesError as e:
                    raise ReactionError(
                        f"{names[seg_no]} segment: {e.args[0].rsplit(' (offset', 1)[0]}"
                        f" (offset {part_offset + e.offset})") from e
                part_offset += len(part) + 1
        parsed.append(mols)
        offset += len(seg) + 1
    reactants, reagents, products = parsed
    if not reactants or not products:
        raise ReactionError("reaction needs at least one reactant and one product")
    for side, name in ((reactants, "reactant"), (products, "product")):
        seen: set[int] = set()
        for mol in side:
            for atom in mol.atoms:
                if atom.map_num is not None:
                    if atom.map_num in seen:
                        raise ReactionError(
                            f"duplicate atom map {atom.map_num} on {name} side")
                    seen.add(atom.map_num)
    return ReactionRecord(reactants, reagents, products, line.strip())


def _bond_table(mols: list[MolecularGraph],
                keep: set[int] | None = None) -> dict[tuple[int, int], BondOrder]:
    """Bond orders keyed by unordered map-number pair, over mapped atoms.

    ``keep`` restricts entries to pairs whose map numbers are both in it.
    """
    table: dict[tuple[int, int], BondOrder] = {}
    for mol in mols:
        for b in mol.bonds:
            mi = mol.atoms[b.i].map_num
            mj = mol.atoms[b.j].map_num
            if mi is None or mj is None:
                continue
            if keep is not None and (mi not in keep or mj not in keep):
                continue
            key = (mi, mj) if mi < mj else (mj, mi)
            table[key] = b.order
    return table


def detect_reaction_centre(r: ReactionRecord) -> ReactionCentre:
    """Diff reactant and product bond tables over the atom-map alignment.

    A pair enters the centre iff its bond order differs between sides,
    absence counting as a distinct value. The product table only covers
    atoms mapped on both sides, so a reactant bond losing an endpoint to
    an unmapped/absent product atom shows up as order -> absent.
    """
    reactant_maps = {a.map_num for m in r.reactants for a in m.atoms
                     if a.map_num is not None}
    if not reactant_maps:
        raise ReactionError("unmappable reaction: no mapped reactant atoms")
    before = _bond_table(r.reactants)
    after = _bond_table(r.products, keep=reactant_maps)
    pairs = set()
    for key in before.keys() | after.keys():
        b, a = before.get(key), after.get(key)
        if b != a:
            pairs.add(CentrePair(key[0], key[1], b, a))
    centre_atoms = frozenset(
        m for p in pairs for m in (p.map_i, p.map_j) if m in reactant_maps)
    return ReactionCentre(frozenset(pairs), centre_atoms)


def extract_examples(r: ReactionRecord, c: ReactionCentre,
                     max_centre_atoms: int = MAX_CENTRE_ATOMS,
                     ) -> list[PretrainExample]:
    """One example per reactant holding at least one centre atom.

    That reactant becomes the primary; all other reactants plus all
    reagents become the conditional molecules. Targets are the 1-hop
    environment tokens of the centre atoms in the unmasked primary.
    """
    if not c:
        raise ReactionError("cannot extract examples from an empty centre")
    examples = []
    for k, primary in enumerate(r.reactants):
        idx = [i for i, a in enumerate(primary.atoms)
               if a.map_num in c.centre_atoms]
        if not idx:
            continue
        if len(idx) > max_centre_atoms:
            log.warning("dropping primary with %d centre atoms (> %d): %s",
                        len(idx), max_centre_atoms, r.source_line)
            continue
        conditional = [m for j, m in enumerate(r.reactants) if j != k]
        conditional.extend(r.reagents)
        targets = [token_of_atom(primary, i) for i in idx]
        examples.append(PretrainExample(primary, conditional, idx, targets))
    return examples


# ---------------------------------------------------------------------------
# Corpus ingestion
# ---------------------------------------------------------------------------

REJECT_PARSE = "parse_error"
REJECT_UNMAPPABLE = "unmappable"
REJECT_EMPTY_CENTRE = "empty_centre"
REJECT_NO_EXAMPLES = "no_examples"


@dataclass
class CorpusEntry:
    line_no: int
    record: ReactionRecord
    centre: ReactionCentre
    examples: list[PretrainExample]


def _process_line(item: tuple[int, str],
                  max_centre_atoms: int) -> CorpusEntry | tuple[int, str, str]:
    line_no, line = item
    try:
        record = parse_reaction(line)
        centre = detect_reaction_centre(record)
    except ReactionError as e:
        code = REJECT_UNMAPPABLE if "unmappable" in str(e) else REJECT_PARSE
        return (line_no, code, str(e))
    if not centre:
        return (line_no, REJECT_EMPTY_CENTRE, "no bond changes detected")
    examples = extract_examples(record, centre, max_centre_atoms)
    if not examples:
        return (line_no, REJECT_NO_EXAMPLES,
                "all primaries dropped by centre-size guard")
    return CorpusEntry(line_no, record, centre, examples)


def load_corpus(path: str | Path, threads: int = 1,
                max_centre_atoms: int = MAX_CENTRE_ATOMS,
                rejects_to: str | Path | None = "auto",
                ) -> list[CorpusEntry]:
    """Read a reaction corpus: one reaction SMILES per line, '#' comments
    and blank lines skipped. Rejected lines go to "<input>.rejected" as
    tab-separated (line_no, reason_code, detail) rows.

    Output order follows input order regardless of worker count.
    """
    path = Path(path)
    items = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            items.append((line_no, line))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(
                lambda it: _process_line(it, max_centre_atoms), items))
    else:
        results = [_process_line(it, max_centre_atoms) for it in items]
    entries = [r for r in results if isinstance(r, CorpusEntry)]
    rejects = [r for r in results if not isinstance(r, CorpusEntry)]
    if rejects_to is not None:
        target = path.with_name(path.name + ".rejected") \
            if rejects_to == "auto" else Path(rejects_to)
        with open(target, "w", encoding="utf-8") as out:
            for line_no, code, detail in rejects:
                out.write(f"{line_no}\t{code}\t{detail}\n")
    if rejects:
        log.info("rejected %d of %d corpus lines", len(rejects), len(items))
    return entries


__all__ = [
    "ReactionRecord", "ReactionCentre", "CentrePair", "PretrainExample",
    "ReactionError", "CorpusEntry", "MAX_CENTRE_ATOMS",
    "parse_reaction", "detect_reaction_centre", "extract_examples",
    "load_corpus",
]
