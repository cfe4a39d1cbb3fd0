"""
SMILES parsing, kekulization and canonical writing.

Every chemistry operation in the engine starts here: the parser produces a
MoleculeGraph with implicit hydrogens filled in and its aromatic system
checked for a Kekulé assignment, and ``canonicalize`` gives the identity key
used by the databases and metrics.

Usage:
    mol = parse_smiles("c1ccccc1O")
    kekulize(mol)                 # alternating single/double bonds
    canonicalize(mol)             # same text for every spelling of phenol
    canonical_smiles("OC1=CC=CC=C1") == canonicalize(mol)
"""

import logging
import re
from collections import Counter
from dataclasses import dataclass, replace
from enum import Enum
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Dict, FrozenSet, Iterator, List, Optional, Sequence, Tuple

import networkx as nx
import yaml

from .errors import AromaticityError, DisconnectedMolecule, GrammarError, ValenceError

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"

# Canonical search gives up branching after this many complete orderings.
CANONICAL_LEAF_BUDGET = 1024

TOKEN_PATTERN = re.compile(
    r"""
      (?P<bracket>\[[^\[\]]*\])
    | (?P<organic>Cl|Br|[BCNOSPFI]|[bcnosp])
    | (?P<bond>[-=\#:/\\])
    | (?P<ring>%\d{2}|\d)
    | (?P<open>\()
    | (?P<close>\))
    | (?P<dot>\.)
    """,
    re.VERBOSE,
)

BRACKET_PATTERN = re.compile(
    r"^\[(?P<isotope>\d+)?"
    r"(?P<symbol>se|as|te|[bcnops]|[A-Z][a-z]?)"
    r"(?P<chiral>@(?:@|TH[12]|AL[12]|SP[123]|TB\d\d?|OH\d\d?)?)?"
    r"(?P<hcount>H\d*)?"
    r"(?P<charge>[+-]\d+|\++|-+)?"
    r"(?::(?P<cls>\d+))?\]$"
)


# ─────────────────────── Element table ───────────────────────


@dataclass(frozen=True)
class ElementTable:
    """Atomic numbers and allowed valences, loaded from data/valence.yaml."""

    atomic_numbers: Dict[str, int]
    valences: Dict[str, Tuple[int, ...]]
    charge_rules: Dict[str, str]
    organic_subset: FrozenSet[str]
    aromatic_symbols: FrozenSet[str]

    def allowed_valences(self, element: str, charge: int = 0) -> Optional[Tuple[int, ...]]:
        """Allowed bond-order sums for an element at a given formal charge.

        Returns None for elements without a valence entry (no check applies).
        """
        base = self.valences.get(element)
        if base is None:
            return None
        rule = self.charge_rules[element]
        if rule == "plus":
            shifted = [v + charge for v in base]
        elif rule == "minus":
            shifted = [v - charge for v in base]
        else:
            shifted = [v - abs(charge) for v in base]
        return tuple(v for v in shifted if v >= 0)

    def default_hydrogens(self, element: str, bond_sum: int) -> Optional[int]:
        """Implicit hydrogen count an organic-subset atom gets when written bare."""
        if element not in self.organic_subset:
            return None
        target = next((v for v in self.valences[element] if v >= bond_sum), None)
        return None if target is None else target - bond_sum


@lru_cache(maxsize=1)
def get_element_table() -> ElementTable:
    with open(DATA_DIR / "valence.yaml", "r", encoding="utf-8") as f:
        raw = yaml.safe_load(f)
    return ElementTable(
        atomic_numbers={str(s): z for z, s in enumerate(raw["symbols"], start=1)},
        valences={el: tuple(entry["values"]) for el, entry in raw["valences"].items()},
        charge_rules={el: entry["charge_rule"] for el, entry in raw["valences"].items()},
        organic_subset=frozenset(raw["organic_subset"]),
        aromatic_symbols=frozenset(raw["aromatic_symbols"]),
    )


# ─────────────────────── Graph types ─────────────────────────


class BondOrder(Enum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4

    @property
    def sigma(self) -> int:
        """Bond-order contribution before any aromatic π bond is placed."""
        return 1 if self is BondOrder.AROMATIC else self.value


BOND_SYMBOLS: Dict[str, Tuple[BondOrder, Optional[str]]] = {
    "-": (BondOrder.SINGLE, None),
    "=": (BondOrder.DOUBLE, None),
    "#": (BondOrder.TRIPLE, None),
    ":": (BondOrder.AROMATIC, None),
    "/": (BondOrder.SINGLE, "/"),
    "\\": (BondOrder.SINGLE, "\\"),
}

WRITE_SYMBOLS = {BondOrder.SINGLE: "", BondOrder.DOUBLE: "=", BondOrder.TRIPLE: "#"}


@dataclass(frozen=True)
class Atom:
    """One atom. ``explicit_h`` is set only for bracket atoms."""

    element: str
    aromatic: bool = False
    formal_charge: int = 0
    isotope: Optional[int] = None
    explicit_h: Optional[int] = None
    chirality_marker: Optional[str] = None
    implicit_h: int = 0
    atom_class: Optional[int] = None

    @property
    def bracket(self) -> bool:
        return self.explicit_h is not None

    @property
    def hydrogens(self) -> int:
        return (self.explicit_h or 0) + self.implicit_h

    @property
    def atomic_number(self) -> int:
        return get_element_table().atomic_numbers[self.element]


@dataclass(frozen=True)
class Bond:
    begin: int
    end: int
    order: BondOrder = BondOrder.SINGLE
    stereo: Optional[str] = None

    @property
    def key(self) -> Tuple[int, int]:
        return (self.begin, self.end) if self.begin < self.end else (self.end, self.begin)

    def other(self, idx: int) -> int:
        return self.end if idx == self.begin else self.begin


@dataclass(frozen=True)
class MoleculeGraph:
    atoms: Tuple[Atom, ...]
    bonds: Tuple[Bond, ...]

    def __post_init__(self):
        seen = set()
        for bond in self.bonds:
            if bond.begin == bond.end:
                raise ValueError(f"bond from atom {bond.begin} to itself")
            if not (0 <= bond.begin < len(self.atoms) and 0 <= bond.end < len(self.atoms)):
                raise ValueError(f"bond {bond.key} references a missing atom")
            if bond.key in seen:
                raise ValueError(f"duplicate bond between atoms {bond.key}")
            seen.add(bond.key)

    @cached_property
    def adjacency(self) -> Tuple[Tuple[Tuple[int, int], ...], ...]:
        """Per atom: (neighbor index, bond index) pairs in bond order."""
        table: List[List[Tuple[int, int]]] = [[] for _ in self.atoms]
        for k, bond in enumerate(self.bonds):
            table[bond.begin].append((bond.end, k))
            table[bond.end].append((bond.begin, k))
        return tuple(tuple(row) for row in table)

    @cached_property
    def _bond_index(self) -> Dict[Tuple[int, int], int]:
        return {bond.key: k for k, bond in enumerate(self.bonds)}

    @property
    def num_atoms(self) -> int:
        return len(self.atoms)

    @property
    def heavy_atom_count(self) -> int:
        return sum(1 for atom in self.atoms if atom.element != "H")

    def neighbors(self, idx: int) -> List[int]:
        return [j for j, _ in self.adjacency[idx]]

    def degree(self, idx: int) -> int:
        return len(self.adjacency[idx])

    def bond_between(self, i: int, j: int) -> Optional[Bond]:
        k = self._bond_index.get((i, j) if i < j else (j, i))
        return None if k is None else self.bonds[k]

    def bond_order_sum(self, idx: int) -> int:
        """Sum of bond orders, counting an aromatic bond as one."""
        return sum(self.bonds[k].order.sigma for _, k in self.adjacency[idx])

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(len(self.atoms)))
        graph.add_edges_from(bond.key for bond in self.bonds)
        return graph

    def components(self) -> List[List[int]]:
        return sorted(sorted(c) for c in nx.connected_components(self.to_networkx()))

    @property
    def is_connected(self) -> bool:
        return len(self.components()) <= 1

    def relabel(self, permutation: Sequence[int]) -> "MoleculeGraph":
        """Return the same molecule with atom ``i`` moved to ``permutation[i]``."""
        atoms: List[Optional[Atom]] = [None] * len(self.atoms)
        for old, new in enumerate(permutation):
            atoms[new] = self.atoms[old]
        bonds = tuple(
            replace(b, begin=permutation[b.begin], end=permutation[b.end]) for b in self.bonds
        )
        return MoleculeGraph(tuple(atoms), bonds)


# ─────────────────────── Parser ──────────────────────────────


class _SmilesReader:
    """Single-pass tokenizer and graph builder. Bond orders are resolved as
    bonds are created; aromaticity and valence are checked afterwards."""

    def __init__(self, text: str):
        self.text = text.strip()
        self.table = get_element_table()
        self.atoms: List[Atom] = []
        self.bonds: List[Bond] = []
        self.implicit: List[bool] = []
        self._pairs = set()
        self._prev: Optional[int] = None
        self._branches: List[int] = []
        self._pending: Optional[Tuple[str, int]] = None
        self._rings: Dict[int, Tuple[int, Optional[str], int]] = {}
        self._last_kind: Optional[str] = None

    def read(self) -> Tuple[List[Atom], List[Bond], List[bool]]:
        if not self.text:
            raise GrammarError("empty SMILES")
        pos = 0
        while pos < len(self.text):
            match = TOKEN_PATTERN.match(self.text, pos)
            if match is None:
                char = self.text[pos]
                if char == "[":
                    raise GrammarError(f"unclosed bracket atom at position {pos}")
                if char == "]":
                    raise GrammarError(f"unmatched ']' at position {pos}")
                raise GrammarError(f"unexpected character {char!r} at position {pos}")
            kind = match.lastgroup
            getattr(self, f"_on_{kind}")(match.group(), pos)
            self._last_kind = kind
            pos = match.end()
        self._finish()
        return self.atoms, self.bonds, self.implicit

    # ── tokens ──

    def _on_bracket(self, token: str, pos: int) -> None:
        match = BRACKET_PATTERN.match(token)
        if match is None:
            raise GrammarError(f"malformed bracket atom {token} at position {pos}")
        symbol = match["symbol"]
        aromatic = symbol[0].islower()
        element = symbol[0].upper() + symbol[1:]
        if element not in self.table.atomic_numbers:
            raise GrammarError(f"unknown element {symbol!r} at position {pos}")
        if aromatic and symbol not in self.table.aromatic_symbols:
            raise GrammarError(f"element {symbol!r} cannot be aromatic (position {pos})")

        hcount = match["hcount"]
        hydrogens = 0 if not hcount else (int(hcount[1:]) if len(hcount) > 1 else 1)
        charge_text = match["charge"]
        charge = 0
        if charge_text:
            sign = 1 if charge_text[0] == "+" else -1
            digits = charge_text[1:]
            charge = sign * (int(digits) if digits.isdigit() else len(charge_text))

        self._add_atom(
            Atom(
                element=element,
                aromatic=aromatic,
                formal_charge=charge,
                isotope=int(match["isotope"]) if match["isotope"] else None,
                explicit_h=hydrogens,
                chirality_marker=match["chiral"],
                atom_class=int(match["cls"]) if match["cls"] else None,
            )
        )

    def _on_organic(self, token: str, pos: int) -> None:
        aromatic = token.islower()
        element = token.capitalize() if aromatic else token
        self._add_atom(Atom(element=element, aromatic=aromatic))

    def _on_bond(self, token: str, pos: int) -> None:
        if self._prev is None:
            raise GrammarError(f"bond '{token}' at position {pos} has no preceding atom")
        if self._pending is not None:
            raise GrammarError(f"two bond symbols in a row at position {pos}")
        self._pending = (token, pos)

    def _on_ring(self, token: str, pos: int) -> None:
        if self._prev is None:
            raise GrammarError(f"ring bond {token} at position {pos} has no preceding atom")
        number = int(token.lstrip("%"))
        symbol = self._take_pending()
        if number in self._rings:
            other, open_symbol, _ = self._rings.pop(number)
            if symbol and open_symbol and symbol != open_symbol:
                raise GrammarError(
                    f"ring bond {number} closed with '{symbol}' but opened with '{open_symbol}'"
                )
            if other == self._prev:
                raise GrammarError(f"ring bond {number} at position {pos} joins an atom to itself")
            self._connect(other, self._prev, symbol or open_symbol)
        else:
            self._rings[number] = (self._prev, symbol, pos)

    def _on_open(self, token: str, pos: int) -> None:
        if self._prev is None:
            raise GrammarError(f"branch at position {pos} has no preceding atom")
        if self._pending is not None:
            raise GrammarError(f"bond symbol before '(' at position {pos}")
        self._branches.append(self._prev)

    def _on_close(self, token: str, pos: int) -> None:
        if not self._branches:
            raise GrammarError(f"unbalanced ')' at position {pos}")
        if self._last_kind == "open":
            raise GrammarError(f"empty branch at position {pos}")
        if self._pending is not None:
            raise GrammarError(f"dangling bond before ')' at position {pos}")
        self._prev = self._branches.pop()

    def _on_dot(self, token: str, pos: int) -> None:
        if self._prev is None:
            raise GrammarError(f"empty component at position {pos}")
        if self._pending is not None:
            raise GrammarError(f"dangling bond before '.' at position {pos}")
        if self._branches:
            raise GrammarError(f"'.' inside a branch at position {pos}")
        self._prev = None

    def _finish(self) -> None:
        if self._rings:
            number, (_, _, pos) = min(self._rings.items())
            raise GrammarError(f"ring bond {number} opened at position {pos} is never closed")
        if self._branches:
            raise GrammarError("unbalanced '(': branch is never closed")
        if self._pending is not None:
            raise GrammarError(f"dangling bond at position {self._pending[1]}")
        if self._last_kind == "dot":
            raise GrammarError("SMILES ends with '.'")

    # ── helpers ──

    def _take_pending(self) -> Optional[str]:
        symbol = self._pending[0] if self._pending else None
        self._pending = None
        return symbol

    def _add_atom(self, atom: Atom) -> None:
        idx = len(self.atoms)
        self.atoms.append(atom)
        if self._prev is not None:
            self._connect(self._prev, idx, self._take_pending())
        self._prev = idx

    def _connect(self, a: int, b: int, symbol: Optional[str]) -> None:
        key = (min(a, b), max(a, b))
        if key in self._pairs:
            raise GrammarError(f"duplicate bond between atoms {a} and {b}")
        self._pairs.add(key)
        if symbol is None:
            both = self.atoms[a].aromatic and self.atoms[b].aromatic
            order, stereo = (BondOrder.AROMATIC if both else BondOrder.SINGLE), None
        else:
            order, stereo = BOND_SYMBOLS[symbol]
        self.bonds.append(Bond(a, b, order, stereo))
        self.implicit.append(symbol is None)


def _settle_aromatic_bonds(atoms: List[Atom], bonds: List[Bond], implicit: List[bool]) -> List[Bond]:
    """Aromatic bonds must lie in rings. An implied bond between two aromatic
    atoms outside any ring (biphenyl written without '-') becomes single."""
    graph = nx.Graph()
    graph.add_nodes_from(range(len(atoms)))
    graph.add_edges_from(b.key for b in bonds)
    bridges = {tuple(sorted(e)) for e in nx.bridges(graph)}

    settled = []
    for bond, was_implicit in zip(bonds, implicit):
        if bond.order is BondOrder.AROMATIC:
            a, b = bond.key
            if not (atoms[a].aromatic and atoms[b].aromatic):
                raise AromaticityError(f"aromatic bond between non-aromatic atoms {a} and {b}")
            if bond.key in bridges:
                if not was_implicit:
                    raise AromaticityError(f"aromatic bond between atoms {a} and {b} is not in a ring")
                bond = replace(bond, order=BondOrder.SINGLE)
        settled.append(bond)
    return settled


def _check_aromatic_rings(atoms: Sequence[Atom], bonds: Sequence[Bond]) -> None:
    graph = nx.Graph()
    graph.add_nodes_from(i for i, atom in enumerate(atoms) if atom.aromatic)
    graph.add_edges_from(b.key for b in bonds if b.order is BondOrder.AROMATIC)
    if graph.number_of_nodes() == 0:
        return

    bridges = {tuple(sorted(e)) for e in nx.bridges(graph)}
    for i in graph.nodes:
        if not any(tuple(sorted((i, j))) not in bridges for j in graph.neighbors(i)):
            symbol = atoms[i].element.lower()
            raise AromaticityError(f"aromatic atom '{symbol}' at index {i} is not in an aromatic ring")

    for cycle in nx.minimum_cycle_basis(graph):
        if len(cycle) < 5:
            raise AromaticityError(f"aromatic ring of {len(cycle)} atoms {sorted(cycle)} cannot be aromatic")


def _fill_hydrogens(atoms: Sequence[Atom], bonds: Sequence[Bond]) -> List[Atom]:
    table = get_element_table()
    sigma = [0] * len(atoms)
    for bond in bonds:
        sigma[bond.begin] += bond.order.sigma
        sigma[bond.end] += bond.order.sigma

    filled = []
    for i, atom in enumerate(atoms):
        allowed = table.allowed_valences(atom.element, atom.formal_charge)
        if atom.bracket:
            if allowed is not None:
                skeleton = sigma[i] + atom.explicit_h
                ok = skeleton in allowed or (atom.aromatic and skeleton + 1 in allowed)
                if not ok:
                    raise ValenceError(
                        f"[{atom.element}] atom {i} has valence {skeleton}, "
                        f"allowed {list(allowed)} at charge {atom.formal_charge:+d}"
                    )
            filled.append(atom)
            continue

        target = next((v for v in allowed if v >= sigma[i]), None)
        if target is None:
            raise ValenceError(
                f"{atom.element} atom {i} has {sigma[i]} bonds, "
                f"exceeding maximum valence {max(allowed)}"
            )
        implicit = target - sigma[i]
        if atom.aromatic and implicit >= 1:
            implicit -= 1
        filled.append(replace(atom, implicit_h=implicit))
    return filled


def _pi_atoms(mol: MoleculeGraph) -> List[int]:
    """Aromatic atoms that take one double bond in a Kekulé structure."""
    table = get_element_table()
    result = []
    for i, atom in enumerate(mol.atoms):
        if not atom.aromatic:
            continue
        if not any(mol.bonds[k].order is BondOrder.AROMATIC for _, k in mol.adjacency[i]):
            continue
        allowed = table.allowed_valences(atom.element, atom.formal_charge)
        if allowed is None:
            continue
        skeleton = mol.bond_order_sum(i) + atom.hydrogens
        if skeleton + 1 in allowed:
            result.append(i)
    return result


def _kekule_matching(mol: MoleculeGraph) -> FrozenSet[Tuple[int, int]]:
    participants = _pi_atoms(mol)
    members = set(participants)
    graph = nx.Graph()
    graph.add_nodes_from(participants)
    graph.add_edges_from(
        b.key
        for b in mol.bonds
        if b.order is BondOrder.AROMATIC and b.begin in members and b.end in members
    )
    matching = nx.max_weight_matching(graph, maxcardinality=True)
    if not nx.is_perfect_matching(graph, matching):
        matched = {i for edge in matching for i in edge}
        unmatched = sorted(members - matched)
        raise AromaticityError(f"aromatic system cannot be kekulized; unmatched atoms {unmatched}")
    return frozenset(tuple(sorted(edge)) for edge in matching)


def parse_smiles(text: str) -> MoleculeGraph:
    """
    Parse a SMILES string into a MoleculeGraph.

    Args:
        text: SMILES text. Surrounding whitespace is ignored.

    Returns:
        Graph with implicit hydrogens filled in. Aromatic bonds are kept as
        aromatic; use ``kekulize`` for the alternating form.

    Raises:
        GrammarError: Malformed text, unclosed ring bond or branch.
        ValenceError: An atom exceeds its allowed valence.
        AromaticityError: The aromatic atoms admit no Kekulé structure.
    """
    atoms, bonds, implicit = _SmilesReader(text).read()
    bonds = _settle_aromatic_bonds(atoms, bonds, implicit)
    _check_aromatic_rings(atoms, bonds)
    atoms = _fill_hydrogens(atoms, bonds)
    mol = MoleculeGraph(tuple(atoms), tuple(bonds))
    _kekule_matching(mol)
    return mol


def kekulize(mol: MoleculeGraph) -> MoleculeGraph:
    """Replace aromatic bonds by a perfect matching of double bonds.

    Aromatic flags are cleared on the returned atoms. A graph without
    aromatic bonds is returned unchanged.
    """
    if not any(b.order is BondOrder.AROMATIC for b in mol.bonds):
        return mol
    doubles = _kekule_matching(mol)
    bonds = tuple(
        replace(b, order=BondOrder.DOUBLE if b.key in doubles else BondOrder.SINGLE)
        if b.order is BondOrder.AROMATIC
        else b
        for b in mol.bonds
    )
    atoms = tuple(replace(a, aromatic=False) if a.aromatic else a for a in mol.atoms)
    return MoleculeGraph(atoms, bonds)


def check_connected(mol: MoleculeGraph) -> None:
    """Raise DisconnectedMolecule unless the graph is a single fragment."""
    count = len(mol.components())
    if count > 1:
        raise DisconnectedMolecule(f"molecule has {count} disconnected fragments")


# ─────────────────────── Rings ───────────────────────────────


@dataclass(frozen=True)
class RingInfo:
    rings: Tuple[Tuple[int, ...], ...]
    ring_bonds: FrozenSet[Tuple[int, int]]

    @property
    def ring_atoms(self) -> FrozenSet[int]:
        return frozenset(i for ring in self.rings for i in ring)

    def spiro_atoms(self) -> FrozenSet[int]:
        """Atoms that are the only shared atom of two rings."""
        found = set()
        for k, first in enumerate(self.rings):
            for second in self.rings[k + 1:]:
                shared = set(first) & set(second)
                if len(shared) == 1:
                    found |= shared
        return frozenset(found)

    def bridgehead_atoms(self, mol: MoleculeGraph) -> FrozenSet[int]:
        """Ends of the shared path of two rings sharing more than one bond."""
        found = set()
        for k, first in enumerate(self.rings):
            for second in self.rings[k + 1:]:
                shared = set(first) & set(second)
                if len(shared) <= 2:
                    continue
                outside = (set(first) | set(second)) - shared
                for i in shared:
                    if any(j in outside for j in mol.neighbors(i)):
                        found.add(i)
        return frozenset(found)


def ring_info(mol: MoleculeGraph) -> RingInfo:
    graph = mol.to_networkx()
    rings = sorted((tuple(sorted(c)) for c in nx.minimum_cycle_basis(graph)), key=lambda r: (len(r), r))
    bridges = {tuple(sorted(e)) for e in nx.bridges(graph)}
    ring_bonds = frozenset(b.key for b in mol.bonds if b.key not in bridges)
    return RingInfo(rings=tuple(rings), ring_bonds=ring_bonds)


# ─────────────────────── Canonical form ──────────────────────

RESONANT = 5


def bond_codes(kekule: MoleculeGraph) -> Dict[Tuple[int, int], int]:
    """
    Order code per bond of a Kekulé graph, blind to which Kekulé structure
    was chosen.

    Ring bonds between atoms that each carry exactly one double bond get the
    RESONANT code; every other bond keeps its order value.
    """
    graph = kekule.to_networkx()
    bridges = {tuple(sorted(e)) for e in nx.bridges(graph)}
    doubles: Counter = Counter()
    triples: Counter = Counter()
    for b in kekule.bonds:
        if b.order is BondOrder.DOUBLE:
            doubles.update(b.key)
        elif b.order is BondOrder.TRIPLE:
            triples.update(b.key)
    pi = {i for i in range(kekule.num_atoms) if doubles[i] == 1 and triples[i] == 0}

    codes = {}
    for b in kekule.bonds:
        resonant = (
            b.order in (BondOrder.SINGLE, BondOrder.DOUBLE)
            and b.key not in bridges
            and b.begin in pi
            and b.end in pi
        )
        codes[b.key] = RESONANT if resonant else b.order.value
    return codes


def _rank_by(keys: Sequence) -> List[int]:
    """Rank = number of entries with a strictly smaller key."""
    counts = Counter(keys)
    start, acc = {}, 0
    for key in sorted(counts):
        start[key] = acc
        acc += counts[key]
    return [start[key] for key in keys]


def _refine(ranks: List[int], neighbor_codes: Sequence[Sequence[Tuple[int, int]]]) -> List[int]:
    while True:
        keys = [
            (ranks[i], tuple(sorted((code, ranks[j]) for j, code in neighbor_codes[i])))
            for i in range(len(ranks))
        ]
        refined = _rank_by(keys)
        if len(set(refined)) == len(set(ranks)):
            return refined
        ranks = refined


def _orderings(
    ranks: List[int],
    neighbor_codes: Sequence[Sequence[Tuple[int, int]]],
    leaves: List[int],
) -> Iterator[List[int]]:
    """Individualize-and-refine search yielding complete atom orderings."""
    ranks = _refine(ranks, neighbor_codes)
    counts = Counter(ranks)
    tied = [r for r, c in counts.items() if c > 1]
    if not tied:
        leaves[0] += 1
        yield ranks
        return
    target = min(tied)
    members = [i for i, r in enumerate(ranks) if r == target]
    if leaves[0] >= CANONICAL_LEAF_BUDGET:
        members = members[:1]
    for chosen in members:
        child = [r + 1 if (r == target and i != chosen) else r for i, r in enumerate(ranks)]
        yield from _orderings(child, neighbor_codes, leaves)


def _canonical_orders(
    kekule: MoleculeGraph, codes: Dict[Tuple[int, int], int], ranks: Sequence[int]
) -> Dict[Tuple[int, int], BondOrder]:
    """Choose the Kekulé structure from the atom ordering alone."""
    orders = {b.key: b.order for b in kekule.bonds}
    resonant = [b for b in kekule.bonds if codes[b.key] == RESONANT]
    needy = {i for b in resonant if b.order is BondOrder.DOUBLE for i in (b.begin, b.end)}
    if not needy:
        return orders

    by_rank = {ranks[i]: i for i in needy}
    graph = nx.Graph()
    graph.add_nodes_from(sorted(by_rank))
    graph.add_edges_from(
        sorted(
            tuple(sorted((ranks[b.begin], ranks[b.end])))
            for b in resonant
            if b.begin in needy and b.end in needy
        )
    )
    matching = nx.max_weight_matching(graph, maxcardinality=True)
    doubles = {tuple(sorted((by_rank[x], by_rank[y]))) for x, y in matching}
    for b in resonant:
        orders[b.key] = BondOrder.DOUBLE if b.key in doubles else BondOrder.SINGLE
    return orders


def _atom_text(atom: Atom, bond_sum: int) -> str:
    table = get_element_table()
    needs_bracket = (
        atom.element not in table.organic_subset
        or atom.formal_charge != 0
        or atom.isotope is not None
        or table.default_hydrogens(atom.element, bond_sum) != atom.hydrogens
    )
    if not needs_bracket:
        return atom.element

    text = "[" + (str(atom.isotope) if atom.isotope is not None else "") + atom.element
    if atom.hydrogens:
        text += "H" if atom.hydrogens == 1 else f"H{atom.hydrogens}"
    charge = atom.formal_charge
    if charge:
        sign = "+" if charge > 0 else "-"
        text += sign if abs(charge) == 1 else f"{sign}{abs(charge)}"
    return text + "]"


def _ring_label(number: int) -> str:
    return str(number) if number < 10 else f"%{number}"


def _write(mol: MoleculeGraph, ranks: Sequence[int], orders: Dict[Tuple[int, int], BondOrder]) -> str:
    n = mol.num_atoms
    neighbors = [sorted(mol.neighbors(i), key=lambda j: (ranks[j], j)) for i in range(n)]
    bond_sum = [0] * n
    for key, order in orders.items():
        bond_sum[key[0]] += order.value
        bond_sum[key[1]] += order.value

    def symbol(a: int, b: int) -> str:
        return WRITE_SYMBOLS[orders[(a, b) if a < b else (b, a)]]

    visited = [False] * n
    parts = []
    for root in sorted(range(n), key=lambda i: (ranks[i], i)):
        if visited[root]:
            continue

        # Pass 1: spanning tree and ring closures.
        children: Dict[int, List[int]] = {}
        openings: Dict[int, List[int]] = {}
        closings: Dict[int, List[int]] = {}
        closed = set()
        visited[root] = True
        stack = [(root, -1, iter(neighbors[root]))]
        while stack:
            u, parent, pending = stack[-1]
            for v in pending:
                if v == parent:
                    continue
                if visited[v]:
                    key = (u, v) if u < v else (v, u)
                    if key not in closed:
                        closed.add(key)
                        openings.setdefault(v, []).append(u)
                        closings.setdefault(u, []).append(v)
                    continue
                visited[v] = True
                children.setdefault(u, []).append(v)
                stack.append((v, u, iter(neighbors[v])))
                break
            else:
                stack.pop()

        # Pass 2: emit text.
        out: List[str] = []
        digits: Dict[Tuple[int, int], int] = {}
        in_use = set()
        actions: List[Tuple] = [("atom", root, "")]
        while actions:
            action = actions.pop()
            if action[0] == "text":
                out.append(action[1])
                continue
            _, u, bond_text = action
            out.append(bond_text)
            out.append(_atom_text(mol.atoms[u], bond_sum[u]))

            released = []
            for v in closings.get(u, []):
                key = (u, v) if u < v else (v, u)
                digit = digits.pop(key)
                out.append(_ring_label(digit))
                released.append(digit)
            for v in openings.get(u, []):
                digit = next(d for d in range(1, 100) if d not in in_use)
                in_use.add(digit)
                digits[(u, v) if u < v else (v, u)] = digit
                out.append(symbol(u, v) + _ring_label(digit))
            in_use.difference_update(released)

            kids = children.get(u, [])
            pushes: List[Tuple] = []
            for k, v in enumerate(kids):
                if k < len(kids) - 1:
                    pushes += [("text", "("), ("atom", v, symbol(u, v)), ("text", ")")]
                else:
                    pushes.append(("atom", v, symbol(u, v)))
            actions.extend(reversed(pushes))
        parts.append("".join(out))
    return ".".join(sorted(parts))


def to_smiles(mol: MoleculeGraph, ranks: Optional[Sequence[int]] = None) -> str:
    """
    Write a Kekulé SMILES, starting from and branching toward low-ranked atoms.

    With no ranks the input atom order is used. Passing a random permutation
    gives a random (non-canonical) spelling of the same molecule.
    """
    kekule = kekulize(mol)
    if ranks is None:
        ranks = list(range(kekule.num_atoms))
    return _write(kekule, ranks, {b.key: b.order for b in kekule.bonds})


def canonical_ranks(mol: MoleculeGraph) -> List[int]:
    """Refined symmetry classes of the Kekulé graph (tied atoms share a rank)."""
    kekule = kekulize(mol)
    codes = bond_codes(kekule)
    return _refine(_initial_ranks(kekule), _neighbor_codes(kekule, codes))


def _initial_ranks(mol: MoleculeGraph) -> List[int]:
    return _rank_by(
        [
            (a.atomic_number, a.formal_charge, mol.degree(i), a.isotope or 0, a.hydrogens)
            for i, a in enumerate(mol.atoms)
        ]
    )


def _neighbor_codes(mol: MoleculeGraph, codes: Dict[Tuple[int, int], int]) -> List[List[Tuple[int, int]]]:
    return [
        [(j, codes[mol.bonds[k].key]) for j, k in mol.adjacency[i]] for i in range(mol.num_atoms)
    ]


def canonicalize(mol: MoleculeGraph) -> str:
    """
    Canonical Kekulé SMILES.

    Atoms are ranked by iterative refinement of (element, charge, degree,
    isotope, hydrogens) over neighbor ranks and bond codes. Remaining ties are
    individualized one candidate at a time and the smallest emitted string
    wins. Stereo markers are not written.
    """
    kekule = kekulize(mol)
    codes = bond_codes(kekule)
    neighbor_codes = _neighbor_codes(kekule, codes)

    best: Optional[str] = None
    leaves = [0]
    # Orderings related by a symmetry give the same rank-labelled graph and text.
    written: Dict[Tuple, str] = {}
    for ranks in _orderings(_initial_ranks(kekule), neighbor_codes, leaves):
        labelled = tuple(
            sorted(
                (*sorted((ranks[b.begin], ranks[b.end])), codes[b.key])
                for b in kekule.bonds
            )
        )
        text = written.get(labelled)
        if text is None:
            text = _write(kekule, ranks, _canonical_orders(kekule, codes, ranks))
            written[labelled] = text
        if best is None or text < best:
            best = text
    if leaves[0] >= CANONICAL_LEAF_BUDGET:
        logger.debug("canonical search truncated after %d orderings", leaves[0])
    return best


def canonical_smiles(text: str) -> str:
    """Parse then canonicalize."""
    return canonicalize(parse_smiles(text))
