"""
Synthetic accessibility score (1 easy .. 10 hard) from fragment contributions
and a complexity penalty.

The contribution table maps unfolded Morgan radius-2 fragment identifiers to
scores and is external data: a tab-separated ``fragment_id<TAB>score`` file.
When no table is available, ``build_fallback_table`` derives log-frequency
contributions from a reference corpus; such tables are flagged approximate.

Usage:
    table = load_sa_table(Path("fragments.tsv"))
    sa_score(parse_smiles("CCO"), table)
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable

from .database import atomic_write_text
from .errors import PersistenceError
from .fingerprints import fragment_bag
from .smiles import MoleculeGraph, ring_info

logger = logging.getLogger(__name__)

DEFAULT_CONTRIBUTION = -4.0
FRAGMENT_RADIUS = 2
MACROCYCLE_SIZE = 8
# Raw-score range mapped onto 1..10.
RAW_MIN = -4.0
RAW_MAX = 2.5


@dataclass(frozen=True)
class SaScoreTable:
    contributions: Dict[int, float] = field(default_factory=dict)
    default_contribution: float = DEFAULT_CONTRIBUTION
    approximate: bool = False

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.contributions.values()):
            raise PersistenceError("SAscore table contains non-finite scores")

    def contribution(self, fragment_id: int) -> float:
        return self.contributions.get(fragment_id, self.default_contribution)

    def __len__(self) -> int:
        return len(self.contributions)


def load_sa_table(path: Path) -> SaScoreTable:
    """Read a ``fragment_id<TAB>score`` file. Lines starting with '#' are skipped;
    a ``# approximate`` header marks a fallback table."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise PersistenceError(f"cannot read SAscore table {path}: {e}") from e

    contributions: Dict[int, float] = {}
    approximate = False
    for number, line in enumerate(lines, start=1):
        text = line.strip()
        if not text:
            continue
        if text.startswith("#"):
            approximate = approximate or "approximate" in text.lower()
            continue
        parts = text.split("\t")
        if len(parts) != 2:
            raise PersistenceError(f"{path}:{number}: expected fragment_id<TAB>score")
        try:
            contributions[int(parts[0])] = float(parts[1])
        except ValueError as e:
            raise PersistenceError(f"{path}:{number}: {e}") from e
    return SaScoreTable(contributions=contributions, approximate=approximate)


def write_sa_table(table: SaScoreTable, path: Path) -> None:
    header = "# approximate: log-frequency contributions\n" if table.approximate else ""
    body = "".join(f"{fid}\t{score!r}\n" for fid, score in sorted(table.contributions.items()))
    atomic_write_text(Path(path), header + body)


def build_fallback_table(corpus: Iterable[MoleculeGraph], coverage: float = 0.8) -> SaScoreTable:
    """
    Contributions log10(count / c) where c is the count of the fragment at which
    the most frequent fragments first cover ``coverage`` of all occurrences.
    """
    counts: Counter = Counter()
    for mol in corpus:
        counts.update(fragment_bag(mol, FRAGMENT_RADIUS).counts)
    if not counts:
        return SaScoreTable(approximate=True)

    total = sum(counts.values())
    running = 0
    pivot = 1
    for _, count in counts.most_common():
        running += count
        pivot = count
        if running >= coverage * total:
            break
    contributions = {fid: math.log10(count / pivot) for fid, count in counts.items()}
    logger.info("built approximate SAscore table: %d fragments, pivot count %d", len(contributions), pivot)
    return SaScoreTable(contributions=contributions, approximate=True)


def complexity_penalty(mol: MoleculeGraph) -> float:
    """Size, stereo, spiro, bridgehead and macrocycle penalties (a positive number)."""
    n_atoms = mol.heavy_atom_count
    stereo = sum(1 for atom in mol.atoms if atom.chirality_marker)
    rings = ring_info(mol)
    n_spiro = len(rings.spiro_atoms())
    n_bridgeheads = len(rings.bridgehead_atoms(mol))
    has_macrocycle = any(len(ring) > MACROCYCLE_SIZE for ring in rings.rings)

    return (
        (n_atoms**1.005 - n_atoms)
        + math.log10(stereo + 1)
        + math.log10(n_spiro + 1)
        + math.log10(n_bridgeheads + 1)
        + (math.log10(2) if has_macrocycle else 0.0)
    )


def sa_score(mol: MoleculeGraph, table: SaScoreTable) -> float:
    """SAscore in [1, 10] for a parsed molecule."""
    bag = fragment_bag(mol, FRAGMENT_RADIUS)
    n_fragments = bag.total
    fragment_score = 0.0
    if n_fragments:
        fragment_score = sum(table.contribution(fid) * n for fid, n in bag.counts.items()) / n_fragments

    n_atoms = mol.heavy_atom_count
    density = 0.0
    if len(bag) and n_atoms > len(bag):
        density = 0.5 * math.log(n_atoms / len(bag))

    raw = fragment_score - complexity_penalty(mol) + density
    score = 11.0 - (raw - RAW_MIN + 1.0) / (RAW_MAX - RAW_MIN) * 9.0
    if score > 8.0:
        score = 8.0 + math.log(score + 1.0 - 9.0)
    return min(10.0, max(1.0, score))
