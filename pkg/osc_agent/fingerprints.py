"""
Circular (Morgan/ECFP) and linear-path fingerprints, plus the unfolded
Morgan fragment bag consumed by the SAscore estimator.

All identifiers come from a seedless 64-bit blake2b hash over the textual
form of an integer tuple, so bits are stable across runs and platforms.
Bit positions are NOT compatible with external toolkits.

Usage:
    fp = morgan_fingerprint(parse_smiles("CCO"), radius=2, width=2048)
    ecfp6 = fingerprint(mol, kind="ecfp6")
    bag = fragment_bag(mol, radius=2)
"""

import hashlib
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Sequence, Tuple

import numpy as np

from .errors import FingerprintError
from .smiles import MoleculeGraph, bond_codes, kekulize, ring_info

FINGERPRINT_KINDS = ("morgan", "ecfp6", "path")
DEFAULT_WIDTH = 2048
DEFAULT_RADIUS = 2
MAX_PATH_LENGTH = 7


def stable_hash(values: Iterable) -> int:
    """64-bit identifier of an integer tuple."""
    digest = hashlib.blake2b(repr(tuple(values)).encode("ascii"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def check_width(width: int) -> None:
    if width < 64 or width & (width - 1):
        raise FingerprintError(f"fingerprint width must be a power of two >= 64, got {width}")


@dataclass(frozen=True, eq=False)
class Fingerprint:
    bits: np.ndarray
    width: int
    kind: str
    radius_or_maxlen: int

    def __post_init__(self):
        check_width(self.width)
        if self.bits.shape != (self.width,):
            raise FingerprintError(f"bit vector shape {self.bits.shape} does not match width {self.width}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Fingerprint):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.width == other.width
            and self.radius_or_maxlen == other.radius_or_maxlen
            and bool(np.array_equal(self.bits, other.bits))
        )

    __hash__ = None

    @property
    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))

    def on_bits(self) -> List[int]:
        return [int(i) for i in np.flatnonzero(self.bits)]

    def to_bytes(self) -> bytes:
        return np.packbits(self.bits).tobytes()

    def to_dict(self) -> Dict:
        return {
            "kind": self.kind,
            "width": self.width,
            "radius_or_maxlen": self.radius_or_maxlen,
            "on_bits": self.on_bits(),
        }


@dataclass(frozen=True)
class FragmentBag:
    """Unfolded Morgan environment identifiers with multiplicities."""

    counts: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if any(c < 1 for c in self.counts.values()):
            raise FingerprintError("fragment multiplicities must be >= 1")

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def __len__(self) -> int:
        return len(self.counts)


# ─────────────────────── Heavy-atom view ─────────────────────


@dataclass(frozen=True)
class _HeavyView:
    """Heavy atoms of a Kekulé graph; explicit hydrogen atoms are folded into
    their neighbor's hydrogen count."""

    index: Tuple[int, ...]
    invariants: Tuple[Tuple[int, ...], ...]
    neighbors: Tuple[Tuple[Tuple[int, int, Tuple[int, int]], ...], ...]


def _heavy_view(mol: MoleculeGraph) -> _HeavyView:
    kekule = kekulize(mol)
    codes = bond_codes(kekule)
    in_ring = ring_info(kekule).ring_atoms
    heavy = [i for i, atom in enumerate(kekule.atoms) if atom.element != "H"]
    position = {atom: k for k, atom in enumerate(heavy)}

    invariants = []
    neighbors = []
    for i in heavy:
        atom = kekule.atoms[i]
        explicit_h = 0
        row = []
        for j, k in kekule.adjacency[i]:
            if j in position:
                bond = kekule.bonds[k]
                row.append((position[j], codes[bond.key], bond.key))
            else:
                explicit_h += 1
        invariants.append(
            (
                atom.atomic_number,
                atom.formal_charge,
                len(row),
                atom.hydrogens + explicit_h,
                int(i in in_ring),
                atom.isotope or 0,
            )
        )
        neighbors.append(tuple(row))
    return _HeavyView(tuple(heavy), tuple(invariants), tuple(neighbors))


def _morgan_environments(mol: MoleculeGraph, radius: int) -> List[int]:
    """Identifiers of all retained environments, one entry per occurrence.

    Radius-0 identifiers are kept for every atom. For larger radii an
    environment is dropped when its bond set did not grow, or when an
    environment with the same bond set was already kept; among equal bond
    sets at one radius the smallest identifier is kept.
    """
    if radius < 0:
        raise FingerprintError(f"radius must be >= 0, got {radius}")
    view = _heavy_view(mol)
    ids = [stable_hash(inv) for inv in view.invariants]
    bond_sets: List[FrozenSet[Tuple[int, int]]] = [frozenset() for _ in ids]
    found = list(ids)
    seen: set = set()

    for layer in range(1, radius + 1):
        candidates: Dict[FrozenSet, int] = {}
        next_ids = []
        next_sets = []
        for a, row in enumerate(view.neighbors):
            env = set(bond_sets[a])
            for b, _, key in row:
                env.add(key)
                env |= bond_sets[b]
            env = frozenset(env)
            new_id = stable_hash(
                (layer, ids[a]) + tuple(sorted((code, ids[b]) for b, code, _ in row))
            )
            next_ids.append(new_id)
            next_sets.append(env)
            if env == bond_sets[a] or env in seen:
                continue
            if env not in candidates or new_id < candidates[env]:
                candidates[env] = new_id
        for env, new_id in candidates.items():
            seen.add(env)
            found.append(new_id)
        ids, bond_sets = next_ids, next_sets
    return found


def _make(width: int, kind: str, size: int, identifiers: Iterable[int]) -> Fingerprint:
    check_width(width)
    bits = np.zeros(width, dtype=bool)
    for identifier in identifiers:
        bits[identifier % width] = True
    return Fingerprint(bits=bits, width=width, kind=kind, radius_or_maxlen=size)


def morgan_fingerprint(mol: MoleculeGraph, radius: int = DEFAULT_RADIUS, width: int = DEFAULT_WIDTH) -> Fingerprint:
    """Folded circular fingerprint. ECFP6 is radius 3."""
    return _make(width, "morgan", radius, _morgan_environments(mol, radius))


def _path_label(atoms: Sequence[int], codes: Sequence[int], labels: Sequence[Tuple[int, int]]) -> Tuple[int, ...]:
    out = list(labels[atoms[0]])
    for code, atom in zip(codes, atoms[1:]):
        out.append(code)
        out.extend(labels[atom])
    return tuple(out)


def path_fingerprint(mol: MoleculeGraph, max_len: int = MAX_PATH_LENGTH, width: int = DEFAULT_WIDTH) -> Fingerprint:
    """
    Folded fingerprint of all simple bond paths with 1..max_len bonds.

    A path is labeled by its atoms (element, charge) and bond codes and is read
    in whichever direction gives the smaller label.
    """
    if not 1 <= max_len <= MAX_PATH_LENGTH:
        raise FingerprintError(f"max_len must be in [1, {MAX_PATH_LENGTH}], got {max_len}")
    view = _heavy_view(mol)
    labels = [(inv[0], inv[1]) for inv in view.invariants]

    found = set()
    for start in range(len(labels)):
        stack: List[Tuple[Tuple[int, ...], Tuple[int, ...]]] = [((start,), ())]
        while stack:
            atoms, codes = stack.pop()
            if codes:
                forward = _path_label(atoms, codes, labels)
                backward = _path_label(atoms[::-1], codes[::-1], labels)
                found.add(stable_hash((len(codes),) + min(forward, backward)))
            if len(codes) == max_len:
                continue
            for b, code, _ in view.neighbors[atoms[-1]]:
                if b not in atoms:
                    stack.append((atoms + (b,), codes + (code,)))
    return _make(width, "path", max_len, sorted(found))


def fragment_bag(mol: MoleculeGraph, radius: int = DEFAULT_RADIUS) -> FragmentBag:
    """Unfolded Morgan identifiers with multiplicities for radii 0..radius."""
    counts: Dict[int, int] = {}
    for identifier in _morgan_environments(mol, radius):
        counts[identifier] = counts.get(identifier, 0) + 1
    return FragmentBag(counts=counts)


def fingerprint(mol: MoleculeGraph, kind: str = "morgan", radius: int = DEFAULT_RADIUS, width: int = DEFAULT_WIDTH) -> Fingerprint:
    """
    Dispatch on fingerprint kind.

    Args:
        kind: "morgan" (uses radius), "ecfp6" (Morgan radius 3) or "path"
            (radius is the maximum path length).
    """
    if kind == "morgan":
        return morgan_fingerprint(mol, radius, width)
    if kind == "ecfp6":
        return morgan_fingerprint(mol, 3, width)
    if kind == "path":
        return path_fingerprint(mol, radius, width)
    raise FingerprintError(f"unknown fingerprint kind {kind!r}; expected one of {FINGERPRINT_KINDS}")


def stack_bits(fps: Sequence[Fingerprint]) -> np.ndarray:
    """Stack fingerprints into an (n, width) boolean matrix."""
    if not fps:
        return np.zeros((0, 0), dtype=bool)
    return np.vstack([fp.bits for fp in fps])
