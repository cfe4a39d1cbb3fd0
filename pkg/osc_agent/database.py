"""
Reference and candidate database storage.

The reference database is a CSV file (smiles,pce,sascore,homo,lumo) read
with pandas. The candidate database is a JSON-lines file rewritten atomically
(write to a temporary file, then rename) after every change.
"""

import contextlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import pandas as pd

from .errors import ChemistryError, PersistenceError
from .retrieval import MoleculeRecord, ScoredCandidate
from .smiles import canonical_smiles

logger = logging.getLogger(__name__)

REFERENCE_COLUMNS = ["smiles", "pce", "sascore", "homo", "lumo"]


def atomic_write_text(path: Path, text: str) -> None:
    """Write text to a sibling temp file and rename it over ``path``.

    The temp file never outlives a failed write.
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    except OSError as e:
        raise PersistenceError(f"cannot write {path}: {e}") from e
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException as e:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        if isinstance(e, OSError):
            raise PersistenceError(f"cannot write {path}: {e}") from e
        raise


# ─────────────────────── Reference database ──────────────────


@dataclass
class IngestResult:
    records: List[MoleculeRecord]
    rejected: List[Tuple[int, str]] = field(default_factory=list)
    duplicates: int = 0

    def summary(self) -> Dict:
        return {
            "records": len(self.records),
            "rejected": len(self.rejected),
            "duplicates_merged": self.duplicates,
        }


def read_reference_frame(path: Path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, encoding="utf-8", dtype={"smiles": str})
    except FileNotFoundError as e:
        raise PersistenceError(f"reference file not found: {path}") from e
    except (OSError, ValueError, pd.errors.ParserError) as e:
        raise PersistenceError(f"cannot read reference file {path}: {e}") from e
    frame.columns = [str(c).strip().lower() for c in frame.columns]
    missing = [c for c in REFERENCE_COLUMNS if c not in frame.columns]
    if missing:
        raise PersistenceError(f"reference file {path} lacks columns {missing}")
    return frame


def ingest_reference(path: Path, standardize: bool = True) -> IngestResult:
    """
    Load reference records.

    Args:
        path: CSV file with header ``smiles,pce,sascore,homo,lumo``.
        standardize: Replace SMILES by canonical form and merge duplicates,
            keeping the highest reported PCE.

    Returns:
        IngestResult with accepted records in file order and rejected row
        numbers (1-based data rows) with reasons.
    """
    frame = read_reference_frame(Path(path))
    result = IngestResult(records=[])
    by_key: Dict[str, int] = {}

    for row_number, row in enumerate(frame.itertuples(index=False), start=1):
        try:
            record = MoleculeRecord(
                smiles=str(row.smiles).strip(),
                pce=float(row.pce),
                sascore=float(row.sascore),
                homo=float(row.homo),
                lumo=float(row.lumo),
            )
        except (TypeError, ValueError) as e:
            result.rejected.append((row_number, f"unreadable values: {e}"))
            continue

        reason = record.invalid_reason()
        if reason is None and standardize:
            try:
                record = MoleculeRecord(
                    canonical_smiles(record.smiles), record.pce, record.sascore, record.homo, record.lumo
                )
            except ChemistryError as e:
                reason = e.one_line()
        if reason is not None:
            result.rejected.append((row_number, reason))
            continue

        if standardize and record.smiles in by_key:
            result.duplicates += 1
            slot = by_key[record.smiles]
            if record.pce > result.records[slot].pce:
                result.records[slot] = record
            continue
        by_key[record.smiles] = len(result.records)
        result.records.append(record)

    for row_number, reason in result.rejected:
        logger.warning("reference row %d rejected: %s", row_number, reason)
    return result


def write_reference(records: List[MoleculeRecord], path: Path) -> None:
    frame = pd.DataFrame([[getattr(r, c) for c in REFERENCE_COLUMNS] for r in records], columns=REFERENCE_COLUMNS)
    atomic_write_text(Path(path), frame.to_csv(index=False, lineterminator="\n"))


# ─────────────────────── Candidate database ──────────────────


class CandidateDatabase:
    """
    Scored candidates keyed by canonical SMILES.

    A duplicate replaces the stored entry only when its score is higher.
    With a path set, the whole database is rewritten atomically after every
    change, one JSON object per line in insertion order.
    """

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path else None
        self._entries: Dict[str, ScoredCandidate] = {}

    @classmethod
    def load(cls, path: Path) -> "CandidateDatabase":
        db = cls(path)
        path = Path(path)
        if not path.exists():
            return db
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise PersistenceError(f"cannot read candidate database {path}: {e}") from e
        for number, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                cand = ScoredCandidate.from_dict(json.loads(line))
            except (ValueError, KeyError, TypeError) as e:
                raise PersistenceError(f"{path}:{number}: malformed candidate record: {e}") from e
            db._entries[cand.smiles] = cand
        return db

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, smiles: str) -> bool:
        return smiles in self._entries

    def __iter__(self) -> Iterator[ScoredCandidate]:
        return iter(self._entries.values())

    def get(self, smiles: str) -> Optional[ScoredCandidate]:
        return self._entries.get(smiles)

    def upsert(self, cand: ScoredCandidate) -> bool:
        """Returns True when the database changed."""
        existing = self._entries.get(cand.smiles)
        if existing is not None and existing.score >= cand.score:
            return False
        self._entries[cand.smiles] = cand
        self.save()
        return True

    def top_k(self, k: int, risk_adjusted: bool = False) -> List[ScoredCandidate]:
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        if risk_adjusted:
            key = lambda c: (-c.risk_adjusted_score, c.smiles)
        else:
            key = lambda c: (-c.score, c.smiles)
        return sorted(self._entries.values(), key=key)[:k]

    @property
    def best_score(self) -> Optional[float]:
        return max((c.score for c in self._entries.values()), default=None)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(c.to_dict(), sort_keys=True) + "\n" for c in self._entries.values())

    def save(self) -> None:
        if self.path is not None:
            atomic_write_text(self.path, self.to_jsonl())
