"""
Reference retrieval and candidate scoring.

K-center greedy picks a diverse set of reference molecules for the prompt;
``composite_score`` ranks candidates by PCE - SAscore + orbital reward.

Usage:
    chosen = kcenter_select(reference_records, RetrievalConfig(k_reference=5, seed=7))
    cand = composite_score(record, OrbitalPolicy())
    upsert_candidate(candidate_db, cand)
    topk_candidates(candidate_db, 3)
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import AllInvalid, ChemistryError, ConfigError, KTooLarge, RetrievalError
from .fingerprints import DEFAULT_RADIUS, DEFAULT_WIDTH, morgan_fingerprint
from .metrics import similarity_matrix
from .smiles import parse_smiles

if TYPE_CHECKING:
    from .database import CandidateDatabase

logger = logging.getLogger(__name__)


# ─────────────────────── Records ─────────────────────────────


@dataclass(frozen=True)
class MoleculeRecord:
    """One molecule with its (measured or predicted) properties."""

    smiles: str
    pce: float
    sascore: float
    homo: float
    lumo: float

    def invalid_reason(self) -> Optional[str]:
        """Why this record breaks the record invariants, or None."""
        for name in ("pce", "sascore", "homo", "lumo"):
            if not math.isfinite(getattr(self, name)):
                return f"{name} is not finite"
        if not 1.0 <= self.sascore <= 10.0:
            return f"sascore {self.sascore} outside [1, 10]"
        if not self.lumo > self.homo:
            return f"lumo {self.lumo} is not above homo {self.homo}"
        return None

    def example_line(self) -> str:
        """Prompt line for this record."""
        return (
            f"SMILES: {self.smiles}, PCE: {self.pce:.2f}, sascore: {self.sascore:.2f}, "
            f"HOMO/LUMO: {self.homo:.2f}/{self.lumo:.2f}"
        )


@dataclass(frozen=True)
class OrbitalPolicy:
    homo_min: float = -6.0
    homo_max: float = -5.0
    lumo_min: float = -4.5
    lumo_max: float = -3.0
    gamma: float = 3.0
    delta: float = 3.0

    def __post_init__(self):
        if not self.homo_min < self.homo_max:
            raise ConfigError(f"homo window [{self.homo_min}, {self.homo_max}] is empty")
        if not self.lumo_min < self.lumo_max:
            raise ConfigError(f"lumo window [{self.lumo_min}, {self.lumo_max}] is empty")
        if self.gamma <= 0 or self.delta <= 0:
            raise ConfigError("gamma and delta must be positive")


@dataclass(frozen=True)
class ScoredCandidate:
    record: MoleculeRecord
    pce_sigma: float
    orbital_reward: float
    score: float
    iteration: int = 0
    timestamp: str = ""

    @property
    def smiles(self) -> str:
        return self.record.smiles

    @property
    def risk_adjusted_score(self) -> float:
        return self.score - self.pce_sigma

    def identity_holds(self) -> bool:
        """score == pce - sascore + orbital_reward, recomputed exactly."""
        return self.score == self.record.pce - self.record.sascore + self.orbital_reward

    def to_dict(self) -> Dict:
        row = asdict(self.record)
        row.update(
            {
                "pce_sigma": self.pce_sigma,
                "orbital_reward": self.orbital_reward,
                "score": self.score,
                "iteration": self.iteration,
                "timestamp": self.timestamp,
            }
        )
        return row

    @classmethod
    def from_dict(cls, row: Dict) -> "ScoredCandidate":
        record = MoleculeRecord(
            smiles=row["smiles"],
            pce=float(row["pce"]),
            sascore=float(row["sascore"]),
            homo=float(row["homo"]),
            lumo=float(row["lumo"]),
        )
        return cls(
            record=record,
            pce_sigma=float(row["pce_sigma"]),
            orbital_reward=float(row["orbital_reward"]),
            score=float(row["score"]),
            iteration=int(row.get("iteration", 0)),
            timestamp=str(row.get("timestamp", "")),
        )

    def example_line(self) -> str:
        return self.record.example_line() + f", score: {self.score:.2f}"


# ─────────────────────── Scoring ─────────────────────────────


def orbital_feasibility(homo: float, lumo: float, policy: OrbitalPolicy = OrbitalPolicy()) -> float:
    """+gamma when both levels sit inside their windows (bounds inclusive), else -delta."""
    inside = policy.homo_min <= homo <= policy.homo_max and policy.lumo_min <= lumo <= policy.lumo_max
    return policy.gamma if inside else -policy.delta


def composite_score(
    rec: MoleculeRecord,
    policy: OrbitalPolicy = OrbitalPolicy(),
    pce_sigma: float = 0.0,
    iteration: int = 0,
    timestamp: str = "",
) -> ScoredCandidate:
    """Score = PCE - SAscore + orbital reward. The predicted sigma is carried, not scored."""
    reward = orbital_feasibility(rec.homo, rec.lumo, policy)
    return ScoredCandidate(
        record=rec,
        pce_sigma=pce_sigma,
        orbital_reward=reward,
        score=rec.pce - rec.sascore + reward,
        iteration=iteration,
        timestamp=timestamp,
    )


def upsert_candidate(db: "CandidateDatabase", cand: ScoredCandidate) -> "CandidateDatabase":
    """Insert keyed by canonical SMILES, keeping the higher score on duplicates."""
    db.upsert(cand)
    return db


def topk_candidates(db: "CandidateDatabase", k: int, risk_adjusted: bool = False) -> List[ScoredCandidate]:
    """Best k by score, ties broken by SMILES. Risk-adjusted ranking uses score - sigma."""
    return db.top_k(k, risk_adjusted=risk_adjusted)


# ─────────────────────── K-center greedy ─────────────────────


@dataclass(frozen=True)
class RetrievalConfig:
    k_reference: int = 5
    k_candidate: int = 3
    seed: int = 0
    radius: int = DEFAULT_RADIUS
    width: int = DEFAULT_WIDTH

    def __post_init__(self):
        if self.k_reference < 1 or self.k_candidate < 1:
            raise ConfigError("k_reference and k_candidate must be >= 1")


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise RetrievalError(f"distance matrix must be square, got shape {v.shape}")
        if not np.allclose(v, v.T, atol=1e-12):
            raise RetrievalError("distance matrix is not symmetric")
        if np.any(np.diag(v) != 0):
            raise RetrievalError("distance matrix diagonal must be zero")

    @property
    def size(self) -> int:
        return self.values.shape[0]


def initial_center(n: int, seed: int) -> int:
    """Seeded uniform pick of the first center (numpy PCG64 generator)."""
    return int(np.random.default_rng(seed).integers(n))


def kcenter_greedy(distances: DistanceMatrix, k: int, start: int) -> List[int]:
    """
    Greedy max-min selection from a fixed first center.

    Each step picks the unselected item farthest from the current selection
    (lowest index on ties) and lowers every item's distance-to-selection by an
    element-wise minimum.
    """
    n = distances.size
    if k > n:
        raise KTooLarge(f"k={k} exceeds the {n} selectable items")
    values = distances.values
    selected = [start]
    delta = values[start].astype(float).copy()
    while len(selected) < k:
        masked = delta.copy()
        masked[selected] = -np.inf
        chosen = int(np.argmax(masked))
        selected.append(chosen)
        delta = np.minimum(delta, values[chosen])
    return selected


def fingerprint_distances(smiles: Sequence[str], radius: int = DEFAULT_RADIUS, width: int = DEFAULT_WIDTH) -> Tuple[DistanceMatrix, List[int]]:
    """1 - Tanimoto over Morgan fingerprints; returns the matrix and the
    indices of the SMILES that parsed."""
    fps = []
    kept = []
    for i, text in enumerate(smiles):
        try:
            fps.append(morgan_fingerprint(parse_smiles(text), radius, width))
            kept.append(i)
        except ChemistryError as e:
            logger.warning("excluding record %d from retrieval: %s", i, e.one_line())
    if not fps:
        raise AllInvalid("no record in the database has a parseable SMILES")
    values = 1.0 - similarity_matrix(fps, fps)
    np.fill_diagonal(values, 0.0)
    return DistanceMatrix(values), kept


def kcenter_select(db: Sequence[MoleculeRecord], cfg: RetrievalConfig, k: Optional[int] = None) -> List[MoleculeRecord]:
    """
    Pick k diverse reference records (k defaults to cfg.k_reference).

    Records whose SMILES do not parse are excluded before selection. The first
    center is drawn from ``cfg.seed``; selection order is returned.

    Raises:
        AllInvalid: No record parses.
        KTooLarge: k exceeds the number of usable records.
    """
    k = cfg.k_reference if k is None else k
    if not db:
        raise AllInvalid("reference database is empty")
    distances, kept = fingerprint_distances([r.smiles for r in db], cfg.radius, cfg.width)
    if k > len(kept):
        raise KTooLarge(f"k={k} exceeds the {len(kept)} usable reference records")
    start = initial_center(len(kept), cfg.seed)
    order = kcenter_greedy(distances, k, start)
    return [db[kept[i]] for i in order]


def high_performance(records: Sequence[MoleculeRecord], pce_min: float = 10.0, sa_max: float = 8.0) -> List[MoleculeRecord]:
    """Records with PCE > pce_min and SAscore < sa_max."""
    return [r for r in records if r.pce > pce_min and r.sascore < sa_max]
