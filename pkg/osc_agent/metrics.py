"""
Evaluation metrics for a generated molecule set.

Uniqueness, novelty, validity and average PCE work on a GenerationSet;
Tanimoto similarity and the entropic (Sinkhorn) Wasserstein similarity work on
fingerprints.

Usage:
    g = GenerationSet.from_smiles(["CCO", "OCC", "C"], predictions)
    uniqueness(g)                                    # 2/3
    tp = cost_matrix(gen_fps, ref_fps)
    plan = sinkhorn_distance(tp, SinkhornConfig())
    wasserstein_similarity(plan.distance)
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .errors import (
    ChemistryError,
    ConfigError,
    EmptySet,
    MetricError,
    NoValidMolecules,
    NumericalDivergence,
    RangeError,
    WidthMismatch,
)
from .fingerprints import Fingerprint, stack_bits
from .smiles import MoleculeGraph, canonicalize, check_connected, parse_smiles

logger = logging.getLogger(__name__)

PCE_MIN = 10.0
SA_MAX = 8.0


# ─────────────────────── Tanimoto ────────────────────────────


def _check_compatible(x: Fingerprint, y: Fingerprint) -> None:
    if x.width != y.width or x.kind != y.kind:
        raise WidthMismatch(f"cannot compare {x.kind}/{x.width} with {y.kind}/{y.width}")


def tanimoto(x: Fingerprint, y: Fingerprint) -> float:
    """
    c / (a + b - c) with a, b the bit counts and c the shared bits.

    Two all-zero fingerprints are identical (1.0); zero against nonzero is 0.0.
    """
    _check_compatible(x, y)
    a = int(np.count_nonzero(x.bits))
    b = int(np.count_nonzero(y.bits))
    c = int(np.count_nonzero(x.bits & y.bits))
    union = a + b - c
    if union == 0:
        return 1.0
    return c / union


def _similarity_matrix(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Exact pairwise Tanimoto between rows of two boolean matrices."""
    a = left.astype(np.int64)
    b = right.astype(np.int64)
    shared = a @ b.T
    union = a.sum(axis=1)[:, None] + b.sum(axis=1)[None, :] - shared
    with np.errstate(divide="ignore", invalid="ignore"):
        sim = np.where(union == 0, 1.0, shared / np.maximum(union, 1))
    return sim


def bulk_tanimoto(query: Fingerprint, others: Sequence[Fingerprint]) -> np.ndarray:
    """Tanimoto of one fingerprint against many."""
    for other in others:
        _check_compatible(query, other)
    if not others:
        return np.zeros(0)
    return _similarity_matrix(query.bits[None, :], stack_bits(others))[0]


def similarity_matrix(left: Sequence[Fingerprint], right: Sequence[Fingerprint]) -> np.ndarray:
    if not left or not right:
        raise EmptySet("similarity matrix needs two non-empty fingerprint sets")
    reference = left[0]
    for fp in list(left) + list(right):
        _check_compatible(reference, fp)
    return _similarity_matrix(stack_bits(left), stack_bits(right))


def mean_tanimoto_similarity(gen_fps: Sequence[Fingerprint], ref_fps: Sequence[Fingerprint]) -> float:
    """Average pairwise Tanimoto between two sets."""
    return float(similarity_matrix(gen_fps, ref_fps).mean())


# ─────────────────────── Generation set ──────────────────────


@dataclass(frozen=True)
class Prediction:
    pce: float
    sascore: float


@dataclass(frozen=True)
class GeneratedMolecule:
    raw: str
    graph: Optional[MoleculeGraph] = None
    canonical: Optional[str] = None
    error: Optional[str] = None

    @property
    def parsed(self) -> bool:
        return self.graph is not None

    @property
    def key(self) -> str:
        return self.canonical if self.canonical is not None else self.raw


@dataclass(frozen=True)
class GenerationSet:
    molecules: Tuple[GeneratedMolecule, ...]
    predictions: Tuple[Optional[Prediction], ...] = ()

    def __post_init__(self):
        if self.predictions and len(self.predictions) != len(self.molecules):
            raise MetricError(
                f"{len(self.predictions)} predictions for {len(self.molecules)} molecules"
            )
        if not self.predictions:
            object.__setattr__(self, "predictions", tuple(None for _ in self.molecules))

    @classmethod
    def from_smiles(
        cls, smiles: Iterable[str], predictions: Optional[Sequence[Optional[Prediction]]] = None
    ) -> "GenerationSet":
        molecules = []
        for raw in smiles:
            try:
                graph = parse_smiles(raw)
                check_connected(graph)
                molecules.append(GeneratedMolecule(raw=raw, graph=graph, canonical=canonicalize(graph)))
            except ChemistryError as e:
                molecules.append(GeneratedMolecule(raw=raw, error=e.one_line()))
        return cls(tuple(molecules), tuple(predictions or ()))

    def __len__(self) -> int:
        return len(self.molecules)

    @property
    def n_generated(self) -> int:
        return len(self.molecules)


def _require_nonempty(g: GenerationSet) -> None:
    if g.n_generated == 0:
        raise EmptySet("generation set is empty")


def uniqueness(g: GenerationSet) -> float:
    """Distinct structures (by canonical form, raw text if unparsable) / N."""
    _require_nonempty(g)
    return len({m.key for m in g.molecules}) / g.n_generated


def novelty(g: GenerationSet, reference: Iterable[str]) -> float:
    """Parsed molecules whose canonical form is absent from the reference / N.

    Counted per instance; unparsable entries are never novel.
    """
    _require_nonempty(g)
    known = set(reference)
    novel = sum(1 for m in g.molecules if m.parsed and m.canonical not in known)
    return novel / g.n_generated


def missing_predictions(g: GenerationSet) -> List[int]:
    """Indices of parsed molecules that have no prediction."""
    return [i for i, (m, p) in enumerate(zip(g.molecules, g.predictions)) if m.parsed and p is None]


def valid_mask(g: GenerationSet, pce_min: float = PCE_MIN, sa_max: float = SA_MAX) -> List[bool]:
    return [
        m.parsed and p is not None and p.pce > pce_min and p.sascore < sa_max
        for m, p in zip(g.molecules, g.predictions)
    ]


def validity_rate(g: GenerationSet, pce_min: float = PCE_MIN, sa_max: float = SA_MAX) -> float:
    """Share of molecules that parse with PCE > pce_min and SAscore < sa_max."""
    _require_nonempty(g)
    missing = missing_predictions(g)
    if missing:
        logger.warning("%d parsed molecules have no prediction and count as invalid: %s", len(missing), missing)
    return sum(valid_mask(g, pce_min, sa_max)) / g.n_generated


def avg_pce(g: GenerationSet, pce_min: float = PCE_MIN, sa_max: float = SA_MAX) -> float:
    """Mean predicted PCE over valid molecules only."""
    values = [p.pce for p, ok in zip(g.predictions, valid_mask(g, pce_min, sa_max)) if ok]
    if not values:
        raise NoValidMolecules("no molecule passes the validity thresholds")
    return float(np.mean(values))


# ─────────────────────── Optimal transport ───────────────────


@dataclass(frozen=True, eq=False)
class TransportProblem:
    cost: np.ndarray
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        n, m = self.cost.shape
        if self.p.shape != (n,) or self.q.shape != (m,):
            raise MetricError(f"cost {self.cost.shape} does not match marginals {self.p.shape}, {self.q.shape}")
        if np.any(self.p < 0) or np.any(self.q < 0):
            raise MetricError("marginals must be non-negative")
        if abs(self.p.sum() - 1.0) > 1e-9 or abs(self.q.sum() - 1.0) > 1e-9:
            raise MetricError("marginals must each sum to 1")
        if not np.all(np.isfinite(self.cost)) or self.cost.min() < 0 or self.cost.max() > 1:
            raise MetricError("cost entries must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class TransportPlan:
    coupling: np.ndarray
    distance: float
    iterations_used: int
    converged: bool


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.005
    max_iterations: int = 2000
    marginal_tolerance: float = 1e-6

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError(f"sinkhorn epsilon must be > 0, got {self.epsilon}")
        if self.max_iterations < 1:
            raise ConfigError(f"sinkhorn max_iterations must be >= 1, got {self.max_iterations}")
        if self.marginal_tolerance <= 0:
            raise ConfigError(f"sinkhorn marginal_tolerance must be > 0, got {self.marginal_tolerance}")


def cost_matrix(gen_fps: Sequence[Fingerprint], ref_fps: Sequence[Fingerprint]) -> TransportProblem:
    """C_ij = 1 - Tanimoto(gen_i, ref_j) with uniform marginals."""
    if not gen_fps or not ref_fps:
        raise EmptySet("cost matrix needs non-empty generated and reference sets")
    cost = 1.0 - similarity_matrix(gen_fps, ref_fps)
    cost = np.clip(cost, 0.0, 1.0)
    p = np.full(len(gen_fps), 1.0 / len(gen_fps))
    q = np.full(len(ref_fps), 1.0 / len(ref_fps))
    return TransportProblem(cost=cost, p=p, q=q)


def sinkhorn_distance(tp: TransportProblem, cfg: SinkhornConfig = SinkhornConfig()) -> TransportPlan:
    """
    Entropic optimal transport by alternating scaling in the log domain.

    Args:
        tp: Cost matrix and marginals.
        cfg: Regularization weight, iteration cap and marginal tolerance.

    Returns:
        TransportPlan with W = <coupling, cost>. ``converged`` is True when the
        largest marginal violation drops below the tolerance.

    Raises:
        NumericalDivergence: A scaling potential became non-finite.
    """
    cost, p, q = tp.cost, tp.p, tp.q
    n, m = cost.shape
    if n == 1 or m == 1:
        coupling = np.outer(p, q)
        return TransportPlan(coupling, float((coupling * cost).sum()), 0, True)

    with np.errstate(divide="ignore"):
        log_p = np.log(p)
        log_q = np.log(q)
    kernel = -cost / cfg.epsilon
    u = np.zeros(n)
    v = np.zeros(m)
    coupling = np.outer(p, q)
    violation = np.inf

    for iteration in range(1, cfg.max_iterations + 1):
        v = log_q - logsumexp(kernel + u[:, None], axis=0)
        u = log_p - logsumexp(kernel + v[None, :], axis=1)
        if not (np.all(np.isfinite(u[p > 0])) and np.all(np.isfinite(v[q > 0]))):
            raise NumericalDivergence(
                f"scaling potentials diverged at iteration {iteration}; epsilon {cfg.epsilon} is too small"
            )
        coupling = np.exp(kernel + u[:, None] + v[None, :])
        violation = max(
            float(np.abs(coupling.sum(axis=1) - p).max()),
            float(np.abs(coupling.sum(axis=0) - q).max()),
        )
        if violation < cfg.marginal_tolerance:
            return TransportPlan(coupling, float((coupling * cost).sum()), iteration, True)

    logger.warning(
        "sinkhorn did not converge in %d iterations (marginal violation %.3g)",
        cfg.max_iterations,
        violation,
    )
    return TransportPlan(coupling, float((coupling * cost).sum()), cfg.max_iterations, False)


def wasserstein_similarity(w: float) -> float:
    """1 - W for W in [0, 1] (1e-9 slack)."""
    if not np.isfinite(w) or w < -1e-9 or w > 1 + 1e-9:
        raise RangeError(f"Wasserstein distance {w} is outside [0, 1]")
    return 1.0 - min(max(w, 0.0), 1.0)


def distribution_similarity(
    gen_fps: Sequence[Fingerprint],
    ref_fps: Sequence[Fingerprint],
    cfg: SinkhornConfig = SinkhornConfig(),
) -> Tuple[TransportPlan, float]:
    plan = sinkhorn_distance(cost_matrix(gen_fps, ref_fps), cfg)
    return plan, wasserstein_similarity(plan.distance)


# ─────────────────────── Report ──────────────────────────────


def evaluate_generation(
    g: GenerationSet,
    reference: Iterable[str],
    gen_fps: Optional[Sequence[Fingerprint]] = None,
    ref_fps: Optional[Sequence[Fingerprint]] = None,
    cfg: SinkhornConfig = SinkhornConfig(),
    pce_min: float = PCE_MIN,
    sa_max: float = SA_MAX,
) -> Dict[str, Any]:
    """
    All metrics as one mapping. Metrics that cannot be computed for this set
    (no valid molecules, no fingerprints) are reported as None.
    """
    result: Dict[str, Any] = {
        "n_generated": g.n_generated,
        "n_parsed": sum(1 for m in g.molecules if m.parsed),
        "uniqueness": uniqueness(g),
        "novelty": novelty(g, reference),
        "validity": validity_rate(g, pce_min, sa_max),
        "missing_predictions": missing_predictions(g),
    }
    try:
        result["avg_pce"] = avg_pce(g, pce_min, sa_max)
    except NoValidMolecules:
        result["avg_pce"] = None

    if gen_fps and ref_fps:
        plan, similarity = distribution_similarity(gen_fps, ref_fps, cfg)
        result.update(
            {
                "wasserstein_distance": plan.distance,
                "wasserstein_similarity": similarity,
                "sinkhorn_converged": plan.converged,
                "sinkhorn_iterations": plan.iterations_used,
                "mean_tanimoto": mean_tanimoto_similarity(gen_fps, ref_fps),
            }
        )
    else:
        result.update(
            {
                "wasserstein_distance": None,
                "wasserstein_similarity": None,
                "sinkhorn_converged": None,
                "sinkhorn_iterations": None,
                "mean_tanimoto": None,
            }
        )
    return result
