"""
The Planner -> Generator -> Experimenter design loop.

Each iteration retrieves diverse reference molecules and the best candidates
so far, asks the Planner for guidance, asks the Generator for exactly one
SMILES, and lets the Experimenter score it with the surrogate models. The
Experimenter is deterministic tooling; only the Planner and the Generator talk
to the chat backend.

Usage:
    backend = ScriptedBackend(["Plan: explore end-groups", "SMILES: c1ccccc1"])
    summary = asyncio.run(run_loop(backend, LoopConfig(iterations=1), references, models, CandidateDatabase()))
"""

import logging
import re
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .backends import (
    ChatMessage,
    DecodingConfig,
    JsonLinesLog,
    LlmBackend,
    RetryPolicy,
    TokenUsage,
    send_with_retries,
)
from .database import CandidateDatabase
from .errors import (
    AgentError,
    AllInvalid,
    BackendError,
    BudgetExhausted,
    ChemistryError,
    ConfigError,
    EmptyResponse,
    MetricError,
    NoValidSmiles,
    TemplateError,
)
from .metrics import PCE_MIN, SA_MAX, GenerationSet, Prediction, avg_pce, novelty, uniqueness, validity_rate
from .predictor import PropertyEstimate
from .retrieval import (
    MoleculeRecord,
    OrbitalPolicy,
    RetrievalConfig,
    ScoredCandidate,
    composite_score,
    kcenter_select,
    topk_candidates,
)
from .smiles import MoleculeGraph, canonical_smiles, canonicalize, check_connected, parse_smiles

logger = logging.getLogger(__name__)

PROMPTS_DIR = Path(__file__).parent / "prompts"
TEMPLATE_PLACEHOLDERS = {
    "task": ("reference_examples", "candidate_examples"),
    "planner": (),
    "generator": ("plan",),
    "experimenter": ("last_report",),
}
NO_CANDIDATES = "(no prior candidates)"
PLACEHOLDER_PATTERN = re.compile(r"\{\{(\w+)\}\}")

# Anomaly flags
PARSE_FAILURE = "parse-failure"
BELOW_PCE = "below-PCE-threshold"
ABOVE_SA = "above-SA-threshold"
OUT_OF_WINDOW = "out-of-window-orbitals"
DUPLICATE = "duplicate-of-existing"


# ─────────────────────── Templates ───────────────────────────


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    if name not in TEMPLATE_PLACEHOLDERS:
        raise TemplateError(f"unknown prompt template {name!r}")
    path = PROMPTS_DIR / f"{name}.txt"
    try:
        return path.read_text(encoding="utf-8")
    except OSError as e:
        raise TemplateError(f"cannot read prompt template {path}: {e}") from e


def render_template(name: str, values: Dict[str, str], template: Optional[str] = None) -> str:
    """
    Substitute ``{{placeholder}}`` markers.

    Raises:
        TemplateError: A required placeholder is missing from the template or
            a marker is left unfilled.
    """
    text = load_template(name) if template is None else template
    required = TEMPLATE_PLACEHOLDERS[name]
    unknown = set(PLACEHOLDER_PATTERN.findall(text)) - set(required)
    if unknown:
        raise TemplateError(f"template {name!r} has unknown placeholders {sorted(unknown)}")
    for key in required:
        marker = "{{" + key + "}}"
        if marker not in text:
            raise TemplateError(f"template {name!r} lacks placeholder {marker}")
        if key not in values:
            raise TemplateError(f"no value supplied for {marker} in template {name!r}")
    for key in required:
        text = text.replace("{{" + key + "}}", values[key])
    return text.rstrip("\n")


# ─────────────────────── Reports ─────────────────────────────


@dataclass(frozen=True)
class ExperimentReport:
    candidate_smiles: str
    iteration: int
    tool_settings: Dict[str, str] = field(default_factory=dict)
    pce_mu: Optional[float] = None
    pce_sigma: Optional[float] = None
    sascore: Optional[float] = None
    homo: Optional[float] = None
    lumo: Optional[float] = None
    orbital_reward: Optional[float] = None
    score: Optional[float] = None
    anomalies: Tuple[str, ...] = ()
    error: str = ""
    design_focus: str = ""
    db_updated: bool = False
    timestamp: str = ""

    @classmethod
    def failure(cls, iteration: int, error: str, design_focus: str = "", timestamp: str = "") -> "ExperimentReport":
        return cls(
            candidate_smiles="",
            iteration=iteration,
            anomalies=(PARSE_FAILURE,),
            error=error,
            design_focus=design_focus,
            timestamp=timestamp,
        )

    @property
    def parsed(self) -> bool:
        return PARSE_FAILURE not in self.anomalies

    def prediction(self) -> Optional[Prediction]:
        if not self.parsed:
            return None
        return Prediction(pce=self.pce_mu, sascore=self.sascore)

    def to_dict(self) -> Dict:
        row = asdict(self)
        row["anomalies"] = list(self.anomalies)
        return row

    def to_text(self) -> str:
        """Report block shown to the Planner."""
        lines = [f"Iteration: {self.iteration}"]
        if not self.parsed:
            lines.append("Candidate identifier: (none, the proposal did not parse)")
            lines.append(f"Validation error: {self.error}")
            lines.append(f"Anomalies: {', '.join(self.anomalies)}")
            return "\n".join(lines)
        lines.append(f"Candidate identifier: {self.candidate_smiles}")
        if self.design_focus:
            lines.append(f"Design focus: {self.design_focus}")
        lines.append("Tools used and settings:")
        lines.extend(f"  - {tool}: {setting}" for tool, setting in sorted(self.tool_settings.items()))
        lines.append(
            f"Objective values: PCE {self.pce_mu:.2f} ± {self.pce_sigma:.2f}, sascore {self.sascore:.2f}, "
            f"HOMO/LUMO {self.homo:.2f}/{self.lumo:.2f} eV, orbital reward {self.orbital_reward:+.1f}, "
            f"score {self.score:.2f}"
        )
        lines.append(f"Anomalies: {', '.join(self.anomalies) if self.anomalies else 'none'}")
        return "\n".join(lines)


# ─────────────────────── Prompt context ──────────────────────


@dataclass(frozen=True)
class PromptContext:
    reference_examples: Tuple[MoleculeRecord, ...]
    candidate_examples: Tuple[ScoredCandidate, ...] = ()
    last_report: Optional[ExperimentReport] = None
    iteration: int = 0


def _task_text(ctx: PromptContext) -> str:
    references = "\n".join(r.example_line() for r in ctx.reference_examples)
    candidates = "\n".join(c.example_line() for c in ctx.candidate_examples) or NO_CANDIDATES
    return render_template("task", {"reference_examples": references, "candidate_examples": candidates})


def build_task_prompt(ctx: PromptContext) -> List[ChatMessage]:
    """
    Planner conversation: planner role as system message, the task with both
    example blocks, then the latest experimental report when there is one.

    Raises:
        TemplateError: A template lacks a placeholder or no reference example is given.
    """
    if not ctx.reference_examples:
        raise TemplateError("the task prompt needs at least one reference example")
    messages = [ChatMessage("system", render_template("planner", {})), ChatMessage("user", _task_text(ctx))]
    if ctx.last_report is not None:
        messages.append(ChatMessage("user", render_template("experimenter", {"last_report": ctx.last_report.to_text()})))
    return messages


# ─────────────────────── Session ─────────────────────────────


@dataclass
class AgentSession:
    """Backend plus the per-run accounting every chat request goes through."""

    backend: LlmBackend
    decoding: DecodingConfig = field(default_factory=DecodingConfig)
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    usage: TokenUsage = field(default_factory=TokenUsage)
    log: JsonLinesLog = field(default_factory=JsonLinesLog)
    iteration: int = 0

    async def ask(self, stage: str, messages: Sequence[ChatMessage]) -> Tuple[str, int]:
        completion, attempts = await send_with_retries(self.backend, messages, self.decoding, self.retry)
        self.usage.add(completion)
        self.log.append(
            {
                "kind": "exchange",
                "stage": stage,
                "iteration": self.iteration,
                "messages": [m.to_dict() for m in messages],
                "response": completion.text,
                "attempts": attempts,
            }
        )
        return completion.text, attempts


# ─────────────────────── Planner ─────────────────────────────


@dataclass(frozen=True)
class Plan:
    text: str
    attempts_used: int


async def run_planner(session: AgentSession, ctx: PromptContext) -> Plan:
    """
    Ask the Planner for guidance. The text is passed on untouched.

    Raises:
        BackendError: Every attempt failed.
        EmptyResponse: The Planner answered with blank text.
    """
    text, attempts = await session.ask("planner", build_task_prompt(ctx))
    if not text.strip():
        raise EmptyResponse(f"planner returned an empty response in iteration {ctx.iteration}")
    return Plan(text=text, attempts_used=attempts)


# ─────────────────────── Generator ───────────────────────────


SMILES_LABEL = re.compile(r"^\s*[*_`#>\s]*SMILES[*_`\s]*:(.*)$", re.IGNORECASE)
FOCUS_LABEL = re.compile(r"^\s*[*_`#>\s]*Design Focus[*_`\s]*:(.*)$", re.IGNORECASE)
TOKEN_STRIP = "`'\"*,;.\\ "


@dataclass(frozen=True)
class GeneratorProposal:
    raw_response: str
    smiles: str
    design_focus: str
    attempts_used: int


def _clean_token(token: str) -> str:
    return token.strip().strip(TOKEN_STRIP)


def extract_smiles(text: str) -> Optional[str]:
    """
    The proposed SMILES in a Generator response.

    Takes the last ``SMILES:`` line (the rest of that line, or the next
    non-empty line when the label stands alone). Without a label, the last
    whitespace-separated token that parses as a molecule.
    """
    lines = text.splitlines()
    for i in range(len(lines) - 1, -1, -1):
        match = SMILES_LABEL.match(lines[i])
        if not match:
            continue
        rest = _clean_token(match.group(1))
        if rest:
            return rest.split()[0]
        for following in lines[i + 1 :]:
            token = _clean_token(following)
            if token:
                return token.split()[0]
        return None

    for token in reversed(text.split()):
        token = _clean_token(token)
        if not token:
            continue
        try:
            parse_smiles(token)
        except ChemistryError:
            continue
        return token
    return None


def extract_design_focus(text: str) -> str:
    for line in reversed(text.splitlines()):
        match = FOCUS_LABEL.match(line)
        if match:
            return match.group(1).strip().strip("*").strip()
    return ""


def validate_smiles(smiles: str) -> MoleculeGraph:
    """Parse and require a single connected molecule."""
    mol = parse_smiles(smiles)
    check_connected(mol)
    return mol


async def run_generator(session: AgentSession, ctx: PromptContext, plan: str, max_attempts: int = 3) -> GeneratorProposal:
    """
    Ask the Generator for one candidate.

    A response whose SMILES is missing or invalid is answered with the error
    and the Generator is asked again, up to ``max_attempts`` responses.

    Raises:
        NoValidSmiles: No valid SMILES after ``max_attempts`` responses.
        BackendError: The backend failed for good.
    """
    if not plan.strip():
        raise AgentError("the generator needs a non-empty plan")
    messages = [
        ChatMessage("system", render_template("generator", {"plan": plan.strip()})),
        ChatMessage("user", _task_text(ctx)),
    ]
    last_error = ""
    for attempt in range(1, max_attempts + 1):
        text, _ = await session.ask("generator", messages)
        smiles = extract_smiles(text) if text.strip() else None
        if smiles is None:
            last_error = "no SMILES found in the response" if text.strip() else "empty response"
        else:
            try:
                validate_smiles(smiles)
                return GeneratorProposal(text, smiles, extract_design_focus(text), attempt)
            except ChemistryError as e:
                last_error = f"{smiles}: {e.one_line()}"
        logger.info("iteration %d generator attempt %d rejected: %s", ctx.iteration, attempt, last_error)
        if text.strip():
            messages.append(ChatMessage("assistant", text))
        messages.append(
            ChatMessage(
                "user",
                f"The proposed candidate is invalid ({last_error}). "
                "Fix the error and answer with exactly one valid SMILES on a line starting with 'SMILES:'.",
            )
        )
    raise NoValidSmiles(f"no valid SMILES after {max_attempts} attempts; last error: {last_error}")


# ─────────────────────── Experimenter ────────────────────────


class PropertyOracle(Protocol):
    def evaluate(self, mol: MoleculeGraph) -> PropertyEstimate:
        ...

    def tool_settings(self) -> Dict[str, str]:
        ...


@dataclass(frozen=True)
class Thresholds:
    pce_min: float = PCE_MIN
    sa_max: float = SA_MAX


def run_experimenter(
    proposal: GeneratorProposal,
    models: PropertyOracle,
    db: CandidateDatabase,
    policy: OrbitalPolicy = OrbitalPolicy(),
    iteration: int = 0,
    thresholds: Thresholds = Thresholds(),
    timestamp: str = "",
) -> ExperimentReport:
    """
    Score a proposal with the surrogate models and record it.

    A proposal that does not parse yields a report with only the parse-failure
    anomaly and leaves the database alone. A duplicate is stored only when it
    scores higher than the existing entry.
    """
    try:
        mol = validate_smiles(proposal.smiles)
        canonical = canonicalize(mol)
    except ChemistryError as e:
        return ExperimentReport.failure(iteration, e.one_line(), proposal.design_focus, timestamp)

    estimate = models.evaluate(mol)
    record = MoleculeRecord(canonical, estimate.pce_mu, estimate.sascore, estimate.homo, estimate.lumo)
    cand = composite_score(record, policy, estimate.pce_sigma, iteration, timestamp)

    anomalies = []
    if not record.pce > thresholds.pce_min:
        anomalies.append(BELOW_PCE)
    if not record.sascore < thresholds.sa_max:
        anomalies.append(ABOVE_SA)
    if cand.orbital_reward < 0:
        anomalies.append(OUT_OF_WINDOW)
    if canonical in db:
        anomalies.append(DUPLICATE)
    updated = db.upsert(cand)

    return ExperimentReport(
        candidate_smiles=canonical,
        iteration=iteration,
        tool_settings=dict(models.tool_settings()),
        pce_mu=record.pce,
        pce_sigma=cand.pce_sigma,
        sascore=record.sascore,
        homo=record.homo,
        lumo=record.lumo,
        orbital_reward=cand.orbital_reward,
        score=cand.score,
        anomalies=tuple(anomalies),
        design_focus=proposal.design_focus,
        db_updated=updated,
        timestamp=timestamp,
    )


# ─────────────────────── Loop ────────────────────────────────


@dataclass(frozen=True)
class LoopConfig:
    iterations: int = 10
    max_generation_retries: int = 3
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    policy: OrbitalPolicy = field(default_factory=OrbitalPolicy)
    decoding: DecodingConfig = field(default_factory=DecodingConfig)
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    thresholds: Thresholds = field(default_factory=Thresholds)
    budget: Optional[int] = None
    seed: int = 0
    use_retrieval: bool = True
    use_feedback: bool = True
    risk_adjusted: bool = False
    fixed_clock: Optional[str] = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.max_generation_retries < 1:
            raise ConfigError(f"max_generation_retries must be >= 1, got {self.max_generation_retries}")
        if self.budget is not None and self.budget < 1:
            raise ConfigError(f"budget must be >= 1 when set, got {self.budget}")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class RunSummary:
    status: str
    iterations_requested: int
    iterations_completed: int = 0
    reports: List[Dict] = field(default_factory=list)
    failures: List[Dict] = field(default_factory=list)
    retrieval_seeds: List[int] = field(default_factory=list)
    best_score_history: List[Optional[float]] = field(default_factory=list)
    metrics: Dict = field(default_factory=dict)
    top_candidates: List[Dict] = field(default_factory=list)
    token_usage: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)


def iteration_seed(seed: int, iteration: int) -> int:
    """Retrieval seed for one design cycle, derived from the run seed."""
    return int(np.random.default_rng([seed, iteration]).integers(2**31 - 1))


def _clock(cfg: LoopConfig) -> Callable[[], str]:
    if cfg.fixed_clock is not None:
        return lambda: cfg.fixed_clock
    return lambda: datetime.now(timezone.utc).isoformat(timespec="seconds")


def _final_metrics(reports: Sequence[ExperimentReport], generated: Sequence[str], reference: Sequence[MoleculeRecord], thresholds: Thresholds) -> Dict:
    if not generated:
        return {"n_generated": 0, "uniqueness": None, "novelty": None, "validity": None, "avg_pce": None}
    g = GenerationSet.from_smiles(generated, [r.prediction() for r in reports])
    known = set()
    for rec in reference:
        try:
            known.add(canonical_smiles(rec.smiles))
        except ChemistryError:
            continue
    metrics = {
        "n_generated": g.n_generated,
        "uniqueness": uniqueness(g),
        "novelty": novelty(g, known),
        "validity": validity_rate(g, thresholds.pce_min, thresholds.sa_max),
    }
    try:
        metrics["avg_pce"] = avg_pce(g, thresholds.pce_min, thresholds.sa_max)
    except MetricError:
        metrics["avg_pce"] = None
    return metrics


async def run_loop(
    backend: LlmBackend,
    cfg: LoopConfig,
    reference_db: Sequence[MoleculeRecord],
    models: PropertyOracle,
    candidate_db: Optional[CandidateDatabase] = None,
    run_log: Optional[JsonLinesLog] = None,
) -> RunSummary:
    """
    Run the closed design loop.

    Per-iteration failures (backend errors, no valid SMILES, empty responses)
    are recorded and the loop moves on. The run stops early, with status
    ``budget-exhausted``, once the requests issued reach ``cfg.budget``; the
    budget is checked between iterations. PersistenceError propagates.
    """
    if not reference_db:
        raise AllInvalid("reference database is empty")
    db = candidate_db if candidate_db is not None else CandidateDatabase()
    log = run_log if run_log is not None else JsonLinesLog()
    session = AgentSession(backend, cfg.decoding, cfg.retry, log=log)
    now = _clock(cfg)
    summary = RunSummary(status="completed", iterations_requested=cfg.iterations)
    log.append({"kind": "run", "config": cfg.to_dict(), "references": len(reference_db), "timestamp": now()})

    last_report: Optional[ExperimentReport] = None
    reports: List[ExperimentReport] = []
    generated: List[str] = []

    for iteration in range(1, cfg.iterations + 1):
        if cfg.budget is not None and session.usage.requests >= cfg.budget:
            summary.status = "budget-exhausted"
            error = BudgetExhausted(f"{session.usage.requests} requests issued, budget {cfg.budget}")
            logger.warning("stopping before iteration %d: %s", iteration, error.one_line())
            log.append({"kind": "abort", "iteration": iteration, "error": error.one_line()})
            break
        session.iteration = iteration

        seed = iteration_seed(cfg.seed, iteration)
        summary.retrieval_seeds.append(seed)
        if cfg.use_retrieval:
            references = kcenter_select(reference_db, replace(cfg.retrieval, seed=seed))
            candidates = topk_candidates(db, cfg.retrieval.k_candidate, cfg.risk_adjusted) if len(db) else []
        else:
            references = list(reference_db[: cfg.retrieval.k_reference])
            candidates = []
        ctx = PromptContext(
            reference_examples=tuple(references),
            candidate_examples=tuple(candidates),
            last_report=last_report if cfg.use_feedback else None,
            iteration=iteration,
        )

        try:
            plan = await run_planner(session, ctx)
            proposal = await run_generator(session, ctx, plan.text, cfg.max_generation_retries)
        except (BackendError, EmptyResponse, NoValidSmiles) as e:
            logger.warning("iteration %d skipped: %s", iteration, e.one_line())
            summary.failures.append({"iteration": iteration, "kind": e.kind, "error": e.one_line()})
            log.append({"kind": "failure", "iteration": iteration, "error": e.one_line()})
            if isinstance(e, NoValidSmiles):
                last_report = ExperimentReport.failure(iteration, e.one_line(), timestamp=now())
            summary.best_score_history.append(db.best_score)
            continue

        report = run_experimenter(proposal, models, db, cfg.policy, iteration, cfg.thresholds, now())
        log.append({"kind": "report", "report": report.to_dict()})
        reports.append(report)
        generated.append(proposal.smiles)
        last_report = report
        summary.reports.append(report.to_dict())
        summary.iterations_completed += 1
        summary.best_score_history.append(db.best_score)
        logger.info(
            "iteration %d: %s score=%s anomalies=%s",
            iteration,
            report.candidate_smiles or "(unparsed)",
            report.score,
            ",".join(report.anomalies) or "none",
        )

    summary.metrics = _final_metrics(reports, generated, reference_db, cfg.thresholds)
    summary.top_candidates = [c.to_dict() for c in topk_candidates(db, cfg.retrieval.k_candidate, cfg.risk_adjusted)] if len(db) else []
    summary.token_usage = session.usage.to_dict()
    log.append({"kind": "summary", "status": summary.status, "iterations_completed": summary.iterations_completed})
    return summary
