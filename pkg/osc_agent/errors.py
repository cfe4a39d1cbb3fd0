"""
Exception hierarchy for OSC Agent.

Every domain failure raised by the engine derives from OscAgentError, so the
CLI can map it to exit code 1 and print a single ``Kind: reason`` line.
"""


class OscAgentError(Exception):
    """Base class for all domain errors."""

    @property
    def kind(self) -> str:
        return type(self).__name__

    def one_line(self) -> str:
        """Machine-readable single-line form used on stderr and in run logs."""
        reason = " ".join(str(self).split())
        return f"{self.kind}: {reason}" if reason else self.kind


class ConfigError(OscAgentError):
    pass


# ─────────────────────── Chemistry ───────────────────────


class ChemistryError(OscAgentError):
    pass


class GrammarError(ChemistryError):
    pass


class ValenceError(ChemistryError):
    pass


class AromaticityError(ChemistryError):
    pass


class DisconnectedMolecule(ChemistryError):
    pass


# ─────────────────────── Fingerprints / metrics ──────────


class FingerprintError(OscAgentError):
    pass


class WidthMismatch(FingerprintError):
    pass


class MetricError(OscAgentError):
    pass


class EmptySet(MetricError):
    pass


class NoValidMolecules(MetricError):
    pass


class RangeError(MetricError):
    pass


class NumericalDivergence(MetricError):
    pass


# ─────────────────────── Retrieval / persistence ─────────


class RetrievalError(OscAgentError):
    pass


class KTooLarge(RetrievalError):
    pass


class AllInvalid(RetrievalError):
    pass


class PersistenceError(OscAgentError):
    pass


# ─────────────────────── Losses / predictor ──────────────


class LossError(OscAgentError):
    pass


class NonFiniteInput(LossError):
    pass


class DegenerateRow(LossError):
    pass


class PredictorError(OscAgentError):
    pass


class NonFiniteLoss(PredictorError):
    pass


class SpecMismatch(PredictorError):
    pass


# ─────────────────────── Agents / backends ───────────────


class AgentError(OscAgentError):
    pass


class BackendError(AgentError):
    pass


class BackendTimeout(BackendError):
    pass


class EmptyResponse(AgentError):
    pass


class NoValidSmiles(AgentError):
    pass


class TemplateError(AgentError):
    pass


class BudgetExhausted(AgentError):
    pass
