"""Turn the two choice log-probabilities into one relevance number.

Two normalizations are offered:

``prob_softmax``
    exp(s_t) / (exp(s_t) + exp(s_f)), the probability mass on the true token
    relative to both choices. Larger is more relevant.

``literal_log_ratio``
    s_t / (s_t + s_f) computed directly on log-probabilities. Because both
    inputs are negative, this *falls* as P(true) rises, so rankings sort it
    ascending.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

LOG_ZERO_CLAMP = -1e-12


class Normalization(str, enum.Enum):
    PROB_SOFTMAX = "prob_softmax"
    LITERAL_LOG_RATIO = "literal_log_ratio"


class Direction(str, enum.Enum):
    DESCENDING = "descending"
    ASCENDING = "ascending"


@dataclass(frozen=True)
class RelevanceScore:
    s_true: float
    s_false: float
    s_rel: float
    normalization: Normalization
    clamped: bool = False

    def to_dict(self) -> dict:
        return {
            "s_true": self.s_true,
            "s_false": self.s_false,
            "s_rel": self.s_rel,
            "normalization": self.normalization.value,
            "clamped": self.clamped,
        }


def relevance(s_true: float, s_false: float, normalization: Normalization | str = Normalization.PROB_SOFTMAX) -> RelevanceScore:
    normalization = Normalization(normalization)
    clamped = False
    # Log-probabilities above 0 are rounding noise from the backend.
    if s_true > 0.0:
        s_true, clamped = 0.0, True
    if s_false > 0.0:
        s_false, clamped = 0.0, True

    if normalization is Normalization.PROB_SOFTMAX:
        m = max(s_true, s_false)
        et = math.exp(s_true - m)
        ef = math.exp(s_false - m)
        s_rel = et / (et + ef)
    else:
        if s_true == 0.0:
            s_true, clamped = LOG_ZERO_CLAMP, True
        if s_false == 0.0:
            s_false, clamped = LOG_ZERO_CLAMP, True
        s_rel = s_true / (s_true + s_false)
    return RelevanceScore(s_true, s_false, s_rel, normalization, clamped)


def rank_direction(normalization: Normalization | str) -> Direction:
    if Normalization(normalization) is Normalization.PROB_SOFTMAX:
        return Direction.DESCENDING
    return Direction.ASCENDING


def sort_key(score: RelevanceScore) -> float:
    """Key that sorts most-relevant first under plain ascending ``sorted``."""
    if rank_direction(score.normalization) is Direction.DESCENDING:
        return -score.s_rel
    return score.s_rel
