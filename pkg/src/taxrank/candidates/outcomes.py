"""Per-cell evaluation outcomes."""

from __future__ import annotations

import math
from dataclasses import dataclass

from ..policy import TaxResult, round_cents


class EvalOutcome:
    ok = False

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Ok(EvalOutcome):
    net: float
    result: TaxResult | None = None
    ok = True

    def __post_init__(self):
        if not math.isfinite(self.net):
            raise ValueError("Ok outcomes must be finite")
        object.__setattr__(self, "net", round_cents(self.net))

    def to_dict(self):
        return {"kind": "ok", "net": self.net}


@dataclass(frozen=True)
class Crash(EvalOutcome):
    message: str = ""

    def to_dict(self):
        return {"kind": "crash", "message": self.message}


@dataclass(frozen=True)
class Timeout(EvalOutcome):
    def to_dict(self):
        return {"kind": "timeout"}


@dataclass(frozen=True)
class ProtocolError(EvalOutcome):
    message: str = ""

    def to_dict(self):
        return {"kind": "protocol_error", "message": self.message}
