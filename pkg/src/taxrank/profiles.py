"""Synthetic taxpayer profiles and counterfactual pairs."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .exceptions import ValidationError
from .policy import FilingStatus, round_cents

#: Recorded in every report so runs can be replayed.
PRNG_NAME = f"numpy.random.PCG64 (numpy {np.__version__})"

PROFILE_FIELDS = ("income", "status", "age_65_or_older", "blind", "qualifying_children", "investment_income")


@dataclass(frozen=True)
class TaxpayerProfile:
    income: float
    status: FilingStatus = FilingStatus.SINGLE
    age_65_or_older: bool = False
    blind: bool = False
    qualifying_children: int = 0
    investment_income: float = 0.0

    def __post_init__(self):
        for name in ("income", "investment_income"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValidationError(f"{name} must be a number, got {value!r}")
            if not (math.isfinite(value) and value >= 0):
                raise ValidationError(f"{name} must be finite and >= 0, got {value!r}")
            object.__setattr__(self, name, float(value))
        object.__setattr__(self, "status", FilingStatus.from_code(self.status))
        children = self.qualifying_children
        if isinstance(children, bool) or int(children) != children or not 0 <= children <= 3:
            raise ValidationError(f"qualifying_children must be an integer in 0..3, got {children!r}")
        object.__setattr__(self, "qualifying_children", int(children))
        for name in ("age_65_or_older", "blind"):
            if not isinstance(getattr(self, name), (bool, np.bool_)):
                raise ValidationError(f"{name} must be a bool")
            object.__setattr__(self, name, bool(getattr(self, name)))

    def to_dict(self) -> dict:
        return {
            "income": self.income,
            "status": int(self.status),
            "age65": self.age_65_or_older,
            "blind": self.blind,
            "children": self.qualifying_children,
            "investment_income": self.investment_income,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TaxpayerProfile":
        return cls(
            income=data["income"],
            status=data["status"],
            age_65_or_older=data.get("age65", False),
            blind=data.get("blind", False),
            qualifying_children=data.get("children", 0),
            investment_income=data.get("investment_income", 0.0),
        )


@dataclass(frozen=True)
class ProfileDistribution:
    """Sampling distribution for synthetic filers.

    Incomes are drawn uniformly on a log scale by default so that every bracket
    gets comparable coverage; ``income_scale="linear"`` draws uniformly in dollars.
    """

    income_range: tuple = (1_000.0, 600_000.0)
    status_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    p_age65: float = 0.2
    p_blind: float = 0.2
    children_weights: tuple = (0.4, 0.25, 0.2, 0.15)
    investment_range: tuple = (0.0, 0.0)
    income_scale: str = "log"

    def __post_init__(self):
        lo, hi = (float(x) for x in self.income_range)
        if not (0 <= lo <= hi and math.isfinite(hi)):
            raise ValidationError(f"income_range must satisfy 0 <= lo <= hi, got {self.income_range}")
        if self.income_scale not in ("log", "linear"):
            raise ValidationError(f"income_scale must be 'log' or 'linear', got {self.income_scale!r}")
        if self.income_scale == "log" and lo == 0 and hi > 0:
            raise ValidationError("log-scale incomes need a positive lower bound")
        ilo, ihi = (float(x) for x in self.investment_range)
        if not (0 <= ilo <= ihi and math.isfinite(ihi)):
            raise ValidationError(f"investment_range must satisfy 0 <= lo <= hi, got {self.investment_range}")
        _check_weights(self.status_weights, 4, "status_weights")
        _check_weights(self.children_weights, 4, "children_weights")
        for name in ("p_age65", "p_blind"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name} must be a probability, got {p}")
        object.__setattr__(self, "income_range", (lo, hi))
        object.__setattr__(self, "investment_range", (ilo, ihi))
        object.__setattr__(self, "status_weights", tuple(float(w) for w in self.status_weights))
        object.__setattr__(self, "children_weights", tuple(float(w) for w in self.children_weights))

    @classmethod
    def from_dict(cls, data: dict) -> "ProfileDistribution":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown profile distribution keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})

    def to_dict(self) -> dict:
        return {f.name: list(v) if isinstance(v, tuple) else v for f, v in
                ((f, getattr(self, f.name)) for f in dataclasses.fields(self))}


def _check_weights(weights, n, name):
    if len(weights) != n:
        raise ValidationError(f"{name} needs {n} entries, got {len(weights)}")
    if any(not (w >= 0 and math.isfinite(w)) for w in weights) or sum(weights) <= 0:
        raise ValidationError(f"{name} must be nonnegative with a positive sum")


def _draw_profile(rng: np.random.Generator, dist: ProfileDistribution) -> TaxpayerProfile:
    # Fixed draw order per profile keeps sample_profiles(n) a prefix of sample_profiles(n + k).
    lo, hi = dist.income_range
    u = rng.random()
    if lo == hi:
        income = lo
    elif dist.income_scale == "log":
        income = math.exp(math.log(lo) + u * (math.log(hi) - math.log(lo)))
    else:
        income = lo + u * (hi - lo)
    status_cdf = np.cumsum(dist.status_weights) / sum(dist.status_weights)
    status = int(np.searchsorted(status_cdf, rng.random(), side="right")) + 1
    age65 = rng.random() < dist.p_age65
    blind = rng.random() < dist.p_blind
    child_cdf = np.cumsum(dist.children_weights) / sum(dist.children_weights)
    children = int(np.searchsorted(child_cdf, rng.random(), side="right"))
    ilo, ihi = dist.investment_range
    invest = ilo + rng.random() * (ihi - ilo)
    return TaxpayerProfile(
        income=min(round_cents(income), hi),
        status=FilingStatus(min(status, 4)),
        age_65_or_older=bool(age65),
        blind=bool(blind),
        qualifying_children=min(children, 3),
        investment_income=min(round_cents(invest), ihi),
    )


def sample_profiles(dist: ProfileDistribution, seed: int, n: int) -> list[TaxpayerProfile]:
    """Draw ``n`` independent profiles; deterministic in ``(dist, seed, n)``."""
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    if not isinstance(dist, ProfileDistribution):
        raise ValidationError("dist must be a ProfileDistribution")
    rng = np.random.Generator(np.random.PCG64(seed))
    return [_draw_profile(rng, dist) for _ in range(n)]


_FIELD_ALIASES = {
    "age65": "age_65_or_older",
    "children": "qualifying_children",
    "qc": "qualifying_children",
    "agi": "income",
    "sts": "status",
}


def counterfactual(profile: TaxpayerProfile, field: str, value: Any) -> TaxpayerProfile:
    """Copy of ``profile`` with exactly one field replaced.

    Raises ValidationError if the field is unknown or the new value is invalid.
    """
    name = _FIELD_ALIASES.get(field, field)
    if name not in PROFILE_FIELDS:
        raise ValidationError(f"unknown profile field {field!r}")
    return dataclasses.replace(profile, **{name: value})


def differing_fields(a: TaxpayerProfile, b: TaxpayerProfile) -> list[str]:
    return [f for f in PROFILE_FIELDS if getattr(a, f) != getattr(b, f)]


def profiles_to_dicts(profiles: Sequence[TaxpayerProfile]) -> list[dict]:
    return [p.to_dict() for p in profiles]
