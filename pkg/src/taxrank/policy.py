"""Tax-year policy data model and the ground-truth tax engine.

The engine is the oracle every candidate is compared against. All monetary
results are rounded half-up to cents at function boundaries; intermediate
arithmetic happens in double precision.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence

from .exceptions import ValidationError

INF = math.inf


def round_cents(value: float) -> float:
    """Round half-up to two decimals."""
    if not math.isfinite(value):
        raise ValidationError(f"non-finite monetary value: {value!r}")
    return float(Decimal(repr(value)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def to_cents(value: float) -> int:
    """Integer cents of a dollar amount, rounding half-up."""
    return int(Decimal(repr(value)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP) * 100)


class FilingStatus(enum.IntEnum):
    SINGLE = 1
    MARRIED_JOINT = 2
    MARRIED_SEPARATE = 3
    HEAD_OF_HOUSEHOLD = 4

    @property
    def label(self) -> str:
        return _STATUS_LABELS[self]

    @property
    def key(self) -> str:
        return self.name.lower()

    @classmethod
    def from_key(cls, key: str) -> "FilingStatus":
        try:
            return cls[key.upper()]
        except KeyError:
            raise ValidationError(f"unknown filing status {key!r}") from None

    @classmethod
    def from_code(cls, code: int) -> "FilingStatus":
        try:
            return cls(int(code))
        except (ValueError, TypeError):
            raise ValidationError(f"filing status code must be 1-4, got {code!r}") from None


_STATUS_LABELS = {
    FilingStatus.SINGLE: "Single",
    FilingStatus.MARRIED_JOINT: "MarriedJoint",
    FilingStatus.MARRIED_SEPARATE: "MarriedSeparate",
    FilingStatus.HEAD_OF_HOUSEHOLD: "HeadOfHousehold",
}


class Scenario(str, enum.Enum):
    BRACKETS = "brackets"
    BRACKETS_DEDUCTIONS = "brackets_deductions"
    BRACKETS_DEDUCTIONS_EITC = "brackets_deductions_eitc"

    @property
    def has_deductions(self) -> bool:
        return self is not Scenario.BRACKETS

    @property
    def has_eitc(self) -> bool:
        return self is Scenario.BRACKETS_DEDUCTIONS_EITC

    @classmethod
    def parse(cls, value: "str | Scenario") -> "Scenario":
        if isinstance(value, Scenario):
            return value
        try:
            return cls(value)
        except ValueError:
            choices = ", ".join(s.value for s in cls)
            raise ValidationError(f"unknown scenario {value!r} (expected one of {choices})") from None




def validate_brackets(brackets: Sequence[Sequence[float]]) -> tuple[tuple[float, float], ...]:
    """Check one status's bracket list and return it as a tuple of pairs."""
    if not brackets:
        raise ValidationError("bracket table is empty")
    out = []
    prev = -INF
    for i, entry in enumerate(brackets):
        if len(entry) != 2:
            raise ValidationError(f"bracket {i} must be an (upper_bound, rate) pair")
        upper, rate = float(entry[0]), float(entry[1])
        if math.isnan(upper) or upper <= prev:
            raise ValidationError(f"bracket bounds must be strictly increasing (entry {i}: {upper})")
        if not (0.0 < rate < 1.0):
            raise ValidationError(f"bracket rate must lie in (0, 1), got {rate} at entry {i}")
        if upper <= 0:
            raise ValidationError(f"bracket bound must be positive, got {upper}")
        out.append((upper, rate))
        prev = upper
    if out[-1][0] != INF:
        raise ValidationError("final bracket bound must be +infinity")
    return tuple(out)


@dataclass(frozen=True)
class EitcTier:
    """EITC parameters for one qualifying-children count."""

    phase_in_rate: float
    max_credit: float
    phaseout_rate: float
    phaseout_start: Mapping[FilingStatus, float]
    agi_limit: Mapping[FilingStatus, float]

    def __post_init__(self):
        if not (0.0 < self.phase_in_rate < 1.0) or not (0.0 < self.phaseout_rate < 1.0):
            raise ValidationError("EITC phase-in and phase-out rates must lie in (0, 1)")
        if not (self.max_credit >= 0 and math.isfinite(self.max_credit)):
            raise ValidationError("EITC max_credit must be finite and >= 0")
        for name in ("phaseout_start", "agi_limit"):
            table = getattr(self, name)
            missing = set(FilingStatus) - set(table)
            if missing:
                raise ValidationError(f"EITC {name} missing statuses: {sorted(s.label for s in missing)}")
            object.__setattr__(self, name, MappingProxyType(dict(table)))
        for status in FilingStatus:
            if self.agi_limit[status] < self.phaseout_start[status]:
                raise ValidationError(f"EITC agi_limit below phaseout_start for {status.label}")

    @property
    def earned_income_amount(self) -> float:
        """Income at which the phase-in reaches the maximum credit."""
        return self.max_credit / self.phase_in_rate


@dataclass(frozen=True)
class EitcSchedule:
    investment_income_limit: float
    tiers: Mapping[int, EitcTier]
    ineligible_statuses: frozenset = frozenset({FilingStatus.MARRIED_SEPARATE})

    def __post_init__(self):
        if not (self.investment_income_limit >= 0):
            raise ValidationError("investment_income_limit must be >= 0")
        if set(self.tiers) != {0, 1, 2, 3}:
            raise ValidationError("EITC schedule needs tiers for 0, 1, 2 and 3 qualifying children")
        object.__setattr__(self, "tiers", MappingProxyType(dict(self.tiers)))
        object.__setattr__(self, "ineligible_statuses", frozenset(self.ineligible_statuses))

    def tier(self, children: int) -> EitcTier:
        return self.tiers[min(int(children), 3)]


@dataclass(frozen=True)
class TaxPolicy:
    year: int
    brackets: Mapping[FilingStatus, tuple]
    deductions: Mapping[FilingStatus, Mapping[tuple, float]]
    eitc: EitcSchedule

    def __post_init__(self):
        if int(self.year) < 2018:
            raise ValidationError(f"policy year must be >= 2018, got {self.year}")
        brackets = {}
        for status in FilingStatus:
            if status not in self.brackets:
                raise ValidationError(f"brackets missing status {status.label}")
            brackets[status] = validate_brackets(self.brackets[status])
        deductions = {}
        for status in FilingStatus:
            table = self.deductions.get(status)
            if table is None:
                raise ValidationError(f"deductions missing status {status.label}")
            deductions[status] = MappingProxyType(_validate_deduction_table(table, status))
        object.__setattr__(self, "brackets", MappingProxyType(brackets))
        object.__setattr__(self, "deductions", MappingProxyType(deductions))


_DEDUCTION_KEYS = [(a, b) for a in (False, True) for b in (False, True)]


def _validate_deduction_table(table, status):
    out = {}
    for key in _DEDUCTION_KEYS:
        if key not in table:
            raise ValidationError(f"deduction table for {status.label} missing key {_deduction_key(*key)}")
        amount = float(table[key])
        if not (amount >= 0 and math.isfinite(amount)):
            raise ValidationError(f"deduction must be finite and >= 0 ({status.label} {key})")
        out[key] = amount
    extra = set(table) - set(_DEDUCTION_KEYS)
    if extra:
        raise ValidationError(f"unexpected deduction keys for {status.label}: {sorted(extra)}")
    return out


@dataclass(frozen=True)
class TaxResult:
    tax_liability: float
    eitc_amount: float
    net: float = field(init=False)

    def __post_init__(self):
        if self.tax_liability < 0 or self.eitc_amount < 0:
            raise ValidationError("tax liability and EITC must be >= 0")
        net_cents = to_cents(self.tax_liability) - to_cents(self.eitc_amount)
        object.__setattr__(self, "net", net_cents / 100)

    @property
    def benefit(self) -> float:
        """Filer benefit F = -net; higher is better for the filer."""
        return -self.net


# ---------------------------------------------------------------------------
# Engine


def compute_bracket_tax(taxable_income: float, brackets: Sequence[Sequence[float]]) -> float:
    """Progressive marginal tax on ``taxable_income`` for one status's table."""
    table = validate_brackets(brackets)
    if not (taxable_income >= 0 and math.isfinite(taxable_income)):
        raise ValidationError(f"taxable income must be finite and >= 0, got {taxable_income!r}")
    tax = 0.0
    lower = 0.0
    for upper, rate in table:
        if taxable_income <= lower:
            break
        tax += rate * (min(taxable_income, upper) - lower)
        lower = upper
    return round_cents(tax)


def standard_deduction(profile, deductions: Mapping[FilingStatus, Mapping[tuple, float]]) -> float:
    try:
        table = deductions[profile.status]
        return round_cents(float(table[(bool(profile.age_65_or_older), bool(profile.blind))]))
    except KeyError as exc:
        raise ValidationError(f"deduction table has no entry for {exc.args[0]!r}") from None


def compute_eitc(profile, schedule: EitcSchedule) -> float:
    if profile.status in schedule.ineligible_statuses:
        return 0.0
    if profile.investment_income > schedule.investment_income_limit:
        return 0.0
    tier = schedule.tier(profile.qualifying_children)
    agi = earned = profile.income
    if agi > tier.agi_limit[profile.status]:
        return 0.0
    credit = min(tier.phase_in_rate * earned, tier.max_credit)
    credit -= tier.phaseout_rate * max(0.0, agi - tier.phaseout_start[profile.status])
    return round_cents(min(max(credit, 0.0), tier.max_credit))


def compute_tax(profile, policy: TaxPolicy, scenario: Scenario) -> TaxResult:
    scenario = Scenario.parse(scenario)
    brackets = policy.brackets[profile.status]
    if scenario is Scenario.BRACKETS:
        return TaxResult(compute_bracket_tax(profile.income, brackets), 0.0)
    taxable = max(0.0, profile.income - standard_deduction(profile, policy.deductions))
    liability = compute_bracket_tax(taxable, brackets)
    eitc = compute_eitc(profile, policy.eitc) if scenario.has_eitc else 0.0
    return TaxResult(liability, eitc)


# ---------------------------------------------------------------------------
# JSON policy files

_TOP_KEYS = {"year", "brackets", "deductions", "eitc"}
_EITC_KEYS = {"investment_income_limit", "ineligible_statuses", "by_children"}
_TIER_KEYS = {"phase_in_rate", "max_credit", "phaseout_rate", "phaseout_start", "agi_limit"}


def _deduction_key(age65: bool, blind: bool) -> str:
    return f"a65={str(age65).lower()},blind={str(blind).lower()}"


def _parse_deduction_key(key: str) -> tuple:
    for k in _DEDUCTION_KEYS:
        if _deduction_key(*k) == key:
            return k
    raise ValidationError(f"bad deduction key {key!r} (expected e.g. 'a65=false,blind=true')")


def _reject_unknown(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ValidationError(f"{where}: expected an object")
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ValidationError(f"{where}: unknown keys {sorted(unknown)}")
    missing = set(allowed) - set(obj)
    if missing:
        raise ValidationError(f"{where}: missing keys {sorted(missing)}")


def _status_map(obj, where):
    _reject_unknown(obj, {s.key for s in FilingStatus}, where)
    return {FilingStatus.from_key(k): v for k, v in obj.items()}


def policy_from_dict(data: dict) -> TaxPolicy:
    _reject_unknown(data, _TOP_KEYS, "policy")
    brackets = {
        status: [(INF if upper is None else upper, rate) for upper, rate in rows]
        for status, rows in _status_map(data["brackets"], "brackets").items()
    }
    deductions = {
        status: {_parse_deduction_key(k): v for k, v in table.items()}
        for status, table in _status_map(data["deductions"], "deductions").items()
    }
    eitc = data["eitc"]
    _reject_unknown(eitc, _EITC_KEYS, "eitc")
    tiers = {}
    for key, tier in eitc["by_children"].items():
        _reject_unknown(tier, _TIER_KEYS, f"eitc.by_children[{key}]")
        tiers[int(key)] = EitcTier(
            phase_in_rate=float(tier["phase_in_rate"]),
            max_credit=float(tier["max_credit"]),
            phaseout_rate=float(tier["phaseout_rate"]),
            phaseout_start=_status_map(tier["phaseout_start"], f"eitc tier {key} phaseout_start"),
            agi_limit=_status_map(tier["agi_limit"], f"eitc tier {key} agi_limit"),
        )
    schedule = EitcSchedule(
        investment_income_limit=float(eitc["investment_income_limit"]),
        tiers=tiers,
        ineligible_statuses=frozenset(FilingStatus.from_key(k) for k in eitc["ineligible_statuses"]),
    )
    return TaxPolicy(year=int(data["year"]), brackets=brackets, deductions=deductions, eitc=schedule)


def policy_to_dict(policy: TaxPolicy) -> dict:
    def num(x):
        return int(x) if float(x).is_integer() else x

    return {
        "year": policy.year,
        "brackets": {
            s.key: [[None if u == INF else num(u), r] for u, r in policy.brackets[s]] for s in FilingStatus
        },
        "deductions": {
            s.key: {_deduction_key(*k): num(policy.deductions[s][k]) for k in _DEDUCTION_KEYS}
            for s in FilingStatus
        },
        "eitc": {
            "investment_income_limit": num(policy.eitc.investment_income_limit),
            "ineligible_statuses": sorted(s.key for s in policy.eitc.ineligible_statuses),
            "by_children": {
                str(n): {
                    "phase_in_rate": t.phase_in_rate,
                    "max_credit": num(t.max_credit),
                    "phaseout_rate": t.phaseout_rate,
                    "phaseout_start": {s.key: num(t.phaseout_start[s]) for s in FilingStatus},
                    "agi_limit": {s.key: num(t.agi_limit[s]) for s in FilingStatus},
                }
                for n, t in sorted(policy.eitc.tiers.items())
            },
        },
    }


def load_policy(source: "str | Path") -> TaxPolicy:
    """Load a policy from a JSON file, or a shipped fixture via ``builtin:<year>``."""
    source = str(source)
    if source.startswith("builtin:"):
        name = f"policy_{source.split(':', 1)[1]}.json"
        ref = resources.files("taxrank") / "data" / name
        if not ref.is_file():
            raise ValidationError(f"no built-in policy {source!r}")
        text = ref.read_text(encoding="utf-8")
    else:
        text = Path(source).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"policy file {source} is not valid JSON: {exc}") from None
    return policy_from_dict(data)
