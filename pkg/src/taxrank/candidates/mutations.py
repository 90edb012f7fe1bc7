"""Fault specifications and the fault-injected tax engine."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

from ..exceptions import ValidationError
from ..policy import (
    FilingStatus,
    Scenario,
    TaxPolicy,
    TaxResult,
    compute_eitc,
    load_policy,
    policy_from_dict,
    policy_to_dict,
    round_cents,
    validate_brackets,
)


class MutationSpec:
    """Base class for one injected fault."""

    kind: str = ""
    requires: str | None = None  # "deductions" or "eitc"

    def to_dict(self) -> dict:
        raise NotImplementedError

    def check_scenario(self, scenario: Scenario) -> None:
        if self.requires == "deductions" and not scenario.has_deductions:
            raise ValidationError(f"{self.kind} needs a scenario with deductions, got {scenario.value}")
        if self.requires == "eitc" and not scenario.has_eitc:
            raise ValidationError(f"{self.kind} needs the EITC scenario, got {scenario.value}")


@dataclass(frozen=True)
class RateShift(MutationSpec):
    """Marginal rates rotated ``offset`` positions against the bracket bounds.

    Base amounts per bracket still come from the correct rates, so the
    resulting schedule jumps at bracket boundaries.
    """

    offset: int
    kind = "rate_shift"

    def __post_init__(self):
        if isinstance(self.offset, bool) or int(self.offset) != self.offset or self.offset == 0:
            raise ValidationError("RateShift offset must be a nonzero integer")

    def to_dict(self):
        return {"kind": self.kind, "offset": int(self.offset)}


@dataclass(frozen=True)
class BlindExtraConstant(MutationSpec):
    """A constant added on top of the blind filer's deduction (double counting)."""

    amount: float
    kind = "blind_extra_constant"
    requires = "deductions"

    def __post_init__(self):
        if not (self.amount > 0 and math.isfinite(self.amount)):
            raise ValidationError("BlindExtraConstant amount must be > 0")

    def to_dict(self):
        return {"kind": self.kind, "amount": self.amount}


@dataclass(frozen=True)
class DropBlindDeduction(MutationSpec):
    """Blind entries missing from the deduction dictionary; lookups fall back to 0."""

    kind = "drop_blind_deduction"
    requires = "deductions"

    def to_dict(self):
        return {"kind": self.kind}


@dataclass(frozen=True)
class AllowMfsEitc(MutationSpec):
    """Married-filing-separately filers not excluded from the EITC."""

    kind = "allow_mfs_eitc"
    requires = "eitc"

    def to_dict(self):
        return {"kind": self.kind}


@dataclass(frozen=True, eq=False)
class StalePolicy(MutationSpec):
    """Constants left at a prior year's values."""

    prior: TaxPolicy
    kind = "stale_policy"

    def __post_init__(self):
        if not isinstance(self.prior, TaxPolicy):
            raise ValidationError("StalePolicy needs a TaxPolicy")

    def __eq__(self, other):
        return isinstance(other, StalePolicy) and policy_to_dict(self.prior) == policy_to_dict(other.prior)

    def __hash__(self):
        return hash((self.kind, self.prior.year))

    def to_dict(self):
        return {"kind": self.kind, "policy": policy_to_dict(self.prior)}


@dataclass(frozen=True)
class ClampNearZero(MutationSpec):
    """Net results with magnitude below ``epsilon`` reported as exactly zero."""

    epsilon: float
    kind = "clamp_near_zero"

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValidationError("ClampNearZero epsilon must be > 0")

    def to_dict(self):
        return {"kind": self.kind, "epsilon": self.epsilon}


def mutation_from_dict(data: dict, base_dir=None) -> MutationSpec:
    data = dict(data)
    kind = data.pop("kind", None)
    try:
        if kind == "rate_shift":
            return RateShift(int(data.pop("offset")))
        if kind == "blind_extra_constant":
            return BlindExtraConstant(float(data.pop("amount")))
        if kind == "drop_blind_deduction":
            return DropBlindDeduction()
        if kind == "allow_mfs_eitc":
            return AllowMfsEitc()
        if kind == "clamp_near_zero":
            return ClampNearZero(float(data.pop("epsilon")))
        if kind == "stale_policy":
            ref = data.pop("policy")
            if isinstance(ref, dict):
                return StalePolicy(policy_from_dict(ref))
            if base_dir is not None and not str(ref).startswith("builtin:"):
                ref = str(base_dir / ref)
            return StalePolicy(load_policy(ref))
    except KeyError as exc:
        raise ValidationError(f"mutation {kind!r} missing field {exc.args[0]!r}") from None
    finally:
        if kind is not None and data:
            raise ValidationError(f"mutation {kind!r} has unknown fields {sorted(data)}")
    raise ValidationError(f"unknown mutation kind {kind!r}")


def validate_specs(specs: Sequence[MutationSpec], scenario: Scenario) -> tuple:
    specs = tuple(specs)
    for spec in specs:
        if not isinstance(spec, MutationSpec):
            raise ValidationError(f"not a MutationSpec: {spec!r}")
        spec.check_scenario(scenario)
    return specs


def total_rate_offset(specs) -> int:
    return sum(s.offset for s in specs if isinstance(s, RateShift))


def shifted_bracket_tax(income: float, brackets, offset: int) -> float:
    """Bracket tax with base amounts from the true rates and rotated marginal rates."""
    table = validate_brackets(brackets)
    rates = [r for _, r in table]
    k = offset % len(rates)
    rates = rates[k:] + rates[:k]
    base = 0.0
    lower = 0.0
    for i, (upper, rate) in enumerate(table):
        if income <= upper:
            return round_cents(base + rates[i] * (income - lower))
        base += rate * (upper - lower)
        lower = upper
    raise AssertionError("unreachable: final bracket is unbounded")


class MutantEngine:
    """The ground-truth engine with the listed faults applied."""

    def __init__(self, policy: TaxPolicy, specs: Sequence[MutationSpec] = ()):
        self.specs = tuple(specs)
        stale = [s for s in self.specs if isinstance(s, StalePolicy)]
        self.policy = stale[-1].prior if stale else policy
        self.offset = total_rate_offset(self.specs)
        self.drop_blind = any(isinstance(s, DropBlindDeduction) for s in self.specs)
        self.blind_extra = sum(s.amount for s in self.specs if isinstance(s, BlindExtraConstant))
        self.allow_mfs = any(isinstance(s, AllowMfsEitc) for s in self.specs)
        clamps = [s.epsilon for s in self.specs if isinstance(s, ClampNearZero)]
        self.clamp = max(clamps) if clamps else None

    def bracket_tax(self, income, status):
        brackets = self.policy.brackets[status]
        if self.offset % len(brackets):
            return shifted_bracket_tax(income, brackets, self.offset)
        tax = 0.0
        lower = 0.0
        for upper, rate in brackets:
            if income <= lower:
                break
            tax += rate * (min(income, upper) - lower)
            lower = upper
        return round_cents(tax)

    def deduction(self, profile):
        if profile.blind and self.drop_blind:
            return 0.0
        amount = self.policy.deductions[profile.status][(profile.age_65_or_older, profile.blind)]
        if profile.blind:
            amount += self.blind_extra
        return round_cents(amount)

    def eitc(self, profile):
        schedule = self.policy.eitc
        if self.allow_mfs:
            schedule = replace(
                schedule, ineligible_statuses=schedule.ineligible_statuses - {FilingStatus.MARRIED_SEPARATE}
            )
        return compute_eitc(profile, schedule)

    def compute(self, profile, scenario) -> TaxResult:
        scenario = Scenario.parse(scenario)
        if scenario is Scenario.BRACKETS:
            result = TaxResult(self.bracket_tax(profile.income, profile.status), 0.0)
        else:
            taxable = max(0.0, profile.income - self.deduction(profile))
            liability = self.bracket_tax(taxable, profile.status)
            credit = self.eitc(profile) if scenario.has_eitc else 0.0
            result = TaxResult(liability, credit)
        if self.clamp is not None and abs(result.net) < self.clamp:
            return TaxResult(0.0, 0.0)
        return result
