"""Metamorphic relations over counterfactual taxpayer pairs.

Each relation picks base profiles ``x`` it applies to, builds a counterfactual
``y`` that differs from ``x`` in one field, and checks a comparator on the two
outputs. The comparators look either at the filer benefit F = -net or at the
EITC component alone (where the edit changes income, comparing F would also
pick up bracket-liability changes and mislabel a correct engine).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .candidates import Candidate, Crash, EvalOutcome, Ok
from .exceptions import ValidationError
from .policy import FilingStatus, Scenario, TaxPolicy, TaxResult
from .profiles import PRNG_NAME, ProfileDistribution, TaxpayerProfile, counterfactual, sample_profiles

DEFAULT_SLACK = 0.01

COMPARATORS = {
    "F_ge": "F(x) >= F(y)",
    "F_le": "F(x) <= F(y)",
    "eitc_ge": "eitc(x) >= eitc(y)",
    "eitc_zero": "eitc(x) = 0",
}


@dataclass(frozen=True)
class MetamorphicRelation:
    name: str
    applies: Callable[[TaxpayerProfile, TaxPolicy], bool]
    transform: Callable[[TaxpayerProfile, TaxPolicy], TaxpayerProfile]
    comparator: str
    requires: str | None = None  # "deductions" | "eitc"
    edited_field: str | None = None
    description: str = ""

    def __post_init__(self):
        if self.comparator not in COMPARATORS:
            raise ValidationError(f"unknown comparator {self.comparator!r}")
        if self.requires not in (None, "deductions", "eitc"):
            raise ValidationError(f"unknown scenario requirement {self.requires!r}")

    def supports(self, scenario: Scenario) -> bool:
        if self.requires == "deductions":
            return scenario.has_deductions
        if self.requires == "eitc":
            return scenario.has_eitc
        return True

    @property
    def expectation(self) -> str:
        return COMPARATORS[self.comparator]


def _blind_applies(x, policy):
    return x.blind


def _agi_applies(x, policy):
    return x.income <= policy.eitc.tier(x.qualifying_children).agi_limit[x.status]


def _agi_transform(x, policy):
    return counterfactual(x, "income", policy.eitc.tier(x.qualifying_children).agi_limit[x.status] + 1.0)


def _qc_applies(x, policy):
    if x.qualifying_children < 1:
        return False
    return x.income <= policy.eitc.tier(x.qualifying_children).phaseout_start[x.status]


def builtin_relations() -> list[MetamorphicRelation]:
    return [
        MetamorphicRelation(
            name="R1-blindness",
            applies=_blind_applies,
            transform=lambda x, policy: counterfactual(x, "blind", False),
            comparator="F_ge",
            requires="deductions",
            edited_field="blind",
            description="a blind filer does at least as well as the same filer without blindness",
        ),
        MetamorphicRelation(
            name="R2-eitc-agi-limit",
            applies=_agi_applies,
            transform=_agi_transform,
            comparator="eitc_ge",
            requires="eitc",
            edited_field="income",
            description="a filer under the EITC income limit gets at least the credit of one just above it",
        ),
        MetamorphicRelation(
            name="R3-qc-monotone",
            applies=_qc_applies,
            transform=lambda x, policy: counterfactual(x, "qualifying_children", x.qualifying_children - 1),
            comparator="eitc_ge",
            requires="eitc",
            edited_field="qualifying_children",
            description="before the phase-out, one more qualifying child never lowers the credit",
        ),
        MetamorphicRelation(
            name="R4-mfs-exclusion",
            applies=lambda x, policy: x.status is FilingStatus.MARRIED_SEPARATE,
            transform=lambda x, policy: x,
            comparator="eitc_zero",
            requires="eitc",
            edited_field=None,
            description="married filing separately receives no earned income credit",
        ),
    ]


def relation_from_dict(data: dict) -> MetamorphicRelation:
    """User-defined relation: equality filters in ``when``, a single-field ``edit``.

    Example::

        {"name": "age65", "when": {"age65": true}, "edit": {"field": "age65", "value": false},
         "comparator": "F_ge", "requires": "deductions"}
    """
    allowed = {"name", "when", "income_max", "income_min", "edit", "comparator", "requires", "description"}
    unknown = set(data) - allowed
    if unknown:
        raise ValidationError(f"unknown relation keys {sorted(unknown)}")
    when = {k: v for k, v in data.get("when", {}).items()}
    edit = data.get("edit")
    lo = data.get("income_min", float("-inf"))
    hi = data.get("income_max", float("inf"))

    def applies(x, policy):
        d = x.to_dict()
        for key, value in when.items():
            if key not in d:
                raise ValidationError(f"unknown profile field {key!r} in relation {data['name']}")
            if d[key] != value:
                return False
        return lo <= x.income <= hi

    def transform(x, policy):
        return counterfactual(x, edit["field"], edit["value"]) if edit else x

    return MetamorphicRelation(
        name=data["name"],
        applies=applies,
        transform=transform,
        comparator=data["comparator"],
        requires=data.get("requires"),
        edited_field=edit["field"] if edit else None,
        description=data.get("description", ""),
    )


@dataclass
class RelationViolation:
    relation: str
    pair_index: int
    x: TaxpayerProfile
    y: TaxpayerProfile
    quantity: str  # "F" or "eitc"
    observed_x: float | None
    observed_y: float | None
    margin: float | None
    expected: str
    kind: str = "comparator"  # or "execution failure"
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "relation": self.relation,
            "pair_index": self.pair_index,
            "x": self.x.to_dict(),
            "y": self.y.to_dict(),
            "quantity": self.quantity,
            "expected": self.expected,
            "observed_x": self.observed_x,
            "observed_y": self.observed_y,
            "margin": self.margin,
            "kind": self.kind,
            "message": self.message,
        }


def _quantity(comparator):
    return "eitc" if comparator.startswith("eitc") else "F"


def _observe(outcome: EvalOutcome, quantity: str):
    """(value, failure message)."""
    if not outcome.ok:
        return None, f"{type(outcome).__name__}: {getattr(outcome, 'message', '')}".rstrip(": ")
    if quantity == "F":
        return -outcome.net, None
    if outcome.result is None:
        return None, "response carries no eitc component"
    return outcome.result.eitc_amount, None


def _compare(relation, vx, vy, slack):
    """Margin by which the comparator fails, or None when it holds within ``slack``."""
    c = relation.comparator
    if c == "F_ge" or c == "eitc_ge":
        gap = vy - vx
    elif c == "F_le":
        gap = vx - vy
    else:  # eitc_zero
        gap = abs(vx)
    gap = round(gap, 2)
    return gap if gap > slack else None


def judge_pair(relation, index, x, y, ox: EvalOutcome, oy: EvalOutcome, slack=DEFAULT_SLACK):
    """The violation for one evaluated pair, or None."""
    quantity = _quantity(relation.comparator)
    vx, ex = _observe(ox, quantity)
    vy, ey = (vx, None) if relation.comparator == "eitc_zero" else _observe(oy, quantity)
    if ex or ey:
        return RelationViolation(relation.name, index, x, y, quantity, vx, vy, None, relation.expectation,
                                 kind="execution failure", message="; ".join(m for m in (ex, ey) if m))
    margin = _compare(relation, vx, vy, slack)
    if margin is None:
        return None
    return RelationViolation(relation.name, index, x, y, quantity, vx, vy, margin, relation.expectation)


def _as_evaluator(sut, scenario) -> Callable[[Sequence[TaxpayerProfile]], list[EvalOutcome]]:
    if isinstance(sut, Candidate):
        return lambda profiles: sut.evaluate_many(profiles, scenario)

    def run(profiles):
        out = []
        for p in profiles:
            try:
                r = sut(p)
            except Exception as exc:
                out.append(Crash(f"{type(exc).__name__}: {exc}"))
                continue
            out.append(r if isinstance(r, EvalOutcome) else Ok(r.net, r) if isinstance(r, TaxResult) else Ok(float(r)))
        return out

    return run


def make_pairs(relation, profiles, policy) -> list[tuple[int, TaxpayerProfile, TaxpayerProfile]]:
    """(index, x, y) for every profile the relation applies to."""
    return [(i, x, relation.transform(x, policy)) for i, x in enumerate(profiles) if relation.applies(x, policy)]


def check_relation(sut, relation: MetamorphicRelation, pairs, scenario=Scenario.BRACKETS_DEDUCTIONS_EITC,
                   slack: float = DEFAULT_SLACK) -> list[RelationViolation]:
    """Evaluate ``(index, x, y)`` pairs and collect violations.

    ``sut`` is a Candidate or a callable mapping a profile to a TaxResult.
    """
    evaluate = _as_evaluator(sut, Scenario.parse(scenario))
    pairs = list(pairs)
    outcomes = evaluate([p for _, x, y in pairs for p in (x, y)])
    out = []
    for k, (i, x, y) in enumerate(pairs):
        v = judge_pair(relation, i, x, y, outcomes[2 * k], outcomes[2 * k + 1], slack)
        if v is not None:
            out.append(v)
    return sorted(out, key=lambda v: v.pair_index)


@dataclass
class RelationResult:
    relation: str
    drawn: int
    applicable: int
    violations: list
    labeled: list  # (profile, passed, applicable)

    @property
    def failed(self) -> int:
        return len(self.violations)

    @property
    def passed(self) -> int:
        return self.drawn - self.failed

    def to_dict(self) -> dict:
        return {
            "relation": self.relation,
            "pairs": self.applicable,
            "drawn": self.drawn,
            "passed": self.passed,
            "failed": self.failed,
            "violations": [v.to_dict() for v in self.violations],
            "labeled": [{"profile": p.to_dict(), "pass": ok, "applicable": app} for p, ok, app in self.labeled],
        }


@dataclass
class SuiteReport:
    candidate_id: str
    scenario: Scenario
    seed: int
    n_pairs: int
    results: list
    skipped: list = field(default_factory=list)
    slack: float = DEFAULT_SLACK

    @property
    def verdict(self) -> str:
        return "pass" if all(r.failed == 0 for r in self.results) else "fail"

    @property
    def violations(self) -> list:
        return [v for r in self.results for v in r.violations]

    def result(self, name: str) -> RelationResult:
        for r in self.results:
            if r.relation == name:
                return r
        raise KeyError(name)

    def to_dict(self, include_labeled: bool = True) -> dict:
        rels = []
        for r in self.results:
            d = r.to_dict()
            if not include_labeled:
                d.pop("labeled")
            rels.append(d)
        return {
            "candidate": self.candidate_id,
            "scenario": self.scenario.value,
            "seed": self.seed,
            "n_pairs": self.n_pairs,
            "slack": self.slack,
            "prng": PRNG_NAME,
            "verdict": self.verdict,
            "relations": rels,
            "skipped_relations": list(self.skipped),
        }

    def to_json(self, include_labeled: bool = True) -> str:
        return json.dumps(self.to_dict(include_labeled), indent=2) + "\n"


def run_metamorphic_suite(
    candidate,
    relations: Sequence[MetamorphicRelation],
    dist: ProfileDistribution,
    seed: int,
    n_pairs: int,
    policy: TaxPolicy,
    scenario=Scenario.BRACKETS_DEDUCTIONS_EITC,
    slack: float = DEFAULT_SLACK,
) -> SuiteReport:
    """Check every relation the scenario supports on ``n_pairs`` seeded base profiles.

    Each relation's labeled set covers every drawn base profile; profiles a
    relation does not apply to satisfy it vacuously and are labeled pass.
    """
    if n_pairs < 1:
        raise ValidationError("n_pairs must be >= 1")
    scenario = Scenario.parse(scenario)
    base = sample_profiles(dist, seed, n_pairs)
    active = [r for r in relations if r.supports(scenario)]
    skipped = [r.name for r in relations if not r.supports(scenario)]
    all_pairs = {r.name: make_pairs(r, base, policy) for r in active}

    # One batch for everything keeps external candidates to a single process.
    queue = [p for r in active for _, x, y in all_pairs[r.name] for p in (x, y)]
    evaluate = _as_evaluator(candidate, scenario)
    outcomes = evaluate(queue) if queue else []

    results = []
    pos = 0
    for r in active:
        violations = []
        for i, x, y in all_pairs[r.name]:
            v = judge_pair(r, i, x, y, outcomes[pos], outcomes[pos + 1], slack)
            pos += 2
            if v is not None:
                violations.append(v)
        failed = {v.pair_index for v in violations}
        applicable = {i for i, _, _ in all_pairs[r.name]}
        labeled = [(p, i not in failed, i in applicable) for i, p in enumerate(base)]
        results.append(RelationResult(r.name, n_pairs, len(applicable), violations, labeled))
    cid = candidate.id if isinstance(candidate, Candidate) else getattr(candidate, "__name__", "engine")
    return SuiteReport(cid, scenario, seed, n_pairs, results, skipped, slack)
