import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taxrank.candidates import (
    AllowMfsEitc,
    BlindExtraConstant,
    Crash,
    DropBlindDeduction,
    Ok,
    make_mutant,
)
from taxrank.exceptions import ValidationError
from taxrank.metamorphic import (
    builtin_relations,
    check_relation,
    judge_pair,
    make_pairs,
    relation_from_dict,
    run_metamorphic_suite,
)
from taxrank.policy import FilingStatus, Scenario, TaxResult, compute_tax
from taxrank.profiles import ProfileDistribution, TaxpayerProfile, sample_profiles

FULL = Scenario.BRACKETS_DEDUCTIONS_EITC
LOW_INCOME = ProfileDistribution(income_range=(1000, 15000), investment_range=(0, 0))


def relation(name):
    return next(r for r in builtin_relations() if r.name == name)


def test_relation_scenario_support():
    r1, r2, r3, r4 = builtin_relations()
    assert r1.supports(Scenario.BRACKETS_DEDUCTIONS) and not r1.supports(Scenario.BRACKETS)
    assert all(r.supports(FULL) for r in (r1, r2, r3, r4))
    assert not r4.supports(Scenario.BRACKETS_DEDUCTIONS)


def test_pairs_differ_in_one_field(policy2021):
    base = sample_profiles(ProfileDistribution(), 1, 300)
    for r in builtin_relations():
        for _, x, y in make_pairs(r, base, policy2021):
            changed = [f for f in ("income", "status", "age_65_or_older", "blind", "qualifying_children",
                                   "investment_income") if getattr(x, f) != getattr(y, f)]
            assert changed in ([], [r.edited_field])


def test_r2_pushes_income_past_limit(policy2021):
    x = TaxpayerProfile(10000, FilingStatus.SINGLE, qualifying_children=1)
    [(_, _, y)] = make_pairs(relation("R2-eitc-agi-limit"), [x], policy2021)
    assert y.income == policy2021.eitc.tier(1).agi_limit[FilingStatus.SINGLE] + 1


def test_judge_pair_slack():
    r1 = relation("R1-blindness")
    x = TaxpayerProfile(1, FilingStatus.SINGLE, blind=True)
    y = TaxpayerProfile(1, FilingStatus.SINGLE)
    # F(x) must be >= F(y); net is the negative of F
    assert judge_pair(r1, 0, x, y, Ok(100.0), Ok(100.01)) is None
    v = judge_pair(r1, 0, x, y, Ok(100.02), Ok(100.0))
    assert v is not None and v.margin == 0.02
    bad = judge_pair(r1, 0, x, y, Crash("exit 1"), Ok(1.0))
    assert bad.kind == "execution failure" and "exit 1" in bad.message


def test_eitc_relation_needs_components():
    r4 = relation("R4-mfs-exclusion")
    x = TaxpayerProfile(1, FilingStatus.MARRIED_SEPARATE)
    v = judge_pair(r4, 0, x, x, Ok(5.0), Ok(5.0))
    assert v.kind == "execution failure"
    assert judge_pair(r4, 0, x, x, Ok(0.0, TaxResult(0, 0)), Ok(0.0, TaxResult(0, 0))) is None


def test_check_relation_with_callable(policy2021):
    r4 = relation("R4-mfs-exclusion")
    base = sample_profiles(ProfileDistribution(status_weights=(0, 0, 1, 0), income_range=(1000, 15000)), 2, 50)
    pairs = make_pairs(r4, base, policy2021)
    assert check_relation(lambda p: compute_tax(p, policy2021, FULL), r4, pairs) == []

    def exploding(p):
        raise ZeroDivisionError("oops")

    violations = check_relation(exploding, r4, pairs)
    assert len(violations) == len(pairs) and all(v.kind == "execution failure" for v in violations)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_clean_engine_passes(policy2021, seed):
    clean = make_mutant(policy2021, FULL)
    report = run_metamorphic_suite(clean, builtin_relations(), ProfileDistribution(), seed, 400, policy2021)
    assert report.verdict == "pass" and report.violations == []


def test_allow_mfs_eitc_fails_r4_only(policy2021):
    mutant = make_mutant(policy2021, FULL, [AllowMfsEitc()])
    report = run_metamorphic_suite(mutant, builtin_relations(), LOW_INCOME, 4, 400, policy2021)
    assert report.verdict == "fail"
    r4 = report.result("R4-mfs-exclusion")
    assert r4.failed == r4.applicable > 0
    assert {v.relation for v in report.violations} == {"R4-mfs-exclusion"}


def test_blind_extra_constant_passes_r1(policy2021):
    mutant = make_mutant(policy2021, FULL, [BlindExtraConstant(500)])
    report = run_metamorphic_suite(mutant, builtin_relations(), ProfileDistribution(), 4, 400, policy2021)
    assert report.result("R1-blindness").failed == 0


def test_brackets_scenario_skips_everything(policy2021):
    clean = make_mutant(policy2021, Scenario.BRACKETS)
    report = run_metamorphic_suite(clean, builtin_relations(), ProfileDistribution(), 1, 10, policy2021,
                                   Scenario.BRACKETS)
    assert report.results == [] and len(report.skipped) == 4 and report.verdict == "pass"


def test_report_serialization_is_deterministic(policy2021):
    mutant = make_mutant(policy2021, FULL, [DropBlindDeduction()])
    a = run_metamorphic_suite(mutant, builtin_relations(), LOW_INCOME, 9, 200, policy2021).to_json()
    b = run_metamorphic_suite(mutant, builtin_relations(), LOW_INCOME, 9, 200, policy2021).to_json()
    assert a == b
    data = json.loads(a)
    assert data["verdict"] == "fail"
    r1 = next(r for r in data["relations"] if r["relation"] == "R1-blindness")
    assert r1["failed"] == len(r1["violations"]) > 0
    assert len(r1["labeled"]) == 200


def test_labeled_set_marks_inapplicable_as_pass(policy2021):
    mutant = make_mutant(policy2021, FULL, [AllowMfsEitc()])
    r4 = run_metamorphic_suite(mutant, builtin_relations(), LOW_INCOME, 2, 300, policy2021).result("R4-mfs-exclusion")
    for profile, passed, applicable in r4.labeled:
        assert applicable == (profile.status is FilingStatus.MARRIED_SEPARATE)
        if not applicable:
            assert passed


def test_custom_relation(policy2021):
    rel = relation_from_dict({
        "name": "age65", "when": {"age65": True}, "edit": {"field": "age65", "value": False},
        "comparator": "F_ge", "requires": "deductions",
    })
    clean = make_mutant(policy2021, FULL)
    report = run_metamorphic_suite(clean, [rel], ProfileDistribution(p_age65=0.5), 3, 200, policy2021)
    assert report.verdict == "pass" and report.result("age65").applicable > 0
    with pytest.raises(ValidationError):
        relation_from_dict({"name": "x", "comparator": "F_ge", "typo": 1})
    with pytest.raises(ValidationError):
        relation_from_dict({"name": "x", "comparator": "sideways"})


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32))
def test_clean_engine_never_violates(policy2020, seed):
    profiles = sample_profiles(ProfileDistribution(investment_range=(0, 5000)), seed, 5)
    engine = lambda p: compute_tax(p, policy2020, FULL)  # noqa: E731
    for r in builtin_relations():
        assert check_relation(engine, r, make_pairs(r, profiles, policy2020)) == []
