import json
import sys
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taxrank.candidates import (
    AllowMfsEitc,
    BlindExtraConstant,
    Candidate,
    ClampNearZero,
    Crash,
    DropBlindDeduction,
    ExternalBackend,
    Ok,
    ProtocolError,
    RateShift,
    StalePolicy,
    Timeout,
    build_python_candidate,
    decode_response,
    encode_request,
    evaluate_pool,
    fault_pool_specs,
    load_external_manifest,
    load_mutant_pool,
    make_mutant,
    mutation_from_dict,
    run_external,
    run_external_batch,
)
from taxrank.candidates.mutations import MutantEngine, shifted_bracket_tax
from taxrank.exceptions import ValidationError
from taxrank.policy import FilingStatus, Scenario, compute_bracket_tax, compute_tax
from taxrank.profiles import ProfileDistribution, TaxpayerProfile, sample_profiles

FULL = Scenario.BRACKETS_DEDUCTIONS_EITC

ECHO_ORACLE = """
import json, sys
from taxrank.policy import compute_tax, load_policy
from taxrank.profiles import TaxpayerProfile
policy = load_policy("builtin:2021")
for line in sys.stdin:
    req = json.loads(line)
    scenario = req.pop("scenario")
    r = compute_tax(TaxpayerProfile.from_dict(req), policy, scenario)
    print(json.dumps({"net": r.net, "tax_liability": r.tax_liability, "eitc": r.eitc_amount}), flush=True)
"""


def _python(path):
    return ExternalBackend(sys.executable, (str(path),), 10000)


@pytest.fixture(scope="module")
def profiles():
    return sample_profiles(ProfileDistribution(investment_range=(0, 5000)), 5, 60)


def test_clean_mutant_equals_engine(policy2021, profiles):
    cand = make_mutant(policy2021, FULL)
    for p, out in zip(profiles, cand.evaluate_many(profiles, FULL)):
        assert out.ok and out.net == compute_tax(p, policy2021, FULL).net


def test_rate_shift_is_discontinuous_at_bounds(policy2021):
    table = policy2021.brackets[FilingStatus.SINGLE]
    bound = table[0][0]
    below = shifted_bracket_tax(bound, table, 1)
    above = shifted_bracket_tax(bound + 0.01, table, 1)
    assert abs(above - below) > 1  # jump, not a kink
    assert shifted_bracket_tax(5000, table, 1) == round(5000 * table[1][1], 2)
    # a full rotation is the identity
    assert shifted_bracket_tax(50000, table, len(table)) == compute_bracket_tax(50000, table)


def test_drop_blind_deduction(policy2021):
    p = TaxpayerProfile(20000, FilingStatus.SINGLE, blind=True)
    eng = MutantEngine(policy2021, [DropBlindDeduction()])
    assert eng.deduction(p) == 0
    seeing = TaxpayerProfile(20000, FilingStatus.SINGLE)
    assert eng.deduction(seeing) == policy2021.deductions[FilingStatus.SINGLE][(False, False)]


def test_blind_extra_constant(policy2021):
    p = TaxpayerProfile(20000, FilingStatus.SINGLE, blind=True)
    eng = MutantEngine(policy2021, [BlindExtraConstant(500)])
    assert eng.deduction(p) == policy2021.deductions[FilingStatus.SINGLE][(False, True)] + 500


def test_allow_mfs_eitc(policy2021):
    p = TaxpayerProfile(10000, FilingStatus.MARRIED_SEPARATE, qualifying_children=1)
    assert compute_tax(p, policy2021, FULL).eitc_amount == 0
    assert MutantEngine(policy2021, [AllowMfsEitc()]).compute(p, FULL).eitc_amount > 0


def test_stale_policy_uses_prior(policy2020, policy2021):
    p = TaxpayerProfile(50000, FilingStatus.SINGLE)
    got = MutantEngine(policy2021, [StalePolicy(policy2020)]).compute(p, FULL)
    assert got == compute_tax(p, policy2020, FULL)


def test_clamp_near_zero(policy2021):
    p = TaxpayerProfile(12600, FilingStatus.SINGLE)  # liability of a few dollars
    assert 0 < compute_tax(p, policy2021, Scenario.BRACKETS_DEDUCTIONS).net < 10
    assert MutantEngine(policy2021, [ClampNearZero(10)]).compute(p, Scenario.BRACKETS_DEDUCTIONS).net == 0


def test_mutation_scenario_requirements(policy2021):
    with pytest.raises(ValidationError):
        make_mutant(policy2021, Scenario.BRACKETS, [DropBlindDeduction()])
    with pytest.raises(ValidationError):
        make_mutant(policy2021, Scenario.BRACKETS_DEDUCTIONS, [AllowMfsEitc()])
    with pytest.raises(ValidationError):
        RateShift(0)
    with pytest.raises(ValidationError):
        BlindExtraConstant(-5)


def test_mutation_from_dict():
    assert mutation_from_dict({"kind": "rate_shift", "offset": 2}) == RateShift(2)
    assert mutation_from_dict({"kind": "clamp_near_zero", "epsilon": 1}) == ClampNearZero(1.0)
    assert isinstance(mutation_from_dict({"kind": "stale_policy", "policy": "builtin:2020"}), StalePolicy)
    for bad in ({"kind": "nope"}, {"kind": "rate_shift"}, {"kind": "allow_mfs_eitc", "extra": 1}):
        with pytest.raises(ValidationError):
            mutation_from_dict(bad)


@pytest.mark.parametrize("name,specs", fault_pool_specs())
def test_rendered_source_matches_mutant(policy2021, profiles, tmp_path, name, specs):
    mutant = make_mutant(policy2021, FULL, specs, id=name)
    built = build_python_candidate(name, mutant.source_text, tmp_path)
    assert [o.net for o in built.evaluate_many(profiles, FULL)] == [o.net for o in mutant.evaluate_many(profiles, FULL)]


def test_request_encoding(profiles):
    req = json.loads(encode_request(profiles[0], "brackets"))
    assert req["scenario"] == "brackets"
    assert set(req) == {"income", "status", "age65", "blind", "children", "investment_income", "scenario"}


@pytest.mark.parametrize("line,expected", [
    ('{"net": 12.345}', Ok(12.35)),
    ('{"net": NaN}', None),
    ('{"net": "12"}', None),
    ('{"net": 1, "note": "x"}', None),
    ('{"tax_liability": 1}', None),
    ('[1]', None),
    ('garbage', None),
])
def test_decode_response(line, expected):
    out = decode_response(line)
    if expected is None:
        assert isinstance(out, ProtocolError)
    else:
        assert out == expected


def test_external_echo_oracle(script, policy2021, profiles):
    backend = _python(script("echo.py", ECHO_ORACLE))
    outs = run_external_batch(backend, profiles, FULL)
    assert [o.net for o in outs] == [compute_tax(p, policy2021, FULL).net for p in profiles]
    assert run_external(backend, profiles[0], FULL).net == outs[0].net


def test_external_nan_is_protocol_error(script, profiles):
    backend = _python(script("nan.py", """
        import sys
        for line in sys.stdin:
            print('{"net": NaN}', flush=True)
    """))
    assert all(isinstance(o, ProtocolError) for o in run_external_batch(backend, profiles[:3], FULL))


def test_external_nonzero_exit(script, profiles):
    backend = _python(script("die.py", "import sys\nsys.exit(3)\n"))
    outs = run_external_batch(backend, profiles[:3], FULL)
    assert outs == [Crash("exit 3")] * 3


def test_external_crash_on_one_input_falls_back(script, profiles):
    # dies only on married-separate requests
    backend = _python(script("picky.py", """
        import json, sys
        for line in sys.stdin:
            if json.loads(line)["status"] == 3:
                sys.exit(1)
            print('{"net": 1.0}', flush=True)
    """))
    outs = run_external_batch(backend, profiles, FULL)
    for p, o in zip(profiles, outs):
        assert (o == Crash("exit 1")) if p.status == FilingStatus.MARRIED_SEPARATE else (o == Ok(1.0))


def test_external_timeout(script, profiles):
    backend = ExternalBackend(sys.executable, (str(script("slow.py", "import time\ntime.sleep(30)\n")),), 200)
    start = time.monotonic()
    assert run_external(backend, profiles[0], FULL) == Timeout()
    assert run_external_batch(backend, profiles[:2], FULL) == [Timeout(), Timeout()]
    assert time.monotonic() - start < 10


def test_external_missing_executable(tmp_path, profiles):
    backend = ExternalBackend(str(tmp_path / "nope"))
    outs = run_external_batch(backend, profiles[:2], FULL)
    assert all(isinstance(o, Crash) and o.message.startswith("cannot execute") for o in outs)


def test_external_short_output(script, profiles):
    backend = _python(script("short.py", "print('{\"net\": 1}')\n"))
    outs = run_external_batch(backend, profiles[:3], FULL)
    assert outs[0] == Ok(1.0)
    assert all(isinstance(o, ProtocolError) for o in outs[1:])


def test_source_only_candidate(profiles):
    cand = Candidate("Version 1", "print('hi')")
    assert not cand.executable
    assert all(isinstance(o, Crash) for o in cand.evaluate_many(profiles[:2], FULL))


def test_evaluate_pool_shape_and_duplicates(policy2021, profiles):
    pool = [make_mutant(policy2021, FULL, specs, id=name) for name, specs in fault_pool_specs()]
    matrix = evaluate_pool(pool, profiles, FULL)
    assert matrix.candidate_ids == [c.id for c in pool]
    assert len(matrix.column(0)) == len(pool) and matrix.n_profiles == len(profiles)
    with pytest.raises(ValidationError):
        evaluate_pool(pool + [pool[0]], profiles, FULL)
    with pytest.raises(ValidationError):
        evaluate_pool([], profiles, FULL)


def test_pool_loaders(tmp_path, policy2021, script):
    (tmp_path / "mutants.json").write_text(json.dumps([
        {"id": "clean", "mutations": []},
        {"id": "shift", "mutations": [{"kind": "rate_shift", "offset": 1}]},
    ]))
    pool = load_mutant_pool(tmp_path / "mutants.json", policy2021, FULL)
    assert [c.id for c in pool] == ["clean", "shift"]
    echo = script("echo.py", ECHO_ORACLE)
    (tmp_path / "manifest.json").write_text(json.dumps([
        {"id": "echo", "path": sys.executable, "args": [str(echo)], "source": "echo.py"},
    ]))
    ext = load_external_manifest(tmp_path / "manifest.json")
    assert ext[0].source_text == echo.read_text()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32))
def test_clean_mutant_property(policy2020, seed):
    p = sample_profiles(ProfileDistribution(investment_range=(0, 5000)), seed, 1)[0]
    assert MutantEngine(policy2020).compute(p, FULL) == compute_tax(p, policy2020, FULL)
