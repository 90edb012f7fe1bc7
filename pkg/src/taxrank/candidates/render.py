"""Render an engine (with optional faults) as a standalone Python program.

The rendered program reads newline-delimited JSON requests on stdin and writes
one JSON response per line, so it can be run as an external candidate. The
same text doubles as the candidate's source for similarity scoring.
"""

from __future__ import annotations

from typing import Sequence

from ..policy import INF, FilingStatus, Scenario, TaxPolicy
from .mutations import (
    AllowMfsEitc,
    BlindExtraConstant,
    ClampNearZero,
    DropBlindDeduction,
    MutationSpec,
    StalePolicy,
    total_rate_offset,
)

_SCENARIO_TITLES = {
    Scenario.BRACKETS: "tax brackets",
    Scenario.BRACKETS_DEDUCTIONS: "tax brackets and standard deductions",
    Scenario.BRACKETS_DEDUCTIONS_EITC: "tax brackets, standard deductions and the earned income tax credit",
}


def _num(x: float) -> str:
    if x == INF:
        return 'float("inf")'
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def _brackets_block(policy: TaxPolicy) -> list[str]:
    lines = ["BRACKETS = {"]
    for status in FilingStatus:
        pairs = [f"({_num(u)}, {r!r})" for u, r in policy.brackets[status]]
        rows = [", ".join(pairs[i:i + 3]) for i in range(0, len(pairs), 3)]
        lines.append(f'    "{status.key}": [')
        lines.extend(f"        {row}," for row in rows)
        lines.append("    ],")
    lines.append("}")
    return lines


def _deductions_block(policy: TaxPolicy, drop_blind: bool) -> list[str]:
    lines = ["DEDUCTIONS = {"]
    for status in FilingStatus:
        table = policy.deductions[status]
        keys = [k for k in table if not (drop_blind and k[1])]
        entries = ", ".join(f"({a}, {b}): {_num(table[(a, b)])}" for a, b in keys)
        lines.append(f'    "{status.key}": {{{entries}}},')
    lines.append("}")
    return lines


def _eitc_block(policy: TaxPolicy, allow_mfs: bool) -> list[str]:
    schedule = policy.eitc
    ineligible = {s.key for s in schedule.ineligible_statuses}
    if allow_mfs:
        ineligible.discard(FilingStatus.MARRIED_SEPARATE.key)
    lines = [f"EITC_INVESTMENT_LIMIT = {_num(schedule.investment_income_limit)}"]
    lines.append("EITC_INELIGIBLE = {" + ", ".join(f'"{k}"' for k in sorted(ineligible)) + "}"
                 if ineligible else "EITC_INELIGIBLE = set()")
    lines.append("EITC = {")
    for n, tier in sorted(schedule.tiers.items()):
        start = ", ".join(f'"{s.key}": {_num(tier.phaseout_start[s])}' for s in FilingStatus)
        limit = ", ".join(f'"{s.key}": {_num(tier.agi_limit[s])}' for s in FilingStatus)
        lines += [
            f"    {n}: {{",
            f'        "phase_in_rate": {tier.phase_in_rate!r}, "max_credit": {_num(tier.max_credit)},',
            f'        "phaseout_rate": {tier.phaseout_rate!r},',
            f'        "phaseout_start": {{{start}}},',
            f'        "agi_limit": {{{limit}}},',
            "    },",
        ]
    lines.append("}")
    return lines


_HEADER = '''\
#!/usr/bin/env python3
"""Federal income tax calculator for tax year {year}: {title}.

Reads one JSON request per line on stdin and prints one JSON response per line.
"""
import json
import sys
from decimal import ROUND_HALF_UP, Decimal

STATUS_KEYS = {{1: "single", 2: "married_joint", 3: "married_separate", 4: "head_of_household"}}


def to_cents(amount):
    return float(Decimal(repr(amount)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))

'''

_BRACKET_TAX = '''
def bracket_tax(income, status):
    tax = 0.0
    lower = 0.0
    for upper, rate in BRACKETS[status]:
        if income <= lower:
            break
        tax += rate * (min(income, upper) - lower)
        lower = upper
    return to_cents(tax)
'''

_SHIFTED_BRACKET_TAX = '''
RATE_OFFSET = {offset}


def bracket_tax(income, status):
    brackets = BRACKETS[status]
    rates = [rate for _, rate in brackets]
    k = RATE_OFFSET % len(rates)
    rates = rates[k:] + rates[:k]
    base = 0.0
    lower = 0.0
    for i, (upper, rate) in enumerate(brackets):
        if income <= upper:
            return to_cents(base + rates[i] * (income - lower))
        base += rate * (upper - lower)
        lower = upper
'''

_DEDUCTION = '''
def standard_deduction(status, age65, blind):
    table = DEDUCTIONS[status]
{lookup}{extra}    return to_cents(amount)
'''

_EITC = '''
def earned_income_credit(income, status, children, investment_income):
    if status in EITC_INELIGIBLE or investment_income > EITC_INVESTMENT_LIMIT:
        return 0.0
    tier = EITC[min(children, 3)]
    if income > tier["agi_limit"][status]:
        return 0.0
    credit = min(tier["phase_in_rate"] * income, tier["max_credit"])
    credit -= tier["phaseout_rate"] * max(0.0, income - tier["phaseout_start"][status])
    return to_cents(min(max(credit, 0.0), tier["max_credit"]))
'''

_COMPUTE = '''
def compute(request):
    income = float(request["income"])
    status = STATUS_KEYS[int(request["status"])]
    scenario = request.get("scenario", "{scenario}")
    if scenario == "brackets":
        tax, credit = bracket_tax(income, status), 0.0
    else:
        deduction = standard_deduction(status, bool(request["age65"]), bool(request["blind"]))
        tax = bracket_tax(max(0.0, income - deduction), status)
        credit = 0.0
        if scenario == "brackets_deductions_eitc":
            credit = earned_income_credit(income, status, int(request["children"]), float(request["investment_income"]))
    net = (round(tax * 100) - round(credit * 100)) / 100
{clamp}    return {{"net": net, "tax_liability": tax, "eitc": credit}}


def main():
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        print(json.dumps(compute(json.loads(line))), flush=True)


if __name__ == "__main__":
    main()
'''


def render_source(policy: TaxPolicy, scenario: Scenario, specs: Sequence[MutationSpec] = ()) -> str:
    """Program text for the engine under ``policy`` with ``specs`` applied."""
    scenario = Scenario.parse(scenario)
    specs = tuple(specs)
    stale = [s for s in specs if isinstance(s, StalePolicy)]
    constants = stale[-1].prior if stale else policy
    drop_blind = any(isinstance(s, DropBlindDeduction) for s in specs)
    extra = sum(s.amount for s in specs if isinstance(s, BlindExtraConstant))
    allow_mfs = any(isinstance(s, AllowMfsEitc) for s in specs)
    clamps = [s.epsilon for s in specs if isinstance(s, ClampNearZero)]
    offset = total_rate_offset(specs)

    parts = [_HEADER.format(year=policy.year, title=_SCENARIO_TITLES[scenario])]
    parts.append(f"# Tax brackets for {policy.year}: (upper bound, marginal rate)\n")
    parts.append("\n".join(_brackets_block(constants)) + "\n")
    # Every program carries all code paths; the request's scenario picks which run.
    parts.append("\n# Standard deduction by filing status, keyed by (age 65 or older, blind)\n")
    parts.append("\n".join(_deductions_block(constants, drop_blind)) + "\n")
    parts.append("\n# Earned income tax credit parameters by number of qualifying children\n")
    parts.append("\n".join(_eitc_block(constants, allow_mfs)) + "\n")
    parts.append("\n")
    n_brackets = len(constants.brackets[FilingStatus.SINGLE])
    parts.append(_SHIFTED_BRACKET_TAX.format(offset=offset) if offset % n_brackets else _BRACKET_TAX)
    parts.append("\n")
    if drop_blind:
        lookup = "    amount = table.get((age65, blind), 0)\n"
    else:
        lookup = "    amount = table[(age65, blind)]\n"
    extra_line = f"    if blind:\n        amount += {_num(extra)}\n" if extra else ""
    parts.append(_DEDUCTION.format(lookup=lookup, extra=extra_line))
    parts.append("\n")
    parts.append(_EITC)
    parts.append("\n")
    clamp = ""
    if clamps:
        clamp = f"    if abs(net) < {max(clamps)!r}:\n        tax, credit, net = 0.0, 0.0, 0.0\n"
    parts.append(_COMPUTE.format(scenario=scenario.value, clamp=clamp))
    return "".join(parts)
