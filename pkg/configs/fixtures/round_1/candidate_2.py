#!/usr/bin/env python3
"""Federal income tax calculator for tax year 2021: tax brackets, standard deductions and the earned income tax credit.

Reads one JSON request per line on stdin and prints one JSON response per line.
"""
import json
import sys
from decimal import ROUND_HALF_UP, Decimal

STATUS_KEYS = {1: "single", 2: "married_joint", 3: "married_separate", 4: "head_of_household"}


def to_cents(amount):
    return float(Decimal(repr(amount)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))

# Tax brackets for 2021: (upper bound, marginal rate)
BRACKETS = {
    "single": [
        (9950, 0.1), (40525, 0.12), (86375, 0.22),
        (164925, 0.24), (209425, 0.32), (523600, 0.35),
        (float("inf"), 0.37),
    ],
    "married_joint": [
        (19900, 0.1), (81050, 0.12), (172750, 0.22),
        (329850, 0.24), (418850, 0.32), (628300, 0.35),
        (float("inf"), 0.37),
    ],
    "married_separate": [
        (9950, 0.1), (40525, 0.12), (86375, 0.22),
        (164925, 0.24), (209425, 0.32), (314150, 0.35),
        (float("inf"), 0.37),
    ],
    "head_of_household": [
        (14200, 0.1), (54200, 0.12), (86350, 0.22),
        (164900, 0.24), (209400, 0.32), (523600, 0.35),
        (float("inf"), 0.37),
    ],
}

# Standard deduction by filing status, keyed by (age 65 or older, blind)
DEDUCTIONS = {
    "single": {(False, False): 12550, (True, False): 14250},
    "married_joint": {(False, False): 25100, (True, False): 26450},
    "married_separate": {(False, False): 12550, (True, False): 13900},
    "head_of_household": {(False, False): 18800, (True, False): 20500},
}

# Earned income tax credit parameters by number of qualifying children
EITC_INVESTMENT_LIMIT = 10000
EITC_INELIGIBLE = {"married_separate"}
EITC = {
    0: {
        "phase_in_rate": 0.153, "max_credit": 1502,
        "phaseout_rate": 0.153,
        "phaseout_start": {"single": 11610, "married_joint": 17560, "married_separate": 11610, "head_of_household": 11610},
        "agi_limit": {"single": 21430, "married_joint": 27380, "married_separate": 21430, "head_of_household": 21430},
    },
    1: {
        "phase_in_rate": 0.34, "max_credit": 3618,
        "phaseout_rate": 0.1598,
        "phaseout_start": {"single": 19520, "married_joint": 25470, "married_separate": 19520, "head_of_household": 19520},
        "agi_limit": {"single": 42158, "married_joint": 48108, "married_separate": 42158, "head_of_household": 42158},
    },
    2: {
        "phase_in_rate": 0.4, "max_credit": 5980,
        "phaseout_rate": 0.2106,
        "phaseout_start": {"single": 19520, "married_joint": 25470, "married_separate": 19520, "head_of_household": 19520},
        "agi_limit": {"single": 47915, "married_joint": 53865, "married_separate": 47915, "head_of_household": 47915},
    },
    3: {
        "phase_in_rate": 0.45, "max_credit": 6728,
        "phaseout_rate": 0.2106,
        "phaseout_start": {"single": 19520, "married_joint": 25470, "married_separate": 19520, "head_of_household": 19520},
        "agi_limit": {"single": 51464, "married_joint": 57414, "married_separate": 51464, "head_of_household": 51464},
    },
}


def bracket_tax(income, status):
    tax = 0.0
    lower = 0.0
    for upper, rate in BRACKETS[status]:
        if income <= lower:
            break
        tax += rate * (min(income, upper) - lower)
        lower = upper
    return to_cents(tax)


def standard_deduction(status, age65, blind):
    table = DEDUCTIONS[status]
    amount = table.get((age65, blind), 0)
    return to_cents(amount)


def earned_income_credit(income, status, children, investment_income):
    if status in EITC_INELIGIBLE or investment_income > EITC_INVESTMENT_LIMIT:
        return 0.0
    tier = EITC[min(children, 3)]
    if income > tier["agi_limit"][status]:
        return 0.0
    credit = min(tier["phase_in_rate"] * income, tier["max_credit"])
    credit -= tier["phaseout_rate"] * max(0.0, income - tier["phaseout_start"][status])
    return to_cents(min(max(credit, 0.0), tier["max_credit"]))


def compute(request):
    income = float(request["income"])
    status = STATUS_KEYS[int(request["status"])]
    scenario = request.get("scenario", "brackets_deductions_eitc")
    if scenario == "brackets":
        tax, credit = bracket_tax(income, status), 0.0
    else:
        deduction = standard_deduction(status, bool(request["age65"]), bool(request["blind"]))
        tax = bracket_tax(max(0.0, income - deduction), status)
        credit = 0.0
        if scenario == "brackets_deductions_eitc":
            credit = earned_income_credit(income, status, int(request["children"]), float(request["investment_income"]))
    net = (round(tax * 100) - round(credit * 100)) / 100
    return {"net": net, "tax_liability": tax, "eitc": credit}


def main():
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        print(json.dumps(compute(json.loads(line))), flush=True)


if __name__ == "__main__":
    main()
