"""Reference calculations written against the raw policy JSON, sharing no code with the engine."""

from __future__ import annotations

import json
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources

import numpy as np

STATUS_KEYS = {1: "single", 2: "married_joint", 3: "married_separate", 4: "head_of_household"}
MAX_DOLLARS = 700_000


def raw_policy(year: int) -> dict:
    text = resources.files("taxrank").joinpath(f"data/policy_{year}.json").read_text(encoding="utf-8")
    return json.loads(text)


def _cents(x) -> int:
    return int(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP) * 100)


class DollarOracle:
    """Bracket tax by walking every whole dollar of income.

    For each status we build the marginal rate (in hundredths of a cent per
    dollar) that applies to dollar k, i.e. to income in (k, k+1], and take a
    running sum. The fractional last dollar is taxed at its own marginal rate.
    """

    def __init__(self, raw: dict):
        self.raw = raw
        self._cum = {}
        self._rate = {}
        for key, rows in raw["brackets"].items():
            rate = np.zeros(MAX_DOLLARS + 1, dtype=np.int64)
            lower = 0
            for upper, r in rows:
                hi = MAX_DOLLARS + 1 if upper is None else int(upper)
                rate[lower:hi] = int(round(r * 10_000))
                lower = hi
            self._rate[key] = rate
            self._cum[key] = np.concatenate([[0], np.cumsum(rate)])

    def bracket_tax(self, status_key: str, income: float) -> float:
        """Tax in dollars (unrounded) on ``income`` for one status."""
        if income <= 0:
            return 0.0
        whole = int(np.floor(income))
        frac = income - whole
        basis = self._cum[status_key][whole] + frac * self._rate[status_key][whole]
        return float(basis) / 10_000

    def deduction(self, status_key: str, age65: bool, blind: bool) -> float:
        return self.raw["deductions"][status_key][f"a65={str(age65).lower()},blind={str(blind).lower()}"]

    def eitc(self, status_key: str, income: float, children: int, investment: float) -> float:
        e = self.raw["eitc"]
        if status_key in e["ineligible_statuses"] or investment > e["investment_income_limit"]:
            return 0.0
        t = e["by_children"][str(min(children, 3))]
        if income > t["agi_limit"][status_key]:
            return 0.0
        phase_in = t["phase_in_rate"] * income
        if phase_in > t["max_credit"]:
            phase_in = t["max_credit"]
        excess = income - t["phaseout_start"][status_key]
        reduction = t["phaseout_rate"] * excess if excess > 0 else 0.0
        credit = phase_in - reduction
        return 0.0 if credit < 0 else min(credit, t["max_credit"])

    def net(self, profile: dict, scenario: str) -> float:
        """Net liability in dollars for a wire-format profile dict."""
        key = STATUS_KEYS[profile["status"]]
        income = profile["income"]
        if scenario == "brackets":
            return _cents(self.bracket_tax(key, income)) / 100
        taxable = max(0.0, income - self.deduction(key, profile["age65"], profile["blind"]))
        tax = _cents(self.bracket_tax(key, taxable))
        credit = 0
        if scenario == "brackets_deductions_eitc":
            credit = _cents(self.eitc(key, income, profile["children"], profile["investment_income"]))
        return (tax - credit) / 100
