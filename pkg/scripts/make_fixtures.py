"""Regenerate configs/fixtures: round 1 holds only faulty programs, round 2 adds the clean one."""

import sys
from pathlib import Path

from taxrank.candidates import AllowMfsEitc, BlindExtraConstant, DropBlindDeduction, RateShift, render_source
from taxrank.policy import Scenario, load_policy

ROUNDS = {
    "round_1": [[AllowMfsEitc()], [DropBlindDeduction()], [RateShift(1)]],
    "round_2": [[AllowMfsEitc()], [], [BlindExtraConstant(500.0)], [DropBlindDeduction()]],
}


def write_rounds(target: Path, policy, scenario) -> None:
    for name, pool in ROUNDS.items():
        d = target / name
        d.mkdir(parents=True, exist_ok=True)
        for i, specs in enumerate(pool, start=1):
            (d / f"candidate_{i}.py").write_text(render_source(policy, scenario, specs), encoding="utf-8")


if __name__ == "__main__":
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "configs" / "fixtures"
    write_rounds(out, load_policy("builtin:2021"), Scenario.BRACKETS_DEDUCTIONS_EITC)
