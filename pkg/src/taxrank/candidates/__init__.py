"""Implementations under test: fault-injected engines and external executables."""

from __future__ import annotations

import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from ..exceptions import ValidationError
from ..policy import Scenario, TaxPolicy
from .external import (
    ExternalBackend,
    decode_response,
    encode_request,
    run_external,
    run_external_batch,
)
from .mutations import (
    AllowMfsEitc,
    BlindExtraConstant,
    ClampNearZero,
    DropBlindDeduction,
    MutantEngine,
    MutationSpec,
    RateShift,
    StalePolicy,
    mutation_from_dict,
    validate_specs,
)
from .outcomes import Crash, EvalOutcome, Ok, ProtocolError, Timeout
from .render import render_source

__all__ = [
    "AllowMfsEitc", "BlindExtraConstant", "Candidate", "ClampNearZero", "Crash",
    "DropBlindDeduction", "EvalOutcome", "ExternalBackend", "MutantBackend", "MutationSpec",
    "Ok", "OutcomeMatrix", "ProtocolError", "RateShift", "StalePolicy", "Timeout",
    "build_python_candidate", "decode_response", "encode_request", "evaluate_pool",
    "fault_pool_specs", "load_external_manifest", "load_mutant_pool", "make_mutant",
    "mutation_from_dict", "render_source", "run_external", "run_external_batch",
]


@dataclass(frozen=True)
class MutantBackend:
    policy: TaxPolicy
    specs: tuple = ()

    def engine(self) -> MutantEngine:
        return MutantEngine(self.policy, self.specs)


@dataclass(frozen=True)
class Candidate:
    id: str
    source_text: str
    backend: MutantBackend | ExternalBackend | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id.strip():
            raise ValidationError("candidate id must be a nonempty string")

    @property
    def executable(self) -> bool:
        return self.backend is not None

    def evaluate(self, profile, scenario) -> EvalOutcome:
        return self.evaluate_many([profile], scenario)[0]

    def evaluate_many(self, profiles: Sequence, scenario) -> list[EvalOutcome]:
        if self.backend is None:
            return [Crash("source-only candidate") for _ in profiles]
        if isinstance(self.backend, ExternalBackend):
            return run_external_batch(self.backend, profiles, scenario)
        engine = self.backend.engine()
        out = []
        for p in profiles:
            try:
                result = engine.compute(p, scenario)
            except Exception as exc:  # a fault may push the engine outside its domain
                out.append(Crash(f"{type(exc).__name__}: {exc}"))
            else:
                out.append(Ok(result.net, result))
        return out


def make_mutant(policy: TaxPolicy, scenario, specs: Sequence[MutationSpec] = (), id: str = "mutant") -> Candidate:
    """Candidate computing the engine with ``specs`` applied.

    Raises ValidationError if a spec does not fit the scenario.
    """
    scenario = Scenario.parse(scenario)
    specs = validate_specs(specs, scenario)
    return Candidate(
        id=id,
        source_text=render_source(policy, scenario, specs),
        backend=MutantBackend(policy, specs),
        meta={"mutations": [s.to_dict() for s in specs]},
    )


def fault_pool_specs(prior: TaxPolicy | None = None) -> list[tuple[str, list[MutationSpec]]]:
    """The standard fixture pool: a clean engine plus one mutant per fault class."""
    pool = [
        ("clean", []),
        ("rate_shift", [RateShift(1)]),
        ("drop_blind_deduction", [DropBlindDeduction()]),
        ("allow_mfs_eitc", [AllowMfsEitc()]),
        ("blind_extra_constant", [BlindExtraConstant(500.0)]),
    ]
    if prior is not None:
        pool.append(("stale_policy", [StalePolicy(prior)]))
    return pool


@dataclass
class OutcomeMatrix:
    """Outcomes keyed by candidate id, one entry per profile index."""

    candidate_ids: list
    rows: dict

    @property
    def n_profiles(self) -> int:
        return len(next(iter(self.rows.values()))) if self.rows else 0

    def row(self, candidate_id: str) -> list[EvalOutcome]:
        return self.rows[candidate_id]

    def column(self, j: int) -> list[EvalOutcome]:
        return [self.rows[c][j] for c in self.candidate_ids]

    def __getitem__(self, key):
        cid, j = key
        return self.rows[cid][j]

    def to_dict(self) -> dict:
        return {cid: [o.to_dict() for o in self.rows[cid]] for cid in self.candidate_ids}


def _check_pool(pool: Sequence[Candidate]) -> None:
    if not pool:
        raise ValidationError("candidate pool is empty")
    ids = [c.id for c in pool]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise ValidationError(f"duplicate candidate ids: {dupes}")


def evaluate_pool(pool: Sequence[Candidate], profiles: Sequence, scenario, max_workers: int | None = None) -> OutcomeMatrix:
    """Run every candidate on every profile.

    Failures become per-cell outcomes; nothing here aborts the run. External
    candidates run concurrently, at most ``max_workers`` processes at a time.
    """
    _check_pool(pool)
    if not profiles:
        raise ValidationError("no profiles to evaluate")
    scenario = Scenario.parse(scenario)
    workers = max_workers or os.cpu_count() or 1
    rows = {}
    external = [c for c in pool if isinstance(c.backend, ExternalBackend)]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        futures = {c.id: ex.submit(c.evaluate_many, profiles, scenario) for c in external}
        for c in pool:
            if c.id not in futures:
                rows[c.id] = c.evaluate_many(profiles, scenario)
        for cid, fut in futures.items():
            rows[cid] = fut.result()
    return OutcomeMatrix([c.id for c in pool], rows)


def build_python_candidate(id: str, source_text: str, workdir: "str | Path", timeout_ms: int = 5000) -> Candidate:
    """Write ``source_text`` to ``workdir`` and run it with the current interpreter."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    safe = "".join(ch if ch.isalnum() else "_" for ch in id).strip("_") or "candidate"
    path = workdir / f"{safe}.py"
    path.write_text(source_text, encoding="utf-8")
    return Candidate(id, source_text, ExternalBackend(sys.executable, (str(path),), timeout_ms))


def load_mutant_pool(path: "str | Path", policy: TaxPolicy, scenario) -> list[Candidate]:
    """Pool from a JSON list of ``{"id": ..., "mutations": [...]}`` entries."""
    path = Path(path)
    entries = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(entries, list):
        raise ValidationError(f"{path}: expected a JSON list of candidates")
    pool = []
    for entry in entries:
        specs = [mutation_from_dict(m, base_dir=path.parent) for m in entry.get("mutations", [])]
        pool.append(make_mutant(policy, scenario, specs, id=entry["id"]))
    _check_pool(pool)
    return pool


def load_external_manifest(path: "str | Path") -> list[Candidate]:
    """Pool from a JSON list of ``{"id", "path", "args"?, "timeout_ms"?, "source"?}`` entries."""
    path = Path(path)
    entries = json.loads(path.read_text(encoding="utf-8"))
    pool = []
    for entry in entries:
        exe = entry["path"]
        if not os.path.isabs(exe) and (path.parent / exe).exists():
            exe = str(path.parent / exe)
        source_file = entry.get("source")
        if source_file:
            source_text = (path.parent / source_file).read_text(encoding="utf-8")
        else:
            try:
                source_text = Path(exe).read_text(encoding="utf-8")
            except (OSError, UnicodeDecodeError):
                source_text = entry["id"]
        backend = ExternalBackend(exe, tuple(entry.get("args", ())), int(entry.get("timeout_ms", 5000)))
        pool.append(Candidate(entry["id"], source_text, backend))
    _check_pool(pool)
    return pool
