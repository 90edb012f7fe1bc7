"""Command-line orchestration: ``taxrank score|metatest|pipeline|report``.

Run configuration is a JSON file; relative paths resolve against the file's
directory. See README.md for the full key list.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .candidates import (
    Candidate,
    build_python_candidate,
    evaluate_pool,
    load_external_manifest,
    load_mutant_pool,
    render_source,
)
from .exceptions import TaxRankError, ValidationError
from .feedback import (
    MODES,
    WITH_PRIOR_CODE,
    WITHOUT_PRIOR_CODE,
    FixtureClient,
    HttpChatClient,
    PromptTemplate,
    generate_candidates,
    generate_feedback_prompt,
    render_policy_block,
    render_prompt,
)
from .localizer import explain_paths, fit_cart
from .metamorphic import builtin_relations, relation_from_dict, run_metamorphic_suite
from .policy import Scenario, TaxPolicy, compute_tax, load_policy
from .profiles import PRNG_NAME, ProfileDistribution, sample_profiles
from .scoring import (
    HashedTrigramEmbedding,
    HttpEmbeddingProvider,
    ScoreCard,
    Weights,
    delta_grid,
    format_table,
    score_pool,
    scores_csv,
    tolerance_csv,
)

log = logging.getLogger("taxrank")

EXIT_OK, EXIT_UNRESOLVED, EXIT_USAGE = 0, 1, 2

_CONFIG_KEYS = {
    "policy", "prior_policy", "scenario", "mode", "candidates", "references", "prior_code", "template",
    "profiles", "n_profiles", "seeds", "weights", "delta", "cent_tolerance", "metamorphic", "cart",
    "max_rounds", "top_k", "n_candidates", "temperature", "embedding", "out",
}


class UsageError(TaxRankError):
    """Configuration or command-line problem (exit code 2)."""


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path
    policy: TaxPolicy
    prior_policy: TaxPolicy | None
    scenario: Scenario
    mode: str
    candidates: dict
    dist: ProfileDistribution
    n_profiles: int
    profile_seed: int
    metamorphic_seed: int
    weights: Weights
    grid: list
    cent_tolerance: int
    n_pairs: int
    meta_dist: ProfileDistribution
    relations: list
    cart: dict
    min_fail_rate: float
    max_rounds: int
    top_k: int
    n_candidates: int | None
    temperature: float
    out: Path
    references: list = field(default_factory=list)
    prior_code: str | None = None
    template: PromptTemplate | None = None
    embedding: dict = field(default_factory=dict)
    trace: bool = False

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode("utf-8")).hexdigest()


def _path(base: Path, ref: str) -> Path:
    p = Path(ref)
    return p if p.is_absolute() else base / p


def _existing(base: Path, ref: str, what: str) -> Path:
    p = _path(base, ref)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_policy_ref(base: Path, ref: str) -> TaxPolicy:
    if str(ref).startswith("builtin:"):
        return load_policy(ref)
    return load_policy(_existing(base, ref, "policy file"))


def load_config(path, seed=None, weights=None, delta_max=None, out=None, trace=False) -> RunConfig:
    """Read and validate a run configuration, applying command-line overrides."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    raw = copy.deepcopy(raw)
    if seed is not None:
        raw["seeds"] = {"profiles": seed, "metamorphic": seed}
    if weights is not None:
        raw["weights"] = [weights.w_sim, weights.w_mv]
    if delta_max is not None:
        raw.setdefault("delta", {})["max"] = delta_max
    if out is not None:
        raw["out"] = str(out)
    base = path.parent

    for key in ("policy", "scenario", "candidates", "seeds"):
        if key not in raw:
            raise UsageError(f"config is missing required key {key!r}")
    seeds = raw["seeds"]
    if not isinstance(seeds, dict) or not {"profiles", "metamorphic"} <= set(seeds):
        raise UsageError("seeds must give explicit 'profiles' and 'metamorphic' integers")

    policy = _load_policy_ref(base, raw["policy"])
    prior = _load_policy_ref(base, raw["prior_policy"]) if raw.get("prior_policy") else None
    scenario = Scenario.parse(raw["scenario"])
    mode = raw.get("mode", WITHOUT_PRIOR_CODE)
    if mode not in MODES:
        raise UsageError(f"mode must be one of {MODES}")
    dist = ProfileDistribution.from_dict(raw.get("profiles", {}))
    meta = dict(raw.get("metamorphic", {}))
    unknown = set(meta) - {"n_pairs", "profiles", "relations", "builtin", "slack"}
    if unknown:
        raise UsageError(f"unknown metamorphic keys: {sorted(unknown)}")
    meta_dist = ProfileDistribution.from_dict(meta["profiles"]) if "profiles" in meta else dist
    relations = builtin_relations() if meta.get("builtin", True) else []
    relations += [relation_from_dict(r) for r in meta.get("relations", [])]
    cart = dict(raw.get("cart", {}))
    min_fail_rate = float(cart.pop("min_fail_rate", 0.8))
    unknown = set(cart) - {"max_depth", "min_samples_leaf", "min_gini_gain"}
    if unknown:
        raise UsageError(f"unknown cart keys: {sorted(unknown)}")
    w = raw.get("weights", [0.6, 0.4])
    delta = raw.get("delta", {})

    cands = dict(raw["candidates"])
    kind = cands.get("kind")
    if kind not in ("mutants", "fixtures", "external", "live"):
        raise UsageError("candidates.kind must be one of mutants, fixtures, external, live")
    if kind != "live":
        cands["path"] = str(_existing(base, cands.get("path", ""), f"{kind} candidate source"))

    references = [_existing(base, r, "reference").read_text(encoding="utf-8") for r in raw.get("references", [])]
    prior_code = None
    if raw.get("prior_code"):
        prior_code = _existing(base, raw["prior_code"], "prior code").read_text(encoding="utf-8")
    template = PromptTemplate.from_file(_existing(base, raw["template"], "template")) if raw.get("template") else None

    return RunConfig(
        raw=raw,
        base_dir=base,
        policy=policy,
        prior_policy=prior,
        scenario=scenario,
        mode=mode,
        candidates=cands,
        dist=dist,
        n_profiles=int(raw.get("n_profiles", 100)),
        profile_seed=int(seeds["profiles"]),
        metamorphic_seed=int(seeds["metamorphic"]),
        weights=Weights(*w),
        grid=delta_grid(float(delta.get("max", 0.10)), float(delta.get("step", 0.005))),
        cent_tolerance=int(raw.get("cent_tolerance", 0)),
        n_pairs=int(meta.get("n_pairs", 1000)),
        meta_dist=meta_dist,
        relations=relations,
        cart=cart,
        min_fail_rate=min_fail_rate,
        max_rounds=int(raw.get("max_rounds", 3)),
        top_k=int(raw.get("top_k", 1)),
        n_candidates=raw.get("n_candidates"),
        temperature=float(raw.get("temperature", 1.0)),
        out=_path(base, raw.get("out", "out")),
        references=references,
        prior_code=prior_code,
        template=template,
        embedding=dict(raw.get("embedding", {})),
        trace=trace,
    )


# ---------------------------------------------------------------------------
# Shared stages


def _prior_code(cfg: RunConfig) -> str:
    if cfg.prior_code is not None:
        return cfg.prior_code
    return render_source(cfg.prior_policy or cfg.policy, cfg.scenario)


def _references(cfg: RunConfig) -> list[str]:
    if cfg.references:
        return cfg.references
    return [_prior_code(cfg), render_policy_block(cfg.policy, cfg.scenario)]


def _provider(cfg: RunConfig):
    if cfg.embedding.get("kind") == "http":
        return HttpEmbeddingProvider(cfg.embedding["endpoint"], int(cfg.embedding.get("dim", 768)))
    return HashedTrigramEmbedding(int(cfg.embedding.get("dim", 256)))


def _base_prompt(cfg: RunConfig) -> str:
    template = cfg.template or PromptTemplate.builtin(cfg.mode)
    prior_year = cfg.prior_policy.year if cfg.prior_policy else None
    prior = _prior_code(cfg) if cfg.mode == WITH_PRIOR_CODE else None
    return render_prompt(template, cfg.scenario, cfg.policy, cfg.mode, prior, prior_year)


def _build_hook(cfg: RunConfig, workdir: Path):
    if cfg.candidates.get("build", "python") == "none":
        return None
    timeout = int(cfg.candidates.get("timeout_ms", 5000))
    return lambda cid, text: build_python_candidate(cid, text, workdir, timeout)


def _client(cfg: RunConfig):
    c = cfg.candidates
    if c["kind"] == "fixtures":
        return FixtureClient(c["path"])
    if c["kind"] == "live":
        if "endpoint" not in c or "model" not in c:
            raise UsageError("live candidates need 'endpoint' and 'model'")
        return HttpChatClient(c["endpoint"], c["model"], retries=int(c.get("retries", 2)), trace=cfg.trace)
    raise UsageError(f"candidate source {c['kind']!r} cannot generate new candidates")


def build_pool(cfg: RunConfig, client=None, prompt: str | None = None, round_no: int = 1) -> list[Candidate]:
    c = cfg.candidates
    if c["kind"] == "mutants":
        return load_mutant_pool(c["path"], cfg.policy, cfg.scenario)
    if c["kind"] == "external":
        return load_external_manifest(c["path"])
    client = client or _client(cfg)
    n = cfg.n_candidates
    if n is None:
        n = len(client.files()) if isinstance(client, FixtureClient) else 10
    if n < 1:
        raise UsageError("no candidates")
    hook = _build_hook(cfg, cfg.out / "build" / f"round_{round_no}")
    return generate_candidates(client, prompt or _base_prompt(cfg), int(n), hook, cfg.temperature,
                               c.get("model"))


def _metadata(cfg: RunConfig, command: str) -> dict:
    return {
        "tool": "taxrank",
        "version": __version__,
        "command": command,
        "config_hash": cfg.config_hash,
        "seeds": {"profiles": cfg.profile_seed, "metamorphic": cfg.metamorphic_seed},
        "prng": PRNG_NAME,
        "weights": [cfg.weights.w_sim, cfg.weights.w_mv],
        "temperature": cfg.temperature,
        "policy_year": cfg.policy.year,
        "scenario": cfg.scenario.value,
        "mode": cfg.mode,
    }


def _write(out: Path, name: str, text: str, inventory: list) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text, encoding="utf-8")
    inventory.append(name)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=False) + "\n"


def score_stage(cfg: RunConfig, pool: list[Candidate]) -> list[ScoreCard]:
    profiles = sample_profiles(cfg.dist, cfg.profile_seed, cfg.n_profiles)
    matrix = evaluate_pool(pool, profiles, cfg.scenario)
    oracle = [compute_tax(p, cfg.policy, cfg.scenario).net for p in profiles]
    return score_pool(pool, matrix, oracle, _references(cfg), _provider(cfg), cfg.weights, cfg.grid,
                      cfg.cent_tolerance)


def write_scores(out: Path, cards, inventory: list) -> None:
    _write(out, "scores.csv", scores_csv(cards), inventory)
    _write(out, "tolerance.csv", tolerance_csv(cards), inventory)


def metatest_stage(cfg: RunConfig, candidate: Candidate, out: Path, inventory: list, base_prompt: str | None = None):
    """Suite + localization + feedback for one candidate; returns (report, paths, feedback text or None)."""
    report = run_metamorphic_suite(candidate, cfg.relations, cfg.meta_dist, cfg.metamorphic_seed, cfg.n_pairs,
                                   cfg.policy, cfg.scenario)
    violations = {
        "candidate": candidate.id,
        "verdict": report.verdict,
        "relations": [{"relation": r.relation, "pairs": r.applicable, "drawn": r.drawn, "failed": r.failed}
                      for r in report.results],
        "violations": [v.to_dict() for v in report.violations],
    }
    _write(out, "violations.json", _dump(violations), inventory)
    _write(out, "suite.json", report.to_json(), inventory)
    if report.verdict == "pass":
        return report, [], None

    trees, tree_dicts, paths = [], {}, []
    for r in report.results:
        if r.failed == 0:
            continue
        header = f"== {r.relation}: {r.failed} of {r.drawn} failed =="
        try:
            tree = fit_cart(r.labeled, **cfg.cart)
        except ValidationError as exc:
            trees.append(f"{header}\n(no tree: {exc})\n")
            continue
        found = explain_paths(tree, cfg.min_fail_rate)
        paths.extend(found)
        tree_dicts[r.relation] = {"tree": tree.to_dict(), "paths": [p.to_dict() for p in found]}
        listing = "".join(f"  * {p.condition} (n={p.n_samples}, fail rate {p.fail_rate:.2f})\n" for p in found)
        listing = listing or "  (none above threshold)\n"
        trees.append(f"{header}\n{tree.export_text()}failure paths:\n{listing}")
    _write(out, "tree.txt", "\n".join(trees), inventory)
    _write(out, "tree.json", _dump(tree_dicts), inventory)
    feedback = generate_feedback_prompt(base_prompt or _base_prompt(cfg), report, paths, candidate)
    text = feedback.render()
    _write(out, "feedback.txt", text, inventory)
    return report, paths, text


def _suite_summary(report, paths) -> dict:
    return {
        "candidate": report.candidate_id,
        "verdict": report.verdict,
        "relations": [{"relation": r.relation, "pairs": r.applicable, "passed": r.passed, "failed": r.failed}
                      for r in report.results],
        "skipped_relations": report.skipped,
        "localized": [p.to_dict() for p in paths],
    }


# ---------------------------------------------------------------------------
# Commands


def cmd_score(cfg: RunConfig) -> dict:
    inventory: list = []
    pool = build_pool(cfg)
    cards = score_stage(cfg, pool)
    write_scores(cfg.out, cards, inventory)
    report = {
        "metadata": _metadata(cfg, "score"),
        "config": cfg.raw,
        "ranking": [c.to_dict() for c in cards],
        "top_k": cfg.top_k,
        "files": sorted(inventory + ["report.json"]),
    }
    _write(cfg.out, "report.json", _dump(report), inventory)
    print(format_table(cards))
    return report


def cmd_metatest(cfg: RunConfig, candidate_id: str | None = None) -> dict:
    pool = build_pool(cfg)
    if candidate_id is None:
        candidate = score_stage(cfg, pool)[0].candidate_id
        candidate_id = candidate
    by_id = {c.id: c for c in pool}
    if candidate_id not in by_id:
        raise UsageError(f"unknown candidate id {candidate_id!r}")
    inventory: list = []
    for stale in ("feedback.txt", "tree.txt", "tree.json"):
        (cfg.out / stale).unlink(missing_ok=True)
    report, paths, feedback = metatest_stage(cfg, by_id[candidate_id], cfg.out, inventory)
    result = {
        "metadata": _metadata(cfg, "metatest"),
        "config": cfg.raw,
        "metamorphic": [_suite_summary(report, paths)],
        "verdict": report.verdict,
        "files": sorted(inventory + ["report.json"]),
    }
    _write(cfg.out, "report.json", _dump(result), inventory)
    print(f"{candidate_id}: {report.verdict}")
    for r in report.results:
        print(f"  {r.relation}: {r.failed} of {r.applicable} applicable pairs failed ({r.drawn} drawn)")
    for p in paths:
        print(f"  localized: {p.condition} (n={p.n_samples}, fail rate {p.fail_rate:.2f})")
    return result


def cmd_pipeline(cfg: RunConfig) -> dict:
    """generate -> score -> metatest(top-k) -> feedback, until a candidate passes or rounds run out."""
    client = _client(cfg)
    prompt = _base_prompt(cfg)
    rounds = []
    verdict = "unresolved"
    winner = None
    for round_no in range(1, cfg.max_rounds + 1):
        out = cfg.out / f"round_{round_no}"
        inventory: list = []
        _write(out, "prompt.txt", prompt, inventory)
        pool = build_pool(cfg, client, prompt, round_no)
        cards = score_stage(cfg, pool)
        write_scores(out, cards, inventory)
        by_id = {c.id: c for c in pool}
        tested, feedback = [], None
        for rank_pos, card in enumerate(cards[: max(1, cfg.top_k)]):
            sub = out if rank_pos == 0 else out / f"top_{rank_pos + 1}"
            report, paths, text = metatest_stage(cfg, by_id[card.candidate_id], sub, inventory, prompt)
            tested.append(_suite_summary(report, paths))
            if rank_pos == 0:
                feedback = text
            if report.verdict == "pass":
                verdict, winner = "pass", card.candidate_id
                break
        rounds.append({
            "round": round_no,
            "ranking": [c.to_dict() for c in cards],
            "metamorphic": tested,
            "verdict": "pass" if verdict == "pass" else "fail",
            "files": sorted(inventory),
        })
        print(f"round {round_no}")
        print(format_table(cards))
        print(f"  top candidate {cards[0].candidate_id}: {tested[0]['verdict']}")
        if verdict == "pass":
            break
        prompt = feedback
    result = {
        "metadata": _metadata(cfg, "pipeline"),
        "config": cfg.raw,
        "rounds": rounds,
        "n_rounds": len(rounds),
        "verdict": verdict,
        "winner": winner,
    }
    _write(cfg.out, "report.json", _dump(result), [])
    print(f"verdict: {verdict} after {len(rounds)} round(s)")
    return result


def cmd_report(cfg: RunConfig) -> dict:
    path = cfg.out / "report.json"
    if not path.is_file():
        raise UsageError(f"no report at {path}; run score, metatest or pipeline first")
    report = json.loads(path.read_text(encoding="utf-8"))
    ranking = report.get("ranking") or (report.get("rounds") or [{}])[-1].get("ranking", [])
    if ranking:
        print(format_table([ScoreCard.from_dict(c) for c in ranking]))
    for suite in report.get("metamorphic", []):
        print(f"{suite['candidate']}: {suite['verdict']}")
    if "verdict" in report:
        print(f"verdict: {report['verdict']}")
    return report


# ---------------------------------------------------------------------------
# Entry point


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taxrank", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"taxrank {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("score", "metatest", "pipeline", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run configuration (JSON)")
        p.add_argument("--seed", type=int, help="override both profile and metamorphic seeds")
        p.add_argument("--weights", help="similarity,majority weights, e.g. 0.6,0.4")
        p.add_argument("--delta-max", type=float, help="largest tolerance on the delta grid (fraction)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--trace", action="store_true", help="log generation request/response bodies")
        if name == "metatest":
            p.add_argument("--candidate", help="candidate id (default: top-ranked)")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.trace else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        weights = Weights.parse(args.weights) if args.weights else None
        cfg = load_config(args.config, args.seed, weights, args.delta_max, args.out, args.trace)
        if args.command == "score":
            cmd_score(cfg)
        elif args.command == "metatest":
            cmd_metatest(cfg, args.candidate)
        elif args.command == "pipeline":
            result = cmd_pipeline(cfg)
            return EXIT_OK if result["verdict"] == "pass" else EXIT_UNRESOLVED
        else:
            cmd_report(cfg)
    except (UsageError, ValidationError, OSError) as exc:
        print(f"taxrank: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TaxRankError as exc:
        print(f"taxrank: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
