"""Prompt rendering, feedback prompts, and generation clients."""

from __future__ import annotations

import json
import logging
import os
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Protocol, Sequence

from .candidates import Candidate
from .exceptions import ContractError, InsufficientFixturesError, RenderError, TransportError, ValidationError
from .policy import INF, FilingStatus, Scenario, TaxPolicy

log = logging.getLogger(__name__)

SECTIONS = ("objective", "data_structures", "user_inputs", "requirements", "policy_block", "reference_code_block")
_HEADINGS = {
    "objective": "Objective:",
    "data_structures": "Data Structures:",
    "user_inputs": "User Inputs:",
    "requirements": "Requirements:",
    "policy_block": None,
    "reference_code_block": "Reference Code:",
}
_PLACEHOLDER = re.compile(r"\{\{\s*([a-z_]+)\s*\}\}")

WITH_PRIOR_CODE = "with_prior_code"
WITHOUT_PRIOR_CODE = "without_prior_code"
MODES = (WITH_PRIOR_CODE, WITHOUT_PRIOR_CODE)

API_KEY_ENV = "TAXRANK_API_KEY"


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    sections: dict

    def __post_init__(self):
        unknown = set(self.sections) - set(SECTIONS)
        if unknown:
            raise ValidationError(f"template {self.name}: unknown sections {sorted(unknown)}")
        for required in SECTIONS[:5]:
            if required not in self.sections:
                raise ValidationError(f"template {self.name}: missing section {required}")

    @classmethod
    def parse(cls, name: str, text: str) -> "PromptTemplate":
        sections, current, buf = {}, None, []
        for line in text.splitlines():
            m = re.fullmatch(r"\[([a-z_]+)\]\s*", line)
            if m:
                if current:
                    sections[current] = "\n".join(buf).strip("\n")
                current, buf = m.group(1), []
            elif current:
                buf.append(line)
        if current:
            sections[current] = "\n".join(buf).strip("\n")
        return cls(name, sections)

    @classmethod
    def builtin(cls, mode: str) -> "PromptTemplate":
        if mode not in MODES:
            raise ValidationError(f"unknown prompt mode {mode!r}")
        text = (resources.files("taxrank") / "data" / "templates" / f"{mode}.tmpl").read_text(encoding="utf-8")
        return cls.parse(mode, text)

    @classmethod
    def from_file(cls, path) -> "PromptTemplate":
        path = Path(path)
        return cls.parse(path.stem, path.read_text(encoding="utf-8"))

    @property
    def has_reference_block(self) -> bool:
        return "reference_code_block" in self.sections

    def render(self, values: dict, include_reference: bool = True) -> str:
        """Substitute ``{{key}}`` placeholders section by section, in fixed order."""
        out = []
        for name in SECTIONS:
            body = self.sections.get(name)
            if body is None or (name == "reference_code_block" and not include_reference):
                continue
            missing = sorted({m for m in _PLACEHOLDER.findall(body) if m not in values})
            if missing:
                raise RenderError(f"template {self.name}: no value for {', '.join(missing)}")
            # Single pass, so substituted text is never re-scanned for placeholders.
            filled = _PLACEHOLDER.sub(lambda m: str(values[m.group(1)]), body).strip("\n")
            heading = _HEADINGS[name]
            out.append(f"{heading}\n{filled}" if heading else filled)
        return "\n\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Policy rendering


def _usd(x: float) -> str:
    return f"${x:,.0f}" if float(x).is_integer() else f"${x:,.2f}"


def _pct(r: float) -> str:
    return f"{r * 100:g}%"


_STATUS_WORDS = {
    FilingStatus.SINGLE: "Single",
    FilingStatus.MARRIED_JOINT: "Married Filing Jointly",
    FilingStatus.MARRIED_SEPARATE: "Married Filing Separately",
    FilingStatus.HEAD_OF_HOUSEHOLD: "Head of Household",
}

STATUS_CODES_TEXT = ", ".join(f"{int(s)}={_STATUS_WORDS[s]}" for s in FilingStatus)


def render_policy_block(policy: TaxPolicy, scenario) -> str:
    scenario = Scenario.parse(scenario)
    lines = [f"{policy.year} tax brackets (marginal rate up to each upper bound):"]
    for s in FilingStatus:
        parts, lower = [], 0.0
        for upper, rate in policy.brackets[s]:
            parts.append(f"{_pct(rate)} above {_usd(lower)}" if upper == INF else f"{_pct(rate)} up to {_usd(upper)}")
            lower = upper
        lines.append(f"- {_STATUS_WORDS[s]}: " + "; ".join(parts))
    if scenario.has_deductions:
        lines.append("")
        lines.append(f"{policy.year} standard deduction:")
        for s in FilingStatus:
            t = policy.deductions[s]
            lines.append(
                f"- {_STATUS_WORDS[s]}: {_usd(t[(False, False)])}; age 65 or older {_usd(t[(True, False)])}; "
                f"blind {_usd(t[(False, True)])}; 65 or older and blind {_usd(t[(True, True)])}"
            )
    if scenario.has_eitc:
        e = policy.eitc
        lines.append("")
        lines.append(f"{policy.year} earned income tax credit:")
        lines.append(f"- Investment income above {_usd(e.investment_income_limit)} disqualifies the filer.")
        if e.ineligible_statuses:
            names = ", ".join(_STATUS_WORDS[s] for s in sorted(e.ineligible_statuses))
            lines.append(f"- Not available to: {names}.")
        for n, tier in sorted(e.tiers.items()):
            joint = FilingStatus.MARRIED_JOINT
            lines.append(
                f"- {n}{'+' if n == 3 else ''} qualifying {'child' if n == 1 else 'children'}: credit {_pct(tier.phase_in_rate)} of earned income "
                f"up to {_usd(tier.max_credit)}; reduced by {_pct(tier.phaseout_rate)} of income above "
                f"{_usd(tier.phaseout_start[FilingStatus.SINGLE])} ({_usd(tier.phaseout_start[joint])} married filing "
                f"jointly); no credit above {_usd(tier.agi_limit[FilingStatus.SINGLE])} "
                f"({_usd(tier.agi_limit[joint])} married filing jointly)"
            )
    return "\n".join(lines)


_SCOPE = {
    Scenario.BRACKETS: "the tax brackets",
    Scenario.BRACKETS_DEDUCTIONS: "the tax brackets and the standard deduction",
    Scenario.BRACKETS_DEDUCTIONS_EITC: "the tax brackets, the standard deduction and the earned income tax credit",
}


def _scenario_values(scenario: Scenario) -> dict:
    ds, inputs, phrase, listed = "", "", "", ""
    if scenario.has_deductions:
        ds += "- Keep the standard deduction in a dictionary keyed by status and (age 65 or older, blind).\n"
        inputs += "- `age`: integer age in years.\n- `blind`: yes/no.\n"
        phrase = ", age and blindness"
        listed = ", age, blindness"
    if scenario.has_eitc:
        ds += "- Keep the earned income credit parameters in a dictionary keyed by number of qualifying children.\n"
        inputs += "- `children`: number of qualifying children (0-3).\n- `investment_income`: float, USD.\n"
        phrase = ", age, blindness, qualifying children and investment income"
        listed = ", age, blindness, qualifying children, investment income"
    return {
        "scenario_scope": _SCOPE[scenario],
        "data_structure_lines": ds,
        "extra_input_lines": inputs,
        "extra_inputs_phrase": phrase,
        "extra_inputs_list": listed,
    }


def render_prompt(template: PromptTemplate, scenario, policy: TaxPolicy, mode: str = WITHOUT_PRIOR_CODE,
                  prior_code: str | None = None, prior_year: int | None = None) -> str:
    """Fill ``template`` for one scenario and policy.

    ``with_prior_code`` embeds ``prior_code`` in the reference block;
    ``without_prior_code`` leaves the block out.
    """
    scenario = Scenario.parse(scenario)
    if mode not in MODES:
        raise ValidationError(f"unknown prompt mode {mode!r}")
    if mode == WITH_PRIOR_CODE and not prior_code:
        raise ContractError("with_prior_code mode requires prior code")
    values = {
        "year": policy.year,
        "prior_year": prior_year if prior_year is not None else policy.year - 1,
        "status_codes": STATUS_CODES_TEXT,
        "policy_block": render_policy_block(policy, scenario),
        **_scenario_values(scenario),
    }
    if mode == WITH_PRIOR_CODE:
        values["prior_code"] = prior_code.rstrip("\n")
    return template.render(values, include_reference=mode == WITH_PRIOR_CODE)


# ---------------------------------------------------------------------------
# Feedback prompts

REPAIR_INSTRUCTION = (
    "Return a corrected, complete version of the program. Fix the behaviour on the failing inputs "
    "listed above while keeping every currently passing behaviour unchanged, and keep the "
    "one-request-per-line JSON input/output format."
)

_DIGEST_LINE = re.compile(r"^- relation: (?P<name>\S+) \| failed: (?P<failed>\d+) of (?P<drawn>\d+)", re.M)


def _profile_text(d: dict) -> str:
    return (f"income={d['income']:.2f}, status={FilingStatus(d['status']).label}, age65={d['age65']}, "
            f"blind={d['blind']}, children={d['children']}, investment_income={d['investment_income']:.2f}")


def _money(x: float) -> str:
    return f"{x + 0.0:.2f}"  # no "-0.00"


def _observed_text(v: dict) -> str:
    q = v["quantity"]
    if v["kind"] != "comparator":
        return f"execution failure ({v['message']})"
    if v["expected"].endswith("= 0"):
        return f"{q}(x) = {_money(v['observed_x'])}"
    return f"{q}(x) = {_money(v['observed_x'])}, {q}(y) = {_money(v['observed_y'])}"


@dataclass
class FeedbackPrompt:
    base_prompt: str
    digest: str
    conditions: list
    candidate_id: str = ""
    candidate_source: str = ""
    instruction: str = REPAIR_INSTRUCTION

    def render(self) -> str:
        parts = [self.base_prompt.rstrip("\n")]
        if self.candidate_source:
            parts.append(f"Previous candidate ({self.candidate_id}):\n```python\n{self.candidate_source.rstrip()}\n```")
        parts.append(self.digest)
        if self.conditions:
            parts.append("Localized failure conditions:\n" + "\n".join(f"- {c}" for c in self.conditions))
        parts.append(f"Repair instruction:\n{self.instruction}")
        return "\n\n".join(parts) + "\n"

    __str__ = render


def parse_digest(text: str) -> list[tuple[str, int, int]]:
    """(relation, failed, drawn) for every relation entry in a feedback prompt."""
    return [(m["name"], int(m["failed"]), int(m["drawn"])) for m in _DIGEST_LINE.finditer(text)]


def generate_feedback_prompt(prior_prompt: str, report, paths: Sequence = (), candidate: Candidate | None = None,
                             max_examples: int = 3) -> FeedbackPrompt:
    """Digest a failing suite report and its localized conditions into a repair prompt.

    ``report`` is a SuiteReport or its dict form; ``paths`` holds FailurePath
    objects or plain condition strings.
    """
    data = report.to_dict(include_labeled=False) if hasattr(report, "to_dict") else report
    failing = [r for r in data["relations"] if r["failed"] > 0]
    if not failing:
        raise ContractError("suite report has no violations; nothing to feed back")
    lines = ["Metamorphic test failures:"]
    for r in failing:
        expected = r["violations"][0]["expected"]
        lines.append(f"- relation: {r['relation']} | failed: {r['failed']} of {r['drawn']} | expected: {expected}")
        for k, v in enumerate(r["violations"][:max_examples], start=1):
            lines.append(f"  example {k}: x = ({_profile_text(v['x'])})")
            if v["y"] != v["x"]:
                lines.append(f"             y = ({_profile_text(v['y'])})")
            lines.append(f"             expected {v['expected']}; observed {_observed_text(v)}")
    conditions = [p if isinstance(p, str) else p.condition for p in paths]
    return FeedbackPrompt(
        base_prompt=prior_prompt,
        digest="\n".join(lines),
        conditions=conditions,
        candidate_id=candidate.id if candidate else "",
        candidate_source=candidate.source_text if candidate else "",
    )


# ---------------------------------------------------------------------------
# Generation clients


class GenerationClient(Protocol):
    def generate(self, prompt: str, n: int, temperature: float = 1.0, model: str | None = None) -> list[str]:
        ...


def _numeric_key(path: Path):
    nums = re.findall(r"\d+", path.stem)
    return (int(nums[-1]) if nums else float("inf"), path.name)


class FixtureClient:
    """Serves candidate sources from numbered files in a directory.

    If the directory holds ``round_1/``, ``round_2/``, ... subdirectories, the
    k-th call reads ``round_k`` (the last round is reused once they run out).
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise ValidationError(f"fixture directory {self.directory} does not exist")
        self.calls = 0
        self.prompts: list[str] = []

    def _round_dir(self) -> Path:
        rounds = sorted((p for p in self.directory.iterdir() if p.is_dir() and re.fullmatch(r"round_\d+", p.name)),
                        key=lambda p: int(p.name.split("_")[1]))
        if not rounds:
            return self.directory
        return rounds[min(self.calls + 1, len(rounds)) - 1]

    def files(self) -> list[Path]:
        """Files the next ``generate`` call will read."""
        d = self._round_dir()
        return sorted((p for p in d.iterdir() if p.is_file() and not p.name.startswith(".")), key=_numeric_key)

    def generate(self, prompt: str, n: int, temperature: float = 1.0, model: str | None = None) -> list[str]:
        files = self.files()
        self.calls += 1
        self.prompts.append(prompt)
        if len(files) < n:
            raise InsufficientFixturesError(f"insufficient fixtures: {len(files)} files for n={n}")
        return [p.read_text(encoding="utf-8") for p in files[:n]]


_FENCE = re.compile(r"```(?:[a-zA-Z0-9_+-]*)\n(.*?)```", re.S)


def extract_code(text: str) -> str:
    """First fenced code block of a chat reply, or the whole reply."""
    m = _FENCE.search(text)
    return m.group(1) if m else text


class HttpChatClient:
    """Single-turn chat-completion client (OpenAI-compatible request shape)."""

    def __init__(self, endpoint: str, model: str, token: str | None = None, retries: int = 2,
                 timeout_s: float = 120.0, backoff_s: float = 1.0, trace: bool = False):
        self.endpoint = endpoint
        self.model = model
        self.token = token if token is not None else os.environ.get(API_KEY_ENV)
        self.retries = retries
        self.timeout_s = timeout_s
        self.backoff_s = backoff_s
        self.trace = trace

    def _redact(self, text: str) -> str:
        return text.replace(self.token, "***") if self.token else text

    def _post(self, body: dict) -> dict:
        data = json.dumps(body).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        if self.trace:
            log.info("request to %s: %s", self.endpoint, self._redact(json.dumps(body)))
        last = None
        for attempt in range(self.retries + 1):
            req = urllib.request.Request(self.endpoint, data=data, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                    raw = resp.read().decode("utf-8")
                if self.trace:
                    log.info("response: %s", self._redact(raw))
                return json.loads(raw)
            except urllib.error.HTTPError as exc:
                if exc.code in (401, 403):
                    raise TransportError(f"authentication failed ({exc.code})", retries=attempt) from exc
                last = exc
            except (urllib.error.URLError, OSError, ValueError) as exc:
                last = exc
            if attempt < self.retries:
                time.sleep(self.backoff_s * (2 ** attempt))
        raise TransportError(f"{self.endpoint} unreachable after {self.retries} retries: {last}", retries=self.retries)

    def generate(self, prompt: str, n: int, temperature: float = 1.0, model: str | None = None) -> list[str]:
        body = {
            "model": model or self.model,
            "messages": [{"role": "user", "content": prompt}],
            "n": n,
            "temperature": temperature,
        }
        payload = self._post(body)
        try:
            texts = [extract_code(c["message"]["content"]) for c in payload["choices"]]
        except (KeyError, TypeError) as exc:
            raise TransportError(f"malformed chat response: {exc}") from exc
        if len(texts) < n:
            raise TransportError(f"expected {n} completions, got {len(texts)}")
        return texts[:n]


BuildHook = Callable[[str, str], Candidate]


def generate_candidates(client: GenerationClient, prompt: str, n: int = 10, build: BuildHook | None = None,
                        temperature: float = 1.0, model: str | None = None) -> list[Candidate]:
    """Ask ``client`` for ``n`` sources and wrap them as "Version 1".."Version n".

    Without a ``build`` hook the candidates are source-only.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    texts = client.generate(prompt, n, temperature, model)
    if len(texts) != n:
        raise InsufficientFixturesError(f"client returned {len(texts)} sources for n={n}")
    out = []
    for i, text in enumerate(texts, start=1):
        cid = f"Version {i}"
        out.append(build(cid, text) if build else Candidate(cid, text))
    return out
