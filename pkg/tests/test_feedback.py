import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from taxrank.candidates import AllowMfsEitc, DropBlindDeduction, make_mutant
from taxrank.exceptions import ContractError, InsufficientFixturesError, RenderError, TransportError, ValidationError
from taxrank.feedback import (
    WITH_PRIOR_CODE,
    WITHOUT_PRIOR_CODE,
    FixtureClient,
    HttpChatClient,
    PromptTemplate,
    extract_code,
    generate_candidates,
    generate_feedback_prompt,
    parse_digest,
    render_policy_block,
    render_prompt,
)
from taxrank.localizer import explain_paths, fit_cart
from taxrank.metamorphic import builtin_relations, run_metamorphic_suite
from taxrank.policy import FilingStatus, Scenario
from taxrank.profiles import ProfileDistribution

FULL = Scenario.BRACKETS_DEDUCTIONS_EITC
LOW_INCOME = ProfileDistribution(income_range=(1000, 15000), investment_range=(0, 0))


def test_brackets_prompt_lists_all_single_bounds(policy2021):
    text = render_prompt(PromptTemplate.builtin(WITHOUT_PRIOR_CODE), Scenario.BRACKETS, policy2021)
    for upper, _ in policy2021.brackets[FilingStatus.SINGLE][:-1]:
        assert f"${upper:,.0f}" in text
    assert "Reference" not in text and "```" not in text
    assert "earned income" not in text and "standard deduction" not in text


def test_full_scenario_prompt_mentions_everything(policy2021):
    text = render_prompt(PromptTemplate.builtin(WITHOUT_PRIOR_CODE), FULL, policy2021)
    assert "$12,550" in text and "earned income tax credit" in text
    assert "Not available to: Married Filing Separately." in text


def test_with_prior_code_embeds_code_once(policy2021):
    text = render_prompt(PromptTemplate.builtin(WITH_PRIOR_CODE), Scenario.BRACKETS, policy2021,
                         WITH_PRIOR_CODE, prior_code="X")
    assert text.count("X") == 1
    with pytest.raises(ContractError):
        render_prompt(PromptTemplate.builtin(WITH_PRIOR_CODE), Scenario.BRACKETS, policy2021, WITH_PRIOR_CODE)


def test_prior_code_is_not_rescanned(policy2021):
    text = render_prompt(PromptTemplate.builtin(WITH_PRIOR_CODE), Scenario.BRACKETS, policy2021,
                         WITH_PRIOR_CODE, prior_code="s = '{{year}}'")
    assert "s = '{{year}}'" in text


def test_template_errors():
    with pytest.raises(ValidationError):
        PromptTemplate.parse("t", "[objective]\nhi\n")
    sections = {k: "x" for k in ("objective", "data_structures", "user_inputs", "requirements", "policy_block")}
    with pytest.raises(ValidationError):
        PromptTemplate("t", {**sections, "epilogue": "x"})
    tmpl = PromptTemplate("t", {**sections, "objective": "year {{ year }} and {{missing}}"})
    with pytest.raises(RenderError):
        tmpl.render({"year": 2021})
    with pytest.raises(ValidationError):
        PromptTemplate.builtin("sideways")


def test_policy_block_formats(policy2020):
    block = render_policy_block(policy2020, Scenario.BRACKETS)
    assert "10% up to $9,875" in block and "37% above $518,400" in block


@pytest.fixture(scope="module")
def mfs_report(policy2021):
    mutant = make_mutant(policy2021, FULL, [AllowMfsEitc()])
    report = run_metamorphic_suite(mutant, builtin_relations(), LOW_INCOME, 5, 500, policy2021)
    return mutant, report


def test_feedback_contains_localized_condition(mfs_report):
    mutant, report = mfs_report
    paths = explain_paths(fit_cart(report.result("R4-mfs-exclusion").labeled))
    fb = generate_feedback_prompt("BASE PROMPT", report, paths, mutant)
    text = fb.render()
    assert "status ∈ {MarriedSeparate}" in text
    assert text.startswith("BASE PROMPT")
    assert "Previous candidate (mutant)" in text and "Repair instruction:" in text


def test_feedback_digest_roundtrip(mfs_report):
    _, report = mfs_report
    text = generate_feedback_prompt("p", report).render()
    parsed = parse_digest(text)
    assert parsed == [(r.relation, r.failed, r.drawn) for r in report.results if r.failed]


def test_feedback_shows_expected_and_observed(policy2021):
    mutant = make_mutant(policy2021, FULL, [AllowMfsEitc()])
    report = run_metamorphic_suite(mutant, builtin_relations(), LOW_INCOME, 5, 500, policy2021)
    v = report.result("R4-mfs-exclusion").violations[0]
    text = generate_feedback_prompt("p", report).render()
    assert "expected eitc(x) = 0" in text
    assert f"eitc(x) = {v.observed_x:.2f}" in text


def test_feedback_two_failing_relations(policy2021):
    mutant = make_mutant(policy2021, FULL, [AllowMfsEitc(), DropBlindDeduction()])
    report = run_metamorphic_suite(mutant, builtin_relations(), LOW_INCOME, 5, 500, policy2021)
    names = [name for name, _, _ in parse_digest(generate_feedback_prompt("p", report).render())]
    assert names == ["R1-blindness", "R4-mfs-exclusion"]


def test_feedback_requires_violations(policy2021):
    clean = make_mutant(policy2021, FULL)
    report = run_metamorphic_suite(clean, builtin_relations(), LOW_INCOME, 5, 100, policy2021)
    with pytest.raises(ContractError):
        generate_feedback_prompt("p", report)


def _fixture_dir(tmp_path, n, sub=None):
    d = tmp_path / sub if sub else tmp_path
    d.mkdir(parents=True, exist_ok=True)
    for i in range(1, n + 1):
        (d / f"candidate_{i}.py").write_text(f"# source {sub or ''} {i}\n")
    return tmp_path


def test_fixture_client_order(tmp_path):
    client = FixtureClient(_fixture_dir(tmp_path, 10))
    pool = generate_candidates(client, "prompt", 10)
    assert [c.id for c in pool] == [f"Version {i}" for i in range(1, 11)]
    assert pool[9].source_text == "# source  10\n"  # numeric, not lexical, order
    assert not pool[0].executable


def test_fixture_client_insufficient(tmp_path):
    with pytest.raises(InsufficientFixturesError, match="insufficient fixtures"):
        generate_candidates(FixtureClient(_fixture_dir(tmp_path, 4)), "prompt", 10)


def test_fixture_client_rounds(tmp_path):
    _fixture_dir(tmp_path, 2, "round_1")
    _fixture_dir(tmp_path, 2, "round_2")
    client = FixtureClient(tmp_path)
    assert "round_1" in client.generate("a", 1)[0]
    assert "round_2" in client.generate("b", 1)[0]
    assert "round_2" in client.generate("c", 1)[0]  # last round is reused
    assert client.prompts == ["a", "b", "c"]


def test_extract_code():
    assert extract_code("Here:\n```python\nprint(1)\n```\nDone") == "print(1)\n"
    assert extract_code("print(2)") == "print(2)"


class _ChatHandler(BaseHTTPRequestHandler):
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((self.headers.get("Authorization"), body))
        if self.path == "/deny":
            self.send_response(401)
            self.end_headers()
            return
        choices = [{"message": {"content": f"```python\nprint({i})\n```"}} for i in range(body["n"])]
        data = json.dumps({"choices": choices}).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def chat_server():
    _ChatHandler.seen = []
    server = HTTPServer(("127.0.0.1", 0), _ChatHandler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


def test_http_chat_client(chat_server, monkeypatch):
    monkeypatch.setenv("TAXRANK_API_KEY", "sekrit")
    client = HttpChatClient(chat_server + "/v1/chat/completions", "some-model")
    pool = generate_candidates(client, "write code", 3, temperature=0.5)
    assert [c.source_text for c in pool] == ["print(0)\n", "print(1)\n", "print(2)\n"]
    auth, body = _ChatHandler.seen[0]
    assert auth == "Bearer sekrit"
    assert body["temperature"] == 0.5 and body["messages"][0]["content"] == "write code"


def test_http_chat_client_auth_failure(chat_server):
    with pytest.raises(TransportError, match="authentication"):
        HttpChatClient(chat_server + "/deny", "m", token="t", backoff_s=0).generate("p", 1)


def test_http_chat_client_unreachable():
    client = HttpChatClient("http://127.0.0.1:9/", "m", token="t", retries=2, timeout_s=1, backoff_s=0)
    with pytest.raises(TransportError) as info:
        client.generate("p", 1)
    assert info.value.retries == 2


def test_trace_redacts_token(chat_server, caplog):
    client = HttpChatClient(chat_server + "/", "m", token="sekrit", trace=True)
    with caplog.at_level("INFO", logger="taxrank"):
        client.generate("say sekrit", 1)
    assert caplog.text and "sekrit" not in caplog.text
