"""Run external candidate executables over the newline-delimited JSON protocol.

Request (one line)::

    {"income": 50000.0, "status": 1, "age65": false, "blind": false,
     "children": 0, "investment_income": 0.0, "scenario": "brackets_deductions"}

Response (one line)::

    {"net": 4338.50}

A response may additionally carry ``tax_liability`` and ``eitc`` components;
any other key, a non-finite ``net`` or a non-JSON line is a protocol error.
"""

from __future__ import annotations

import json
import logging
import math
import os
import subprocess
from dataclasses import dataclass
from typing import Sequence

from ..exceptions import ValidationError
from ..policy import Scenario, TaxResult
from .outcomes import Crash, EvalOutcome, Ok, ProtocolError, Timeout

log = logging.getLogger(__name__)

RESPONSE_KEYS = {"net", "tax_liability", "eitc"}


def encode_request(profile, scenario) -> str:
    payload = profile.to_dict()
    payload["scenario"] = Scenario.parse(scenario).value
    return json.dumps(payload, separators=(",", ":"))


def _finite_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def decode_response(line: str) -> EvalOutcome:
    text = line.strip()
    try:
        data = json.loads(text)
    except (json.JSONDecodeError, ValueError):
        return ProtocolError(f"not a JSON object: {text[:80]!r}")
    if not isinstance(data, dict):
        return ProtocolError(f"not a JSON object: {text[:80]!r}")
    unknown = set(data) - RESPONSE_KEYS
    if unknown:
        return ProtocolError(f"unexpected keys {sorted(unknown)}")
    if "net" not in data:
        return ProtocolError("response lacks 'net'")
    if not all(_finite_number(v) for v in data.values()):
        return ProtocolError(f"non-finite or non-numeric value in {text[:80]!r}")
    result = None
    if "tax_liability" in data and "eitc" in data and data["tax_liability"] >= 0 and data["eitc"] >= 0:
        result = TaxResult(float(data["tax_liability"]), float(data["eitc"]))
    return Ok(float(data["net"]), result)


@dataclass(frozen=True)
class ExternalBackend:
    """An executable spoken to over stdin/stdout."""

    path: str
    args: tuple = ()
    timeout_ms: int = 5000

    def __post_init__(self):
        if int(self.timeout_ms) < 1:
            raise ValidationError("timeout_ms must be >= 1")
        object.__setattr__(self, "args", tuple(str(a) for a in self.args))

    @property
    def argv(self) -> list[str]:
        return [self.path, *self.args]


def _spawn(backend: ExternalBackend, payload: str, timeout_s: float):
    """Run once; returns (outcome_or_None, stdout)."""
    try:
        proc = subprocess.Popen(
            backend.argv,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            encoding="utf-8",
            start_new_session=True,
        )
    except OSError as exc:
        return Crash(f"cannot execute {backend.path}: {exc.strerror or exc}"), ""
    try:
        stdout, stderr = proc.communicate(payload, timeout=timeout_s)
    except subprocess.TimeoutExpired:
        _kill(proc)
        return Timeout(), ""
    if proc.returncode != 0:
        tail = (stderr or "").strip().splitlines()[-1:] if stderr else []
        log.debug("%s exited %s: %s", backend.path, proc.returncode, tail)
        return Crash(f"exit {proc.returncode}"), stdout
    return None, stdout


def _kill(proc):
    try:
        os.killpg(proc.pid, 9)
    except (ProcessLookupError, PermissionError, OSError):
        proc.kill()
    proc.communicate()


def run_external(backend: ExternalBackend, profile, scenario) -> EvalOutcome:
    """Spawn the executable for a single request."""
    failure, stdout = _spawn(backend, encode_request(profile, scenario) + "\n", backend.timeout_ms / 1000)
    if failure is not None:
        return failure
    lines = [ln for ln in stdout.splitlines() if ln.strip()]
    if len(lines) != 1:
        return ProtocolError(f"expected 1 response line, got {len(lines)}")
    return decode_response(lines[0])


def run_external_batch(backend: ExternalBackend, profiles: Sequence, scenario) -> list[EvalOutcome]:
    """Send all requests to one process; fall back to one process per request on a crash.

    The batch timeout is ``timeout_ms`` per request.
    """
    if not profiles:
        return []
    payload = "".join(encode_request(p, scenario) + "\n" for p in profiles)
    failure, stdout = _spawn(backend, payload, backend.timeout_ms * len(profiles) / 1000)
    if isinstance(failure, Timeout):
        return [Timeout() for _ in profiles]
    if isinstance(failure, Crash):
        if failure.message.startswith("cannot execute") or len(profiles) == 1:
            return [failure for _ in profiles]
        return [run_external(backend, p, scenario) for p in profiles]
    lines = [ln for ln in stdout.splitlines() if ln.strip()]
    out = [decode_response(ln) for ln in lines[: len(profiles)]]
    out += [ProtocolError("missing response line") for _ in range(len(profiles) - len(out))]
    if len(lines) > len(profiles):
        log.warning("%s wrote %d extra lines", backend.path, len(lines) - len(profiles))
    return out
