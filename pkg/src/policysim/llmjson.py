"""Parsing model output that is supposed to be JSON, with repair retries."""

from __future__ import annotations

import json
import re
from dataclasses import replace
from typing import Any, Callable, TypeVar

from policysim.gateway import ChatRequest, Gateway, Message, Role

T = TypeVar("T")

_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def extract_json(text: str) -> Any:
    """Best-effort JSON extraction; returns None when nothing parses."""
    text = (text or "").strip()
    if not text:
        return None
    candidates = [text]
    candidates += [m.group(1).strip() for m in _FENCE_RE.finditer(text)]
    for open_, close in (("{", "}"), ("[", "]")):
        start, end = text.find(open_), text.rfind(close)
        if start != -1 and end > start:
            candidates.append(text[start:end + 1])
    for c in candidates:
        try:
            return json.loads(c)
        except json.JSONDecodeError:
            continue
    return None


def as_bool(value: Any) -> bool | None:
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        v = value.strip().lower()
        if v in {"true", "yes", "pass", "1"}:
            return True
        if v in {"false", "no", "fail", "0"}:
            return False
    return None


class OutputRejected(ValueError):
    """Raised by validators to ask for another attempt."""


def repair_request(request: ChatRequest, bad_output: str, reason: str) -> ChatRequest:
    """Append the rejected output and a correction note to the conversation."""
    msgs = list(request.messages)
    if msgs and msgs[-1].role is Role.ASSISTANT:
        msgs.append(Message(Role.USER, "(continue)"))
    msgs.append(Message(Role.ASSISTANT, bad_output.strip() or "(empty)"))
    msgs.append(Message(Role.USER, f"That output was rejected: {reason}\n"
                                   "Reply again with only the corrected JSON."))
    return replace(request, messages=tuple(msgs))


def ask_json(gw: Gateway, request: ChatRequest, validate: Callable[[Any], T],
             retries: int, on_fail: Callable[[str, str], Exception]) -> T:
    """Call ``gw`` until ``validate(parsed_json)`` succeeds.

    ``retries`` counts extra attempts after the first.  When all attempts are
    rejected, ``on_fail(last_reason, last_output)`` builds the raised error.
    """
    req = request
    reason, content = "", ""
    for _ in range(retries + 1):
        content = gw.complete(req).content
        parsed = extract_json(content)
        try:
            if parsed is None:
                raise OutputRejected("output is not valid JSON")
            return validate(parsed)
        except OutputRejected as exc:
            reason = str(exc)
        req = repair_request(request, content, reason)
    raise on_fail(reason, content)
