"""Prompting helpers for the simulated agent and the simulated customer."""

from __future__ import annotations

from typing import Any, Mapping, Sequence

from policysim.gateway import GENERATION_TEMPERATURE, ChatRequest, Gateway
from policysim.model import Guideline, Turn


def render_history(turns: Sequence[Turn], trailing_agent: str | None = None) -> str:
    lines = []
    for t in turns:
        lines.append(f"Agent: {t.assistant}")
        if t.user:
            lines.append(f"Customer: {t.user}")
    if trailing_agent is not None:
        lines.append(f"Agent: {trailing_agent}")
    return "\n".join(lines) or "(conversation start)"


def agent_reply(gw: Gateway, domain: str, universal: Sequence[Guideline], guideline_text: str,
                history: Sequence[Turn], *, tag: str = "synth.assistant",
                context: Mapping[str, Any] | None = None, feedback: str = "", seed: int | None = None) -> str:
    """The agent's next message, following ``guideline_text`` and the universal rules."""
    rules = "\n".join(f"- {g.content}" for g in universal) or "- (none)"
    system = (f"You are a {domain} contact-center agent. Always follow these rules:\n{rules}\n\n"
              f"For your next message, follow this guideline exactly:\n{guideline_text}")
    prompt = f"Conversation so far:\n{render_history(history)}\n\n"
    if feedback:
        prompt += f"Reviewers rejected your previous attempt at this message:\n{feedback}\n\n"
    prompt += "Write the agent's next message only."
    req = ChatRequest.single(system, prompt, temperature=GENERATION_TEMPERATURE, tag=tag, seed=seed,
                             context=dict(context or {}, guideline=guideline_text,
                                          turn_index=len(history) + 1, feedback=feedback))
    return gw.complete(req).content.strip()
