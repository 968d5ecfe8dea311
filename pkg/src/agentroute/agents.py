"""Agent runtime: prompt assembly, deterministic mock agents with
controllable output entropy, an OpenAI-style chat client that derives
entropy from logprobs, tools, and the summarizer.

Mock agents are the ground-truth supervision path: they synthesize token
distributions whose entropy hits a per-task target exactly, so tests can
assert routing behavior against known confidence orderings. The chat path
estimates entropy from renormalized top-j logprobs, which under-estimates
the true value; that bias is accepted and documented here.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np
import requests

from .core import AgentResponse, AgentSpec, ConfigError, Prompt

# Task tags ride inside the query text, e.g. "[tag:algebra] solve ...".
TAG_PATTERN = r"\[tag:([^\]]+)\]"

FINAL_MARKER = "[FINAL]"
CONTINUE_MARKER = "[CONTINUE]"

SYNTHESIS_INSTRUCTION = (
    "Review the intermediate responses below, keep what is reliable, and "
    "continue the reasoning toward a single well-supported resolution."
)
RESPONSES_HEADER = "Responses from agents:"

DEFAULT_RESPONSE_TEMPLATE = "agent {agent_id} step {step} [{tag}] finding: {nonce}"


class TransportError(RuntimeError):
    """A remote agent call failed at the transport level."""


class ToolError(ValueError):
    """A tool rejected its input."""


# --- tools ---

TOOL_UNAVAILABLE_NOTICE = "tool unavailable in this environment"


class _Parser:
    # Recursive descent over: expr := term (('+'|'-') term)*
    #                          term := factor (('*'|'/') factor)*
    #                          factor := number | '(' expr ')' | '-' factor
    _NUMBER = re.compile(r"\d+\.?\d*|\.\d+")

    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def _skip_spaces(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def _peek(self):
        self._skip_spaces()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def parse(self) -> float:
        value = self._expr()
        if self._peek():
            raise ToolError(f"unexpected character {self._peek()!r} at position {self.pos}")
        return value

    def _expr(self) -> float:
        value = self._term()
        while self._peek() in {"+", "-"}:
            op = self.text[self.pos]
            self.pos += 1
            rhs = self._term()
            value = value + rhs if op == "+" else value - rhs
        return value

    def _term(self) -> float:
        value = self._factor()
        while self._peek() in {"*", "/"}:
            op = self.text[self.pos]
            self.pos += 1
            rhs = self._factor()
            if op == "*":
                value = value * rhs
            else:
                if rhs == 0.0:
                    raise ToolError("division by zero")
                value = value / rhs
        return value

    def _factor(self) -> float:
        ch = self._peek()
        if ch == "-":
            self.pos += 1
            return -self._factor()
        if ch == "(":
            self.pos += 1
            value = self._expr()
            if self._peek() != ")":
                raise ToolError(f"expected ')' at position {self.pos}")
            self.pos += 1
            return value
        match = self._NUMBER.match(self.text, self.pos)
        if not match:
            raise ToolError(f"expected a number at position {self.pos}")
        self.pos = match.end()
        return float(match.group())


def calculator_tool(expression: str) -> str:
    """Evaluate infix arithmetic over +, -, *, /, parentheses, and decimal
    literals; the unicode operators x-times, divide, and minus are accepted
    as aliases. Integral results render without a decimal point."""
    text = expression.replace("×", "*").replace("÷", "/").replace("−", "-")
    value = _Parser(text).parse()
    if not math.isfinite(value):
        raise ToolError("expression did not evaluate to a finite number")
    if value == int(value) and abs(value) < 1e16:
        return str(int(value))
    return repr(value)


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    run: object  # callable: input string -> output string


def _stub_tool(_: str) -> str:
    return TOOL_UNAVAILABLE_NOTICE


TOOLS = {
    "calculator": ToolSpec(
        "calculator",
        "evaluates standard mathematical expressions and returns the numeric result",
        calculator_tool),
    "python": ToolSpec(
        "python",
        "executes a script and returns its output (stubbed: no sandbox here)",
        _stub_tool),
    "search": ToolSpec(
        "search",
        "queries a web search engine (stubbed: offline)",
        _stub_tool),
    "knowledge": ToolSpec(
        "knowledge",
        "looks up reference material (stubbed: offline)",
        _stub_tool),
    "unit_tests": ToolSpec(
        "unit_tests",
        "runs unit tests against candidate code (stubbed: no sandbox here)",
        _stub_tool),
}


# --- prompt assembly ---

def assemble_prompt(agent: AgentSpec, user_query: str,
                    prev_responses=()) -> Prompt:
    """Build an agent prompt: profile plus tools plus the query verbatim in
    the system part, and the previous step's responses numbered in
    selection order in the context part (empty at step 1). Response texts
    are passed through verbatim, no escaping."""
    lines = [agent.profile_text]
    if agent.tool_names:
        lines.append("")
        lines.append("Available tools:")
        for name in agent.tool_names:
            if name not in TOOLS:
                raise ConfigError(f"unknown tool {name!r} for agent {agent.agent_id}")
            spec = TOOLS[name]
            lines.append(f"- [{spec.name}] {spec.description}")
    lines.append("")
    lines.append(user_query)
    system_part = "\n".join(lines)
    prev = list(prev_responses)
    if not prev:
        return Prompt(system_part=system_part, context_part="")
    ctx = [SYNTHESIS_INSTRUCTION, "", RESPONSES_HEADER]
    for index, resp in enumerate(prev, start=1):
        ctx.append(f"{index}. {resp.text}")
    return Prompt(system_part=system_part, context_part="\n".join(ctx))


# --- mock agents ---

@dataclass(frozen=True)
class MockProfile:
    """A deterministic stand-in agent.

    skill_map maps task tags to (target mean entropy, jitter). Each token's
    distribution is a point-mass/uniform mixture whose blend is solved so
    the token entropy hits the (possibly jittered) target; the map from
    blend to entropy is monotone on [0, ln vocab_size], so any target in
    that range is reachable by bisection.
    """

    agent_id: int
    skill_map: dict
    response_template: str = DEFAULT_RESPONSE_TEMPLATE
    vocab_size: int = 16
    tokens_per_response: int = 12

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.tokens_per_response < 1:
            raise ConfigError("tokens_per_response must be >= 1")
        limit = math.log(self.vocab_size)
        for tag, (target, jitter) in self.skill_map.items():
            if not 0.0 <= target <= limit + 1e-12:
                raise ConfigError(
                    f"target entropy for tag {tag!r} must lie in [0, ln vocab_size]")
            if jitter < 0.0:
                raise ConfigError(f"jitter for tag {tag!r} must be non-negative")


def _xlogx(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    nz = p > 0.0
    out[nz] = p[nz] * np.log(p[nz])
    return out


def _mixture_entropy(eps: np.ndarray, vocab_size: int) -> np.ndarray:
    # Entropy of (1 - eps) * point_mass + eps * uniform(vocab_size).
    eps = np.asarray(eps, dtype=np.float64)
    p_top = (1.0 - eps) + eps / vocab_size
    p_rest = eps / vocab_size
    return -(_xlogx(p_top) + (vocab_size - 1) * _xlogx(p_rest))


def solve_mixture_eps(targets, vocab_size: int, tol: float = 1e-9) -> np.ndarray:
    """Invert the mixture entropy curve by bisection; exact endpoints snap
    to 0 and 1."""
    t = np.atleast_1d(np.asarray(targets, dtype=np.float64))
    limit = math.log(vocab_size)
    if np.any((t < 0.0) | (t > limit + 1e-12)):
        raise ValueError("target entropy outside [0, ln vocab_size]")
    lo = np.zeros_like(t)
    hi = np.ones_like(t)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        above = _mixture_entropy(mid, vocab_size) > t
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
        if np.max(np.abs(_mixture_entropy(0.5 * (lo + hi), vocab_size) - t)) <= tol:
            break
    eps = 0.5 * (lo + hi)
    eps[t <= 0.0] = 0.0
    eps[t >= limit - 1e-15] = 1.0
    return eps


def mock_execute(profile: MockProfile, prompt: Prompt, task_tag: str,
                 seed: int, step_index: int = 1) -> AgentResponse:
    """Deterministic mock execution: same (profile, seed, tag) yields an
    identical response. The prompt shapes nothing here; supervision comes
    entirely from the skill map."""
    entry = profile.skill_map.get(task_tag, profile.skill_map.get("default"))
    if entry is None:
        raise KeyError(
            f"agent {profile.agent_id} has no skill entry for tag {task_tag!r}"
            " and no default")
    target, jitter = entry
    rng = np.random.default_rng(seed)
    count = profile.tokens_per_response
    vocab = profile.vocab_size
    if jitter > 0.0:
        targets = np.clip(target + jitter * rng.standard_normal(count),
                          0.0, math.log(vocab))
    else:
        targets = np.full(count, float(target))
    unique, inverse = np.unique(targets, return_inverse=True)
    eps = solve_mixture_eps(unique, vocab)[inverse]
    top_symbol = rng.integers(0, vocab, size=count)
    dists = np.repeat((eps / vocab)[:, None], vocab, axis=1)
    dists[np.arange(count), top_symbol] += 1.0 - eps
    entropies = -_xlogx(dists).sum(axis=1) + 0.0
    nonce = rng.bytes(4).hex()
    text = profile.response_template.format(
        agent_id=profile.agent_id, step=step_index, tag=task_tag, nonce=nonce)
    return AgentResponse(
        agent_id=profile.agent_id,
        step_index=step_index,
        text=text,
        token_entropies=tuple(float(e) for e in entropies),
        token_count=count,
        predictive_entropy=float(np.mean(entropies)),
    )


# --- remote chat agents ---

def _entropy_from_top_logprobs(top_logprobs) -> float:
    lps = np.asarray([entry["logprob"] for entry in top_logprobs], dtype=np.float64)
    # Renormalize the truncated distribution; this under-estimates the true
    # entropy because the tail mass is folded into the top-j entries.
    shifted = np.exp(lps - np.max(lps))
    p = shifted / shifted.sum()
    nz = p[p > 0.0]
    return float(-np.sum(nz * np.log(nz)) + 0.0)


def chat_execute(agent: AgentSpec, prompt: Prompt, endpoint: str, *,
                 api_key: str | None = None, timeout: float = 60.0,
                 top_logprobs: int = 5, temperature: float = 0.1,
                 step_index: int = 1, session=None) -> AgentResponse:
    """Call an OpenAI-compatible chat-completions endpoint with logprobs
    enabled and derive per-token entropy from the returned top-j lists.

    Responses without logprobs come back with predictive_entropy None;
    those cannot serve as training targets.
    """
    messages = [{"role": "system", "content": prompt.system_part},
                {"role": "user",
                 "content": prompt.context_part or "Provide your response to the query."}]
    payload = {"model": agent.model_ref, "messages": messages,
               "logprobs": True, "top_logprobs": top_logprobs,
               "temperature": temperature}
    headers = {}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    client = session if session is not None else requests
    try:
        resp = client.post(endpoint, json=payload, headers=headers, timeout=timeout)
    except requests.RequestException as exc:
        raise TransportError(f"chat request to {endpoint} failed: {exc}") from exc
    if resp.status_code != 200:
        raise TransportError(f"chat request to {endpoint} failed: HTTP {resp.status_code}")
    try:
        data = resp.json()
        choice = data["choices"][0]
        text = choice["message"]["content"]
    except (ValueError, KeyError, IndexError) as exc:
        raise TransportError(f"malformed chat response from {endpoint}: {exc}") from exc
    logprobs = choice.get("logprobs") or {}
    content = logprobs.get("content")
    if not content:
        token_count = int(data.get("usage", {}).get("completion_tokens") or 0)
        if token_count < 1:
            token_count = max(1, len(text.split()))
        return AgentResponse(agent_id=agent.agent_id, step_index=step_index,
                             text=text, token_entropies=(),
                             token_count=token_count, predictive_entropy=None)
    entropies = []
    for token in content:
        tops = token.get("top_logprobs") or [{"logprob": token["logprob"]}]
        entropies.append(_entropy_from_top_logprobs(tops))
    return AgentResponse(agent_id=agent.agent_id, step_index=step_index,
                         text=text, token_entropies=tuple(entropies),
                         token_count=len(entropies),
                         predictive_entropy=float(np.mean(entropies)))


# --- pool backends ---

class MockPoolBackend:
    """Executes the whole pool as deterministic mocks. The task tag is read
    from a [tag:...] marker carried by the query inside the system prompt;
    queries without a marker fall back to the 'default' skill entry."""

    def __init__(self, specs, profiles, tag_pattern: str = TAG_PATTERN):
        specs = list(specs)
        profiles = list(profiles)
        if len(specs) != len(profiles):
            raise ConfigError("one mock profile per agent spec required")
        for index, (spec, profile) in enumerate(zip(specs, profiles)):
            if spec.agent_id != index or profile.agent_id != index:
                raise ConfigError("agent ids must be dense integers 0..N-1 in order")
        self.specs = specs
        self.profiles = profiles
        self._tag_re = re.compile(tag_pattern)

    @property
    def size(self) -> int:
        return len(self.specs)

    def spec(self, agent_id: int) -> AgentSpec:
        return self.specs[agent_id]

    def execute(self, agent_id: int, prompt: Prompt, step_index: int,
                seed: int) -> AgentResponse:
        match = self._tag_re.search(prompt.system_part)
        tag = match.group(1) if match else "default"
        return mock_execute(self.profiles[agent_id], prompt, tag, seed,
                            step_index=step_index)


class ChatPoolBackend:
    """Executes pool agents against an OpenAI-compatible chat endpoint."""

    def __init__(self, specs, endpoint: str, *, api_key: str | None = None,
                 timeout: float = 60.0, top_logprobs: int = 5,
                 temperature: float = 0.1):
        self.specs = list(specs)
        for index, spec in enumerate(self.specs):
            if spec.agent_id != index:
                raise ConfigError("agent ids must be dense integers 0..N-1 in order")
        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout = timeout
        self.top_logprobs = top_logprobs
        self.temperature = temperature
        self._session = requests.Session()

    @property
    def size(self) -> int:
        return len(self.specs)

    def spec(self, agent_id: int) -> AgentSpec:
        return self.specs[agent_id]

    def execute(self, agent_id: int, prompt: Prompt, step_index: int,
                seed: int) -> AgentResponse:
        return chat_execute(self.specs[agent_id], prompt, self.endpoint,
                            api_key=self.api_key, timeout=self.timeout,
                            top_logprobs=self.top_logprobs,
                            temperature=self.temperature,
                            step_index=step_index, session=self._session)


# --- summarizer ---

@dataclass(frozen=True)
class Final:
    answer: str


CONTINUE = object()


def parse_summarizer_reply(reply: str):
    """Leading [FINAL] yields Final(rest); [CONTINUE] or anything malformed
    yields CONTINUE, deferring to the step-limit backstop."""
    body = reply.strip()
    if body.startswith(FINAL_MARKER):
        return Final(body[len(FINAL_MARKER):].strip())
    return CONTINUE


def _numbered(responses) -> str:
    return "\n".join(f"{i}. {r.text}" for i, r in enumerate(responses, start=1))


class MockSummarizer:
    """Scripted termination: Continue until final_at_step (0 = never), then
    Final with a templated answer."""

    def __init__(self, final_at_step: int = 0,
                 answer_template: str = "synthesis of {count} responses at step {step}: {query}"):
        self.final_at_step = final_at_step
        self.answer_template = answer_template

    def _answer(self, query, responses) -> str:
        return self.answer_template.format(
            query=query, count=len(responses), step=responses[-1].step_index)

    def decide(self, query, responses):
        if self.final_at_step and responses[-1].step_index >= self.final_at_step:
            return Final(self._answer(query, responses))
        return CONTINUE

    def finalize(self, query, responses) -> str:
        return self._answer(query, responses)


class ChatSummarizer:
    """Summarizer backed by a chat endpoint; replies are parsed for the
    [FINAL]/[CONTINUE] markers."""

    SYSTEM = ("You are the final summarizer for a team of agents. Read the "
              "query and the candidate responses. If the evidence already "
              f"supports a reliable answer, reply '{FINAL_MARKER} <answer>'. "
              f"If another round of reasoning is needed, reply '{CONTINUE_MARKER}'.")
    SYSTEM_FORCED = ("You are the final summarizer for a team of agents. "
                     "Synthesize the candidate responses into the single best "
                     "final answer and output only that answer.")

    def __init__(self, endpoint: str, model_ref: str = "summarizer", *,
                 api_key: str | None = None, timeout: float = 60.0,
                 temperature: float = 0.1):
        self.endpoint = endpoint
        self.model_ref = model_ref
        self.api_key = api_key
        self.timeout = timeout
        self.temperature = temperature
        self._session = requests.Session()

    def _call(self, system: str, query: str, responses) -> str:
        payload = {
            "model": self.model_ref,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user",
                 "content": f"Query: {query}\n\nCandidate responses:\n{_numbered(responses)}"},
            ],
            "temperature": self.temperature,
        }
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self._session.post(self.endpoint, json=payload, headers=headers,
                                      timeout=self.timeout)
        except requests.RequestException as exc:
            raise TransportError(f"summarizer request failed: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"summarizer request failed: HTTP {resp.status_code}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError) as exc:
            raise TransportError(f"malformed summarizer response: {exc}") from exc

    def decide(self, query, responses):
        return parse_summarizer_reply(self._call(self.SYSTEM, query, responses))

    def finalize(self, query, responses) -> str:
        reply = self._call(self.SYSTEM_FORCED, query, responses).strip()
        # A stray marker is metadata, not answer content.
        if reply.startswith(FINAL_MARKER):
            reply = reply[len(FINAL_MARKER):].strip()
        return reply


def summarizer_decide(query: str, current_responses, backend):
    """Ask the summarizer whether to stop; Final carries the answer."""
    responses = list(current_responses)
    if not responses:
        raise ValueError("summarizer needs at least one response")
    return backend.decide(query, responses)


def summarize_final(query: str, current_responses, backend) -> str:
    """Force a final answer out of the summarizer (step-limit backstop)."""
    responses = list(current_responses)
    if not responses:
        raise ValueError("summarizer needs at least one response")
    return backend.finalize(query, responses)
