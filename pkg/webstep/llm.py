"""Chat-completions client with retries, plus a scripted stand-in for tests."""
from __future__ import annotations

import asyncio
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, Sequence, Union

import requests

from .config import EndpointConfig
from .secrets import redact

LOGGER = logging.getLogger(__name__)

RETRYABLE_STATUS = frozenset({408, 429, 500, 502, 503, 504})
BODY_EXCERPT = 300

Messages = List[Dict[str, str]]
PromptInput = Union[str, Messages]


class TransportError(RuntimeError):
    """The endpoint could not be reached successfully within the retry budget."""


class ApiError(RuntimeError):
    def __init__(self, status: int, body: str) -> None:
        super().__init__(f"Endpoint returned HTTP {status}: {body}")
        self.status = status
        self.body = body


class ScriptExhausted(TransportError):
    """A scripted client ran out of recorded completions."""


@dataclass(frozen=True, slots=True)
class GenParams:
    temperature: float = 0.6
    top_p: float = 0.95
    n_samples: int = 5
    max_new_tokens: int = 512
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature!r}")
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p!r}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be positive, got {self.n_samples!r}")
        if self.max_new_tokens < 1:
            raise ValueError(f"max_new_tokens must be positive, got {self.max_new_tokens!r}")


class CompletionClient(Protocol):
    async def complete(
        self, prompt: PromptInput, params: GenParams, stage: Optional[str] = None
    ) -> List[str]: ...


def _as_messages(prompt: PromptInput) -> Messages:
    if isinstance(prompt, str):
        return [{"role": "user", "content": prompt}]
    return list(prompt)


class ChatClient:
    """Talks to an OpenAI-style ``/chat/completions`` endpoint."""

    def __init__(
        self,
        config: EndpointConfig,
        session: Optional[requests.Session] = None,
    ) -> None:
        self.config = config
        self.session = session or requests.Session()

    @property
    def url(self) -> str:
        return f"{self.config.base_url.rstrip('/')}/chat/completions"

    def _send(self, payload: Dict[str, Any]) -> requests.Response:
        api_key = self.config.api_key()
        LOGGER.debug("POST %s (key %s, seed %s)", self.url, redact(api_key), payload.get("seed"))
        return self.session.post(
            self.url,
            json=payload,
            headers={"Authorization": f"Bearer {api_key}"},
            timeout=self.config.timeout,
            verify=self.config.verify_ssl,
        )

    async def _request(self, payload: Dict[str, Any]) -> str:
        attempts = self.config.max_attempts
        last_error = ""
        for attempt in range(1, attempts + 1):
            try:
                response = await asyncio.to_thread(self._send, payload)
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_error = f"{type(exc).__name__}: {exc}"
            else:
                if response.status_code in RETRYABLE_STATUS:
                    last_error = f"HTTP {response.status_code}"
                elif not response.ok:
                    raise ApiError(response.status_code, response.text[:BODY_EXCERPT])
                else:
                    return _completion_text(response)
            if attempt < attempts:
                delay = self.config.backoff_seconds * 2 ** (attempt - 1)
                LOGGER.warning(
                    "Request attempt %d/%d failed (%s); retrying in %.1fs",
                    attempt,
                    attempts,
                    last_error,
                    delay,
                )
                await asyncio.sleep(delay)
        raise TransportError(f"Request failed after {attempts} attempts: {last_error}")

    async def complete(
        self, prompt: PromptInput, params: GenParams, stage: Optional[str] = None
    ) -> List[str]:
        """``params.n_samples`` completions, requested with bounded parallelism."""

        semaphore = asyncio.Semaphore(self.config.max_parallel)
        messages = _as_messages(prompt)

        async def one(sample: int) -> str:
            payload: Dict[str, Any] = {
                "model": self.config.model,
                "messages": messages,
                "temperature": params.temperature,
                "top_p": params.top_p,
                "max_tokens": params.max_new_tokens,
            }
            if params.seed is not None:
                payload["seed"] = params.seed + sample
            async with semaphore:
                return await self._request(payload)

        if stage:
            LOGGER.debug("Requesting %d completions for stage %s", params.n_samples, stage)
        return list(await asyncio.gather(*(one(i) for i in range(params.n_samples))))


def _completion_text(response: requests.Response) -> str:
    try:
        data = response.json()
        content = data["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise ApiError(response.status_code, f"malformed response: {response.text[:BODY_EXCERPT]}") from exc
    return "" if content is None else str(content)


def llm_complete(
    config: EndpointConfig,
    prompt: PromptInput,
    params: GenParams,
    session: Optional[requests.Session] = None,
) -> List[str]:
    """Blocking convenience wrapper around :meth:`ChatClient.complete`."""

    return asyncio.run(ChatClient(config, session=session).complete(prompt, params))


class ScriptedChatClient:
    """Replays completions recorded in a JSONL transcript.

    Each call consumes one row. A row with a ``completions`` list returns it
    as is; a row with a single ``completion`` returns it ``n_samples`` times.
    When a row names a ``stage`` it must match the caller's stage.
    """

    def __init__(self, rows: Sequence[Dict[str, Any]]) -> None:
        self.rows = list(rows)
        self.position = 0
        self.prompts: List[Messages] = []

    @classmethod
    def from_file(cls, path: str | os.PathLike[str]) -> "ScriptedChatClient":
        rows = []
        for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{number}: invalid transcript row") from exc
        return cls(rows)

    @property
    def remaining(self) -> int:
        return len(self.rows) - self.position

    async def complete(
        self, prompt: PromptInput, params: GenParams, stage: Optional[str] = None
    ) -> List[str]:
        if self.position >= len(self.rows):
            raise ScriptExhausted(f"Transcript exhausted after {len(self.rows)} calls")
        row = self.rows[self.position]
        self.position += 1
        self.prompts.append(_as_messages(prompt))
        expected = row.get("stage")
        if stage and expected and expected != stage:
            raise ValueError(
                f"Transcript row {self.position} is for stage {expected!r}, not {stage!r}"
            )
        if "completions" in row:
            return [str(text) for text in row["completions"]]
        return [str(row.get("completion", ""))] * params.n_samples
