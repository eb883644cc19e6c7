"""
Generation backends with streaming token events.

Every backend yields GenerationEvent objects stamped with its own monotonic
clock. generate() consumes the stream, checks event ordering, enforces the
output cap and derives TTFB / generation / total timings from the stamps.
"""

from __future__ import annotations

import asyncio
import json
import logging
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import AsyncIterator, Callable, List, Optional, Sequence

import aiohttp

from config import RuntimeConfig
from ingest import estimate_tokens

logger = logging.getLogger(__name__)


class GenerationError(Exception):
    pass


class GenerationTransportError(GenerationError):
    pass


class GenerationProtocolError(GenerationError):
    pass


class GenerationIncompleteError(GenerationError):
    """The stream broke off; carries whatever was received before that"""

    def __init__(self, message: str, partial_text: str = '', completion_tokens: int = 0):
        super().__init__(message)
        self.partial_text = partial_text
        self.completion_tokens = completion_tokens


class EventKind(str, Enum):
    FIRST_TOKEN = 'first_token'
    TOKEN = 'token'
    DONE = 'done'


@dataclass(frozen=True)
class GenerationEvent:
    kind: EventKind
    text_delta: str
    timestamp: float
    prompt_tokens: Optional[int] = None
    completion_tokens: Optional[int] = None


@dataclass(frozen=True)
class GenerationParams:
    max_tokens: int = 128
    temperature: float = 0.2
    n_ctx: int = 768
    n_batch: int = 256
    n_gpu_layers: int = 20
    flash_attn: bool = True
    tensor_split: float = 0.85
    model_path: str = ''

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be at least 1, got {self.max_tokens}")
        if self.temperature < 0:
            raise ValueError(f"temperature must not be negative, got {self.temperature}")

    @classmethod
    def from_config(cls, config: RuntimeConfig, max_tokens: Optional[int] = None) -> 'GenerationParams':
        return cls(
            max_tokens=max_tokens or config.max_output_tokens,
            temperature=config.temperature,
            n_ctx=config.n_ctx,
            n_batch=config.n_batch,
            n_gpu_layers=config.n_gpu_layers,
            flash_attn=config.flash_attn,
            tensor_split=config.tensor_split,
            model_path=config.model_path,
        )


@dataclass
class GenerationResult:
    text: str
    prompt_tokens: int
    completion_tokens: int
    ttfb_s: float
    generation_duration_s: float
    total_duration_s: float
    counts_estimated: bool = False
    events: List[GenerationEvent] = field(default_factory=list, repr=False)

    @property
    def gen_tps(self) -> float:
        if self.generation_duration_s <= 0:
            return 0.0
        return self.completion_tokens / self.generation_duration_s

    @property
    def total_tps(self) -> float:
        if self.total_duration_s <= 0:
            return 0.0
        return (self.prompt_tokens + self.completion_tokens) / self.total_duration_s


class GenerationBackend(ABC):
    name = 'backend'

    def clock(self) -> float:
        return time.monotonic()

    @abstractmethod
    def stream(self, prompt: str, params: GenerationParams) -> AsyncIterator[GenerationEvent]:
        """Async iterator of events: first_token, token..., done"""

    async def close(self) -> None:
        pass


EventSink = Callable[[GenerationEvent], None]


async def generate(backend: GenerationBackend, prompt: str, params: GenerationParams,
                   event_sink: Optional[EventSink] = None) -> GenerationResult:
    """Run one generation, forwarding every event to event_sink in order"""
    if not prompt:
        raise ValueError("prompt must not be empty")

    started = backend.clock()
    events: List[GenerationEvent] = []
    deltas: List[str] = []
    first_token_at: Optional[float] = None
    last_timestamp = started
    done: Optional[GenerationEvent] = None
    token_events = 0

    def emit(event: GenerationEvent) -> None:
        events.append(event)
        if event_sink is not None:
            event_sink(event)

    stream = backend.stream(prompt, params)
    try:
        async for event in stream:
            if done is not None:
                raise GenerationProtocolError("event received after done")
            if event.timestamp < last_timestamp:
                raise GenerationProtocolError("event timestamps went backwards")
            last_timestamp = event.timestamp

            if event.kind is EventKind.DONE:
                done = event
                emit(event)
                continue
            if event.kind is EventKind.FIRST_TOKEN:
                if first_token_at is not None:
                    raise GenerationProtocolError("second first_token event")
                first_token_at = event.timestamp
            elif event.kind is EventKind.TOKEN:
                if first_token_at is None:
                    raise GenerationProtocolError("token event before first_token")
            else:
                raise GenerationProtocolError(f"unknown event kind {event.kind!r}")

            if token_events >= params.max_tokens:
                logger.warning(f"⚠️ {backend.name} exceeded max_tokens={params.max_tokens}; truncating")
                done = GenerationEvent(EventKind.DONE, '', last_timestamp)
                emit(done)
                break
            token_events += 1
            deltas.append(event.text_delta)
            emit(event)
    except GenerationIncompleteError as e:
        raise GenerationIncompleteError(
            str(e), partial_text=''.join(deltas), completion_tokens=token_events,
        ) from e
    finally:
        aclose = getattr(stream, 'aclose', None)
        if aclose is not None:
            await aclose()

    if done is None:
        raise GenerationIncompleteError(
            "stream ended without a done event",
            partial_text=''.join(deltas), completion_tokens=token_events,
        )

    text = ''.join(deltas)
    counts_estimated = False
    prompt_tokens = done.prompt_tokens
    if prompt_tokens is None:
        prompt_tokens = estimate_tokens(prompt)
        counts_estimated = True
    completion_tokens = done.completion_tokens
    if completion_tokens is None:
        completion_tokens = token_events
        counts_estimated = True
    completion_tokens = min(completion_tokens, params.max_tokens)

    total = done.timestamp - started
    ttfb = (first_token_at - started) if first_token_at is not None else total
    return GenerationResult(
        text=text,
        prompt_tokens=prompt_tokens,
        completion_tokens=completion_tokens,
        ttfb_s=ttfb,
        generation_duration_s=total - ttfb,
        total_duration_s=total,
        counts_estimated=counts_estimated,
        events=events,
    )


class ScriptedMockBackend(GenerationBackend):
    """
    Deterministic backend: the first token arrives after first_token_delay_s,
    token i at delay + i / tokens_per_second, done at delay + n / tokens_per_second.
    """

    name = 'scripted-mock'

    def __init__(self, first_token_delay_s: float, tokens_per_second: float,
                 token_stream: Sequence[str]):
        if tokens_per_second <= 0:
            raise ValueError(f"tokens_per_second must be positive, got {tokens_per_second}")
        if first_token_delay_s < 0:
            raise ValueError(f"first_token_delay_s must not be negative, got {first_token_delay_s}")
        self.first_token_delay_s = first_token_delay_s
        self.tokens_per_second = tokens_per_second
        self.token_stream = list(token_stream)
        self.calls = 0

    async def _sleep_until(self, started: float, offset: float) -> None:
        remaining = started + offset - self.clock()
        if remaining > 0:
            await asyncio.sleep(remaining)

    def tokens_for(self, prompt: str) -> List[str]:
        return self.token_stream

    async def stream(self, prompt: str, params: GenerationParams) -> AsyncIterator[GenerationEvent]:
        self.calls += 1
        started = self.clock()
        tokens = self.tokens_for(prompt)[:params.max_tokens]
        interval = 1.0 / self.tokens_per_second
        for i, token in enumerate(tokens):
            await self._sleep_until(started, self.first_token_delay_s + i * interval)
            kind = EventKind.FIRST_TOKEN if i == 0 else EventKind.TOKEN
            yield GenerationEvent(kind, token, self.clock())
        if tokens:
            await self._sleep_until(started, self.first_token_delay_s + len(tokens) * interval)
        yield GenerationEvent(
            EventKind.DONE, '', self.clock(),
            prompt_tokens=estimate_tokens(prompt), completion_tokens=len(tokens),
        )


def scripted_mock(first_token_delay_s: float, tokens_per_second: float,
                  token_stream: Sequence[str]) -> ScriptedMockBackend:
    return ScriptedMockBackend(first_token_delay_s, tokens_per_second, token_stream)


@dataclass(frozen=True)
class ReplayIteration:
    ttfb_s: float
    gen_tps: float
    completion_tokens: int
    prompt_tokens: int = 24


class VirtualClock:
    def __init__(self, start: float = 0.0):
        self.now = start

    def __call__(self) -> float:
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += seconds


class ReplayBackend(GenerationBackend):
    """
    Replays recorded iterations on a virtual clock: no real waiting, and the
    derived TTFB / gen_tps / total reproduce the recording exactly.
    Calls cycle through the recorded iterations.
    """

    name = 'replay'

    def __init__(self, iterations: Sequence[ReplayIteration], token_text: str = ' tok'):
        if not iterations:
            raise ValueError("at least one recorded iteration is required")
        self.iterations = list(iterations)
        self.token_text = token_text
        self._clock = VirtualClock()
        self.calls = 0

    def clock(self) -> float:
        return self._clock()

    async def stream(self, prompt: str, params: GenerationParams) -> AsyncIterator[GenerationEvent]:
        recorded = self.iterations[self.calls % len(self.iterations)]
        self.calls += 1
        n = min(recorded.completion_tokens, params.max_tokens)
        interval = 1.0 / recorded.gen_tps
        self._clock.advance(recorded.ttfb_s)
        for i in range(n):
            if i:
                self._clock.advance(interval)
            kind = EventKind.FIRST_TOKEN if i == 0 else EventKind.TOKEN
            yield GenerationEvent(kind, self.token_text, self._clock())
            await asyncio.sleep(0)
        if n:
            self._clock.advance(interval)
        yield GenerationEvent(
            EventKind.DONE, '', self._clock(),
            prompt_tokens=recorded.prompt_tokens, completion_tokens=n,
        )


class LlamaServerBackend(GenerationBackend):
    """
    Streaming client for a llama-server style /completion endpoint.

    Request: POST {endpoint}/completion with prompt, n_predict, temperature,
    stream=true and the offload settings passed through untouched.
    Response: server-sent events, one `data: {...}` line per token delta with
    `content`; the final event has `stop: true` and the token counts.
    """

    name = 'llama-server'

    def __init__(self, endpoint: str, timeout_s: float = 300.0,
                 session: Optional[aiohttp.ClientSession] = None):
        self.url = f"{endpoint.rstrip('/')}/completion"
        self.timeout = aiohttp.ClientTimeout(total=timeout_s)
        self._session = session
        self._owns_session = session is None

    async def _get_session(self) -> aiohttp.ClientSession:
        if self._session is None or self._session.closed:
            self._session = aiohttp.ClientSession(timeout=self.timeout)
            self._owns_session = True
        return self._session

    async def close(self) -> None:
        if self._owns_session and self._session is not None and not self._session.closed:
            await self._session.close()

    @staticmethod
    def request_body(prompt: str, params: GenerationParams) -> dict:
        return {
            'prompt': prompt,
            'n_predict': params.max_tokens,
            'temperature': params.temperature,
            'stream': True,
            'model': params.model_path,
            'n_ctx': params.n_ctx,
            'n_batch': params.n_batch,
            'n_gpu_layers': params.n_gpu_layers,
            'flash_attn': params.flash_attn,
            'tensor_split': params.tensor_split,
        }

    @staticmethod
    def _counts(payload: dict) -> tuple:
        timings = payload.get('timings') or {}
        prompt_tokens = payload.get('tokens_evaluated', timings.get('prompt_n'))
        completion_tokens = payload.get('tokens_predicted', timings.get('predicted_n'))
        return (
            int(prompt_tokens) if prompt_tokens is not None else None,
            int(completion_tokens) if completion_tokens is not None else None,
        )

    async def stream(self, prompt: str, params: GenerationParams) -> AsyncIterator[GenerationEvent]:
        session = await self._get_session()
        try:
            response = await session.post(self.url, json=self.request_body(prompt, params))
        except (aiohttp.ClientError, asyncio.TimeoutError) as e:
            raise GenerationTransportError(f"inference server at {self.url} unreachable: {e}") from e

        seen_token = False
        try:
            if response.status != 200:
                body = (await response.text())[:200]
                raise GenerationTransportError(f"inference server returned HTTP {response.status}: {body}")
            async for raw_line in response.content:
                line = raw_line.decode('utf-8').strip()
                if not line or not line.startswith('data:'):
                    continue
                data = line[len('data:'):].strip()
                if data == '[DONE]':
                    break
                try:
                    payload = json.loads(data)
                except json.JSONDecodeError as e:
                    raise GenerationProtocolError(f"malformed stream event: {data[:80]!r}") from e
                if not isinstance(payload, dict):
                    raise GenerationProtocolError(f"unexpected stream event: {data[:80]!r}")

                content = payload.get('content') or ''
                if content:
                    kind = EventKind.TOKEN if seen_token else EventKind.FIRST_TOKEN
                    seen_token = True
                    yield GenerationEvent(kind, content, self.clock())
                if payload.get('stop'):
                    prompt_tokens, completion_tokens = self._counts(payload)
                    yield GenerationEvent(
                        EventKind.DONE, '', self.clock(),
                        prompt_tokens=prompt_tokens, completion_tokens=completion_tokens,
                    )
                    return
        except (aiohttp.ClientPayloadError, aiohttp.ClientConnectionError, asyncio.TimeoutError) as e:
            raise GenerationIncompleteError(f"stream from {self.url} interrupted: {e}") from e
        finally:
            response.release()
        raise GenerationIncompleteError(f"stream from {self.url} closed before the final event")


OFFLINE_NOTICE = "(offline mock backend; set BACKEND_ENDPOINT for real answers) "


def offline_answer_tokens(text: str) -> List[str]:
    """Split text into word-ish stream tokens that concatenate back to text"""
    tokens: List[str] = []
    for i, word in enumerate(text.split(' ')):
        tokens.append(word if i == 0 else ' ' + word)
    return [t for t in tokens if t]


class OfflineAnswerBackend(ScriptedMockBackend):
    """Scripted mock that answers with the first sentence of the top context block"""

    name = 'offline-mock'

    def __init__(self, context_marker: str):
        super().__init__(first_token_delay_s=0.0, tokens_per_second=1e6, token_stream=[])
        self.context_marker = context_marker

    def tokens_for(self, prompt: str) -> List[str]:
        excerpt = ''
        if self.context_marker in prompt:
            block = prompt.split(self.context_marker, 1)[1]
            lines = block.split('\n', 1)
            body = lines[1] if len(lines) > 1 else ''
            excerpt = ' '.join(body.split('\n\n', 1)[0].split())
            cut = excerpt.find('. ')
            if cut != -1:
                excerpt = excerpt[:cut + 1]
        answer = OFFLINE_NOTICE + (excerpt or "No course material matched this question.")
        return offline_answer_tokens(answer)
