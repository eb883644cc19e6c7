import asyncio
import socket

import pytest

from llm_backend import (OFFLINE_NOTICE, EventKind, GenerationBackend, GenerationEvent, GenerationIncompleteError,
                         GenerationParams, GenerationProtocolError, GenerationTransportError, LlamaServerBackend,
                         OfflineAnswerBackend, ReplayBackend, ReplayIteration, VirtualClock, generate,
                         offline_answer_tokens, scripted_mock)
from simulators import InferenceServerSimulator, running_app

PARAMS = GenerationParams(max_tokens=128)


class EventListBackend(GenerationBackend):
    """Emits a fixed event list on a virtual clock"""

    name = 'event-list'

    def __init__(self, events):
        self.events = events
        self._clock = VirtualClock()

    def clock(self):
        return self._clock()

    async def stream(self, prompt, params):
        for event in self.events:
            yield event


def ev(kind, t, text='x', **counts):
    return GenerationEvent(kind, text if kind is not EventKind.DONE else '', t, **counts)


def run(coro):
    return asyncio.run(coro)


def test_scripted_mock_timing():
    backend = scripted_mock(0.1, 200.0, [' t'] * 100)
    result = run(generate(backend, 'prompt', PARAMS))
    assert result.completion_tokens == 100
    assert result.ttfb_s == pytest.approx(0.1, rel=0.05, abs=0.01)
    assert result.gen_tps == pytest.approx(200.0, rel=0.05)
    assert abs(result.total_duration_s - (result.ttfb_s + result.generation_duration_s)) <= 1e-3
    assert not result.counts_estimated


def test_fast_mock_produces_text_quickly():
    backend = scripted_mock(0.0, 1e6, ['a', 'b', 'c'])
    result = run(generate(backend, 'prompt', PARAMS))
    assert result.text == 'abc'
    assert result.completion_tokens == 3
    assert result.ttfb_s >= 0
    assert result.total_duration_s < 0.5


def test_zero_token_generation():
    result = run(generate(scripted_mock(0.05, 10.0, []), 'prompt', PARAMS))
    assert result.text == ''
    assert result.completion_tokens == 0
    assert result.ttfb_s == result.total_duration_s
    assert result.generation_duration_s == 0
    assert [e.kind for e in result.events] == [EventKind.DONE]


def test_max_tokens_cap():
    backend = scripted_mock(0.0, 1e6, [str(i % 10) for i in range(300)])
    result = run(generate(backend, 'prompt', GenerationParams(max_tokens=128)))
    assert result.completion_tokens == 128
    assert len(result.text) == 128


def test_runaway_backend_is_truncated():
    events = [ev(EventKind.FIRST_TOKEN, 1.0)] + [ev(EventKind.TOKEN, 1.0 + i) for i in range(1, 10)]
    events.append(ev(EventKind.DONE, 20.0, completion_tokens=10))
    result = run(generate(EventListBackend(events), 'prompt', GenerationParams(max_tokens=4)))
    assert result.text == 'xxxx'
    assert result.completion_tokens == 4
    assert result.events[-1].kind is EventKind.DONE


def test_event_sink_sees_events_in_order():
    seen = []
    result = run(generate(scripted_mock(0.0, 1e6, ['a', 'b']), 'prompt', PARAMS, seen.append))
    assert [e.kind for e in seen] == [EventKind.FIRST_TOKEN, EventKind.TOKEN, EventKind.DONE]
    assert seen == result.events
    assert all(a.timestamp <= b.timestamp for a, b in zip(seen, seen[1:]))


@pytest.mark.parametrize('events', [
    [ev(EventKind.TOKEN, 1.0), ev(EventKind.DONE, 2.0)],
    [ev(EventKind.FIRST_TOKEN, 1.0), ev(EventKind.FIRST_TOKEN, 2.0), ev(EventKind.DONE, 3.0)],
    [ev(EventKind.FIRST_TOKEN, 2.0), ev(EventKind.TOKEN, 1.0), ev(EventKind.DONE, 3.0)],
    [ev(EventKind.FIRST_TOKEN, 1.0), ev(EventKind.DONE, 2.0), ev(EventKind.TOKEN, 3.0)],
])
def test_out_of_order_events_are_protocol_errors(events):
    with pytest.raises(GenerationProtocolError):
        run(generate(EventListBackend(events), 'prompt', PARAMS))


def test_missing_done_is_incomplete_with_partial_text():
    events = [ev(EventKind.FIRST_TOKEN, 1.0, 'Hel'), ev(EventKind.TOKEN, 2.0, 'lo')]
    with pytest.raises(GenerationIncompleteError) as info:
        run(generate(EventListBackend(events), 'prompt', PARAMS))
    assert info.value.partial_text == 'Hello'
    assert info.value.completion_tokens == 2


def test_missing_counts_are_estimated():
    events = [ev(EventKind.FIRST_TOKEN, 1.0), ev(EventKind.TOKEN, 2.0), ev(EventKind.DONE, 3.0)]
    result = run(generate(EventListBackend(events), 'abcdefgh', PARAMS))
    assert result.counts_estimated
    assert result.prompt_tokens == 2
    assert result.completion_tokens == 2
    assert result.ttfb_s == 1.0
    assert result.total_duration_s == 3.0


def test_empty_prompt_rejected():
    with pytest.raises(ValueError):
        run(generate(scripted_mock(0, 1, ['a']), '', PARAMS))


def test_params_validation():
    with pytest.raises(ValueError):
        GenerationParams(max_tokens=0)
    with pytest.raises(ValueError):
        GenerationParams(temperature=-0.1)


def test_replay_reproduces_recorded_iteration():
    backend = ReplayBackend([ReplayIteration(0.350, 16.99, 117, prompt_tokens=23),
                             ReplayIteration(0.067, 16.27, 111, prompt_tokens=1)])
    first = run(generate(backend, 'prompt', PARAMS))
    assert first.ttfb_s == pytest.approx(0.350, abs=1e-9)
    assert first.gen_tps == pytest.approx(16.99, abs=1e-9)
    assert first.total_duration_s == pytest.approx(0.350 + 117 / 16.99, abs=1e-9)
    assert first.completion_tokens == 117
    assert first.prompt_tokens == 23

    second = run(generate(backend, 'prompt', PARAMS))
    assert second.ttfb_s == pytest.approx(0.067, abs=1e-9)
    third = run(generate(backend, 'prompt', PARAMS))
    assert third.gen_tps == pytest.approx(16.99, abs=1e-9)


def test_offline_backend_quotes_first_context_sentence():
    prompt = ("Preamble.\n\n[Source: gpu.md]\nLayers move to the GPU. More text follows.\n\n"
              "[Source: other.md]\nIgnored.\n\nQuestion: q\nAnswer:")
    result = run(generate(OfflineAnswerBackend('[Source: '), prompt, PARAMS))
    assert result.text == OFFLINE_NOTICE + 'Layers move to the GPU.'

    bare = run(generate(OfflineAnswerBackend('[Source: '), 'Question: q\nAnswer:', PARAMS))
    assert bare.text == OFFLINE_NOTICE + 'No course material matched this question.'


def test_offline_tokens_concatenate_back():
    text = 'one two  three four'
    assert ''.join(offline_answer_tokens(text)) == text


def with_inference_server(simulator, body):
    async def scenario():
        async with running_app(simulator.app) as base_url:
            backend = LlamaServerBackend(base_url, timeout_s=10)
            try:
                return await body(backend)
            finally:
                await backend.close()
    return run(scenario())


def test_llama_server_streaming():
    simulator = InferenceServerSimulator(['Hel', 'lo', ' world'])
    params = GenerationParams(max_tokens=16, temperature=0.2, n_ctx=768, n_batch=256, n_gpu_layers=20,
                              flash_attn=True, tensor_split=0.85, model_path='/models/m.gguf')

    result = with_inference_server(simulator, lambda backend: generate(backend, 'Say hello', params))

    assert result.text == 'Hello world'
    assert result.completion_tokens == 3
    assert result.prompt_tokens == 12
    assert not result.counts_estimated
    assert simulator.requests == [{
        'prompt': 'Say hello', 'n_predict': 16, 'temperature': 0.2, 'stream': True,
        'model': '/models/m.gguf', 'n_ctx': 768, 'n_batch': 256, 'n_gpu_layers': 20,
        'flash_attn': True, 'tensor_split': 0.85,
    }]


def test_llama_server_without_counts_falls_back_to_estimates():
    simulator = InferenceServerSimulator(['a', 'b'], mode='no-counts')
    result = with_inference_server(simulator, lambda backend: generate(backend, 'abcd', PARAMS))
    assert result.counts_estimated
    assert result.completion_tokens == 2
    assert result.prompt_tokens == 1


def test_llama_server_http_error():
    simulator = InferenceServerSimulator(['a'], mode='error')
    with pytest.raises(GenerationTransportError, match='500'):
        with_inference_server(simulator, lambda backend: generate(backend, 'p', PARAMS))


def test_llama_server_malformed_event():
    simulator = InferenceServerSimulator(['a', 'b', 'c'], mode='garbage')
    with pytest.raises(GenerationProtocolError):
        with_inference_server(simulator, lambda backend: generate(backend, 'p', PARAMS))


@pytest.mark.parametrize('mode', ['eof', 'drop'])
def test_llama_server_stream_cut_short(mode):
    simulator = InferenceServerSimulator(['Hel', 'lo', ' there', '!'], mode=mode)
    with pytest.raises(GenerationIncompleteError) as info:
        with_inference_server(simulator, lambda backend: generate(backend, 'p', PARAMS))
    if mode == 'eof':
        assert info.value.partial_text == 'Hello there!'
    else:
        assert 'there' not in info.value.partial_text


def test_llama_server_unreachable():
    with socket.socket() as s:
        s.bind(('127.0.0.1', 0))
        port = s.getsockname()[1]

    async def scenario():
        backend = LlamaServerBackend(f"http://127.0.0.1:{port}", timeout_s=5)
        try:
            await generate(backend, 'p', PARAMS)
        finally:
            await backend.close()

    with pytest.raises(GenerationTransportError):
        run(scenario())
