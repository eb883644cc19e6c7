import asyncio
import random

import pytest

from config import RuntimeConfig
from embeddings import MockEmbeddingProvider, embed_texts
from ingest import SourceDocument, estimate_tokens, ingest_corpus
from llm_backend import OFFLINE_NOTICE, EventKind, OfflineAnswerBackend, scripted_mock
from rag_pipeline import (CONTEXT_MARKER, DEFAULT_TEMPLATE, AnswerResult, ContextBudgetError, CourseAssistant,
                          PromptTemplate, answer_query, build_context, retrieve)
from vector_index import SearchHit, VectorIndex

DIM = 64
CONFIG = RuntimeConfig(embedding_dim=DIM, chunk_size_tokens=64, chunk_overlap_tokens=8)

DOCS = [
    SourceDocument('gpu.md', 'gpu', (
        "GPU offloading moves transformer layers from system memory onto the graphics card. "
        "Each offloaded layer runs its matrix multiplications on the GPU, which is much faster. "
        "When VRAM runs out the remaining layers stay on the CPU and inference slows down. "
    ) * 3, 'gpu.md'),
    SourceDocument('quant.md', 'quant', (
        "Quantization stores model weights with fewer bits, for example four bits per weight. "
        "A Q4_K_M model of seven billion parameters fits in about four gigabytes of memory. "
        "Lower precision costs a little accuracy but makes local inference practical. "
    ) * 3, 'quant.md'),
    SourceDocument('rag.md', 'rag', (
        "Retrieval augmented generation looks up relevant course notes before answering. "
        "The question is embedded, the closest chunks are found, and they are added to the prompt. "
        "The model then answers using only that material and cites where it came from. "
    ) * 3, 'rag.md'),
]


def build_test_index(docs=DOCS, config=CONFIG):
    provider = MockEmbeddingProvider(config.embedding_dim)
    chunks = ingest_corpus(docs, config)
    index = VectorIndex(provider.dim)
    for chunk, vector in zip(chunks, embed_texts(provider, [c.text for c in chunks])):
        index.add(chunk.chunk_id, vector, chunk.metadata())
    return index, provider, chunks


def make_hit(rank, n_chars, origin='notes.md', seq=None, rng=None):
    words = []
    while sum(len(w) + 1 for w in words) < n_chars:
        words.append(rng.choice(['gpu', 'layer', 'memory', 'token', 'cache']) if rng else 'word')
    text = ' '.join(words)[:n_chars]
    return SearchHit(chunk_id=f"{origin}#{rank}", score=1.0 - rank * 0.01, rank=rank,
                     metadata={'origin': origin, 'seq': rank if seq is None else seq, 'text': text})


def test_template_requires_its_slots():
    with pytest.raises(ValueError):
        PromptTemplate('preamble', '{text}', 'Q: {query}')
    with pytest.raises(ValueError):
        PromptTemplate('preamble', '{origin} {text}', 'Q:')
    with pytest.raises(ValueError):
        PromptTemplate('hello {name}', '{origin} {text}', 'Q: {query}')
    template = PromptTemplate('P\n', '<{origin}>{text}\n', 'Q: {query}')
    assert template.render([('a.md', 'x'), ('b.md', 'y')], 'why?') == 'P\n<a.md>x\n<b.md>y\nQ: why?'


def test_no_hits_gives_preamble_and_question():
    context, prompt = build_context([], 'What is a GPU?', DEFAULT_TEMPLATE, 768, 128)
    assert prompt == DEFAULT_TEMPLATE.system_preamble + 'Question: What is a GPU?\nAnswer:'
    assert context.included == []
    assert context.citations == []
    assert context.prompt_token_estimate == estimate_tokens(prompt)


def test_two_hundred_token_chunks_fit_at_most_three():
    hits = [make_hit(rank, 800) for rank in range(6)]
    query = 'How does offloading work?'
    context, prompt = build_context(hits, query, DEFAULT_TEMPLATE, 768, 128)

    expected = 0
    while expected < len(hits):
        blocks = [(h.origin, h.text) for h in hits[:expected + 1]]
        if estimate_tokens(DEFAULT_TEMPLATE.render(blocks, query)) + 128 > 768:
            break
        expected += 1
    assert len(context.included) == expected
    assert len(context.included) <= 3
    assert context.included == [h.chunk_id for h in hits[:expected]]
    assert estimate_tokens(prompt) + 128 <= 768


def test_oversized_hit_is_skipped_and_later_hits_still_fit():
    hits = [make_hit(0, 400, origin='week1.md'), make_hit(1, 3000, origin='book.md'), make_hit(2, 400, origin='week3.md')]
    context, prompt = build_context(hits, 'q', DEFAULT_TEMPLATE, 768, 128)
    assert context.included == [hits[0].chunk_id, hits[2].chunk_id]
    assert context.citations == [('week1.md', 0), ('week3.md', 2)]
    assert hits[1].text not in prompt
    assert CONTEXT_MARKER + 'book.md]' not in prompt
    assert prompt.index(CONTEXT_MARKER + 'week1.md]') < prompt.index(CONTEXT_MARKER + 'week3.md]')


def test_question_too_long_for_budget():
    with pytest.raises(ContextBudgetError):
        build_context([], 'x' * 4000, DEFAULT_TEMPLATE, 768, 128)
    with pytest.raises(ValueError):
        build_context([], 'q', DEFAULT_TEMPLATE, 128, 128)


def test_packing_respects_budget_on_random_inputs():
    rng = random.Random(5)
    for _ in range(1000):
        n_ctx = rng.randint(256, 4096)
        max_out = rng.randint(1, n_ctx // 2)
        hits = [make_hit(rank, rng.randint(1, 2500), origin=f"doc{rank % 4}.md", rng=rng)
                for rank in range(rng.randint(0, 12))]
        query = ' '.join(rng.choice(['what', 'is', 'offloading', 'vram']) for _ in range(rng.randint(1, 20)))
        context, prompt = build_context(hits, query, DEFAULT_TEMPLATE, n_ctx, max_out)

        assert estimate_tokens(prompt) + max_out <= n_ctx
        assert context.prompt_token_estimate == estimate_tokens(prompt)
        ranks = [int(c.split('#')[1]) for c in context.included]
        assert ranks == sorted(ranks)

        # greedy in rank order: every skipped hit overflows the prefix packed before it
        kept = []
        for hit in hits:
            blocks = [(h.origin, h.text) for h in kept] + [(hit.origin, hit.text)]
            if estimate_tokens(DEFAULT_TEMPLATE.render(blocks, query)) + max_out <= n_ctx:
                kept.append(hit)
        assert context.included == [h.chunk_id for h in kept]


def test_retrieve_finds_exact_chunk():
    index, provider, chunks = build_test_index()
    for chunk in chunks:
        hits = retrieve(index, provider, chunk.text, 1)
        # repeated passages can produce identical chunks; the earlier one wins the tie
        assert hits[0].text == chunk.text
        assert hits[0].score == pytest.approx(1.0, abs=1e-5)


def test_retrieve_saturates_and_handles_empty_index():
    index, provider, chunks = build_test_index()
    hits = retrieve(index, provider, 'GPU memory', len(chunks) + 10)
    assert sorted(h.chunk_id for h in hits) == sorted(c.chunk_id for c in chunks)
    assert [h.score for h in hits] == sorted((h.score for h in hits), reverse=True)

    assert retrieve(VectorIndex(DIM), provider, 'anything', 4) == []
    with pytest.raises(ValueError):
        retrieve(index, provider, '', 4)


def test_answer_query_with_scripted_backend():
    index, provider, _ = build_test_index()
    backend = scripted_mock(0.0, 1e6, ['Offloading', ' moves', ' layers', '.'])
    events = []

    result = asyncio.run(answer_query('What does GPU offloading do?', index, provider, backend, CONFIG,
                                      event_sink=events.append))

    assert result.text == 'Offloading moves layers.'
    assert 1 <= len(result.citations) <= CONFIG.top_k
    assert result.citations == [(index.get(c)[1]['origin'], index.get(c)[1]['seq'])
                                for c in result.context.included]
    assert events[0].kind is EventKind.FIRST_TOKEN
    assert events[-1].kind is EventKind.DONE
    assert result.generation.completion_tokens == 4


def test_answer_query_on_empty_index_has_no_citations():
    provider = MockEmbeddingProvider(DIM)
    backend = scripted_mock(0.0, 1e6, ['I', ' do', ' not', ' know', '.'])
    result = asyncio.run(answer_query('Anything?', VectorIndex(DIM), provider, backend, CONFIG))
    assert result.text == 'I do not know.'
    assert result.citations == []
    assert result.render() == 'I do not know.'


def test_full_pipeline_cites_corpus_documents_and_is_deterministic():
    index, provider, _ = build_test_index()
    origins = {doc.origin for doc in DOCS}

    async def ask_twice():
        assistant = CourseAssistant(index, provider, OfflineAnswerBackend(CONTEXT_MARKER), CONFIG)
        try:
            first = await assistant.answer('How much memory does a quantized model need?')
            second = await assistant.answer('How much memory does a quantized model need?')
        finally:
            await assistant.close()
        return first, second

    first, second = asyncio.run(ask_twice())
    assert first.text.startswith(OFFLINE_NOTICE.strip())
    assert first.citations
    assert {origin for origin, _ in first.citations} <= origins
    assert first.render() == second.render()
    assert '\n\nSources:\n- ' in first.render()


def test_course_assistant_rejects_dim_mismatch():
    with pytest.raises(ValueError):
        CourseAssistant(VectorIndex(32), MockEmbeddingProvider(DIM), scripted_mock(0, 1, ['x']), CONFIG)


def test_answer_render_lists_sources():
    result = AnswerResult(text='  Use more layers. ', citations=[('gpu.md', 0), ('gpu.md', 2)],
                          context=None, generation=None)
    assert result.render() == 'Use more layers.\n\nSources:\n- gpu.md (part 1)\n- gpu.md (part 3)'
    assert AnswerResult('', [], None, None).render() == '(empty answer)'
