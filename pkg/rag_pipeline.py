"""
Retriever and context builder.

A question is embedded, the top-k chunks are fetched from the index, packed
into a prompt in rank order while the n_ctx budget allows, and sent to the
generation backend. The answer comes back with the citations of the packed
chunks.
"""

from __future__ import annotations

import asyncio
import logging
import math
import string
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

from config import RuntimeConfig
from embeddings import EmbeddingProvider, embed_texts
from ingest import CHARS_PER_TOKEN, estimate_tokens
from llm_backend import EventSink, GenerationBackend, GenerationParams, GenerationResult, generate
from vector_index import SearchHit, VectorIndex

logger = logging.getLogger(__name__)

Citation = Tuple[str, int]


class ContextBudgetError(ValueError):
    """The prompt template and question alone do not fit in n_ctx"""


def _tokens_for_chars(n_chars: int) -> int:
    return math.ceil(n_chars / CHARS_PER_TOKEN)


def _slot_names(fmt: str) -> List[str]:
    return [name for _, name, _, _ in string.Formatter().parse(fmt) if name is not None]


@dataclass(frozen=True)
class PromptTemplate:
    system_preamble: str
    context_block_format: str
    question_format: str

    def __post_init__(self):
        if sorted(_slot_names(self.context_block_format)) != ['origin', 'text']:
            raise ValueError("context_block_format needs exactly one {origin} and one {text} slot")
        if _slot_names(self.question_format) != ['query']:
            raise ValueError("question_format needs exactly one {query} slot")
        if _slot_names(self.system_preamble):
            raise ValueError("system_preamble must not contain format slots")

    def render_block(self, origin: str, text: str) -> str:
        return self.context_block_format.format(origin=origin, text=text)

    def render_question(self, query: str) -> str:
        return self.question_format.format(query=query)

    def render(self, blocks: Sequence[Tuple[str, str]], query: str) -> str:
        parts = [self.system_preamble]
        parts.extend(self.render_block(origin, text) for origin, text in blocks)
        parts.append(self.render_question(query))
        return ''.join(parts)


CONTEXT_MARKER = '[Source: '

DEFAULT_TEMPLATE = PromptTemplate(
    system_preamble=(
        "You are a course assistant. Answer the student's question using only the "
        "course material below and mention the sources you used. If the material "
        "does not cover the question, say so.\n\n"
    ),
    context_block_format=CONTEXT_MARKER + "{origin}]\n{text}\n\n",
    question_format="Question: {query}\nAnswer:",
)


@dataclass
class RetrievedContext:
    hits: List[SearchHit]
    included: List[str]
    prompt_token_estimate: int
    citations: List[Citation] = field(default_factory=list)


@dataclass
class AnswerResult:
    text: str
    citations: List[Citation]
    context: RetrievedContext
    generation: GenerationResult

    def render(self) -> str:
        """Answer text followed by a Sources list, as shown to the user"""
        answer = self.text.strip() or "(empty answer)"
        if not self.citations:
            return answer
        lines = [answer, '', 'Sources:']
        lines.extend(f"- {origin} (part {seq + 1})" for origin, seq in self.citations)
        return '\n'.join(lines)


def retrieve(index: VectorIndex, provider: EmbeddingProvider, query: str, k: int) -> List[SearchHit]:
    """Embed the query and return the top-k hits with chunk texts attached"""
    if not query:
        raise ValueError("query must not be empty")
    if len(index) == 0:
        return []
    query_vector = embed_texts(provider, [query])[0]
    hits = index.search_top_k(query_vector, k)
    logger.debug(f"Retrieved {len(hits)} chunks for query ({len(query)} chars)")
    return hits


def build_context(hits: List[SearchHit], query: str, template: PromptTemplate,
                  n_ctx: int, max_output_tokens: int) -> Tuple[RetrievedContext, str]:
    """
    Pack hits greedily in rank order under the token budget.

    A hit is kept only if estimate_tokens(prompt with it) + max_output_tokens
    stays within n_ctx; hits that do not fit are skipped and later, smaller ones
    still get a chance. Returns the accounting record and the rendered prompt.
    """
    if max_output_tokens >= n_ctx:
        raise ValueError(f"max_output_tokens ({max_output_tokens}) must be smaller than n_ctx ({n_ctx})")
    prompt_budget = n_ctx - max_output_tokens

    # rendering is plain concatenation, so lengths add up
    prompt_chars = len(template.system_preamble) + len(template.render_question(query))
    if _tokens_for_chars(prompt_chars) > prompt_budget:
        raise ContextBudgetError(
            f"prompt template and question need {_tokens_for_chars(prompt_chars)} tokens, "
            f"only {prompt_budget} available (n_ctx={n_ctx}, max_output_tokens={max_output_tokens}); "
            f"raise N_CTX or lower MAX_OUTPUT_TOKENS"
        )

    blocks: List[Tuple[str, str]] = []
    included: List[str] = []
    citations: List[Citation] = []
    for hit in hits:
        block_chars = len(template.render_block(hit.origin, hit.text))
        if _tokens_for_chars(prompt_chars + block_chars) > prompt_budget:
            logger.debug(f"Skipping {hit.chunk_id}: does not fit the remaining budget")
            continue
        prompt_chars += block_chars
        blocks.append((hit.origin, hit.text))
        included.append(hit.chunk_id)
        citations.append((hit.origin, int(hit.metadata.get('seq', 0))))

    prompt = template.render(blocks, query)
    context = RetrievedContext(
        hits=list(hits),
        included=included,
        prompt_token_estimate=estimate_tokens(prompt),
        citations=citations,
    )
    return context, prompt


async def answer_query(query: str, index: VectorIndex, provider: EmbeddingProvider,
                       backend: GenerationBackend, config: RuntimeConfig,
                       template: PromptTemplate = DEFAULT_TEMPLATE,
                       event_sink: Optional[EventSink] = None) -> AnswerResult:
    """retrieve -> build_context -> generate"""
    hits = await asyncio.to_thread(retrieve, index, provider, query, config.top_k)
    context, prompt = build_context(hits, query, template, config.n_ctx, config.max_output_tokens)
    params = GenerationParams.from_config(config)
    result = await generate(backend, prompt, params, event_sink)
    logger.info(
        f"Answered with {len(context.included)}/{len(hits)} chunks, "
        f"{result.completion_tokens} tokens in {result.total_duration_s:.2f}s"
    )
    return AnswerResult(text=result.text, citations=context.citations, context=context, generation=result)


class CourseAssistant:
    """Index, embedder and backend wired together; one generation at a time"""

    def __init__(self, index: VectorIndex, provider: EmbeddingProvider,
                 backend: GenerationBackend, config: RuntimeConfig,
                 template: PromptTemplate = DEFAULT_TEMPLATE):
        if provider.dim != index.dim:
            raise ValueError(f"embedding dim {provider.dim} does not match index dim {index.dim}")
        self.index = index
        self.provider = provider
        self.backend = backend
        self.config = config
        self.template = template
        self._generation_lock = asyncio.Lock()

    async def answer(self, query: str) -> AnswerResult:
        async with self._generation_lock:
            return await answer_query(query, self.index, self.provider, self.backend,
                                      self.config, self.template)

    async def close(self) -> None:
        await self.backend.close()
