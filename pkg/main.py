#!/usr/bin/env python3
"""
Course Assistant
Local RAG course assistant: knowledge base builder, question answering,
Telegram bot and inference benchmark
"""

import argparse
import asyncio
import logging
import math
import sys
from dataclasses import fields
from typing import Mapping, Optional, Sequence

from benchmark import (DEFAULT_BENCH_PROMPT, REFERENCE_RUN_PROFILE, REFERENCE_RUN_TELEMETRY, GpuTelemetrySampler,
                       RecordedTelemetry, format_config_banner, run_benchmark)
from config import ENV_KEYS, ConfigError, RuntimeConfig, TokenRedactingFilter, configure_logging, get_config, load_config
from embeddings import create_embedding_provider, embed_texts
from ingest import ingest_corpus, load_corpus_dir
from llm_backend import (GenerationBackend, GenerationParams, LlamaServerBackend, OfflineAnswerBackend, ReplayBackend,
                         scripted_mock)
from rag_pipeline import CONTEXT_MARKER, CourseAssistant
from telegram_bot import CourseAssistantBot
from vector_index import IndexFormatError, VectorIndex, load_index, save_index

logger = logging.getLogger(__name__)

EMBED_BATCH_SIZE = 64


def _env_epilog() -> str:
    defaults = {f.name: f.default for f in fields(RuntimeConfig)}
    lines = ['environment variables (also read from ./.env; the environment wins):']
    for env_key, (attr, _) in ENV_KEYS.items():
        default = defaults.get(attr)
        if attr == 'telegram_token':
            shown = 'required for serve'
        elif default is None:
            shown = 'unset'
        else:
            shown = f"default {default}"
        lines.append(f"  {env_key:<22} {shown}")
    lines.append('')
    lines.append('Without BACKEND_ENDPOINT every command runs on offline mock backends.')
    return '\n'.join(lines)


def _positive_int(raw: str) -> int:
    try:
        value = int(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {raw!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def _float_at_least(raw: str, minimum: float, inclusive: bool) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {raw!r}") from None
    if not math.isfinite(value) or value < minimum or (value == minimum and not inclusive):
        bound = f">= {minimum:g}" if inclusive else f"> {minimum:g}"
        raise argparse.ArgumentTypeError(f"must be a finite number {bound}, got {raw}")
    return value


def _positive_float(raw: str) -> float:
    return _float_at_least(raw, 0.0, inclusive=False)


def _non_negative_float(raw: str) -> float:
    return _float_at_least(raw, 0.0, inclusive=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='course-assistant',
        description='Local retrieval-augmented course assistant',
        epilog=_env_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    commands = parser.add_subparsers(dest='command', required=True, metavar='COMMAND')

    ingest = commands.add_parser('ingest', help='chunk and embed a corpus directory into an index file')
    ingest.add_argument('--corpus', required=True, help='directory of .txt/.md course documents')
    ingest.add_argument('--out', default=None, help='index file to write (default: INDEX_PATH)')

    query = commands.add_parser('query', help='answer one question from the index')
    query.add_argument('--index', default=None, help='index file (default: INDEX_PATH)')
    query.add_argument('--question', required=True, help='question to answer')

    serve = commands.add_parser('serve', help='run the Telegram bot')
    serve.add_argument('--index', default=None, help='index file (default: INDEX_PATH)')

    bench = commands.add_parser('bench', help='measure TTFB and tokens per second')
    bench.add_argument('--iterations', type=_positive_int, default=5, help='number of sequential runs (default: 5)')
    bench.add_argument('--prompt', default=DEFAULT_BENCH_PROMPT, help='prompt sent on every run')
    bench.add_argument('--discard-warmup', action='store_true',
                       help='leave the first run out of the statistics')
    bench.add_argument('--replay', action='store_true',
                       help='replay the recorded RTX 4060 reference run instead of generating')
    bench.add_argument('--max-tokens', type=_positive_int, default=None,
                       help='output token cap (default: MAX_OUTPUT_TOKENS)')
    bench.add_argument('--mock-tps', type=_positive_float, default=16.0,
                       help='tokens/s of the offline mock backend (default: 16)')
    bench.add_argument('--mock-ttfb', type=_non_negative_float, default=0.1,
                       help='first-token delay of the offline mock backend in seconds (default: 0.1)')
    return parser


def create_generation_backend(config: RuntimeConfig) -> GenerationBackend:
    if config.use_mock_backend:
        logger.info("No BACKEND_ENDPOINT configured; answering with the offline mock backend")
        return OfflineAnswerBackend(CONTEXT_MARKER)
    logger.info(f"Using inference server at {config.backend_endpoint}")
    return LlamaServerBackend(config.backend_endpoint)


def open_index(path: str, config: RuntimeConfig) -> VectorIndex:
    index = load_index(path)
    if index.dim != config.embedding_dim:
        raise IndexFormatError(
            f"{path} was built with embedding dim {index.dim}, but EMBEDDING_DIM is {config.embedding_dim}"
        )
    return index


def cmd_ingest(args: argparse.Namespace, config: RuntimeConfig) -> int:
    out = args.out or config.index_path
    docs = load_corpus_dir(args.corpus)
    if not docs:
        raise FileNotFoundError(f"no .txt or .md documents found under {args.corpus}")
    chunks = ingest_corpus(docs, config)

    provider = create_embedding_provider(config)
    index = VectorIndex(provider.dim, info={
        'embedding': provider.name,
        'created_with': {
            'embedding_dim': provider.dim,
            'chunk_size': config.chunk_size_tokens,
            'chunk_overlap': config.chunk_overlap_tokens,
        },
    })
    for start in range(0, len(chunks), EMBED_BATCH_SIZE):
        batch = chunks[start:start + EMBED_BATCH_SIZE]
        for chunk, vector in zip(batch, embed_texts(provider, [c.text for c in batch])):
            index.add(chunk.chunk_id, vector, chunk.metadata())
    save_index(index, out)
    print(f"Indexed {len(chunks)} chunks from {len(docs)} documents into {out}")
    return 0


async def _answer_once(assistant: CourseAssistant, question: str) -> str:
    try:
        result = await assistant.answer(question)
    finally:
        await assistant.close()
    return result.render()


def cmd_query(args: argparse.Namespace, config: RuntimeConfig) -> int:
    if not args.question.strip():
        raise ValueError("--question must not be empty")
    index = open_index(args.index or config.index_path, config)
    assistant = CourseAssistant(index, create_embedding_provider(config), create_generation_backend(config), config)
    print(asyncio.run(_answer_once(assistant, args.question)))
    return 0


def cmd_serve(args: argparse.Namespace, config: RuntimeConfig) -> int:
    if not config.telegram_token:
        raise ConfigError("TELEGRAM_BOT_TOKEN is not set", key='TELEGRAM_BOT_TOKEN')
    index = open_index(args.index or config.index_path, config)
    assistant = CourseAssistant(index, create_embedding_provider(config), create_generation_backend(config), config)
    bot = CourseAssistantBot.from_config(config, assistant)

    async def run() -> None:
        try:
            await bot.serve(health_port=config.health_port)
        finally:
            await assistant.close()

    asyncio.run(run())
    return 0


def cmd_bench(args: argparse.Namespace, config: RuntimeConfig) -> int:
    if not args.prompt:
        raise ValueError("--prompt must not be empty")
    params = GenerationParams.from_config(config, max_tokens=args.max_tokens)

    if args.replay:
        backend: GenerationBackend = ReplayBackend(REFERENCE_RUN_PROFILE)
        telemetry = RecordedTelemetry(REFERENCE_RUN_TELEMETRY)
    elif config.use_mock_backend:
        backend = scripted_mock(args.mock_ttfb, args.mock_tps, [' tok'] * params.max_tokens)
        telemetry = GpuTelemetrySampler(config.gpu_probe_cmd, config.gpu_probe_interval_ms)
    else:
        backend = LlamaServerBackend(config.backend_endpoint)
        telemetry = GpuTelemetrySampler(config.gpu_probe_cmd, config.gpu_probe_interval_ms)

    print(format_config_banner(params), file=sys.stderr)
    print('', file=sys.stderr)
    print('== Running ==', file=sys.stderr, flush=True)

    async def run():
        try:
            return await run_benchmark(backend, args.prompt, params, args.iterations,
                                       telemetry=telemetry, discard_warmup=args.discard_warmup)
        finally:
            await backend.close()

    summary = asyncio.run(run())
    print('=== SUMMARY ===', file=sys.stderr, flush=True)
    print(summary.to_json())
    return 1 if summary.incomplete else 0


COMMANDS = {
    'ingest': cmd_ingest,
    'query': cmd_query,
    'serve': cmd_serve,
    'bench': cmd_bench,
}


def main(argv: Optional[Sequence[str]] = None, env: Optional[Mapping[str, str]] = None) -> int:
    """Run one command; returns 0 on success, 2 on usage errors, 1 on runtime failures"""
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    redactor: Optional[TokenRedactingFilter] = None
    try:
        config = get_config() if env is None else load_config(env)
        redactor = configure_logging(config)
        return COMMANDS[args.command](args, config)
    except KeyboardInterrupt:
        print("\n👋 Stopped by user", file=sys.stderr)
        return 1
    except Exception as e:
        message = ' '.join(f"{type(e).__name__}: {e}".split())
        if redactor is not None:
            message = redactor.redact(message)
        logger.debug("Command failed", exc_info=True)
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
