"""
Chunking and metadata indexing of course documents.

Documents arrive as pre-extracted UTF-8 text. Each is cut into overlapping
windows sized with the 4-characters-per-token estimate, with boundaries snapped
back to whitespace so no word is split when a space is available.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

from config import RuntimeConfig

logger = logging.getLogger(__name__)

CHARS_PER_TOKEN = 4
CORPUS_SUFFIXES = ('.txt', '.md')


class ChunkingError(ValueError):
    pass


@dataclass(frozen=True)
class SourceDocument:
    doc_id: str
    title: str
    text: str
    origin: str


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    seq: int
    text: str
    token_estimate: int
    char_span: Tuple[int, int]
    origin: str = ''

    def metadata(self) -> dict:
        """Metadata stored alongside the chunk's vector"""
        return {
            'doc_id': self.doc_id,
            'origin': self.origin,
            'seq': self.seq,
            'char_span': [self.char_span[0], self.char_span[1]],
            'text': self.text,
        }


def estimate_tokens(text: str) -> int:
    """ceil(len(text) / 4); the same estimate is used for every token budget"""
    return math.ceil(len(text) / CHARS_PER_TOKEN)


def _is_boundary(text: str, pos: int) -> bool:
    # splitting at pos does not cut through a word
    return text[pos - 1].isspace() or text[pos].isspace()


def _last_boundary(text: str, low: int, high: int) -> Optional[int]:
    for pos in range(high, low - 1, -1):
        if _is_boundary(text, pos):
            return pos
    return None


def _first_boundary(text: str, low: int, high: int) -> Optional[int]:
    for pos in range(low, high + 1):
        if _is_boundary(text, pos):
            return pos
    return None


def _window_end(text: str, start: int, prev_end: int, window_chars: int) -> int:
    if len(text) - start <= window_chars:
        return len(text)
    hard_end = start + window_chars
    # the end always moves past the previous chunk's end
    snapped = _last_boundary(text, max(start + 2, prev_end + 1), hard_end)
    return snapped if snapped is not None else hard_end


def _next_start(text: str, start: int, end: int, overlap_chars: int) -> int:
    if overlap_chars == 0:
        return end
    target = end - overlap_chars
    snapped = _last_boundary(text, start + 1, min(target, end - 1))
    if snapped is not None:
        return snapped
    snapped = _first_boundary(text, max(target, start + 1), end - 1)
    if snapped is not None:
        return snapped
    return max(start + 1, min(target, end - 1))


def chunk_document(doc: SourceDocument, chunk_size_tokens: int, overlap_tokens: int) -> List[Chunk]:
    """
    Split a document into overlapping chunks.

    Windows hold at most chunk_size_tokens estimated tokens. Consecutive chunks
    share roughly overlap_tokens tokens; exact offsets move back to the nearest
    whitespace boundary. The char spans cover the whole text in order.
    """
    if chunk_size_tokens <= 0:
        raise ChunkingError(f"chunk size must be positive, got {chunk_size_tokens}")
    if not 0 <= overlap_tokens < chunk_size_tokens:
        raise ChunkingError(
            f"overlap ({overlap_tokens}) must be in [0, chunk size ({chunk_size_tokens}))"
        )
    if not doc.text:
        raise ChunkingError(f"document {doc.doc_id!r} has no text")

    text = doc.text
    window_chars = chunk_size_tokens * CHARS_PER_TOKEN
    overlap_chars = overlap_tokens * CHARS_PER_TOKEN

    chunks: List[Chunk] = []
    start = end = 0
    while True:
        end = _window_end(text, start, end, window_chars)
        piece = text[start:end]
        seq = len(chunks)
        chunks.append(Chunk(
            chunk_id=f"{doc.doc_id}#{seq}",
            doc_id=doc.doc_id,
            seq=seq,
            text=piece,
            token_estimate=estimate_tokens(piece),
            char_span=(start, end),
            origin=doc.origin,
        ))
        if end == len(text):
            return chunks
        start = _next_start(text, start, end, overlap_chars)


def ingest_corpus(docs: List[SourceDocument], config: RuntimeConfig) -> List[Chunk]:
    """Chunk every document in input order"""
    seen = set()
    for doc in docs:
        if doc.doc_id in seen:
            raise ChunkingError(f"duplicate doc_id {doc.doc_id!r}")
        seen.add(doc.doc_id)

    chunks: List[Chunk] = []
    for doc in docs:
        doc_chunks = chunk_document(doc, config.chunk_size_tokens, config.chunk_overlap_tokens)
        logger.debug(f"{doc.origin}: {len(doc_chunks)} chunks")
        chunks.extend(doc_chunks)
    return chunks


def load_corpus_dir(corpus_dir: str | Path) -> List[SourceDocument]:
    """Read every .txt/.md file under corpus_dir as one SourceDocument"""
    root = Path(corpus_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {root}")

    docs: List[SourceDocument] = []
    for path in sorted(p for p in root.rglob('*') if p.is_file() and p.suffix.lower() in CORPUS_SUFFIXES):
        text = path.read_text(encoding='utf-8')
        relative = path.relative_to(root).as_posix()
        if not text.strip():
            logger.warning(f"⚠️ Skipping empty document {relative}")
            continue
        docs.append(SourceDocument(doc_id=relative, title=path.stem, text=text, origin=relative))

    logger.info(f"Loaded {len(docs)} documents from {root}")
    return docs
