#!/usr/bin/env python3
"""
Course assistant Telegram bot - long polling over the Bot HTTP API
"""

from __future__ import annotations

import asyncio
import logging
import signal
import time
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, List, Optional, Tuple

import aiohttp
from aiohttp import web
from telegram.constants import MessageLimit
from telegram.error import BadRequest, InvalidToken, NetworkError, RetryAfter, TelegramError

from config import REDACTED, RuntimeConfig
from rag_pipeline import CourseAssistant

logger = logging.getLogger(__name__)

MAX_MESSAGE_CHARS = MessageLimit.MAX_TEXT_LENGTH

GREETING = (
    "Hi! I am the course assistant 🎓\n\n"
    "Ask me anything about the course material and I will answer from the "
    "slides and the textbook, listing the sources I used.\n\n"
    "Send /help for tips."
)

HELP_TEXT = (
    "Just send a question as a normal message, for example:\n"
    "  What is speedup?\n\n"
    "Each message is answered on its own; I do not remember earlier messages.\n"
    "Commands:\n"
    "  /start - introduction\n"
    "  /help - this message"
)

UNKNOWN_COMMAND = "Unknown command. Send /help to see what I can do."

APOLOGY = "❌ Sorry, something went wrong while answering your question. Please try again later."


@dataclass(frozen=True)
class IncomingMessage:
    update_id: int
    chat_id: int
    text: str
    received_at: float


@dataclass(frozen=True)
class DeliveryReceipt:
    chat_id: int
    parts: int
    message_ids: List[int] = field(default_factory=list)

    @property
    def delivered(self) -> bool:
        return len(self.message_ids) == self.parts


@dataclass
class BotState:
    next_offset: int = 0
    in_flight: asyncio.Queue = field(default_factory=asyncio.Queue)
    processed_updates: int = 0

    def advance(self, offset: int) -> None:
        if offset > self.next_offset:
            self.next_offset = offset


def _split_point(text: str, limit: int) -> int:
    for pos in range(limit - 1, 0, -1):
        if text[pos].isspace():
            return pos + 1
    return limit


def split_message(text: str, limit: int = MAX_MESSAGE_CHARS) -> List[str]:
    """
    Cut text into parts of at most `limit` characters.

    Each cut is made just after the last whitespace inside the limit; a run
    without whitespace is cut hard at the limit. Parts holding only whitespace
    are left out (Telegram rejects blank messages), so the parts concatenate
    back to the original text minus those runs.
    """
    parts = []
    rest = text
    while len(rest) > limit:
        cut = _split_point(rest, limit)
        parts.append(rest[:cut])
        rest = rest[cut:]
    if rest:
        parts.append(rest)
    return [part for part in parts if not part.isspace()]


class TelegramClient:
    """Minimal async client for getUpdates / sendMessage"""

    def __init__(self, api_base: str, token: str, session: Optional[aiohttp.ClientSession] = None,
                 backoff_base_s: float = 1.0, backoff_cap_s: float = 60.0, max_send_retries: int = 3):
        if not token:
            raise InvalidToken("TELEGRAM_BOT_TOKEN is not set")
        self.api_base = api_base.rstrip('/')
        self._token = token
        self._session = session
        self._owns_session = session is None
        self.backoff_base_s = backoff_base_s
        self.backoff_cap_s = backoff_cap_s
        self.max_send_retries = max_send_retries

    def _url(self, method: str) -> str:
        return f"{self.api_base}/bot{self._token}/{method}"

    def scrub(self, text: str) -> str:
        return text.replace(self._token, REDACTED)

    def backoff_delay(self, attempt: int) -> float:
        return min(self.backoff_cap_s, self.backoff_base_s * 2 ** attempt)

    async def _get_session(self) -> aiohttp.ClientSession:
        if self._session is None or self._session.closed:
            self._session = aiohttp.ClientSession()
            self._owns_session = True
        return self._session

    async def close(self) -> None:
        if self._owns_session and self._session is not None and not self._session.closed:
            await self._session.close()

    async def _request(self, http_method: str, method: str, timeout_s: float, **kwargs) -> Any:
        """One API call; returns `result` or raises a telegram.error exception"""
        session = await self._get_session()
        try:
            async with session.request(http_method, self._url(method),
                                       timeout=aiohttp.ClientTimeout(total=timeout_s), **kwargs) as response:
                if response.status in (401, 404):
                    raise InvalidToken(f"{method} rejected the bot token (HTTP {response.status})")
                try:
                    body = await response.json(content_type=None)
                except ValueError:
                    raise NetworkError(f"{method}: HTTP {response.status} with a non-JSON body") from None
        except (aiohttp.ClientError, asyncio.TimeoutError) as e:
            # aiohttp messages may quote the URL, which embeds the token
            raise NetworkError(self.scrub(f"{method} failed: {type(e).__name__}: {e}")) from None

        if not isinstance(body, dict):
            raise NetworkError(f"{method}: unexpected response body")
        if body.get('ok'):
            return body.get('result')

        description = self.scrub(str(body.get('description', 'no description')))
        error_code = int(body.get('error_code') or response.status)
        if error_code == 429:
            retry_after = (body.get('parameters') or {}).get('retry_after', 1)
            raise RetryAfter(int(retry_after))
        if error_code >= 500:
            raise NetworkError(f"{method}: HTTP {error_code}: {description}")
        raise BadRequest(f"{method}: HTTP {error_code}: {description}")

    async def poll_updates(self, offset: int, timeout_s: int) -> Tuple[List[IncomingMessage], int]:
        """
        Long-poll getUpdates once and return (text messages, next offset).

        Transport failures and 5xx answers are retried with exponential backoff;
        an auth failure raises InvalidToken. Updates older than `offset` or
        repeated within the batch are dropped; non-text updates are skipped but
        still move the offset forward.
        """
        attempt = 0
        while True:
            try:
                result = await self._request(
                    'GET', 'getUpdates', timeout_s + 10,
                    params={'offset': offset, 'timeout': timeout_s},
                )
                break
            except InvalidToken:
                raise
            except RetryAfter as e:
                logger.warning(f"⚠️ getUpdates rate limited; waiting {e.retry_after}s")
                await asyncio.sleep(e.retry_after)
            except TelegramError as e:
                delay = self.backoff_delay(attempt)
                attempt += 1
                logger.warning(f"⚠️ getUpdates failed (attempt {attempt}): {e}; retrying in {delay:.1f}s")
                await asyncio.sleep(delay)

        messages: List[IncomingMessage] = []
        next_offset = offset
        seen = set()
        for update in sorted(result or [], key=lambda u: u.get('update_id', -1)):
            update_id = update.get('update_id')
            if not isinstance(update_id, int) or update_id < offset or update_id in seen:
                continue
            seen.add(update_id)
            next_offset = max(next_offset, update_id + 1)

            message = update.get('message') or {}
            text = message.get('text')
            chat_id = (message.get('chat') or {}).get('id')
            if not isinstance(text, str) or not text.strip() or chat_id is None:
                logger.debug(f"Skipping non-text update {update_id}")
                continue
            messages.append(IncomingMessage(update_id, chat_id, text, time.time()))
        return messages, next_offset

    async def _send_part(self, chat_id: int, text: str) -> Optional[int]:
        retries = 0
        while True:
            try:
                result = await self._request('POST', 'sendMessage', 30, json={'chat_id': chat_id, 'text': text})
                return (result or {}).get('message_id')
            except InvalidToken:
                raise
            except BadRequest as e:
                logger.error(f"❌ sendMessage to chat {chat_id} rejected, dropping message: {e}")
                return None
            except RetryAfter as e:
                if retries >= self.max_send_retries:
                    logger.error(f"❌ Still rate limited after {retries} retries, dropping message to chat {chat_id}")
                    return None
                retries += 1
                logger.warning(f"⚠️ Rate limited; retrying in {e.retry_after}s")
                await asyncio.sleep(e.retry_after)
            except TelegramError as e:
                if retries >= self.max_send_retries:
                    logger.error(f"❌ sendMessage failed after {retries} retries, dropping message to chat {chat_id}: {e}")
                    return None
                delay = self.backoff_delay(retries)
                retries += 1
                logger.warning(f"⚠️ sendMessage failed ({e}); retry {retries} in {delay:.1f}s")
                await asyncio.sleep(delay)

    async def send_reply(self, chat_id: int, text: str) -> DeliveryReceipt:
        """Send text, split into parts of at most 4096 characters"""
        if not text.strip():
            raise ValueError("reply text must not be blank")
        parts = split_message(text)
        message_ids: List[int] = []
        for part in parts:
            message_id = await self._send_part(chat_id, part)
            if message_id is None:
                break
            message_ids.append(message_id)
        return DeliveryReceipt(chat_id=chat_id, parts=len(parts), message_ids=message_ids)


class CourseAssistantBot:
    """One polling task feeding a FIFO queue, one worker answering from it"""

    def __init__(self, client: TelegramClient, assistant: CourseAssistant,
                 poll_timeout_s: int = 30, error_backoff_s: float = 5.0):
        self.client = client
        self.assistant = assistant
        self.poll_timeout_s = poll_timeout_s
        self.error_backoff_s = error_backoff_s
        self.state = BotState()
        self.running = False
        self._stop_event: Optional[asyncio.Event] = None
        self._busy = False
        self._fatal: Optional[BaseException] = None

    @classmethod
    def from_config(cls, config: RuntimeConfig, assistant: CourseAssistant) -> 'CourseAssistantBot':
        client = TelegramClient(config.telegram_api_base, config.telegram_token or '')
        return cls(client, assistant, poll_timeout_s=config.poll_timeout_s)

    def stop(self) -> None:
        if self._stop_event is not None and not self._stop_event.is_set():
            logger.info("Stop requested")
            self._stop_event.set()

    async def _poll_loop(self) -> None:
        while not self._stop_event.is_set():
            try:
                messages, offset = await self.client.poll_updates(self.state.next_offset, self.poll_timeout_s)
            except InvalidToken as e:
                logger.error(f"❌ {e}")
                self._fatal = e
                self.stop()
                return
            except Exception as e:
                logger.exception(f"❌ Polling error: {self.client.scrub(str(e))}")
                logger.info("Bot will continue running after error...")
                await asyncio.sleep(self.error_backoff_s)
                continue
            for message in messages:
                if message.update_id >= self.state.next_offset:
                    self.state.in_flight.put_nowait(message)
            self.state.advance(offset)

    async def _reply_text(self, message: IncomingMessage) -> str:
        text = message.text.strip()
        if text.startswith('/'):
            command = text.split()[0].split('@')[0].lower()
            if command == '/start':
                return GREETING
            if command == '/help':
                return HELP_TEXT
            return UNKNOWN_COMMAND
        try:
            result = await self.assistant.answer(text)
        except Exception:
            logger.exception(f"❌ Failed to answer update {message.update_id} from chat {message.chat_id}")
            return APOLOGY
        return result.render()

    async def handle_message(self, message: IncomingMessage) -> Optional[DeliveryReceipt]:
        logger.info(f"Received message from chat {message.chat_id}: {message.text[:50]}")
        reply = await self._reply_text(message)
        try:
            return await self.client.send_reply(message.chat_id, reply)
        except InvalidToken as e:
            logger.error(f"❌ {e}")
            self._fatal = e
            self.stop()
        except Exception as e:
            logger.exception(f"❌ Failed to reply to chat {message.chat_id}: {self.client.scrub(str(e))}")
        finally:
            self.state.processed_updates += 1
        return None

    async def _worker_loop(self) -> None:
        queue = self.state.in_flight
        while not self._stop_event.is_set():
            message = await queue.get()
            self._busy = True
            try:
                await self.handle_message(message)
            finally:
                self._busy = False
                queue.task_done()

    async def health_check(self, request: web.Request) -> web.Response:
        """Health check endpoint for container probes"""
        try:
            return web.json_response({
                'status': 'healthy' if self.running else 'stopped',
                'bot_running': self.running,
                'queue_depth': self.state.in_flight.qsize(),
                'processed_updates': self.state.processed_updates,
                'index_entries': len(self.assistant.index),
                'timestamp': datetime.now().isoformat(),
            })
        except Exception as e:
            return web.json_response({
                'status': 'unhealthy',
                'error': str(e),
                'timestamp': datetime.now().isoformat(),
            }, status=500)

    def _install_signal_handlers(self) -> List[int]:
        loop = asyncio.get_running_loop()
        installed = []
        for signum in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(signum, self.stop)
                installed.append(signum)
            except (NotImplementedError, RuntimeError):
                pass
        return installed

    async def serve(self, health_port: int = 0, handle_signals: bool = True) -> None:
        """
        Poll and answer until stop() (or SIGINT/SIGTERM) is received.

        On shutdown polling stops at once, the worker finishes the message it is
        answering, and messages still queued are dropped.
        """
        self._stop_event = asyncio.Event()
        self._fatal = None
        signals = self._install_signal_handlers() if handle_signals else []
        http_runner = await start_http_server(self, health_port) if health_port else None

        logger.info("🚀 Starting course assistant bot...")
        logger.info(f"Bot is ready to receive updates! ({len(self.assistant.index)} indexed chunks)")
        self.running = True
        poller = asyncio.create_task(self._poll_loop())
        worker = asyncio.create_task(self._worker_loop())
        try:
            await self._stop_event.wait()
        finally:
            self.running = False
            poller.cancel()
            if not self._busy:
                worker.cancel()
            await asyncio.gather(poller, worker, return_exceptions=True)

            dropped = self.state.in_flight.qsize()
            if dropped:
                logger.warning(f"⚠️ Dropping {dropped} queued messages at shutdown")
            if http_runner is not None:
                await http_runner.cleanup()
            loop = asyncio.get_running_loop()
            for signum in signals:
                loop.remove_signal_handler(signum)
            await self.client.close()
            logger.info("👋 Bot stopped")

        if self._fatal is not None:
            raise self._fatal


def create_health_app(bot: CourseAssistantBot) -> web.Application:
    app = web.Application()
    app.router.add_get('/health', bot.health_check)
    return app


async def start_http_server(bot: CourseAssistantBot, port: int, host: str = '0.0.0.0') -> web.AppRunner:
    """Start HTTP server for health checks"""
    runner = web.AppRunner(create_health_app(bot))
    await runner.setup()
    site = web.TCPSite(runner, host, port)
    await site.start()
    logger.info(f"🌐 HTTP server started on port {port}")
    return runner
