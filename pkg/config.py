from __future__ import annotations

import io
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional

from dotenv import dotenv_values

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
REDACTED = '***'

_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off'}


class ConfigError(ValueError):
    """Raised when a configuration value is malformed or inconsistent"""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


def _parse_int(key: str, raw: str) -> int:
    try:
        return int(raw.strip())
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {raw!r}", key=key) from None


def _parse_float(key: str, raw: str) -> float:
    try:
        return float(raw.strip())
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {raw!r}", key=key) from None


def _parse_bool(key: str, raw: str) -> bool:
    value = raw.strip().lower()
    if value in _TRUE:
        return True
    if value in _FALSE:
        return False
    raise ConfigError(f"{key} must be a boolean (1/0, true/false), got {raw!r}", key=key)


def _parse_str(key: str, raw: str) -> str:
    return raw.strip()


def _parse_optional_str(key: str, raw: str) -> Optional[str]:
    return raw.strip() or None


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return '1' if value else '0'
    if value is None:
        return ''
    return str(value)


@dataclass(frozen=True)
class RuntimeConfig:
    """Immutable runtime parameters of the course assistant"""

    # Model / inference server passthrough
    model_path: str = '/models/mistral-7b-instruct-v0.1.Q4_K_M.gguf'
    n_ctx: int = 768
    n_batch: int = 256
    n_gpu_layers: int = 20
    flash_attn: bool = True
    tensor_split: float = 0.85
    backend_endpoint: Optional[str] = None

    # Generation
    max_output_tokens: int = 128
    temperature: float = 0.2

    # Knowledge base
    embedding_dim: int = 384
    embedding_endpoint: Optional[str] = None
    top_k: int = 4
    chunk_size_tokens: int = 512
    chunk_overlap_tokens: int = 64
    index_path: str = 'knowledge_base.idx'

    # Telegram Bot Configuration
    telegram_token: Optional[str] = field(default=None, repr=False)
    telegram_api_base: str = 'https://api.telegram.org'
    poll_timeout_s: int = 30
    health_port: int = 8081

    # Benchmark telemetry
    gpu_probe_cmd: str = 'nvidia-smi --query-gpu=utilization.gpu,memory.used --format=csv,noheader,nounits'
    gpu_probe_interval_ms: int = 500

    log_level: str = 'INFO'

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = {
            'N_CTX': self.n_ctx,
            'N_BATCH': self.n_batch,
            'EMBEDDING_DIM': self.embedding_dim,
            'TOP_K': self.top_k,
            'CHUNK_SIZE': self.chunk_size_tokens,
            'MAX_OUTPUT_TOKENS': self.max_output_tokens,
            'GPU_PROBE_INTERVAL_MS': self.gpu_probe_interval_ms,
        }
        for key, value in positive.items():
            if value <= 0:
                raise ConfigError(f"{key} must be positive, got {value}", key=key)
        non_negative = {
            'N_GPU_LAYERS': self.n_gpu_layers,
            'CHUNK_OVERLAP': self.chunk_overlap_tokens,
            'POLL_TIMEOUT_S': self.poll_timeout_s,
            'HEALTH_PORT': self.health_port,
        }
        for key, value in non_negative.items():
            if value < 0:
                raise ConfigError(f"{key} must not be negative, got {value}", key=key)
        if self.embedding_dim < 2:
            raise ConfigError("EMBEDDING_DIM must be at least 2", key='EMBEDDING_DIM')
        if not 0.0 <= self.tensor_split <= 1.0:
            raise ConfigError(f"TENSOR_SPLIT must lie in [0, 1], got {self.tensor_split}", key='TENSOR_SPLIT')
        if self.temperature < 0:
            raise ConfigError(f"TEMPERATURE must not be negative, got {self.temperature}", key='TEMPERATURE')
        if self.chunk_overlap_tokens >= self.chunk_size_tokens:
            raise ConfigError(
                f"CHUNK_OVERLAP ({self.chunk_overlap_tokens}) must be smaller than "
                f"CHUNK_SIZE ({self.chunk_size_tokens})",
                key='CHUNK_OVERLAP',
            )
        if self.max_output_tokens >= self.n_ctx:
            raise ConfigError(
                f"MAX_OUTPUT_TOKENS ({self.max_output_tokens}) must be smaller than N_CTX ({self.n_ctx})",
                key='MAX_OUTPUT_TOKENS',
            )

    @property
    def effective_embedding_endpoint(self) -> Optional[str]:
        return self.embedding_endpoint or self.backend_endpoint

    @property
    def use_mock_backend(self) -> bool:
        return not self.backend_endpoint

    def to_dict(self) -> Dict[str, Any]:
        """Plain dict view with the bot token redacted"""
        data = asdict(self)
        if data['telegram_token']:
            data['telegram_token'] = REDACTED
        return data

    def to_dotenv(self) -> str:
        """Serialize as `.env` text; the bot token is never written"""
        lines = []
        for env_key, (attr, _) in ENV_KEYS.items():
            if attr == 'telegram_token':
                continue
            lines.append(f"{env_key}={_format_value(getattr(self, attr))}")
        return '\n'.join(lines) + '\n'


# Environment variable -> (RuntimeConfig attribute, parser)
ENV_KEYS: Dict[str, tuple] = {
    'MODEL_PATH': ('model_path', _parse_str),
    'N_CTX': ('n_ctx', _parse_int),
    'N_BATCH': ('n_batch', _parse_int),
    'N_GPU_LAYERS': ('n_gpu_layers', _parse_int),
    'FLASH_ATTN': ('flash_attn', _parse_bool),
    'TENSOR_SPLIT': ('tensor_split', _parse_float),
    'BACKEND_ENDPOINT': ('backend_endpoint', _parse_optional_str),
    'MAX_OUTPUT_TOKENS': ('max_output_tokens', _parse_int),
    'TEMPERATURE': ('temperature', _parse_float),
    'EMBEDDING_DIM': ('embedding_dim', _parse_int),
    'EMBEDDING_ENDPOINT': ('embedding_endpoint', _parse_optional_str),
    'TOP_K': ('top_k', _parse_int),
    'CHUNK_SIZE': ('chunk_size_tokens', _parse_int),
    'CHUNK_OVERLAP': ('chunk_overlap_tokens', _parse_int),
    'INDEX_PATH': ('index_path', _parse_str),
    'TELEGRAM_BOT_TOKEN': ('telegram_token', _parse_optional_str),
    'TELEGRAM_API_BASE': ('telegram_api_base', _parse_str),
    'POLL_TIMEOUT_S': ('poll_timeout_s', _parse_int),
    'HEALTH_PORT': ('health_port', _parse_int),
    'GPU_PROBE_CMD': ('gpu_probe_cmd', _parse_str),
    'GPU_PROBE_INTERVAL_MS': ('gpu_probe_interval_ms', _parse_int),
    'LOG_LEVEL': ('log_level', _parse_str),
}


def parse_dotenv(dotenv_text: Optional[str]) -> Dict[str, str]:
    if not dotenv_text:
        return {}
    values = dotenv_values(stream=io.StringIO(dotenv_text))
    return {key: value for key, value in values.items() if value is not None}


def load_config(env_source: Optional[Mapping[str, str]] = None,
                dotenv_text: Optional[str] = None) -> RuntimeConfig:
    """
    Build a RuntimeConfig from environment variables and optional `.env` text.

    Environment values override `.env` entries; keys absent from both take the
    RuntimeConfig defaults. Unknown keys are ignored.
    """
    merged: Dict[str, str] = dict(parse_dotenv(dotenv_text))
    merged.update(env_source or {})

    kwargs: Dict[str, Any] = {}
    for env_key, (attr, parser) in ENV_KEYS.items():
        raw = merged.get(env_key)
        if raw is None:
            continue
        if raw.strip() == '' and parser not in (_parse_optional_str, _parse_str):
            continue
        kwargs[attr] = parser(env_key, raw)

    if 'log_level' in kwargs:
        kwargs['log_level'] = kwargs['log_level'].upper() or 'INFO'
    return RuntimeConfig(**kwargs)


def get_config(env_file: str = '.env') -> RuntimeConfig:
    """Load configuration from the process environment and ./.env"""
    path = Path(env_file)
    dotenv_text = None
    if path.is_file():
        dotenv_text = path.read_text(encoding='utf-8')
        logger.debug(f"Loaded settings file {path}")
    return load_config(dict(os.environ), dotenv_text)


class TokenRedactingFilter(logging.Filter):
    """Replaces secret values in log messages and exception text"""

    def __init__(self, secrets: Callable[[], list] | list):
        super().__init__()
        self._secrets = secrets

    def _current_secrets(self) -> list:
        secrets = self._secrets() if callable(self._secrets) else self._secrets
        return [s for s in secrets if s]

    def redact(self, text: str) -> str:
        for secret in self._current_secrets():
            text = text.replace(secret, REDACTED)
        return text

    def filter(self, record: logging.LogRecord) -> bool:
        secrets = self._current_secrets()
        if not secrets:
            return True
        message = record.getMessage()
        redacted = self.redact(message)
        if redacted != message:
            record.msg = redacted
            record.args = None
        if record.exc_info:
            if not record.exc_text:
                record.exc_text = logging.Formatter().formatException(record.exc_info)
            record.exc_text = self.redact(record.exc_text)
        return True


def configure_logging(config: RuntimeConfig) -> TokenRedactingFilter:
    """Configure root logging on stderr and install token redaction"""
    logging.basicConfig(format=LOG_FORMAT, level=getattr(logging, config.log_level, logging.INFO))
    redactor = TokenRedactingFilter([config.telegram_token] if config.telegram_token else [])
    for handler in logging.getLogger().handlers:
        handler.addFilter(redactor)
    return redactor