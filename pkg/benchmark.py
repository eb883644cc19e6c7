"""
Inference benchmark harness.

Runs the same prompt N times through a generation backend, prints one progress
line per iteration and aggregates TTFB, generation TPS and total latency into a
summary JSON. GPU utilization and memory can be sampled alongside the run
through an external probe command (nvidia-smi by default).
"""

from __future__ import annotations

import asyncio
import json
import logging
import shlex
import sys
from dataclasses import dataclass, field
from typing import Any, AsyncIterator, Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from llm_backend import GenerationError, GenerationBackend, GenerationParams, GenerationResult, ReplayIteration, generate

logger = logging.getLogger(__name__)

PROMPT_DISPLAY_CHARS = 80
P95_METHOD = 'linear'
STAT_DIGITS = 3

DEFAULT_BENCH_PROMPT = (
    "In one paragraph, explain what GPU offloading does in llama.cpp and why it speeds up inference."
)

# Five iterations recorded on an RTX 4060 laptop GPU
# (mistral-7b-instruct Q4_K_M, n_ctx=768, n_batch=256, 20 offloaded layers, flash attention)
REFERENCE_RUN_PROFILE: Tuple[ReplayIteration, ...] = (
    ReplayIteration(ttfb_s=0.350, gen_tps=16.99, completion_tokens=117, prompt_tokens=23),
    ReplayIteration(ttfb_s=0.067, gen_tps=16.27, completion_tokens=111, prompt_tokens=1),
    ReplayIteration(ttfb_s=0.062, gen_tps=15.61, completion_tokens=107, prompt_tokens=1),
    ReplayIteration(ttfb_s=0.062, gen_tps=16.12, completion_tokens=108, prompt_tokens=1),
    ReplayIteration(ttfb_s=0.065, gen_tps=16.05, completion_tokens=109, prompt_tokens=1),
)


class BenchmarkAborted(Exception):
    """No iteration completed"""


@dataclass(frozen=True)
class IterationMetrics:
    ttfb_s: float
    gen_tps: float
    total_latency_s: float
    completion_tokens: int
    prompt_tokens: int

    @classmethod
    def from_result(cls, result: GenerationResult) -> 'IterationMetrics':
        return cls(
            ttfb_s=result.ttfb_s,
            gen_tps=result.gen_tps,
            total_latency_s=result.total_duration_s,
            completion_tokens=result.completion_tokens,
            prompt_tokens=result.prompt_tokens,
        )

    @property
    def total_tps(self) -> float:
        if self.total_latency_s <= 0:
            return 0.0
        return (self.prompt_tokens + self.completion_tokens) / self.total_latency_s

    def progress_line(self, position: int, iterations: int) -> str:
        return (
            f"[{position}/{iterations}] TTFB={self.ttfb_s:.3f}s | gen_tps={self.gen_tps:.2f} | "
            f"total={self.total_latency_s:.2f}s | comp_tok~{self.completion_tokens}"
        )


@dataclass(frozen=True)
class SummaryStats:
    mean: float
    median: float
    p95: float
    min: float
    max: float

    def to_dict(self, digits: int = STAT_DIGITS) -> Dict[str, float]:
        return {
            'mean': round(self.mean, digits),
            'median': round(self.median, digits),
            'p95': round(self.p95, digits),
            'min': round(self.min, digits),
            'max': round(self.max, digits),
        }


def summarize(samples: Sequence[float]) -> SummaryStats:
    """mean / median / p95 (linear interpolation) / min / max of a sample list"""
    values = np.asarray(list(samples), dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot summarize an empty sample list")
    if not np.all(np.isfinite(values)):
        raise ValueError("samples must be finite")
    lowest = float(values.min())
    highest = float(values.max())
    # float summation can land a hair outside [min, max] for near-equal samples
    mean = min(max(float(np.mean(values)), lowest), highest)
    return SummaryStats(
        mean=mean,
        median=float(np.median(values)),
        p95=float(np.percentile(values, 95, method=P95_METHOD)),
        min=lowest,
        max=highest,
    )


def estimate_total_latency(ttfb_s: float, n_out: int, r_gen: float) -> float:
    """T_total ~ TTFB + N_out / R_gen"""
    if r_gen <= 0:
        raise ValueError(f"generation rate must be positive, got {r_gen}")
    if n_out < 0:
        raise ValueError(f"output token count must not be negative, got {n_out}")
    return ttfb_s + n_out / r_gen


@dataclass(frozen=True)
class GpuStats:
    util_mean: float
    util_max: float
    mem_mean: float
    mem_max: float

    @staticmethod
    def _number(value: float) -> float | int:
        return int(value) if float(value).is_integer() else value

    def to_dict(self) -> Dict[str, Dict[str, float | int]]:
        return {
            'gpu_util_sm_pct': {'mean': round(self.util_mean, 1), 'max': self._number(self.util_max)},
            'gpu_mem_mb': {'mean': round(self.mem_mean, 1), 'max': self._number(self.mem_max)},
        }

    @classmethod
    def from_samples(cls, samples: Sequence[Tuple[float, float]]) -> Optional['GpuStats']:
        if not samples:
            return None
        data = np.asarray(samples, dtype=np.float64)
        return cls(
            util_mean=float(data[:, 0].mean()),
            util_max=float(data[:, 0].max()),
            mem_mean=float(data[:, 1].mean()),
            mem_max=float(data[:, 1].max()),
        )


class ProbeOutputError(ValueError):
    pass


def parse_probe_output(output: str) -> Tuple[float, float]:
    """First non-empty line of `util, mem` CSV (one line per GPU)"""
    for line in output.splitlines():
        if not line.strip():
            continue
        parts = [part.strip() for part in line.split(',')]
        if len(parts) != 2:
            raise ProbeOutputError(f"expected 'util, mem', got {line.strip()!r}")
        try:
            return float(parts[0]), float(parts[1])
        except ValueError:
            raise ProbeOutputError(f"non-numeric probe output {line.strip()!r}") from None
    raise ProbeOutputError("probe produced no output")


async def _run_probe(argv: List[str]) -> str:
    process = await asyncio.create_subprocess_exec(
        *argv, stdout=asyncio.subprocess.PIPE, stderr=asyncio.subprocess.PIPE,
    )
    try:
        stdout, stderr = await process.communicate()
    except asyncio.CancelledError:
        if process.returncode is None:
            process.kill()
            await process.wait()
        raise
    if process.returncode != 0:
        raise ProbeOutputError(
            f"probe exited with {process.returncode}: {stderr.decode(errors='replace').strip()[:200]}"
        )
    return stdout.decode(errors='replace')


async def sample_gpu_telemetry(probe_command: str, interval_ms: int) -> AsyncIterator[Tuple[float, float]]:
    """
    Poll the probe every interval_ms and yield (util_sm_pct, mem_mb).

    Raises FileNotFoundError if the probe is not installed and
    ProbeOutputError if its output cannot be read.
    """
    argv = shlex.split(probe_command)
    if not argv:
        raise FileNotFoundError("empty probe command")
    interval = interval_ms / 1000.0
    while True:
        yield parse_probe_output(await _run_probe(argv))
        await asyncio.sleep(interval)


class GpuTelemetrySampler:
    """Runs sample_gpu_telemetry as a background task for the duration of a benchmark"""

    def __init__(self, probe_command: str, interval_ms: int = 500):
        if interval_ms <= 0:
            raise ValueError(f"interval_ms must be positive, got {interval_ms}")
        self.probe_command = probe_command
        self.interval_ms = interval_ms
        self.samples: List[Tuple[float, float]] = []
        self.disabled_reason: Optional[str] = None
        self._task: Optional[asyncio.Task] = None

    async def _collect(self) -> None:
        try:
            async for sample in sample_gpu_telemetry(self.probe_command, self.interval_ms):
                self.samples.append(sample)
        except FileNotFoundError:
            self.disabled_reason = 'probe not installed'
            logger.info(f"GPU probe {self.probe_command!r} not found; telemetry omitted")
        except (OSError, ValueError) as e:
            self.disabled_reason = str(e) or type(e).__name__
            logger.warning(f"⚠️ GPU telemetry disabled: {e}")

    async def start(self) -> None:
        self._task = asyncio.create_task(self._collect())
        await asyncio.sleep(0)

    async def stop(self) -> Optional[GpuStats]:
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass
            self._task = None
        if self.disabled_reason is not None:
            return None
        return GpuStats.from_samples(self.samples)


class RecordedTelemetry:
    """Telemetry source that reports fixed, previously recorded statistics"""

    def __init__(self, stats: Optional[GpuStats]):
        self.stats = stats

    async def start(self) -> None:
        pass

    async def stop(self) -> Optional[GpuStats]:
        return self.stats


REFERENCE_RUN_TELEMETRY = GpuStats(util_mean=21.5, util_max=23, mem_mean=2903.9, mem_max=2904)


def display_prompt(prompt: str) -> str:
    if len(prompt) <= PROMPT_DISPLAY_CHARS:
        return prompt
    return prompt[:PROMPT_DISPLAY_CHARS] + '…'


@dataclass
class BenchmarkSummary:
    model: str
    n_ctx: int
    n_batch: int
    n_gpu_layers: int
    flash_attn: bool
    prompt: str
    iterations: int
    metrics: Dict[str, SummaryStats]
    total_tps: SummaryStats
    gpu: Optional[GpuStats] = None
    per_iteration: List[IterationMetrics] = field(default_factory=list)
    discarded_warmup: bool = False
    incomplete: bool = False
    requested_iterations: Optional[int] = None
    error: Optional[str] = None

    def to_json_dict(self) -> Dict[str, Any]:
        metrics: Dict[str, Any] = {name: stats.to_dict() for name, stats in self.metrics.items()}
        if self.gpu is not None:
            metrics.update(self.gpu.to_dict())
        data: Dict[str, Any] = {
            'model': self.model,
            'n_ctx': self.n_ctx,
            'n_batch': self.n_batch,
            'n_gpu_layers': self.n_gpu_layers,
            'flash_attn': self.flash_attn,
            'prompt': self.prompt,
            'iterations': self.iterations,
            'metrics': metrics,
            'total_tps': self.total_tps.to_dict(),
            'p95_method': P95_METHOD,
        }
        if self.discarded_warmup:
            data['discarded_warmup'] = True
        if self.incomplete:
            data['incomplete'] = True
            data['requested_iterations'] = self.requested_iterations
            data['error'] = self.error
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent='\t')


def build_summary(runs: List[IterationMetrics], params: GenerationParams, prompt: str,
                  discard_warmup: bool = False, gpu: Optional[GpuStats] = None) -> BenchmarkSummary:
    if not runs:
        raise ValueError("no iterations to summarize")
    measured = runs
    discarded = False
    if discard_warmup:
        if len(runs) > 1:
            measured = runs[1:]
            discarded = True
        else:
            logger.warning("⚠️ Only one iteration ran; keeping it despite --discard-warmup")
    return BenchmarkSummary(
        model=params.model_path,
        n_ctx=params.n_ctx,
        n_batch=params.n_batch,
        n_gpu_layers=params.n_gpu_layers,
        flash_attn=params.flash_attn,
        prompt=display_prompt(prompt),
        iterations=len(runs),
        metrics={
            'ttfb_s': summarize([run.ttfb_s for run in measured]),
            'gen_tps': summarize([run.gen_tps for run in measured]),
            'total_latency_s': summarize([run.total_latency_s for run in measured]),
        },
        total_tps=summarize([run.total_tps for run in measured]),
        gpu=gpu,
        per_iteration=list(runs),
        discarded_warmup=discarded,
    )


async def run_benchmark(backend: GenerationBackend, prompt: str, params: GenerationParams,
                        iterations: int, telemetry=None, discard_warmup: bool = False,
                        progress: Optional[TextIO] = None) -> BenchmarkSummary:
    """
    Run `iterations` sequential generations and summarize them.

    telemetry is anything with async start() / stop() -> Optional[GpuStats]
    (GpuTelemetrySampler or RecordedTelemetry). A generation error ends the run
    early: the iterations completed so far are summarized and the summary is
    marked incomplete. BenchmarkAborted is raised if none completed.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be at least 1, got {iterations}")
    out = progress if progress is not None else sys.stderr

    runs: List[IterationMetrics] = []
    failure: Optional[GenerationError] = None
    if telemetry is not None:
        await telemetry.start()
    try:
        for position in range(1, iterations + 1):
            try:
                result = await generate(backend, prompt, params)
            except GenerationError as e:
                logger.error(f"❌ Iteration {position}/{iterations} failed: {e}")
                failure = e
                break
            run = IterationMetrics.from_result(result)
            runs.append(run)
            print(run.progress_line(position, iterations), file=out, flush=True)
    finally:
        gpu = await telemetry.stop() if telemetry is not None else None

    if not runs:
        raise BenchmarkAborted(f"no iteration completed: {failure}") from failure

    summary = build_summary(runs, params, prompt, discard_warmup=discard_warmup, gpu=gpu)
    if failure is not None:
        summary.incomplete = True
        summary.requested_iterations = iterations
        summary.error = str(failure)
    return summary


def format_config_banner(params: GenerationParams) -> str:
    return '\n'.join([
        '== LLM config ==',
        f"model={params.model_path}",
        f"n_ctx={params.n_ctx}  n_batch={params.n_batch}  n_gpu_layers={params.n_gpu_layers}  "
        f"flash_attn={params.flash_attn}  tensor_split={params.tensor_split}",
    ])
