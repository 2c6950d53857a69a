"""Throughput and latency benchmarking of the detection pipeline."""

from __future__ import annotations

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset_io import Image, read_ppm
from .errors import TsrkitError
from .nn.network import Network
from .pipeline import PreprocessConfig, Thresholds, run_detection


class EmptySource(TsrkitError):
    pass


@dataclass(frozen=True)
class BenchReport:
    model: str
    host: str
    threads: int
    frames: int
    wall_s: float
    fps: float
    p50_ms: float
    p90_ms: float
    p99_ms: float

    @classmethod
    def from_latencies(cls, latencies_s: Sequence[float], wall_s: float, model: str = "",
                       host: str = "", threads: int = 1) -> "BenchReport":
        """Summarize per-frame latencies; percentiles use linear interpolation between ranks."""
        if len(latencies_s) == 0:
            raise EmptySource("no timed frames")
        if wall_s <= 0:
            raise ValueError("wall time must be positive")
        ms = np.asarray(latencies_s, dtype=np.float64) * 1000.0
        p50, p90, p99 = (float(v) for v in np.percentile(ms, [50, 90, 99]))
        return cls(model, host, threads, len(ms), float(wall_s), len(ms) / wall_s, p50, p90, p99)

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def benchmark_fps(model: Network, frames: Sequence[Image | str | Path], warmup: int = 10,
                  threads: int = 1, config: PreprocessConfig | None = None,
                  thresholds: Thresholds | None = None, host: str = "",
                  include_decode: bool = False) -> BenchReport:
    """Time ``run_detection`` over every frame after ``warmup`` untimed runs.

    Paths are decoded up front unless ``include_decode`` is set, in which case
    decoding is part of each frame's latency.
    """
    if len(frames) == 0:
        raise EmptySource("frame source is empty")
    if threads < 1:
        raise ValueError("threads must be >= 1")
    if not include_decode:
        frames = [f if isinstance(f, Image) else read_ppm(f) for f in frames]

    def one(frame) -> float:
        t0 = time.perf_counter()
        image = frame if isinstance(frame, Image) else read_ppm(frame)
        run_detection(image, model, config, thresholds)
        return time.perf_counter() - t0

    for i in range(warmup):
        one(frames[i % len(frames)])

    latencies: list[float] = []
    lock = threading.Lock()

    def timed(frame) -> None:
        dt = one(frame)
        with lock:
            latencies.append(dt)

    start = time.perf_counter()
    if threads == 1:
        for f in frames:
            timed(f)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(timed, frames))
    wall = time.perf_counter() - start
    return BenchReport.from_latencies(latencies, wall, model.name, host, threads)
