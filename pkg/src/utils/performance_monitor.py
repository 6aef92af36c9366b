#!/usr/bin/env python3
"""
Stage timing and memory tracking.

Timings are kept apart from metric reports: they go to the log and to an
optional performance.json, never into files that must be reproducible.
"""

import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import wraps
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

import psutil

from src.logging.logger_config import get_logger, log_debug, log_info


@dataclass
class StageTiming:
    """Timing information for one stage execution"""
    stage: str
    start_time: float
    end_time: Optional[float] = None
    duration: Optional[float] = None
    success: bool = True
    error_message: Optional[str] = None
    rss_mb: float = 0.0
    metadata: Dict[str, Any] = field(default_factory=dict)

    def finish(self, success: bool = True, error_message: Optional[str] = None):
        self.end_time = time.perf_counter()
        self.duration = self.end_time - self.start_time
        self.success = success
        self.error_message = error_message
        self.rss_mb = _rss_mb()


def _rss_mb() -> float:
    try:
        return psutil.Process().memory_info().rss / (1024 * 1024)
    except psutil.Error:
        return 0.0


class PerformanceMonitor:
    """Collects stage timings for one process"""

    def __init__(self, enable_monitoring: bool = True, slow_stage_seconds: float = 5.0):
        self.enable_monitoring = enable_monitoring
        self.slow_stage_seconds = slow_stage_seconds
        self.timings: List[StageTiming] = []

    @contextmanager
    def timed_stage(self, stage: str, **metadata: Any) -> Iterator[StageTiming]:
        """Context manager timing the enclosed block"""
        timing = StageTiming(stage=stage, start_time=time.perf_counter(), metadata=dict(metadata))
        if self.enable_monitoring:
            get_logger().log_stage_start(stage, **metadata)
        try:
            yield timing
        except Exception as e:
            timing.finish(success=False, error_message=str(e))
            self._record(timing)
            raise
        timing.finish()
        self._record(timing)

    def _record(self, timing: StageTiming):
        if not self.enable_monitoring:
            return
        self.timings.append(timing)
        get_logger().log_stage_end(timing.stage, timing.duration or 0.0, rss_mb=f"{timing.rss_mb:.1f}")
        if timing.duration and timing.duration > self.slow_stage_seconds:
            log_debug(f"Slow stage '{timing.stage}': {timing.duration:.2f}s")

    def summary(self) -> Dict[str, Any]:
        """Per-stage counts and durations"""
        stages: Dict[str, Dict[str, Any]] = {}
        for timing in self.timings:
            entry = stages.setdefault(timing.stage, {
                'count': 0, 'failures': 0, 'total_duration': 0.0, 'max_duration': 0.0, 'peak_rss_mb': 0.0,
            })
            entry['count'] += 1
            entry['failures'] += 0 if timing.success else 1
            entry['total_duration'] += timing.duration or 0.0
            entry['max_duration'] = max(entry['max_duration'], timing.duration or 0.0)
            entry['peak_rss_mb'] = max(entry['peak_rss_mb'], timing.rss_mb)
        return {
            'stages': stages,
            'total_duration': sum(t.duration or 0.0 for t in self.timings),
        }

    def save(self, filepath: Path):
        """Save timings to a JSON file"""
        if not self.enable_monitoring:
            return
        data = {
            **self.summary(),
            'timestamp': datetime.now(timezone.utc).isoformat(),
        }
        filepath.parent.mkdir(parents=True, exist_ok=True)
        with open(filepath, 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=2, default=str)
        log_info(f"Performance metrics saved to: {filepath}")

    def reset(self):
        self.timings.clear()


# Global performance monitor instance
_performance_monitor: Optional[PerformanceMonitor] = None


def get_performance_monitor() -> PerformanceMonitor:
    """Get the global performance monitor instance"""
    global _performance_monitor
    if _performance_monitor is None:
        _performance_monitor = PerformanceMonitor()
    return _performance_monitor


def timed_operation(stage: str):
    """Decorator timing every call of the wrapped function"""
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            monitor = get_performance_monitor()
            if not monitor.enable_monitoring:
                return func(*args, **kwargs)
            with monitor.timed_stage(stage):
                return func(*args, **kwargs)
        return wrapper
    return decorator
