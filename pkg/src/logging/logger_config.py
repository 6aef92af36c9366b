#!/usr/bin/env python3
"""
Centralized logging configuration for occ-forge

Console output goes to stderr so stage reports written to stdout stay clean.
When a log directory is given, a DEBUG file log is kept there and an error log
is opened the first time an error is reported.
"""

import sys
from pathlib import Path
from typing import Any, Dict, Mapping, Optional
from loguru import logger

from src.core.config import get_config


class OccForgeLogger:
    """Centralized logger for pipeline runs"""

    def __init__(self, log_dir: Optional[Path] = None, log_level: str = "INFO", timestamp: Optional[str] = None):
        self.log_dir = log_dir
        self.log_level = log_level
        self.timestamp = timestamp
        self._error_log_created = False
        self.settings = get_config().logging
        self._setup_logger()

    def _file_name(self, base: str) -> str:
        return f"{self.timestamp}_{base}" if self.timestamp else base

    def _setup_logger(self):
        """Configure Loguru with console and file outputs"""
        logger.remove()

        logger.add(
            sys.stderr,
            format=self.settings.CONSOLE_FORMAT,
            level=self.log_level,
            colorize=True,
            backtrace=False,
            diagnose=False
        )

        if self.log_dir:
            self.log_dir.mkdir(parents=True, exist_ok=True)
            logger.add(
                self.log_dir / self._file_name(self.settings.LOG_FILE_NAME),
                format=self.settings.FILE_FORMAT,
                level="DEBUG",
                rotation=None,
                retention=None,
                compression=None,
                encoding=self.settings.LOG_ENCODING
            )

    def _ensure_error_log(self):
        """Create error log file on-demand when first error occurs"""
        if not self._error_log_created and self.log_dir:
            self.log_dir.mkdir(parents=True, exist_ok=True)
            logger.add(
                self.log_dir / self._file_name(self.settings.ERROR_LOG_NAME),
                format=self.settings.FILE_FORMAT,
                level="ERROR",
                rotation=None,
                retention=None,
                compression=None,
                encoding=self.settings.LOG_ENCODING
            )
            self._error_log_created = True

    def get_logger(self):
        """Get the configured logger instance"""
        return logger

    def log_stage_start(self, stage: str, **context: Any):
        """Log the start of a pipeline stage with its parameters"""
        details = ", ".join(f"{key}={value}" for key, value in context.items())
        logger.info(f"▶ {stage}" + (f" ({details})" if details else ""))

    def log_stage_end(self, stage: str, duration: float, **context: Any):
        """Log the end of a pipeline stage"""
        details = ", ".join(f"{key}={value}" for key, value in context.items())
        logger.debug(f"✓ {stage} finished in {duration:.3f}s" + (f" ({details})" if details else ""))

    def log_metrics(self, name: str, values: Mapping[str, Any]):
        """Log a flat mapping of scalar results"""
        logger.info("=" * 60)
        logger.info(name.upper())
        logger.info("=" * 60)
        for key, value in values.items():
            if isinstance(value, float):
                logger.info(f"{key}: {value:.6f}")
            else:
                logger.info(f"{key}: {value}")
        logger.info("=" * 60)

    def log_error_with_context(self, error: Exception, context: Dict[str, Any]):
        """Log error with additional context"""
        self._ensure_error_log()
        details = ", ".join(f"{key}={value}" for key, value in context.items())
        logger.opt(exception=error).error("Error occurred: {}{}", error, f" ({details})" if details else "")


# Global logger instance
_occ_logger: Optional[OccForgeLogger] = None


def get_logger() -> OccForgeLogger:
    """Get the global logger instance"""
    global _occ_logger
    if _occ_logger is None:
        _occ_logger = OccForgeLogger()
    return _occ_logger


def setup_logging(log_dir: Optional[Path] = None, log_level: str = "INFO", timestamp: Optional[str] = None) -> OccForgeLogger:
    """Setup logging configuration"""
    global _occ_logger

    if _occ_logger is not None:
        _occ_logger.log_dir = log_dir
        _occ_logger.log_level = log_level
        _occ_logger.timestamp = timestamp
        _occ_logger._error_log_created = False
        _occ_logger._setup_logger()
    else:
        _occ_logger = OccForgeLogger(log_dir, log_level, timestamp)

    return _occ_logger


# Convenience functions for common logging operations
def log_info(message: str, **kwargs):
    """Log info message with optional context"""
    logger.info(message, **kwargs)


def log_warning(message: str, **kwargs):
    """Log warning message with optional context"""
    logger.warning(message, **kwargs)


def log_error(message: str, **kwargs):
    """Log error message with optional context"""
    if _occ_logger is not None:
        _occ_logger._ensure_error_log()
    logger.error(message, **kwargs)


def log_debug(message: str, **kwargs):
    """Log debug message with optional context"""
    logger.debug(message, **kwargs)


def log_success(message: str, **kwargs):
    """Log success message with optional context"""
    logger.success(message, **kwargs)
