"""
Logging Utilities for the JointSR Project
Console/file logging setup, an operation timer, and the line-delimited metrics writer.
"""

import json
import logging
import os
import time
from contextlib import contextmanager
from typing import Any, Dict, Iterator, Optional

import colorlog

CONSOLE_FORMAT = "%(log_color)s%(asctime)s [%(levelname)8s]%(reset)s %(name)s: %(message)s"
FILE_FORMAT = "%(asctime)s [%(levelname)8s] %(filename)s:%(lineno)d %(funcName)s(): %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

_HANDLER_TAG = "_jointsr_handler"


def setup_logging(level: str = "INFO", log_file: Optional[str] = None) -> logging.Logger:
    """
    Configure the root logger with a colored console handler and an optional file handler.

    Calling this more than once replaces the handlers it installed earlier, so commands
    that run back to back in one process (tests, notebooks) do not duplicate output.

    Args:
        level: Logging level name for the console handler
        log_file: Optional path of a DEBUG-level log file

    Returns:
        The configured root logger
    """
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, _HANDLER_TAG, False):
            root.removeHandler(handler)
            handler.close()

    console = colorlog.StreamHandler()
    console.setFormatter(colorlog.ColoredFormatter(CONSOLE_FORMAT, datefmt=DATE_FORMAT))
    console.setLevel(level.upper())
    setattr(console, _HANDLER_TAG, True)
    root.addHandler(console)

    if log_file:
        os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(logging.Formatter(FILE_FORMAT, datefmt=DATE_FORMAT))
        file_handler.setLevel(logging.DEBUG)
        setattr(file_handler, _HANDLER_TAG, True)
        root.addHandler(file_handler)

    root.setLevel(logging.DEBUG if log_file else level.upper())
    return root


@contextmanager
def timed(operation_name: str, logger: Optional[logging.Logger] = None) -> Iterator[Dict[str, float]]:
    """
    Context manager that measures and logs the duration of an operation.

    Args:
        operation_name: Name of the operation being tracked
        logger: Logger to report to (module logger if None)

    Yields:
        Dictionary that receives the ``seconds`` key once the block exits
    """
    log = logger or logging.getLogger(__name__)
    record: Dict[str, float] = {}
    start_time = time.perf_counter()
    try:
        yield record
    finally:
        record["seconds"] = time.perf_counter() - start_time
        log.info(f"Operation '{operation_name}' completed in {record['seconds']:.2f}s")


class MetricsWriter:
    """Appends one JSON record per line to a metrics log."""

    def __init__(self, path: str, append: bool = False):
        """
        Args:
            path: Destination file (parent directories are created)
            append: Keep existing records instead of truncating the file
        """
        self.path = path
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self._handle = open(path, "a" if append else "w", encoding="utf-8")

    def write(self, record: Dict[str, Any]) -> None:
        self._handle.write(json.dumps(record, sort_keys=False) + "\n")
        self._handle.flush()

    def close(self) -> None:
        if not self._handle.closed:
            self._handle.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()
