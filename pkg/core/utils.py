"""
Core utilities for the personalized re-ranking toolkit.
Handles resource lookup, logging setup, output folders and resource checks.
"""

import logging
import os
import re
import shutil
import sys
from pathlib import Path
from typing import Optional

import psutil

logger = logging.getLogger(__name__)

LOG_LEVEL_ENV = "HRNN_LOG_LEVEL"
LOG_FORMAT = "[%(levelname)s] %(name)s: %(message)s"


def resource_path(relative_path: str) -> str:
    """
    Get absolute path to a bundled resource (stopword list and friends).
    """
    return os.path.join(str(Path(__file__).resolve().parent.parent), relative_path)


def setup_logging(level: Optional[str] = None) -> int:
    """
    Install one stderr handler on the root logger.

    Args:
        level: Level name; falls back to $HRNN_LOG_LEVEL, then INFO

    Returns:
        The numeric level that was applied
    """
    name = (level or os.environ.get(LOG_LEVEL_ENV) or "INFO").upper()
    numeric = logging.getLevelName(name)
    if not isinstance(numeric, int):
        raise ValueError(f"Unknown log level: {name}")
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(numeric)
    return numeric


def sanitize_filename(filename: str) -> str:
    """
    Sanitize a filename by removing/replacing invalid characters.

    Args:
        filename: The filename to sanitize (user or query ids end up here)

    Returns:
        Sanitized filename safe for filesystem
    """
    invalid_chars = '<>:"/\\|?* '
    for char in invalid_chars:
        filename = filename.replace(char, '_')
    filename = filename.strip(' .')
    if len(filename) > 200:
        filename = filename[:200]
    return filename or 'untitled'


def validate_output_dir(folder: str) -> Path:
    """
    Create the output folder if needed and check it is writable.

    Args:
        folder: The output folder path

    Returns:
        The folder as a Path

    Raises:
        OSError: If the folder cannot be created or written to
    """
    folder_path = Path(folder)
    folder_path.mkdir(parents=True, exist_ok=True)
    if not folder_path.is_dir():
        raise OSError(f"Output path is not a directory: {folder}")
    test_file = folder_path / ".test_write_permission"
    test_file.write_text("test")
    test_file.unlink()
    return folder_path


def default_thread_count() -> int:
    """Physical core count, at least 1."""
    try:
        count = psutil.cpu_count(logical=False)
    except Exception:
        count = None
    return max(1, count or os.cpu_count() or 1)


def check_system_resources(output_folder: str) -> dict:
    """
    Check system resources before long-running work.

    Args:
        output_folder: The output folder to check

    Returns:
        Dictionary with resource status information; problems are also logged
    """
    status = {
        'disk_space_ok': True,
        'memory_ok': True,
        'available_memory_mb': None,
        'errors': []
    }

    try:
        folder_path = Path(output_folder)
        if folder_path.exists():
            free_space = shutil.disk_usage(folder_path).free
            min_space = 100 * 1024 * 1024
            if free_space < min_space:
                status['disk_space_ok'] = False
                status['errors'].append(f"Low disk space: {free_space // (1024 * 1024)}MB free")
    except OSError as e:
        status['disk_space_ok'] = False
        status['errors'].append(f"Could not check disk space: {e}")

    try:
        memory = psutil.virtual_memory()
        status['available_memory_mb'] = memory.available // (1024 * 1024)
        if memory.percent > 90:
            status['memory_ok'] = False
            status['errors'].append(f"High memory usage: {memory.percent}%")
    except Exception as e:
        status['memory_ok'] = False
        status['errors'].append(f"Could not check memory: {e}")

    for message in status['errors']:
        logger.warning(message)
    return status


def safe_error_message(error: Exception) -> str:
    """
    Turn an exception into a short message for the command line.

    Args:
        error: The exception to describe

    Returns:
        Message without home-directory paths
    """
    message = str(error) or error.__class__.__name__
    message = re.sub(r'/home/[^\s:]*', '[HOME]', message)
    message = re.sub(r'C:\\Users\\[^\s:]*', '[HOME]', message)
    if isinstance(error, FileNotFoundError):
        return f"File not found: {message}"
    if isinstance(error, PermissionError):
        return "Access denied. Please check folder permissions."
    return f"{error.__class__.__name__}: {message}"
