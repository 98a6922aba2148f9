import sys
import traceback
import logging

from noiselens.core.exceptions import (
    CheckpointError,
    ConfigError,
    DataLeakError,
    ImageFormatError,
    InvalidAnnotationError,
    NoiselensError,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING_FILE = 3
EXIT_DATA = 4
EXIT_CHECKPOINT = 5


class UsageError(ConfigError):
    """Bad command line: unknown subcommand, missing or malformed arguments."""


def handle_config_error(e):
    """Handle invalid configs and command lines"""
    return EXIT_CONFIG, str(e)


def handle_missing_file(e):
    """Handle missing inputs"""
    name = getattr(e, "filename", None)
    return EXIT_MISSING_FILE, f"{e.strerror}: {name}" if name and e.strerror else str(e)


def handle_data_error(e):
    """Handle unreadable images, bad annotations and split misuse"""
    return EXIT_DATA, str(e)


def handle_checkpoint_error(e):
    """Handle corrupt, mismatched or wrong-version checkpoints"""
    return EXIT_CHECKPOINT, str(e)


def handle_unexpected_error(e):
    """Handle everything else"""
    # Log the full error with traceback for debugging
    logger.error(f"Unexpected error: {str(e)}")
    logger.error(traceback.format_exc())
    return EXIT_FAILURE, str(e) or type(e).__name__


# Checked in order; the first matching class wins.
error_handlers = [
    (CheckpointError, handle_checkpoint_error),
    (ConfigError, handle_config_error),
    (FileNotFoundError, handle_missing_file),
    (InvalidAnnotationError, handle_data_error),
    (ImageFormatError, handle_data_error),
    (DataLeakError, handle_data_error),
    (NoiselensError, handle_data_error),
]


def handle_error(e, stream=None):
    """Print a one-line ``error: <message>`` diagnostic and return the exit code."""
    for error_type, handler in error_handlers:
        if isinstance(e, error_type):
            code, message = handler(e)
            break
    else:
        code, message = handle_unexpected_error(e)
    first_line = message.strip().splitlines()[0] if message.strip() else type(e).__name__
    print(f"error: {first_line}", file=stream or sys.stderr)
    logger.debug("Exit code %d for %s", code, type(e).__name__)
    return code
