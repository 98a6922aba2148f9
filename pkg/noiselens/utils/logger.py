import os
import json
import time
import logging
import threading
from datetime import datetime
from logging.handlers import RotatingFileHandler

from noiselens.utils.helpers import atomic_write_json

LOG_FORMAT = '%(asctime)s %(levelname)s: %(message)s [in %(pathname)s:%(lineno)d]'
CONSOLE_FORMAT = '%(levelname)s %(name)s: %(message)s'
OPERATIONS_FILE = 'operations.json'

logger = logging.getLogger(__name__)


def configure_logging(log_dir=None, level='INFO'):
    """
    Configure the ``noiselens`` logger with a console handler and, when a log
    directory is given, a rotating file handler.

    Args:
        log_dir (str, optional): Directory for ``noiselens.log``
        level (str): Logging level name

    Returns:
        logging.Logger: The package logger
    """
    package_logger = logging.getLogger('noiselens')
    package_logger.setLevel(getattr(logging, str(level).upper(), logging.INFO))
    for handler in list(package_logger.handlers):
        package_logger.removeHandler(handler)
        handler.close()

    console = logging.StreamHandler()
    console.setFormatter(logging.Formatter(CONSOLE_FORMAT))
    package_logger.addHandler(console)

    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = RotatingFileHandler(
            os.path.join(log_dir, 'noiselens.log'), maxBytes=10240, backupCount=10
        )
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        package_logger.addHandler(file_handler)

    package_logger.propagate = False
    return package_logger


_locks = {}
_locks_guard = threading.Lock()


def _directory_lock(directory):
    key = os.path.abspath(directory)
    with _locks_guard:
        return _locks.setdefault(key, threading.Lock())


def _read_records(path):
    """Records stored in ``path``; a missing or unreadable log reads as empty."""
    try:
        with open(path, 'r') as f:
            records = json.load(f)
    except FileNotFoundError:
        return []
    except (OSError, json.JSONDecodeError) as e:
        logger.warning(f"Ignoring unreadable operations log {path}: {e}")
        return []
    return records if isinstance(records, list) else []


def log_operation(directory, operation, status='success', details=None):
    """
    Append a record of a noiselens command or job to ``operations.json``
    in its output directory.

    Args:
        directory (str): Run/output directory
        operation (str): Subcommand or job name (simulate, train, evaluate, ...)
        status (str): ``success`` or ``failed``
        details (dict, optional): Seed, counts, error text and the like
    """
    path = os.path.join(directory, OPERATIONS_FILE)
    with _directory_lock(directory):
        try:
            os.makedirs(directory, exist_ok=True)
            records = _read_records(path)
            records.append({
                'sequence': len(records),
                'timestamp': datetime.now().isoformat(),
                'unix_timestamp': int(time.time()),
                'operation': operation,
                'status': status,
                'details': json.loads(json.dumps(details or {}, default=str)),
            })
            atomic_write_json(path, records)
            logger.debug(f"{operation} ({status}) recorded in {path}")
        except OSError as e:
            logger.error(f"Could not record {operation} in {path}: {e}")


def get_operation_logs(directory, limit=None, operation_type=None, status=None):
    """Recorded operations in ``directory``, newest first, optionally filtered."""
    records = [
        record for record in _read_records(os.path.join(directory, OPERATIONS_FILE))
        if operation_type in (None, record.get('operation'))
        and status in (None, record.get('status'))
    ]
    records.reverse()
    return records[:limit] if isinstance(limit, int) and limit > 0 else records
