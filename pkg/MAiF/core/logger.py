import logging
import os
from logging.handlers import RotatingFileHandler
from typing import Optional

from config.settings import LOG_DIR, LOG_FILE, LOG_LEVEL, TRANSCRIPT, TRANSCRIPT_FILE

os.makedirs(LOG_DIR, exist_ok=True)

FORMAT = '[%(asctime)s] %(levelname)s - %(name)s - %(message)s'
DATEFMT = '%Y-%m-%d %H:%M:%S'


def _file_handler(path: str) -> RotatingFileHandler:
    handler = RotatingFileHandler(path, maxBytes=1_000_000, backupCount=5)
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(logging.Formatter(FORMAT, datefmt=DATEFMT))
    return handler


def setup_logger(name: str = "maif", level: Optional[int] = None) -> logging.Logger:
    """Module logger writing DEBUG and up to the rotating log file and ``LOG_LEVEL`` and up to the console."""
    logger = logging.getLogger(name)
    logger.setLevel(logging.DEBUG if level is None else level)

    if not logger.handlers:
        console_handler = logging.StreamHandler()
        console_handler.setLevel(LOG_LEVEL)
        console_handler.setFormatter(logging.Formatter(FORMAT, datefmt=DATEFMT))

        logger.addHandler(_file_handler(LOG_FILE))
        logger.addHandler(console_handler)

    return logger


def setup_transcript_logger(name: str = "coordination.transcript") -> logging.Logger:
    """Per-step protocol transcript, written to its own file and only when ``MAIF_TRANSCRIPT`` is on."""
    logger = logging.getLogger(name)
    logger.setLevel(logging.DEBUG if TRANSCRIPT else logging.WARNING)
    logger.propagate = False
    if TRANSCRIPT and not logger.handlers:
        logger.addHandler(_file_handler(TRANSCRIPT_FILE))
    return logger
