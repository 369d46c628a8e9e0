# app/utils/log.py
import logging
import os
from typing import Optional

CONSOLE_FORMAT = "%(levelname)s: %(message)s"
FILE_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
RUN_LOG_NAME = "run.log"

_ROOT = "app"


def setup_logging(level: int = logging.INFO, out_dir: Optional[str] = None) -> logging.Logger:
    """
    Console gets the short "LEVEL: message" lines; when an output directory is
    given, a run.log with timestamps is written there as well.
    Safe to call more than once (handlers are replaced, not stacked).
    """
    logger = logging.getLogger(_ROOT)
    logger.setLevel(level)
    logger.propagate = False
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    console = logging.StreamHandler()
    console.setFormatter(logging.Formatter(CONSOLE_FORMAT))
    logger.addHandler(console)

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        file_handler = logging.FileHandler(os.path.join(out_dir, RUN_LOG_NAME), encoding="utf-8")
        file_handler.setFormatter(logging.Formatter(FILE_FORMAT))
        logger.addHandler(file_handler)
    return logger


def progress_disabled() -> bool:
    """tqdm bars follow the logger: hidden when INFO messages are hidden"""
    return not logging.getLogger(_ROOT).isEnabledFor(logging.INFO)
