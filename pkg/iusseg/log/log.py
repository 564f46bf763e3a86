"""
Configuration of the package logger. Every module logs through
'iusseg.log.log.logger'; the CLI attaches a log file in the output directory.
"""

import logging
import os

logger = logging.getLogger("iusseg")
logger.setLevel(logging.INFO)
#Define a format
formatter = logging.Formatter('%(asctime)s:%(levelname)s:%(message)s')


def attach_logfile(directory: str) -> str:
    """Write log records to '<directory>/iusseg.log' as well. Attaching the
    same file twice does nothing.

    Args:
        directory (str): directory for the log file, created if missing

    Returns:
        str: path of the log file
    """
    os.makedirs(directory, exist_ok=True)
    path = os.path.abspath(os.path.join(directory, 'iusseg.log'))
    for handler in logger.handlers:
        if isinstance(handler, logging.FileHandler) and handler.baseFilename == path:
            return path
    filehandler = logging.FileHandler(path)
    filehandler.setFormatter(formatter)
    logger.addHandler(filehandler)
    return path


def detach_logfiles() -> None:
    """Remove and close all file handlers (used between CLI invocations in one
    process)."""
    for handler in list(logger.handlers):
        if isinstance(handler, logging.FileHandler):
            logger.removeHandler(handler)
            handler.close()
