"""
Named logger configuration shared by the library and the command line.

All modules log through the "panopticroad" logger. By default it logs at
'level' to the console and, when a log file is given, everything at DEBUG
to that file. If you do NOT want this default configuration, skip
configure_logging() and manage the "panopticroad" logger from your
application code.
"""

import logging

LOGGER_NAME = "panopticroad"
LOG_FORMAT = "PanopticRoad: %(name)s - %(levelname)s - %(message)s"
FILE_LOG_FORMAT = "%(asctime)s.%(msecs)03d - " + LOG_FORMAT

logger = logging.getLogger(LOGGER_NAME)
logger.propagate = False


def configure_logging(level=logging.WARNING, log_file=None):
    """
    Installs the console handler and, optionally, the file handler.

    Calling it again replaces the handlers installed by a previous call.

    Args:
        level (int, default=logging.WARNING): Console logging level.
        log_file (str, default=None): Path of the DEBUG log file. No file
            handler is installed when None.

    Returns:
        logging.Logger: The configured "panopticroad" logger.
    """
    logger.setLevel(logging.DEBUG)  # We capture all, then filter via handlers

    for handler in list(logger.handlers):
        if getattr(handler, "_panopticroad", False):
            logger.removeHandler(handler)
            handler.close()

    console_handler = logging.StreamHandler()
    console_handler.setLevel(level)
    console_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    console_handler._panopticroad = True
    logger.addHandler(console_handler)

    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter(FILE_LOG_FORMAT, datefmt='%Y-%m-%d %H:%M:%S'))
        file_handler._panopticroad = True
        logger.addHandler(file_handler)

    return logger


def close_file_handlers():
    """Closes and removes the file handlers installed by configure_logging()."""
    for handler in list(logger.handlers):
        if getattr(handler, "_panopticroad", False) and isinstance(handler, logging.FileHandler):
            logger.removeHandler(handler)
            handler.close()
