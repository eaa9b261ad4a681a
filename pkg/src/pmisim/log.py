import logging

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(name)


def configure_logging(level: str = "INFO") -> None:
    """
    Configures the root logger for command-line use. Library code never
    calls this; it only requests loggers through `get_logger`.
    """
    numeric = logging.getLevelName(level.upper())
    if not isinstance(numeric, int):
        raise ValueError(f"Unknown log level {level}")
    logging.basicConfig(level=numeric, format=LOG_FORMAT, force=True)
