import functools
import traceback
from core.logger import setup_logger

logger = setup_logger("error_handler")


def handle_errors(func=None, *, fallback=None):
    """Log and swallow exceptions, returning ``fallback`` instead.

    Used only where a failure should be recorded while the surrounding job
    keeps going (benchmark cells, sweep points, the console).
    """
    def decorator(inner):
        @functools.wraps(inner)
        def wrapper(*args, **kwargs):
            try:
                logger.debug(f"Calling function: {inner.__name__}")
                return inner(*args, **kwargs)
            except Exception as e:
                logger.error(f"Exception in {inner.__name__}: {e}")
                logger.debug(traceback.format_exc())
                return fallback(e) if callable(fallback) else fallback
        return wrapper

    if func is not None:
        return decorator(func)
    return decorator
