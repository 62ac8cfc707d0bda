"""Langfuse tracing of pipeline stages, active only when both keys are configured."""
from typing import Any, Callable, Optional, Tuple
import logging

from config.settings import settings

logger = logging.getLogger(__name__)


def _connect() -> Optional[Tuple[Any, Callable]]:
    if not (settings.langfuse_public_key and settings.langfuse_secret_key):
        return None
    try:
        from langfuse.decorators import langfuse_context, observe
    except ImportError:
        logger.warning("Langfuse keys are set but langfuse.decorators is unavailable; stages run untraced")
        return None
    langfuse_context.configure(
        public_key=settings.langfuse_public_key,
        secret_key=settings.langfuse_secret_key,
        host=settings.langfuse_host,
    )
    return langfuse_context, observe


_LANGFUSE = _connect()
TRACING_ENABLED = _LANGFUSE is not None


def traced(name: str) -> Callable[[Callable], Callable]:
    """Record calls of the decorated stage as a Langfuse observation called `name`."""

    def decorator(func: Callable) -> Callable:
        if _LANGFUSE is None:
            return func
        return _LANGFUSE[1](name=name)(func)

    return decorator


def annotate_trace(name: str, **metadata: Any) -> None:
    if _LANGFUSE is not None:
        _LANGFUSE[0].update_current_trace(name=name, metadata=metadata)
