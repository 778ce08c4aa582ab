from .actor import process_trial
from .executor import dispatch, execute

__all__ = [
    "process_trial",
    "dispatch",
    "execute",
]
