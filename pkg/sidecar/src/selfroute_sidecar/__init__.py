"""Reference probe server for the selfroute wire protocol.

Loads a causal transformer, decodes greedily under a token budget, and
returns the per-layer hidden states at the final generated position.
"""

from .engine import ContextOverflowError, DecodeResult, ModelCard, ProbeEngine
from .server import create_app

__all__ = [
    "ContextOverflowError",
    "DecodeResult",
    "ModelCard",
    "ProbeEngine",
    "create_app",
]
