"""Protocol library: the four-state backup and the three fast protocols."""

from typing import Any

from popmajority.protocols.base import ProtocolDefinition, compose_extended, four_state_protocol
from popmajority.protocols.fastmajority1 import fastmajority1_protocol
from popmajority.protocols.fastmajority2 import fastmajority2_protocol
from popmajority.protocols.majority import majority_protocol

PROTOCOLS = ("fourstate", "majority", "fastmajority1", "fastmajority2")

_BUILDERS = {
    "majority": majority_protocol,
    "fastmajority1": fastmajority1_protocol,
    "fastmajority2": fastmajority2_protocol,
}


def make_protocol(name: str, n: int, extended: bool = True, **params: Any) -> ProtocolDefinition:
    """Instantiate a protocol by name for population size ``n``.

    Fast protocols are composed with the four-state backup unless
    ``extended`` is false. ``params`` go to the protocol's constructor
    (``C``, ``c`` and protocol-specific extras); ``None`` values are dropped
    so callers can pass optional overrides straight through.
    """
    params = {k: v for k, v in params.items() if v is not None}
    if name == "fourstate":
        if params:
            raise ValueError(f"fourstate takes no parameters, got {sorted(params)}")
        return four_state_protocol(n)
    if name not in _BUILDERS:
        raise ValueError(f"unknown protocol {name!r}; choose from {', '.join(PROTOCOLS)}")
    fast = _BUILDERS[name](n, **params)
    return compose_extended(fast) if extended else fast


__all__ = ["PROTOCOLS", "ProtocolDefinition", "compose_extended", "make_protocol"]
