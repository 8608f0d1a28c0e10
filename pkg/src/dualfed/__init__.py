"""Desk-scale simulator of dual-adapter federated domain generalization.

Subpackages build up from a small reverse-mode autograd engine
(:mod:`dualfed.tensor`) to the adapter model, the distillation loss, the
client/server round protocol, synthetic multi-domain data and the
experiment drivers used by the ``dualfed`` CLI.
"""

from .errors import (ConfigError, ContractError, DualFedError, NumericalError, ParseError,
                     ProtocolError, ShapeError)

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "DualFedError", "NumericalError", "ParseError",
           "ProtocolError", "ShapeError", "__version__"]
