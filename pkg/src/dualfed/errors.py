"""Exception hierarchy shared across the package."""


class DualFedError(Exception):
    """Base class for all errors raised by dualfed."""

    kind = "error"

    def to_dict(self):
        return {"error": self.kind, "message": str(self)}


class ShapeError(DualFedError, ValueError):
    kind = "dimension_error"


class ContractError(DualFedError, ValueError):
    kind = "contract_error"


class NumericalError(DualFedError, ArithmeticError):
    kind = "numerical_error"


class ConfigError(DualFedError, ValueError):
    kind = "config_error"

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field

    def to_dict(self):
        d = super().to_dict()
        if self.field is not None:
            d["field"] = self.field
        return d


class ProtocolError(DualFedError, RuntimeError):
    kind = "protocol_error"


class ParseError(DualFedError, ValueError):
    kind = "parse_error"
