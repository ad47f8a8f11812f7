"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid network, layer or experiment configuration."""


class InputError(ValueError):
    """Caller supplied data outside an operation's domain."""


class FormatError(ValueError):
    """Malformed binary input; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NumericError(ArithmeticError):
    """Non-finite values or degenerate vectors during training or matching."""

    def __init__(self, message: str, client_id=None, round_index=None):
        parts = [message]
        if client_id is not None:
            parts.append(f"client={client_id}")
        if round_index is not None:
            parts.append(f"round={round_index}")
        super().__init__(" ".join(parts))
        self.client_id = client_id
        self.round_index = round_index
