class CoopLsviError(Exception):
    """
    Base class for every error raised by the simulator
    """


class InvalidArgumentError(CoopLsviError, ValueError):
    """
    Raised when an operation receives arguments outside its domain
    """


class ProtocolViolationError(CoopLsviError, RuntimeError):
    """
    Raised when the communication protocol between agents is broken: an inconsistent step range, diverged replicas
    or a missing reward record.
    """


class ConfigError(CoopLsviError, ValueError):
    """
    Raised when an experiment configuration fails schema validation.
    :param field_path: Dotted path of the offending key, e.g. 'sampler.alpha'
    :param message: Human readable description
    """

    def __init__(self, field_path, message):
        self.field_path = field_path
        super().__init__(f'{field_path}: {message}')
