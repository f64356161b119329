class EchoSDMError(Exception):
    exit_code = 1


class ConfigError(EchoSDMError, ValueError):
    exit_code = 2


class DataError(EchoSDMError, ValueError):
    exit_code = 3


class NumericError(EchoSDMError, FloatingPointError):
    exit_code = 4
