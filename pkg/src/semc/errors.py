"""Exception hierarchy shared by every SEMC module."""


class SEMCError(Exception):
    pass


class ShapeError(SEMCError, ValueError):
    pass


class NumericalError(SEMCError, ArithmeticError):
    pass


class ConfigError(SEMCError, ValueError):
    pass


class StateError(SEMCError, RuntimeError):
    pass


class DataError(SEMCError, ValueError):
    pass


class IoError(SEMCError, OSError):
    pass


class CheckpointError(SEMCError, RuntimeError):
    pass
