"""Exception hierarchy. Each family maps to a distinct CLI exit code."""


class FedmobError(Exception):
    exit_code = 1


class ConfigError(FedmobError, ValueError):
    exit_code = 3


class DataError(FedmobError, ValueError):
    exit_code = 4


class IngestionError(DataError):
    def __init__(self, message, rows=None, ev_ids=None):
        super().__init__(message)
        self.rows = list(rows or [])
        self.ev_ids = list(ev_ids or [])


class EmptyHistoryError(DataError):
    pass


class EvaluationError(DataError):
    pass


class StatsError(DataError):
    pass


class ComparisonError(DataError):
    pass


class NumericError(FedmobError, ArithmeticError):
    exit_code = 5


class TrainingError(NumericError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class IncompatibleWeightsError(FedmobError, ValueError):
    exit_code = 4


class AggregationError(FedmobError, ValueError):
    exit_code = 4


class RoundError(FedmobError):
    """Wraps an operation failure with the round and community it happened in."""

    def __init__(self, message, round_index, community=None, cause=None):
        super().__init__(f"round {round_index}"
                         + (f", community {community}" if community is not None else "")
                         + f": {message}")
        self.round_index = round_index
        self.community = community
        self.cause = cause
        if cause is not None:
            self.exit_code = getattr(cause, "exit_code", 1)


class ReportIOError(FedmobError, OSError):
    exit_code = 6
