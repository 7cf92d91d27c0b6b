"""Exception hierarchy shared by all rrpmatch modules."""


class RRPError(Exception):
    """Base class for every error raised by rrpmatch."""


class MissingColumn(RRPError, KeyError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"missing column {column!r}")

    def __str__(self):
        return self.args[0]


class UnparseableValue(RRPError, ValueError):
    def __init__(self, row, column, value):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(f"row {row}, column {column!r}: cannot parse {value!r}")


class EmptyGroup(RRPError, ValueError):
    """A treated or control group is empty (or too small for the operation)."""


class DimensionMismatch(RRPError, ValueError):
    pass


class DegenerateInput(RRPError, ValueError):
    pass


class SchemaMismatch(RRPError, ValueError):
    pass


class InapplicableTest(RRPError, ValueError):
    """A statistical test cannot be computed on the given data."""


class NoMatches(RRPError, ValueError):
    pass


class AllReplicationsFailed(RRPError, RuntimeError):
    pass


class EmptyProximity(RRPError, ValueError):
    pass
