"""
Exception hierarchy shared by the osfp modules. The CLI maps each class to an exit code.
"""


class OsfpError(Exception):
    """Base class for every error raised on purpose by osfp."""


class ParseError(OsfpError):
    def __init__(self, message, line=None, token=None):
        self.line = line
        self.token = token
        where = f"line {line}: " if line is not None else ""
        what = f" (offending token: {token!r})" if token is not None else ""
        super().__init__(f"{where}{message}{what}")


class DuplicateSignatureError(ParseError):
    def __init__(self, name, first_line, line):
        self.name = name
        self.first_line = first_line
        super().__init__(
            f"duplicate fingerprint {name!r}, first defined on line {first_line}",
            line=line,
        )


class UnsupportedFormatError(ParseError):
    pass


class LabelConflictError(OsfpError):
    def __init__(self, signature, first_rule, second_rule):
        self.signature = signature
        self.rules = (first_rule, second_rule)
        super().__init__(
            f"signature {signature!r} matches conflicting label rules "
            f"{first_rule!r} and {second_rule!r}"
        )


class SchemaMismatchError(OsfpError):
    def __init__(self, expected, actual, what="input"):
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"{what} schema hash {actual} does not match expected {expected}"
        )


class TrainingDivergedError(OsfpError):
    def __init__(self, message, history=None, name=None):
        self.history = list(history or [])
        self.name = name
        prefix = f"{name}: " if name else ""
        super().__init__(f"{prefix}{message} after {len(self.history)} generations")


class DatasetError(OsfpError):
    pass


class BundleError(OsfpError):
    pass
