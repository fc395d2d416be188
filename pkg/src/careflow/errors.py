"""Exception types shared across the pipeline."""

from __future__ import annotations


class CareflowError(Exception):
    """Base class for all pipeline errors."""


class IngestError(CareflowError):
    """Input data could not be parsed or validated."""

    def __init__(self, message: str, file: str | None = None, line: int | None = None):
        self.file = file
        self.line = line
        where = ""
        if file is not None:
            where = f"{file}:{line}: " if line is not None else f"{file}: "
        super().__init__(where + message)


class MissingFile(IngestError):
    pass


class MalformedRow(IngestError):
    pass


class DanglingReference(IngestError):
    def __init__(self, kind: str, ref_id: str, file: str | None = None, line: int | None = None):
        self.kind = kind
        self.ref_id = ref_id
        super().__init__(f"unknown {kind} {ref_id!r}", file, line)


class UnknownClass(MalformedRow):
    def __init__(self, value: str, file: str | None = None, line: int | None = None):
        self.value = value
        super().__init__(f"unknown POI class {value!r}", file, line)


class ProviderUnreachable(CareflowError):
    pass


class RateLimited(CareflowError):
    pass


class InsufficientMen(CareflowError):
    pass


class DegenerateMargin(CareflowError):
    pass


class InsufficientSample(CareflowError):
    pass


class SingularDesign(CareflowError):
    pass


class InvalidConfig(CareflowError):
    pass
