"""Exception hierarchy and the diagnostic record shared by the validators."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Diagnostic:
    subject: str  # e.g. "layer 3", "tensor 5", "op 2", "pc 7"
    message: str

    def __str__(self) -> str:
        return f"{self.subject}: {self.message}"


class TileVMError(Exception):
    pass


class ParseError(TileVMError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ValidationError(TileVMError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(str(d) for d in self.diagnostics))


class ModuleFormatError(TileVMError):
    pass


class BadMagic(ModuleFormatError):
    pass


class VersionUnsupported(ModuleFormatError):
    pass


class SectionOverlap(ModuleFormatError):
    """Section table entries overlap, run past the end of the file, or are truncated."""


class VerifyError(ModuleFormatError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(str(d) for d in self.diagnostics))


class CompileError(TileVMError):
    pass


class UnsupportedLayer(CompileError):
    pass


class TilingError(CompileError):
    pass


class ShapeMismatch(TileVMError):
    pass


class ModuleInvalid(TileVMError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(str(d) for d in self.diagnostics))


class AllocFailure(TileVMError):
    pass


class ExecutionError(TileVMError):
    def __init__(self, op_id: int, item_index: int, cause: BaseException | None = None):
        self.op_id = op_id
        self.item_index = item_index
        self.cause = cause
        super().__init__(f"work item {item_index} of op {op_id} failed: {cause!r}")


class BusyError(TileVMError):
    pass
