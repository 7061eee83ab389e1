"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations

from typing import Iterable, List, Optional, Sequence, Tuple


class FundusVlmError(Exception):
    """Base class for all errors raised by fundus_vlm_cli."""


class DimensionError(FundusVlmError, ValueError):
    def __init__(self, op: str, *shapes: Sequence[int]) -> None:
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        rendered = " vs ".join(str(list(s)) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class ContractError(FundusVlmError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(FundusVlmError, ArithmeticError):
    def __init__(self, message: str, where: Optional[str] = None) -> None:
        self.where = where
        super().__init__(f"{message} ({where})" if where else message)


class RuleLookupError(FundusVlmError, KeyError):
    def __init__(self, names: Iterable[str]) -> None:
        self.names = list(names)
        super().__init__(f"no description rule for: {', '.join(self.names)}")

    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return self.args[0]


class CorruptionError(FundusVlmError):
    """Checkpoint bytes do not match their manifest hash or are truncated."""


class MigrationError(FundusVlmError):
    """Checkpoint format version is not supported by this build."""


class ValidationError(FundusVlmError, ValueError):
    def __init__(self, problems: Sequence[Tuple[str, str]] | str) -> None:
        if isinstance(problems, str):
            problems = [("", problems)]
        self.problems: List[Tuple[str, str]] = list(problems)
        lines = [f"{field}: {problem}" if field else problem for field, problem in self.problems]
        super().__init__("; ".join(lines))


class GeneratorError(FundusVlmError, RuntimeError):
    """Dialogue generator failed after its retry budget."""
