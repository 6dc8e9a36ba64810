"""Exception hierarchy. Each class carries the CLI exit status it maps to."""


class UnisemError(Exception):
    exit_code = 4
    category = "internal"


class ConfigError(UnisemError, ValueError):
    exit_code = 2
    category = "config"


class MissingInputError(UnisemError, FileNotFoundError):
    exit_code = 3
    category = "missing-input"


class ContractError(UnisemError, ValueError):
    """A caller broke an operation's precondition."""

    category = "contract"


class DimensionError(ContractError):
    category = "dimension"


class ProgramParseError(UnisemError, ValueError):
    category = "parse"

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (token {position})")
        self.position = position


class ExecutionError(UnisemError, ValueError):
    category = "execution"


class GenerationError(UnisemError, ValueError):
    category = "generation"


class MaskingError(UnisemError, ValueError):
    category = "masking"


class OrchestrationError(UnisemError, RuntimeError):
    exit_code = 3
    category = "orchestration"


class CheckpointError(UnisemError, ValueError):
    exit_code = 3
    category = "checkpoint"


class ReportError(UnisemError, ValueError):
    category = "report"
