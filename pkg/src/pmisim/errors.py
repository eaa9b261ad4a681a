from typing import Optional


class PmisimError(Exception):
    """Base class of every error raised by pmisim."""


class ConfigError(PmisimError, ValueError):
    pass


class ScenarioMismatchError(ConfigError):
    pass


class DomainError(PmisimError, ValueError):
    pass


class CodebookIndexError(PmisimError, IndexError):
    pass


class StateError(PmisimError, RuntimeError):
    pass


class ActionError(PmisimError, ValueError):
    pass


class SubjectError(PmisimError, ValueError):
    pass


class DecodeError(PmisimError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SchemaError(PmisimError, ValueError):
    def __init__(self, message: str, field: Optional[str] = None):
        where = f" at field '{field}'" if field else ""
        super().__init__(f"{message}{where}")
        self.field = field


class CheckpointError(PmisimError, ValueError):
    pass


class TrainingDivergedError(PmisimError, RuntimeError):
    pass
