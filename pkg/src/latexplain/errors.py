"""Exception hierarchy shared by all modules."""


class LatexplainError(Exception):
    """Base class; ``stage`` names the pipeline step that failed, when known."""

    stage: str | None = None

    def __init__(self, message: str, stage: str | None = None, **details):
        super().__init__(message)
        if stage is not None:
            self.stage = stage
        self.details = details

    def to_dict(self) -> dict:
        return {
            "error": type(self).__name__,
            "message": str(self),
            "stage": self.stage,
            "details": {k: _jsonable(v) for k, v in self.details.items()},
        }


def _jsonable(v):
    if isinstance(v, (str, int, float, bool)) or v is None:
        return v
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return str(v)


class ShapeError(LatexplainError, ValueError):
    pass


class TrainingDivergenceError(LatexplainError):
    pass


class OracleError(LatexplainError):
    """External black-box process failed or replied with garbage."""


class GenerationError(LatexplainError):
    """Sampling exhausted its budget without producing what was asked for."""


class ParseError(LatexplainError, ValueError):
    def __init__(self, message: str, offset: int, **details):
        super().__init__(f"{message} (at byte offset {offset})", offset=offset, **details)
        self.offset = offset


class ConfigError(LatexplainError):
    pass
