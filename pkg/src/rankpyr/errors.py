"""Exception types. Each carries a short machine-readable ``code``."""


class RankPyrError(Exception):
    code = "error"

    def to_record(self) -> dict:
        return {"error": self.code, "message": str(self)}


class InvalidParameter(RankPyrError, ValueError):
    code = "invalid-parameter"


class InvalidAnnotation(RankPyrError, ValueError):
    code = "invalid-annotation"


class InvalidRegion(RankPyrError, ValueError):
    code = "invalid-region"


class InvalidInput(RankPyrError, ValueError):
    code = "invalid-input"


class LevelTooSmall(RankPyrError, ValueError):
    code = "level-too-small"


class TrainingDiverged(RankPyrError, RuntimeError):
    """Raised when a loss turns NaN/Inf. ``diagnostics`` holds batch ids, counts and pair terms."""

    code = "training-diverged"

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

    def to_record(self) -> dict:
        rec = super().to_record()
        rec["diagnostics"] = self.diagnostics
        return rec
