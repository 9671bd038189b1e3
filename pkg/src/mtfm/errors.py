class MTFMError(Exception):
    pass


class ConfigurationError(MTFMError):
    """Invalid or inconsistent configuration (bad hyperparameters, unknown scenario, ...)."""


class IntegrityError(MTFMError):
    """Data violates a structural invariant (unknown user/schema, mixed-scenario request, ...)."""


class DimensionError(MTFMError):
    pass


class DatasetParseError(MTFMError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class TrainingDiverged(MTFMError):
    def __init__(self, step: int, message: str = "loss is not finite"):
        super().__init__(f"step {step}: {message}")
        self.step = step


class NonFiniteGradient(MTFMError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class ContractError(MTFMError):
    pass


class VocabularyError(IntegrityError, LookupError):
    """Feature id outside its embedding table."""
