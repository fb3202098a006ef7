"""Exception types shared by every stage."""


class UtivadError(Exception):
    """Base class for all pipeline errors."""


class ValidationError(UtivadError, ValueError):
    """Bad input, bad configuration or a violated precondition."""


class DimensionError(ValidationError):
    """Tensor shapes do not compose. The message names the offending axis."""

    def __init__(self, axis: str, detail: str):
        self.axis = axis
        super().__init__(f"dimension error on axis '{axis}': {detail}")


class NonFiniteError(UtivadError, ArithmeticError):
    """NaN or Inf reached a layer boundary or a parameter update."""

    def __init__(self, where: str, detail: str = "non-finite values"):
        self.where = where
        super().__init__(f"{detail} in {where}")


class DivergenceError(UtivadError, RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch}, batch {batch} (loss={loss})")
