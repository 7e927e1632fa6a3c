"""Exception hierarchy shared by every memflow module."""


class MemflowError(Exception):
    """Base class for all errors raised by memflow."""


class ContractError(MemflowError, ValueError):
    """A caller broke an operation's precondition (shape, range, index)."""


class DomainError(MemflowError, ArithmeticError):
    """A numerical evaluation produced a non-finite value."""


class TrajectoryBlowUp(MemflowError):
    """Integration left the finite region; ``last_valid`` is the last good row index."""

    def __init__(self, message, last_valid, states=None):
        super().__init__(message)
        self.last_valid = last_valid
        self.states = states


class FormatError(MemflowError):
    """File magic or version does not match the expected format."""


class IntegrityError(MemflowError):
    """File header and payload disagree (truncated or padded payload)."""


class EmptyDatasetError(MemflowError):
    """No trajectory was long enough to yield a single training window."""


class TrainingDiverged(MemflowError):
    def __init__(self, message, epoch, checkpoint=None):
        super().__init__(message)
        self.epoch = epoch
        self.checkpoint = checkpoint
