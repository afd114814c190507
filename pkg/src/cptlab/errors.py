"""Exception hierarchy shared by every cptlab module."""


class CptLabError(Exception):
    """Base class for all library errors."""


class ContractError(CptLabError):
    """A documented precondition of an operation was violated."""


class DimensionError(ContractError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateBatchError(ContractError):
    """A loss was requested on a batch where every target is ignored."""


class SpecError(ContractError, ValueError):
    """A model or run specification is internally inconsistent."""


class HeadError(ContractError):
    """The attached head does not match the requested computation."""


class FamilyError(ContractError):
    """The operation is not defined for this model family."""


class DataError(ContractError, ValueError):
    """A dataset is empty or too small for the requested operation."""


class CapacityError(DataError):
    """A generator cannot produce the requested number of distinct samples."""


class DegenerateCodebookError(DataError):
    """Fewer distinct patches than requested codes."""


class SizeError(ContractError, ValueError):
    """A requested vocabulary size cannot hold the special tokens."""


class DuplicationError(ContractError, ValueError):
    """A token is already present in the vocabulary."""


class AlignmentError(ContractError, ValueError):
    """Two activation dumps do not share sample ids and ordering."""


class EstimatorDomainError(ContractError, ValueError):
    """The unbiased HSIC estimator needs at least four samples."""


class DegeneracyError(ContractError, ArithmeticError):
    """A CKA denominator is not positive."""


class ComparisonError(ContractError, ValueError):
    """Run records cannot be compared (different forgetting-control datasets)."""


class ExperienceError(CptLabError):
    """A scenario sub-step failed; carries the experience index."""

    def __init__(self, experience: int, cause: BaseException):
        super().__init__(f"experience {experience}: {type(cause).__name__}: {cause}")
        self.experience = experience
        self.cause = cause
