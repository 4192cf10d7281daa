class BirvaeError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(BirvaeError, ValueError):
    pass


class DomainError(BirvaeError, ValueError):
    pass


class FormatError(BirvaeError, ValueError):
    """A file or bitstream does not follow its binary layout."""


class NumericalError(BirvaeError, ArithmeticError):
    pass
