"""Exception types shared across the package."""


class CodebookFormatError(ValueError):
    """Raised when a codebook file is malformed; carries the byte offset."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MeshParseError(ValueError):
    """Raised for malformed OBJ/PLY input; carries the 1-based line number."""

    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


class BehindCameraError(ValueError):
    """A point or translation with non-positive depth where depth is required."""


class DegenerateCodeError(ValueError):
    """A latent code with zero norm cannot be compared by cosine similarity."""


class DegenerateViewError(ValueError):
    """The ground-truth render has an empty silhouette."""


class InsufficientDataError(ValueError):
    """Too few points to carry out the requested estimation."""


class NoOverlapError(RuntimeError):
    """No correspondences within threshold anywhere in the search range."""


class InsufficientOverlapError(RuntimeError):
    """Correspondence count dropped below the minimum; carries the iteration."""

    def __init__(self, message, iteration):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class DegenerateGeometryError(RuntimeError):
    """The normal equations of a solve are unusable (rank zero or non-finite)."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss; carries the iteration."""

    def __init__(self, message, iteration):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration
