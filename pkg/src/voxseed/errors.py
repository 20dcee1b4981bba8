"""Error types shared across the package."""


class ShapeError(ValueError):
    """Array dims disagree with a documented contract."""


class NoSurfaceError(ValueError):
    """Mask has no object/background boundary to sample from."""


class EmptyMaskError(ValueError):
    """Operation undefined on an empty (or full, where stated) mask."""


class InvalidSpecError(ValueError):
    """Generator spec describes an unrealizable phantom."""


class TrainingDivergenceError(RuntimeError):
    """Non-finite loss or gradient encountered during optimization."""
