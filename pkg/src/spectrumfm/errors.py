"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failures to
its exit-code contract without inspecting messages.
"""


class SpectrumFMError(Exception):
    exit_code = 1


class ConfigError(SpectrumFMError, ValueError):
    exit_code = 2


class DataError(SpectrumFMError, ValueError):
    exit_code = 3


class DataIntegrityError(DataError):
    """Non-finite or otherwise unusable sample values."""


class CorruptionError(DataError):
    """Dataset payload disagrees with its manifest."""


class UnsupportedFormatError(DataError):
    """Unknown dataset or archive format version."""


class ShapeError(SpectrumFMError, ValueError):
    exit_code = 3


class ShapeMapError(ShapeError):
    """An archive does not fit the model it is loaded onto.

    ``sites`` lists every offending dotted path.
    """

    def __init__(self, sites, detail=""):
        self.sites = list(sites)
        msg = "shape mismatch at: " + ", ".join(self.sites)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class UndefinedLossError(SpectrumFMError, ValueError):
    """Masked reconstruction loss requested with no masked positions."""


class TrainingDivergedError(SpectrumFMError, RuntimeError):
    exit_code = 1


class AdapterStateError(SpectrumFMError, RuntimeError):
    """Adapter operation requested in the wrong state (e.g. merging twice)."""


class NothingToTrainError(SpectrumFMError, RuntimeError):
    pass


class EvaluationError(SpectrumFMError, ValueError):
    exit_code = 3


class CalibrationError(EvaluationError):
    pass
