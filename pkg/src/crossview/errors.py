"""Exception hierarchy shared across the package.

Input-side problems (bad files, bad configs, violated preconditions) derive
from InputError; algorithmic failures (degenerate geometry, registration or
meshing breakdown) derive from AlgorithmError.  The CLI maps the two branches
to distinct exit codes.
"""


class CrossViewError(Exception):
    pass


class InputError(CrossViewError):
    pass


class ParseError(InputError):
    pass


class UnsupportedFormatError(InputError):
    pass


class ValidationError(InputError):
    pass


class ConfigError(InputError):
    pass


class AlgorithmError(CrossViewError):
    pass


class BehindCameraError(AlgorithmError):
    pass


class DegeneracyError(AlgorithmError):
    pass


class RegistrationError(AlgorithmError):
    pass


class AlignmentError(RegistrationError):
    pass


class MeshingError(AlgorithmError):
    pass


class GenerationError(AlgorithmError):
    pass


class EvalError(AlgorithmError):
    pass
