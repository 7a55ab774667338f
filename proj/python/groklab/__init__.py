"""Python interface to the groklab C++ core.

Structured values (dataset specs, accuracy records, fits) travel as plain
dicts; everything heavy runs in the native module.
"""

from ._groklab import (
    __version__,
    evaluate,
    fit_logistic,
    generate,
    load_split,
    logistic,
    normalized_rate,
    parameter_count,
    patch,
    probe,
    report,
    score,
    sweep,
    train,
)

__all__ = [
    "__version__",
    "evaluate",
    "fit_logistic",
    "generate",
    "load_split",
    "logistic",
    "normalized_rate",
    "parameter_count",
    "patch",
    "probe",
    "report",
    "score",
    "sweep",
    "train",
]
