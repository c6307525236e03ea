"""Work extraction from coherent qubits with a ladder reference.

Modules: ``qcore`` (states and entropies), ``thermo`` (thermal work
formulas), ``ladder`` (the reference system and its Kraus maps),
``protocol`` (repeatable extraction protocols), ``checks`` (invariant
suite) and ``cli``.
"""

from __future__ import annotations

__version__ = "0.1.0"

from . import checks, ladder, protocol, qcore, thermo  # noqa: E402,F401
from .errors import (  # noqa: F401
    CohworkError,
    ContractViolation,
    DegenerateBranchError,
    ResourceLimitError,
    TruncationError,
    WorkLockingError,
)
