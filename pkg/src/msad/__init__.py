"""Moderately interacting multi-species particle systems and their
aggregation-diffusion limits.

The package is split by level of the hierarchy:

* :mod:`msad.kernels` -- Riesz potential, mollifier, radial kernel tables.
* :mod:`msad.particles` -- the N-particle SDE system and its mean-field copies.
* :mod:`msad.pde` -- intermediate and limiting PDE solvers on a periodic box.
* :mod:`msad.metrics` -- relative entropy, L1/L2 distances, coupling statistics.
* :mod:`msad.harness` -- rate experiments and log-log fits.

Heavy submodules are not imported here so that the command line can configure
the numba thread pool before anything is compiled.
"""

import os as _os

# the TBB build shipped with some numba wheels is too old; the workqueue layer is
# always available and results here do not depend on the layer anyway
_os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
