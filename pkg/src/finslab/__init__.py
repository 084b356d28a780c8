"""finslab: a numerical laboratory for Finsler metric measure spaces on flat 2-tori.

The geometry kernels are written in JAX (double precision) so that all
derivatives of F^2 are exact automatic derivatives; grids, distance graphs
and reports use numpy/scipy.
"""

import jax

jax.config.update("jax_enable_x64", True)

from .errors import *  # noqa: E402,F401,F403
from .metric import (  # noqa: E402,F401
    TorusDomain,
    FourierMode,
    MetricSpec,
    MeasureSpec,
    SpaceConfig,
    eval_F,
    fundamental_tensor,
    cartan_tensor,
    dual_norm,
    legendre_transform,
    misalignment,
    global_misalignment,
)

__version__ = "0.1.0"
