"""Koopman-model economic MPC for a pasteurization-unit surrogate.

Modules: ``signals`` (excitation, scaling, CSV), ``plant`` (surrogate ODE),
``ssmodel`` (LTI container), ``subspace`` (Ho-Kalman baseline), ``koopman``
(deep Koopman training), ``estimator`` (offset-free Kalman filter), ``qp``
(ADMM solver), ``empc`` (condensed economic MPC), ``simloop`` (closed-loop
harness), ``pipeline`` and ``cli``.
"""

__version__ = "0.1.0"
