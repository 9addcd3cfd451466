"""Geometric aided-inertial-navigation toolkit.

Modules:
    liegroups       group operations and Jacobians
    strapdown       exact discrete propagation of pose and covariance
    preintegration  keyframe-to-keyframe increment accumulation
    inekf           invariant Kalman correction and the sensor catalogue
    observability   rank / null-space analysis of linearized models
    observers       Riccati-gain and synchronous nonlinear observers
    simkit          deterministic scenario simulation and Monte Carlo
    cli             command-line entry point
"""

__version__ = "0.1.0"
