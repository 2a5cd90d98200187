"""Numerical core for fractional-Fourier cross-attention deformable registration.

Submodules
----------
volume   grid containers and the raw volume format
dfrft    eigendecomposition-based discrete fractional Fourier transform
fca      fractional cross-attention feature machinery and parameter accounting
warp     displacement fields, trilinear warping, Jacobians
losses   local cross-correlation, diffusion smoothness, analytic gradient
metrics  Dice, HD95, folding fraction, Jacobian spread
regopt   direct displacement-field optimization
synth    analytic phantom pairs with known deformation
cli      the ``fractfield`` command
"""

__version__ = "0.1.0"
