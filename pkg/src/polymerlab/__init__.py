"""Numerical laboratory for polymer endpoint densities in random environments:
a nonlocal reaction-diffusion flow with t^(2/3) spreading, Monte Carlo for the
multiplicative-noise stochastic heat equation, and the moment-hierarchy /
generator identities that tie the two together."""

__version__ = "0.1.0"
