"""Local Bayesian influence functions: SGLD-sampled covariance attributions
for small models, with dense classical oracles and an LDS harness."""

__version__ = "0.1.0"
