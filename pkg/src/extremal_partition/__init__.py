"""Locally stationary Brown-Resnick dependence models with fused penalties and region merging."""
