"""avbev: text-conditioned bird's-eye-view driving pipeline on a synthetic
world, with a from-scratch reverse-mode autodiff core and exact oracles."""

__version__ = "0.1.0"
