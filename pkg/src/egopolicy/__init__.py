"""Turn egocentric hand videos into robot training data and co-train a policy.

The package is organised as a pipeline over clip bundles (geometry ->
retargeting -> 2D waypoint labels -> filtering -> dataset files), a small
neural stack with hand-written gradients (FiLM-conditioned encoder,
keypoint head, diffusion action head), training loops, and a synthetic
benchmark environment used to measure out-of-distribution transfer.
"""

__version__ = "0.1.0"
