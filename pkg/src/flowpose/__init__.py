"""Category-level 6D pose estimation from partial point clouds.

A conditional flow-matching generator proposes pose candidates, a PPO stage
with separate rotation/translation critics refines the sampler, and the
critics then rank candidates for value-guided aggregation.
"""

__version__ = "0.1.0"
