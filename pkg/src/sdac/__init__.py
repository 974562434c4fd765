"""Safe distributional actor-critic at desk scale."""
