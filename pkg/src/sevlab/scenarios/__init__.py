"""Attack scenarios against the simulated victim guest."""
