"""Multi-scale essay representation scoring engine."""
