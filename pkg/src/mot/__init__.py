"""Mixture of Thoughts at desk scale: frozen toy experts collaborating through routed interaction layers."""
