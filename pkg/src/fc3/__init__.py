"""Feasibility-based control chain coordination in a planar kinematic world."""
