"""Robust corridor-constrained tube MPC for uncertain planar manipulators."""
