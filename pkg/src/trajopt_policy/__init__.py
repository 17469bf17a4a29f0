"""Constrained imitation learning with a differentiable trajectory-optimization
action head: every emitted action sequence satisfies position, velocity, and
acceleration bounds by construction, during training and deployment alike."""

__version__ = "0.1.0"
