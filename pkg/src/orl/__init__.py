"""Offline RL laboratory: TD3+BC from first principles on toy control tasks."""

__version__ = "0.1.0"
