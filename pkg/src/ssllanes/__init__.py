"""Lane-graph motion forecasting with self-supervised pretext tasks."""

__version__ = "0.1.0"
