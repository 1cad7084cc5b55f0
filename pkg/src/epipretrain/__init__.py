"""Self-supervised multi-disease pre-training for weekly epidemic series.

Modules: ``data`` (ingestion, normalization, seasons), ``model`` (segment
transformer), ``ssl`` (pre-training tasks), ``training``, ``tasks``
(downstream forecasting and season targets), ``harness`` and ``cli``.
"""

__version__ = "0.1.0"
