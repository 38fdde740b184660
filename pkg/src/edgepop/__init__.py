"""Federated popularity prediction for edge caching, end to end.

Subpackages: ``popdyn`` (request processes), ``nn`` (numerical core),
``model`` (recurrent auto-encoder), ``fed`` (federated loop),
``baselines`` (comparison methods), ``experiments``/``cli`` (harness).
"""

__version__ = "0.1.0"
