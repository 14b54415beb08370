"""Federated Reptile simulator with one-shot backdoor attacks and a matching-network defense."""

from .version import get_cached_version

__version__ = get_cached_version()
