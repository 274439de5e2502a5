"""Octopus: turn a hardware bus into a live MCP tool endpoint.

The pipeline runs probe -> identify -> interface -> serve -> deploy and a
daemon keeps the result alive (watch, heal, perceive). Every language-model
interaction goes through :mod:`octopus.agentport`.
"""

__version__ = "0.1.0"

import logging as _logging

_logging.getLogger("octopus").addHandler(_logging.NullHandler())
