#!/usr/bin/env python3
"""
Error Types
Exception hierarchy shared by the networked actor-critic toolkit
"""


class NetSACError(Exception):
    """Base class for every error raised by netsac modules"""


class ConfigError(NetSACError):
    """
    Invalid configuration or fixture file

    Carries the source line of the offending key when it is known.
    """

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}: "
        if line is not None:
            where += f"line {line}: "
        super().__init__(f"{where}{message}")


class AgentIndexError(NetSACError, IndexError):
    """Agent index outside 0..n-1"""


class KernelError(NetSACError):
    """Malformed transition kernel row or reward outside its declared bound"""


class OracleCapError(NetSACError):
    """Instance too large for the dense oracles"""


class ChainError(NetSACError):
    """Markov chain is reducible or periodic"""


class ContractionError(NetSACError):
    """Fixed-point iteration failed to contract"""


class ProvenanceError(NetSACError):
    """Trajectory and critic tables come from different inner loops"""


class PreconditionError(NetSACError, ValueError):
    """Parameter outside the domain of a formula or operation"""


class ScheduleWarning(UserWarning):
    """A step-size or convergence-bound precondition is violated; the run proceeds"""
