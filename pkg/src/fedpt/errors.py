"""Exception hierarchy shared by every module."""

from __future__ import annotations


class FedPTError(Exception):
    """Base class; ``category`` doubles as the CLI exit-code label."""

    category = "error"
    exit_code = 1


class InputError(FedPTError, ValueError):
    category = "input"
    exit_code = 2


class ConfigurationError(FedPTError, ValueError):
    category = "configuration"
    exit_code = 3


class FormatError(FedPTError, ValueError):
    category = "format"
    exit_code = 4


class ContractViolation(FedPTError, AssertionError):
    category = "contract"
    exit_code = 5
