from __future__ import annotations


class EseaflError(Exception):
    """Base class for every error raised by eseafl."""


# Input shape and parameter errors


class ConfigurationError(EseaflError, ValueError):
    pass


class LengthMismatch(EseaflError, ValueError):
    pass


class EmptyList(EseaflError, ValueError):
    pass


class InvalidThreshold(EseaflError, ValueError):
    pass


class InsufficientShares(EseaflError, ValueError):
    pass


class DuplicateIndex(EseaflError, ValueError):
    pass


class InvalidK(EseaflError, ValueError):
    pass


class InvalidPoint(EseaflError, ValueError):
    pass


# Cryptographic failures


class AuthFailure(EseaflError):
    """Authenticated decryption rejected the ciphertext or its tag."""


# Inbound message rejections. These never abort a role.


class RejectedMessage(EseaflError):
    pass


class UnknownUser(RejectedMessage):
    pass


class BadSignature(RejectedMessage):
    pass


class StaleIteration(RejectedMessage):
    """The message belongs to a round that is already closed."""


class ReplayedIteration(EseaflError):
    """A user was asked to mask a second update for the same iteration."""


# Round failures


class RoundError(EseaflError):
    pass


class BelowThreshold(RoundError):
    """Fewer than ceil(alpha * n) users participated; the sum is withheld."""


class ListMismatch(RoundError):
    pass


class BadNodeSignature(RoundError):
    pass


class MissingNodeMessage(RoundError):
    pass


# Wire errors


class MalformedFrame(EseaflError, ValueError):
    pass


class FrameTooLarge(EseaflError, ValueError):
    pass


class ConnectionClosed(EseaflError):
    pass


class UsageError(EseaflError):
    pass
