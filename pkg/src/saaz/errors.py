"""Exception hierarchy shared by every stage of the controller."""


class SaazError(Exception):
    """Base class for all errors raised by this package."""


# policy core
class UnknownResource(SaazError):
    pass


class MalformedPredicate(SaazError):
    """A rule predicate that cannot be evaluated; an authoring bug, never a Deny."""


class ConflictingDelta(SaazError):
    pass


class StaleDelta(SaazError):
    pass


class InvalidPolicy(SaazError):
    def __init__(self, message, diagnostics=()):
        super().__init__(message)
        self.diagnostics = list(diagnostics)


# infrastructure
class IdPBanned(SaazError):
    pass


class IdPUnavailable(SaazError):
    pass


class UnknownSubject(SaazError):
    pass


class CredentialsSuspended(SaazError):
    """Subject credentials are blocked at the identity service (reset or strict protocol pending)."""


class SessionTerminated(SaazError):
    pass


class UnknownSession(SaazError):
    pass


class UnknownParty(SaazError):
    pass


# knowledge / analyse
class UnknownThreatClass(SaazError):
    pass


class PreconditionViolation(SaazError):
    pass


class MissingAssociatedSignature(SaazError):
    pass


class EmptyAlertSet(SaazError):
    pass


class InsufficientHistory(SaazError):
    pass


# monitor
class UnknownTemplate(SaazError):
    pass


class BadParameters(SaazError):
    pass


class UnknownProbe(SaazError):
    pass


class EmptyReadings(SaazError):
    pass


# plan / execute
class EmptyList(SaazError):
    pass


class InfeasibleOption(SaazError):
    pass


class UnknownCheckpoint(SaazError):
    pass


class UnknownEffector(SaazError):
    pass


# simulation / config
class UnknownScenario(SaazError):
    pass


class ConfigError(SaazError):
    pass


class UnsupportedOperation(SaazError):
    """The target component cannot perform the requested policy operation."""
