"""Exception hierarchy shared by all modules.

Every error carries a machine-readable ``code`` (the class name) that the
HTTP layer puts into error responses, plus an ``http_status`` used when the
error crosses the REST boundary.
"""


class ReplicatError(Exception):
    http_status = 400

    @property
    def code(self) -> str:
        return type(self).__name__


class NotFoundError(ReplicatError):
    http_status = 404


class ConflictError(ReplicatError):
    http_status = 409


class AuthError(ReplicatError):
    http_status = 401


# --- namespace / catalog ---

class UnknownScope(NotFoundError):
    pass


class UnknownDid(NotFoundError):
    pass


class DuplicateIdentifier(ConflictError):
    pass


class SchemaViolation(ReplicatError):
    pass


class ClosedCollection(ConflictError):
    pass


class TypeMismatch(ConflictError):
    pass


class CycleDetected(ConflictError):
    pass


class MonotonicViolation(ConflictError):
    pass


class UnknownAttachment(NotFoundError):
    pass


class AlreadyClosed(ConflictError):
    pass


class NotACollection(ConflictError):
    pass


class UniquenessViolation(ConflictError):
    pass


# --- storage ---

class DuplicateRse(ConflictError):
    pass


class InvalidProtocol(ReplicatError):
    pass


class UnknownRse(NotFoundError):
    pass


class MissingPath(ReplicatError):
    pass


class PathPolicyViolation(ReplicatError):
    """Explicit path supplied for an RSE that derives its own paths."""


class PathCollision(ConflictError):
    pass


class UnknownReplica(NotFoundError):
    pass


class NotFound(NotFoundError):
    """A storage backend path does not exist."""


class InjectedFailure(ReplicatError):
    """Raised by backends when fault injection trips."""
    http_status = 503


class InsufficientSpace(ConflictError):
    pass


class DeletionDisabled(ConflictError):
    pass


# --- expressions ---

class ExpressionSyntaxError(ReplicatError):
    """Malformed set expression; ``position`` is the 0-based offset."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at offset {position})")
        self.position = position


# --- rules ---

class QuotaExceeded(ConflictError):
    pass


class InsufficientTargets(ConflictError):
    pass


class InvalidExpression(ReplicatError):
    pass


class UnknownRule(NotFoundError):
    pass


class PermissionDenied(ReplicatError):
    http_status = 403


class ChildRuleNotReady(ConflictError):
    """The rule is pinned by an unfinished rebalance child rule."""


class UnknownRequest(NotFoundError):
    pass


class InvalidFilter(ReplicatError):
    pass


class UnknownAccount(NotFoundError):
    pass


# --- auditing ---

class UnsortedDump(ReplicatError):
    pass


class MissingDump(ReplicatError):
    pass


# --- rebalancing ---

class UnsatisfiableRule(ConflictError):
    pass


class RseWriteEnabled(ConflictError):
    """Decommissioning requires write access to be disabled first."""


class InvalidVolume(ReplicatError):
    pass


# --- gateway ---

class InvalidCredentials(AuthError):
    pass


class UnmappedAccount(AuthError):
    pass


class ExpiredToken(AuthError):
    pass


class UnknownToken(AuthError):
    pass


class UnknownCursor(NotFoundError):
    pass


class NoLiveWorkers(ReplicatError):
    http_status = 503


class DuplicateAccount(ConflictError):
    pass


class DuplicateScope(ConflictError):
    pass


# --- scenarios ---

class ScenarioInvalid(ReplicatError):
    pass
