"""Exception hierarchy shared across the package."""

from __future__ import annotations


class ReflexError(Exception):
    """Base class for every error raised by this package."""


class SchemaError(ReflexError):
    def __init__(self, path: str, reason: str) -> None:
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class UnknownTask(ReflexError):
    pass


class UnknownAgent(ReflexError):
    pass


class InvalidTransition(ReflexError):
    """An executed action was impossible in the current world; the validator let it through."""


class ParseError(ReflexError):
    def __init__(self, line: int, column: int, expected: str, message: str = "") -> None:
        detail = message or f"expected {expected}"
        super().__init__(f"line {line}, column {column}: {detail}")
        self.line = line
        self.column = column
        self.expected = expected


class UnknownVerb(ParseError):
    def __init__(self, token: str, line: int, column: int) -> None:
        super().__init__(line, column, "action verb", f"unknown verb {token!r}")
        self.token = token


class DuplicateAgent(ParseError):
    def __init__(self, agent_id: str, line: int, column: int) -> None:
        super().__init__(line, column, "new agent id", f"duplicate plan for agent {agent_id!r}")
        self.agent_id = agent_id


class ExtractionParseError(ReflexError):
    pass


class EmptyLibrary(ReflexError):
    pass


class IntegrityError(ReflexError):
    pass


class PlanSynthesisError(ReflexError):
    pass


class BackendError(ReflexError):
    """Any failure inside a chat-completion backend."""


class NetworkError(BackendError):
    pass


class RateLimited(BackendError):
    pass


class MalformedResponse(BackendError):
    pass


class FixtureExhausted(BackendError):
    pass


class ReplayDivergence(BackendError):
    def __init__(self, expected_hash: str, got_hash: str) -> None:
        super().__init__(f"prompt hash {got_hash} does not match recording {expected_hash}")
        self.expected_hash = expected_hash
        self.got_hash = got_hash
