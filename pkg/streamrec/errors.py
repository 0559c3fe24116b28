from typing import Optional

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class StreamRecError(Exception):
    """Base class for every error raised by ``streamrec``.

    ``exit_code`` is what the command line front end returns when the error
    escapes a subcommand.
    """

    exit_code: int = EXIT_DATA


# core


class EmptyCorpus(StreamRecError, ValueError):
    def __init__(self) -> None:
        super().__init__("Embedding corpus is empty")


class DimensionMismatch(StreamRecError, ValueError):
    def __init__(self, index: int, expected: int, got: int) -> None:
        self.index = index
        self.expected = expected
        self.got = got
        super().__init__(
            f"Vector at index {index} has dimension {got}, expected {expected}"
        )


class NonFiniteValue(StreamRecError, ValueError):
    def __init__(self, index: int) -> None:
        self.index = index
        super().__init__(f"Non-finite value (NaN or Inf) at index {index}")


class CodeOutOfRange(StreamRecError, ValueError):
    def __init__(self, level: int, value: int, size: int) -> None:
        self.level = level
        self.value = value
        self.size = size
        super().__init__(
            f"Code component c{level}={value} outside codebook of size {size}"
        )


class FormatError(StreamRecError, ValueError):
    """An artifact file does not follow its documented layout."""


# simgen


class InvalidConfig(StreamRecError, ValueError):
    exit_code = EXIT_USAGE


class EmptySplit(StreamRecError, ValueError):
    def __init__(self, n_train: int, n_eval: int) -> None:
        self.n_train = n_train
        self.n_eval = n_eval
        super().__init__(
            f"Temporal split leaves an empty side (train={n_train}, eval={n_eval})"
        )


class UnsortedLog(StreamRecError, ValueError):
    def __init__(self, position: int) -> None:
        self.position = position
        super().__init__(
            f"Interaction log is not sorted by timestamp at record {position}"
        )


# nnkit


class ShapeMismatch(StreamRecError, ValueError):
    pass


class NumericFailure(StreamRecError, ArithmeticError):
    exit_code = EXIT_NUMERIC


# retrieval


class UnknownAuthor(StreamRecError, LookupError):
    def __init__(self, author_id: int) -> None:
        self.author_id = author_id
        super().__init__(f"Unknown author id {author_id}")


class UnknownUser(StreamRecError, LookupError):
    def __init__(self, user_id: int) -> None:
        self.user_id = user_id
        super().__init__(f"Unknown user id {user_id}")


class ZeroNormRow(StreamRecError, ValueError):
    def __init__(self, side: str, row: int) -> None:
        self.side = side
        self.row = row
        super().__init__(f"Row {row} of {side} has zero norm and cannot be normalized")


class NoPositives(StreamRecError, ValueError):
    def __init__(self) -> None:
        super().__init__("Training log contains no positive (click=1) events")


class MissingWindow(StreamRecError, LookupError):
    def __init__(
        self,
        author_id: int,
        session_id: Optional[int] = None,
        window_index: Optional[int] = None,
    ) -> None:
        self.author_id = author_id
        self.session_id = session_id
        self.window_index = window_index
        if session_id is None:
            msg = f"No window available for author {author_id}"
        else:
            msg = (
                f"No window for author {author_id}, "
                f"session {session_id}, window {window_index}"
            )
        super().__init__(msg)


class KTooLarge(StreamRecError, ValueError):
    def __init__(self, k: int, n: int) -> None:
        self.k = k
        self.n = n
        super().__init__(f"Cannot retrieve top {k} from an index of {n} authors")


class EmptyP(StreamRecError, ValueError):
    def __init__(self) -> None:
        super().__init__("Recall-mode hit rate needs a non-empty watched set")


# quantizer


class InvalidK(StreamRecError, ValueError):
    def __init__(self, k: int, n: int) -> None:
        self.k = k
        self.n = n
        super().__init__(f"Invalid cluster count k={k} for {n} points")


class CorpusTooSmall(StreamRecError, ValueError):
    def __init__(self, n: int, k: int) -> None:
        self.n = n
        self.k = k
        super().__init__(f"Corpus of {n} rows cannot seed a codebook level of size {k}")


# ranking


class IdOutOfRange(StreamRecError, LookupError):
    def __init__(self, kind: str, value: int, size: int) -> None:
        self.kind = kind
        self.value = value
        self.size = size
        super().__init__(f"{kind} id {value} outside table of size {size}")


class EmptyLog(StreamRecError, ValueError):
    def __init__(self) -> None:
        super().__init__("Interaction log is empty")


class SingleClass(StreamRecError, ValueError):
    def __init__(self) -> None:
        super().__init__("AUC needs at least one positive and one negative label")


class NoEligibleUsers(StreamRecError, ValueError):
    def __init__(self) -> None:
        super().__init__("GAUC needs at least one user with both label classes")


# cli


class ParseError(StreamRecError, ValueError):
    exit_code = EXIT_USAGE

    def __init__(self, line: int, reason: str) -> None:
        self.line = line
        self.reason = reason
        super().__init__(f"Config parse error at line {line}: {reason}")


class UnknownKey(StreamRecError, KeyError):
    exit_code = EXIT_USAGE

    def __init__(self, key: str) -> None:
        self.key = key
        super().__init__(key)

    def __str__(self) -> str:
        return f"Unknown config key '{self.key}'"


class MissingArtifact(StreamRecError, FileNotFoundError):
    def __init__(self, stage: str, path: str) -> None:
        self.stage = stage
        self.path = path
        super().__init__(
            f"Stage '{stage}' has not produced {path}; run it first"
        )


class StageError(StreamRecError, RuntimeError):
    def __init__(self, stage: str, cause: StreamRecError) -> None:
        self.stage = stage
        self.cause = cause
        self.exit_code = cause.exit_code
        super().__init__(f"[{stage}] {cause}")
