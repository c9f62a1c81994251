"""Exception hierarchy shared by every tpbft module."""


class TpbftError(Exception):
    """Base class for all library errors."""


# trust engine
class UnknownNode(TpbftError):
    pass


class SelfTransaction(TpbftError):
    pass


class EmptyMatrix(TpbftError):
    pass


# groups
class MissingTrust(TpbftError):
    pass


# consensus core
class NotPrimaryMember(TpbftError):
    pass


class EmptyProposal(TpbftError):
    pass


class GroupStageIncomplete(TpbftError):
    pass


class ConflictingFinal(TpbftError):
    """Two distinct block hashes both reached f+1 replies.

    Only reachable when more than f group members are Byzantine.
    """

    def __init__(self, first: bytes, second: bytes):
        super().__init__(f"conflicting finalization: {first.hex()[:16]} vs {second.hex()[:16]}")
        self.first = first
        self.second = second


# ledger
class EmptyLeaves(TpbftError):
    pass


class EmptyBlock(TpbftError):
    pass


class NotFinalized(TpbftError):
    pass


# gateway
class UnknownPatient(TpbftError):
    pass


class DuplicateDevice(TpbftError):
    pass


class UnregisteredDevice(TpbftError):
    pass


class MalformedAttributes(UnregisteredDevice):
    """Rejected at the edge because the attribute set is incomplete."""


class NotFound(TpbftError):
    pass


class StoreCorruption(TpbftError):
    pass


# scenarios
class ParseError(TpbftError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


class ValidationError(TpbftError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message
