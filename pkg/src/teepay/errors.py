"""Protocol error types.

Every rejection a handler can produce is a distinct exception class so tests
can assert on the exact failure mode.  Enclave dispatch catches ProtocolError
and turns it into an error reply; anything else propagates as a bug.
"""


class ProtocolError(Exception):
    """Base class for protocol-level rejections."""

    @property
    def code(self) -> str:
        return type(self).__name__


# crypto
class AuthenticationFailure(ProtocolError): ...


# ledger
class InvalidSignature(ProtocolError): ...
class UnknownInput(ProtocolError): ...
class InsufficientSignatures(ProtocolError): ...
class Conflict(ProtocolError): ...


# tee
class AlreadyInstalled(ProtocolError): ...
class NotInstalled(ProtocolError): ...
class Crashed(ProtocolError): ...


# channel
class AlreadyExists(ProtocolError): ...
class DuplicateChannel(ProtocolError): ...
class AddressMismatch(ProtocolError): ...
class UnknownAddress(ProtocolError): ...
class DuplicateDeposit(ProtocolError): ...
class DepositNotFree(ProtocolError): ...
class NotConfirmedOnLedger(ProtocolError): ...
class AlreadyApproved(ProtocolError): ...
class ChannelClosed(ProtocolError): ...
class NotApproved(ProtocolError): ...
class NotFree(ProtocolError): ...
class InsufficientBalance(ProtocolError): ...
class ChannelLocked(ProtocolError): ...
class StaleSequence(ProtocolError): ...
class NotAssociated(ProtocolError): ...
class UnknownChannel(ProtocolError): ...


# multihop
class InvalidEvidence(ProtocolError): ...
class InsufficientFreeDeposits(ProtocolError): ...
class StageMismatch(ProtocolError): ...


# replication
class AttestFailed(ProtocolError): ...
class TailOccupied(ProtocolError): ...
class ChainBroken(ProtocolError): ...
class ChainFrozen(ProtocolError): ...
class InsufficientLiveMembers(ProtocolError): ...
class StateMismatch(ProtocolError): ...
class StaleSnapshot(ProtocolError): ...
class RateLimited(ProtocolError): ...


# harness
class ScenarioInvalid(ProtocolError): ...
class OracleDivergence(ProtocolError): ...
class ParamOutOfRange(ProtocolError): ...
