"""Simulated trusted execution environment.

An enclave hosts one installed program and steps it one input at a time.
Every resume output is signed by the enclave identity key over
(program id, output digest), which is what remote attestation checks.  The
identity key itself never leaves the enclave: even a compromised enclave only
exposes a program-bound signing oracle, so it can sign arbitrary payloads for
its own program but cannot impersonate a different program.

The program state is a serialization boundary: the hosted program must be
picklable, which is what makes freeze, replication and persistence uniform.

Fault injection (crash, compromise) is harness-only; the protocols under test
must survive it.
"""

from __future__ import annotations

import hashlib
import pickle
from dataclasses import dataclass, field

from . import crypto, encoding, sealing
from .errors import AlreadyInstalled, Crashed, NotInstalled, ProtocolError, StaleSnapshot
from .ledger import Transaction

RUNNING = "running"
CRASHED = "crashed"
COMPROMISED = "compromised"
FROZEN = "frozen"


def program_bound(program_id: str, payload: bytes) -> bytes:
    return encoding.encode((program_id, payload))


def attest_verify(claimed_program: str, output_digest: bytes, attestation: bytes, public: bytes) -> bool:
    """True iff attestation is a valid signature by the key over
    (claimed_program, output_digest)."""
    return crypto.verify(public, program_bound(claimed_program, output_digest), attestation)


@dataclass
class ResumeOutput:
    result: object = None
    messages: list = field(default_factory=list)  # (dest identity pub, wire bytes, not_before)
    transactions: list = field(default_factory=list)
    events: list = field(default_factory=list)
    error: str | None = None
    digest: bytes = b""
    attestation: bytes = b""

    def ok(self) -> bool:
        return self.error is None


class TeeServices:
    """Capabilities the enclave grants its program for one resume call.

    chain is the untrusted host's view of the blockchain (participant-mediated
    verification: the enclave itself has no ledger-read capability).  An
    adversarial host can lie through it; the protocols must stay safe anyway.
    """

    def __init__(self, enclave: "Enclave", now: float, chain=None):
        self._enclave = enclave
        self.now = now
        self.chain = chain
        self.frozen = enclave.status == FROZEN
        self.out_messages: list[tuple[bytes, bytes, float]] = []
        self.out_transactions: list[Transaction] = []
        self.events: list[tuple] = []

    @property
    def identity_public(self) -> bytes:
        return self._enclave.identity.public

    @property
    def program_id(self) -> str:
        return self._enclave.program_id

    def sign(self, payload: bytes) -> bytes:
        """Sign a payload bound to this enclave's program id."""
        return self._enclave._sign_bound(payload)

    def verify_peer(self, peer_public: bytes, payload: bytes, signature: bytes) -> bool:
        """Verify a payload signed by a peer enclave running the same program."""
        return crypto.verify(peer_public, program_bound(self._enclave.program_id, payload), signature)

    def entropy(self, *labels) -> bytes:
        """Deterministic per-enclave entropy stream."""
        self._enclave._entropy_counter += 1
        return crypto.derive_seed(self._enclave._seed, "entropy", self._enclave._entropy_counter, *labels)

    def send(self, dest_public: bytes, wire: bytes, not_before: float = 0.0) -> None:
        self.out_messages.append((dest_public, wire, not_before))

    def submit(self, tx: Transaction) -> None:
        self.out_transactions.append(tx)

    def note(self, *event) -> None:
        """Record a committed protocol event (consumed by the harness)."""
        self.events.append(tuple(event))

    def freeze_self(self) -> None:
        self._enclave.freeze()

    def persist(self, state_blob: bytes) -> float:
        """Seal state to stable storage; returns the simulated time at which
        the throttled monotonic counter admits the increment."""
        return self._enclave.persist_blob(state_blob, self.now)


class Enclave:
    """One logical enclave: identity keys plus one installed program."""

    def __init__(self, enclave_id: str, owner: str, seed: bytes, counter_rate: int = 10):
        self.id = enclave_id
        self.owner = owner
        self._seed = seed
        self.identity = crypto.keygen(crypto.derive_seed(seed, "identity"))
        self.seal_key = crypto.derive_seed(seed, "seal")
        self.program_id: str = ""
        self.program = None
        self.installed = False
        self.status = RUNNING
        self._entropy_counter = 0
        # Hardware-held: survives crashes and program wipes.
        self.counter = sealing.MonotonicCounter(rate_limit=counter_rate)
        self.stable_slot: bytes | None = None

    # -- F_TEE api ----------------------------------------------------------

    def install(self, program_id: str, program) -> None:
        if self.installed:
            raise AlreadyInstalled(f"enclave {self.id} already has a program")
        self.program_id = program_id
        self.program = program
        self.installed = True

    def resume(self, input_value, now: float = 0.0, chain=None) -> ResumeOutput:
        """Run one protocol step; the output is signed over (program, digest).

        Protocol-level rejections come back in the error field; a frozen
        enclave's program restricts inputs to settlement and release.
        """
        if not self.installed:
            raise NotInstalled(f"enclave {self.id} has no program")
        if self.status == CRASHED:
            raise Crashed(f"enclave {self.id} is crashed")
        services = TeeServices(self, now, chain)
        out = ResumeOutput()
        try:
            out.result = self.program.handle(services, input_value)
        except ProtocolError as exc:
            out.error = exc.code
        out.messages = services.out_messages
        out.transactions = services.out_transactions
        out.events = services.events
        out.digest = self._output_digest(out)
        out.attestation = self._sign_bound(out.digest)
        return out

    def _output_digest(self, out: ResumeOutput) -> bytes:
        body = encoding.encode(
            (
                repr(out.result),
                tuple((dest, wire) for dest, wire, _ in out.messages),
                tuple(tx.txid for tx in out.transactions),
                out.error or "",
            )
        )
        return hashlib.sha256(body).digest()

    def _sign_bound(self, payload: bytes) -> bytes:
        return crypto.sign(self.identity.secret, program_bound(self.program_id, payload))

    # -- state boundary -------------------------------------------------------

    def snapshot_state(self) -> bytes:
        return pickle.dumps(self.program, protocol=4)

    def load_state(self, blob: bytes) -> None:
        self.program = pickle.loads(blob)

    # -- fault injection and recovery (harness-only) ---------------------------

    def inject_crash(self) -> None:
        self.status = CRASHED
        self.program = None

    def inject_compromise(self) -> None:
        self.status = COMPROMISED

    def freeze(self) -> None:
        if self.status == RUNNING:
            self.status = FROZEN

    def restart_from(self, blob: bytes) -> None:
        """Reload program state after a crash (stable-storage path)."""
        self.load_state(blob)
        self.status = RUNNING

    # -- stable storage ---------------------------------------------------------

    def persist_blob(self, state_blob: bytes, now: float) -> float:
        """Seal state under a fresh counter value; returns the simulated time
        at which the throttled counter admits the increment."""
        value, ready = self.counter.increment(now)
        self.stable_slot = sealing.seal(self.seal_key, value, state_blob)
        return ready

    def restore_from_storage(self, blob: bytes | None = None) -> None:
        """Restore after a crash from a sealed blob (defaults to the stored
        slot).  Raises StaleSnapshot unless the blob's counter matches the
        hardware counter (roll-back detection)."""
        blob = blob if blob is not None else self.stable_slot
        if blob is None:
            raise StaleSnapshot("no sealed state available")
        state = sealing.unseal(self.seal_key, blob, self.counter.value)
        self.load_state(state)
        self.status = RUNNING

    # -- adversary api: available only after compromise -------------------------

    def adversary_read_state(self):
        if self.status != COMPROMISED:
            raise ProtocolError("enclave is not compromised")
        return self.program

    def adversary_sign(self, payload: bytes) -> bytes:
        """Program-bound signing oracle; cannot forge other program ids."""
        if self.status != COMPROMISED:
            raise ProtocolError("enclave is not compromised")
        return self._sign_bound(payload)
