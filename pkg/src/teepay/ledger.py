"""Simulated asynchronous blockchain.

Models exactly what the protocols rely on: multisig outputs, transaction
submission with no confirmation-time bound, and first-confirmation-wins
double-spend resolution.  Confirmation is driven one transaction at a time by
the harness scheduler, which may reorder or delay arbitrarily; safety
arguments therefore depend only on ordering, never on latency.

Amounts are integer units, fees are zero, and there are no forks: a confirmed
transaction is final.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

from . import crypto, encoding
from .errors import InsufficientSignatures, InvalidSignature, UnknownInput

OutputId = tuple[str, int]


@dataclass(frozen=True)
class Address:
    """Spending policy: m distinct keys out of n must sign.

    Single-key payout addresses use kind "single"; fund deposits always use
    kind "multisig", even when m = n = 1, so deposit outputs are
    distinguishable from plain payouts.
    """

    kind: str  # "single" | "multisig"
    m: int
    keys: tuple[bytes, ...]

    def __post_init__(self):
        if self.kind not in ("single", "multisig"):
            raise ValueError(f"unknown address kind {self.kind}")
        if not 1 <= self.m <= len(self.keys):
            raise ValueError("address threshold must satisfy 1 <= m <= n")
        if len(set(self.keys)) != len(self.keys):
            raise ValueError("address keys must be distinct")
        if self.kind == "single" and (self.m != 1 or len(self.keys) != 1):
            raise ValueError("single address holds exactly one key")

    def encode(self) -> tuple:
        return (self.kind, self.m, tuple(self.keys))


def single(key: bytes) -> Address:
    return Address("single", 1, (key,))


def multisig(m: int, keys: tuple[bytes, ...] | list[bytes]) -> Address:
    return Address("multisig", m, tuple(keys))


@dataclass(frozen=True)
class TxInput:
    output_id: OutputId
    # independent signatures over the transaction payload, as (key, sig) pairs
    signatures: tuple[tuple[bytes, bytes], ...] = ()


@dataclass(frozen=True)
class Transaction:
    inputs: tuple[TxInput, ...]
    outputs: tuple[tuple[Address, int], ...]
    lock_height: int = 0  # not confirmable before this height

    def payload(self) -> bytes:
        """Canonical signing payload; excludes signatures."""
        return encoding.encode(
            (
                "tx",
                tuple((txid, idx) for ((txid, idx), _sigs) in
                      ((i.output_id, i.signatures) for i in self.inputs)),
                tuple((addr.encode(), amount) for addr, amount in self.outputs),
                self.lock_height,
            )
        )

    @property
    def txid(self) -> str:
        return hashlib.sha256(self.payload()).hexdigest()

    def signed_by(self, keypair: crypto.KeyPair, input_ids: list[OutputId] | None = None) -> "Transaction":
        """Return a copy with keypair's signature added to the given inputs
        (all inputs when input_ids is None)."""
        sig = crypto.sign(keypair.secret, self.payload())
        new_inputs = []
        for txin in self.inputs:
            if input_ids is None or txin.output_id in input_ids:
                if any(pk == keypair.public for pk, _ in txin.signatures):
                    new_inputs.append(txin)
                else:
                    new_inputs.append(replace(txin, signatures=txin.signatures + ((keypair.public, sig),)))
            else:
                new_inputs.append(txin)
        return replace(self, inputs=tuple(new_inputs))

    def conflicts_with(self, other: "Transaction") -> bool:
        """Two transactions conflict iff their input output-id sets intersect."""
        mine = {i.output_id for i in self.inputs}
        theirs = {i.output_id for i in other.inputs}
        return bool(mine & theirs)


def unsigned_transaction(
    input_ids: list[OutputId],
    outputs: list[tuple[Address, int]],
    lock_height: int = 0,
) -> Transaction:
    return Transaction(
        inputs=tuple(TxInput(oid) for oid in input_ids),
        outputs=tuple((addr, int(amount)) for addr, amount in outputs),
        lock_height=lock_height,
    )


@dataclass
class LedgerOutput:
    id: OutputId
    address: Address
    amount: int
    status: str = "confirmed"  # "confirmed" | "spent"
    confirmed_height: int = 0


@dataclass(frozen=True)
class SubmitReceipt:
    txid: str
    accepted: bool
    reason: str = ""


@dataclass
class LedgerState:
    outputs: dict[OutputId, LedgerOutput] = field(default_factory=dict)
    mempool: list[Transaction] = field(default_factory=list)
    height: int = 0
    events: list[dict] = field(default_factory=list)
    confirmed_txids: set[str] = field(default_factory=set)
    conflicted_txids: set[str] = field(default_factory=set)

    # -- setup ------------------------------------------------------------

    def genesis(self, grants: list[tuple[bytes, int]]) -> None:
        """Grant initial balances to public keys before the run starts."""
        if self.height or self.outputs:
            raise ValueError("genesis must run on an empty ledger")
        for idx, (key, amount) in enumerate(grants):
            oid = ("genesis", idx)
            self.outputs[oid] = LedgerOutput(oid, single(key), int(amount), "confirmed", 0)
        self.events.append(
            {
                "kind": "genesis",
                "height": 0,
                "outputs": [
                    [list(oid), self.outputs[oid].amount] for oid in sorted(self.outputs)
                ],
            }
        )

    # -- submission -------------------------------------------------------

    def submit(self, tx: Transaction) -> SubmitReceipt:
        """Validate and queue a transaction.  No confirmation-time bound: the
        harness decides when (or whether, under an adversary) it confirms."""
        txid = tx.txid
        if txid in self.confirmed_txids or any(p.txid == txid for p in self.mempool):
            return SubmitReceipt(txid, accepted=True, reason="duplicate")
        payload = tx.payload()
        in_sum = 0
        for txin in tx.inputs:
            out = self.outputs.get(txin.output_id)
            if out is None:
                raise UnknownInput(f"unknown input {txin.output_id}")
            in_sum += out.amount
            policy = out.address
            valid_signers = set()
            for pk, sig in txin.signatures:
                if pk not in policy.keys:
                    raise InvalidSignature(f"signer not in policy for {txin.output_id}")
                if not crypto.verify(pk, payload, sig):
                    raise InvalidSignature(f"bad signature on {txin.output_id}")
                valid_signers.add(pk)
            if len(valid_signers) < policy.m:
                raise InsufficientSignatures(
                    f"{len(valid_signers)} of {policy.m} required signatures on {txin.output_id}"
                )
        if len({i.output_id for i in tx.inputs}) != len(tx.inputs):
            raise UnknownInput("transaction spends the same output twice")
        out_sum = sum(amount for _, amount in tx.outputs)
        if any(amount < 0 for _, amount in tx.outputs):
            raise ValueError("negative output amount")
        if in_sum != out_sum:
            raise ValueError(f"amount conservation violated: in={in_sum} out={out_sum}")
        self.mempool.append(tx)
        return SubmitReceipt(txid, accepted=True)

    # -- confirmation (harness-driven clock) --------------------------------

    def pending_txids(self) -> list[str]:
        return [tx.txid for tx in self.mempool]

    def confirm_next(self, txid: str | None = None) -> str | None:
        """Pop the selected (or first) mempool transaction.  Confirms it if
        its inputs are still unspent and its lock height has passed;
        otherwise drops it as conflicted.  Returns the txid on confirmation.
        """
        if not self.mempool:
            return None
        index = 0
        if txid is not None:
            index = next((i for i, tx in enumerate(self.mempool) if tx.txid == txid), -1)
            if index < 0:
                return None
        tx = self.mempool.pop(index)
        if tx.lock_height > self.height:
            # Not yet valid: goes back to the pool untouched.
            self.mempool.insert(index, tx)
            return None
        if any(self.outputs[i.output_id].status != "confirmed" for i in tx.inputs):
            self.conflicted_txids.add(tx.txid)
            self.events.append({"kind": "conflict", "height": self.height, "txid": tx.txid})
            return None
        self.height += 1
        for txin in tx.inputs:
            self.outputs[txin.output_id].status = "spent"
        created = []
        for idx, (addr, amount) in enumerate(tx.outputs):
            if amount == 0:
                continue
            oid = (tx.txid, idx)
            self.outputs[oid] = LedgerOutput(oid, addr, amount, "confirmed", self.height)
            created.append(oid)
        self.confirmed_txids.add(tx.txid)
        self.events.append(
            {
                "kind": "confirm",
                "height": self.height,
                "txid": tx.txid,
                "inputs": [list(i.output_id) for i in tx.inputs],
                "input_sigs": [len(i.signatures) for i in tx.inputs],
                "input_policies": [list(self.outputs[i.output_id].address.encode()[:2]) for i in tx.inputs],
                "outputs": [
                    [addr.kind, addr.m, len(addr.keys), amount] for addr, amount in tx.outputs
                ],
            }
        )
        return tx.txid

    def confirm_all(self, order: list[str] | None = None) -> list[str]:
        """Drain the mempool, optionally confirming the given txids first."""
        confirmed = []
        for txid in order or []:
            got = self.confirm_next(txid)
            if got:
                confirmed.append(got)
        while self.mempool:
            before = len(self.mempool)
            got = self.confirm_next()
            if got:
                confirmed.append(got)
            if len(self.mempool) == before:
                break  # only lock-height-blocked txs remain
        return confirmed

    # -- queries ------------------------------------------------------------

    def balance_of(self, key: bytes) -> int:
        """Sum of confirmed, unspent single-key outputs this key can spend
        unilaterally.  Multisig outputs are excluded."""
        return sum(
            out.amount
            for out in self.outputs.values()
            if out.status == "confirmed" and out.address.kind == "single" and out.address.keys[0] == key
        )

    def total_unspent(self) -> int:
        return sum(out.amount for out in self.outputs.values() if out.status == "confirmed")

    def is_confirmed(self, txid: str) -> bool:
        return txid in self.confirmed_txids

    def output_depth(self, output_id: OutputId) -> int | None:
        """Confirmation depth of an output (1 right after confirmation), or
        None if unknown/spent."""
        out = self.outputs.get(output_id)
        if out is None or out.status != "confirmed":
            return None
        return self.height - out.confirmed_height + 1

    def unspent_output(self, output_id: OutputId) -> LedgerOutput | None:
        out = self.outputs.get(output_id)
        if out is not None and out.status == "confirmed":
            return out
        return None
