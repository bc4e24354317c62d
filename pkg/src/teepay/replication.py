"""Force-freeze chain replication and committee chains.

A committee chain is an ordered list of enclaves jointly holding the keys of
one m-of-n deposit and a replica of the state governing it.  Updates flow
head to tail; every node forwards before applying and applies only once its
downstream acknowledges, so a completed update is on every replica.  The
primary withholds the protocol message that motivated an update (for example
a payment's paid message) until its own acknowledgement arrives, and reverts
the local mutation if the chain breaks instead: an acknowledged payment is
therefore always durable, and an unacknowledged one invisible.

Any read from a backup, any refusal, and any detected member failure freezes
the chain: every member refuses further updates and the owning enclaves only
accept settlement and release from then on.  Freeze propagation is
best-effort flooding along the chain plus refusal on contact.

Pending work is stored as plain data (spec tuples interpreted here), keeping
the whole program state picklable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import crypto, encoding
from .channel import (
    COMMANDS,
    DepositInfo,
    PaymentProgram,
    apply_pay_revert,
    command,
    message,
    replication_consume_shares,
)
from .errors import (
    AttestFailed,
    AuthenticationFailure,
    ChainBroken,
    ChainFrozen,
    InsufficientLiveMembers,
    ProtocolError,
    StateMismatch,
    TailOccupied,
)
from .ledger import OutputId, Transaction
from .multihop import tx_from_wire, _tx_to_wire
from .sealing import MonotonicCounter  # re-exported: counters are owned here

__all__ = [
    "ChainRecord",
    "MonotonicCounter",
    "plan_payment_batches",
    "start_payment",
    "guarded_apply",
    "chains_for_channel",
]


@dataclass
class ChainRecord:
    chain_id: str
    m: int
    members: tuple[bytes, ...]
    my_index: int
    deposit_infos: dict = field(default_factory=dict)  # oid -> DepositInfo
    my_keys: dict = field(default_factory=dict)  # oid -> my key slot (pub)
    backup_active: bool = False
    active: bool = False
    replica: bytes = b""
    frozen: bool = False
    pending_blobs: dict = field(default_factory=dict)  # uid -> blob awaiting downstream ack

    @property
    def n(self) -> int:
        return len(self.members)

    def backup_of(self, index: int) -> bytes | None:
        return self.members[index + 1] if index + 1 < self.n else None

    @property
    def is_primary(self) -> bool:
        return self.my_index == 0


@dataclass
class PendingUpdate:
    uid: int
    chain_ids: tuple[str, ...]
    waiting: set = field(default_factory=set)
    blob: bytes = b""
    held_messages: list = field(default_factory=list)  # (dest, wire, not_before)
    notes: list = field(default_factory=list)
    revert: list = field(default_factory=list)  # specs to run if the chain breaks
    then: tuple | None = None  # spec to run after the ack


# ---------------------------------------------------------------------------
# Chain construction (backup assignment)
# ---------------------------------------------------------------------------


@command("chain_init")
def _cmd_chain_init(program: PaymentProgram, services, chain_id: str, m: int, members: tuple):
    members = tuple(members)
    if chain_id in program.chains:
        raise ProtocolError(f"chain {chain_id} already exists")
    if members[0] != services.identity_public:
        raise ProtocolError("chain head must be this enclave")
    if not 1 <= m <= len(members):
        raise ProtocolError("threshold must satisfy 1 <= m <= n")
    rec = ChainRecord(chain_id, m, members, 0)
    rec.active = True
    rec.backup_active = len(members) == 1
    program.chains[chain_id] = rec
    return chain_id


@command("assign_as_backup")
def _cmd_assign_as_backup(program: PaymentProgram, services, chain_id: str, m: int, members: tuple, my_index: int):
    """Join an existing chain as the new tail (runs on the new backup)."""
    members = tuple(members)
    if program.backs is not None:
        raise ProtocolError("enclave already backs another chain member")
    if chain_id in program.chains:
        raise ProtocolError(f"chain {chain_id} already joined")
    if members[my_index] != services.identity_public:
        raise ProtocolError("member list does not name this enclave at its index")
    tail = members[my_index - 1]
    if tail not in program.sessions:
        raise AttestFailed("no attested session with the chain tail")
    rec = ChainRecord(chain_id, m, members, my_index)
    program.chains[chain_id] = rec
    digest = crypto.derive_seed(services.entropy("attest"), "chain", chain_id)
    core = encoding.encode(("add_backup", chain_id, m, members, my_index, digest))
    program.seal_to(services, tail, ("add_backup", chain_id, m, members, my_index, digest, services.sign(core)))
    return "requested"


@message("add_backup")
def _msg_add_backup(program: PaymentProgram, services, peer: bytes, chain_id: str, m: int, members: tuple, new_index: int, digest: bytes, sig: bytes):
    members = tuple(members)
    core = encoding.encode(("add_backup", chain_id, m, members, new_index, digest))
    if not services.verify_peer(peer, core, sig):
        program.seal_to(services, peer, ("chain_nack", chain_id, "AttestFailed"))
        raise AttestFailed("backup attestation failed")
    rec = program.chains.get(chain_id)
    if rec is None and new_index == 1 and members[0] == services.identity_public:
        # Late init: the head may learn its member list from the first backup.
        rec = ChainRecord(chain_id, m, members, 0)
        rec.active = True
        program.chains[chain_id] = rec
    if (
        rec is None
        or rec.members != members
        or rec.my_index != new_index - 1
        or rec.backup_active
    ):
        program.seal_to(services, peer, ("chain_nack", chain_id, "TailOccupied"))
        raise TailOccupied(f"not the free tail of chain {chain_id}")
    if members[new_index] != peer:
        program.seal_to(services, peer, ("chain_nack", chain_id, "AttestFailed"))
        raise AttestFailed("sender is not the listed new member")
    rec.backup_active = True
    program.seal_to(services, peer, ("chain_ack_backup", chain_id, rec.replica))
    return "attached"


@message("chain_ack_backup")
def _msg_chain_ack_backup(program: PaymentProgram, services, peer: bytes, chain_id: str, replica: bytes):
    rec = program.chains.get(chain_id)
    if rec is None or rec.members[rec.my_index - 1] != peer:
        raise ProtocolError("unexpected chain ack")
    rec.active = True
    rec.replica = replica
    rec.backup_active = rec.backup_of(rec.my_index) is None  # tail until someone joins
    program.backs = peer
    return "active"


@message("chain_nack")
def _msg_chain_nack(program: PaymentProgram, services, peer: bytes, chain_id: str, code: str):
    program.chains.pop(chain_id, None)
    if code == "TailOccupied":
        raise TailOccupied(f"chain {chain_id}: tail occupied")
    raise AttestFailed(f"chain {chain_id}: {code}")


@message("chain_deposit")
def _msg_chain_deposit(program: PaymentProgram, services, peer: bytes, chain_id: str, raw_info: tuple):
    rec = program.chains.get(chain_id)
    if rec is None or rec.members[0] != peer:
        raise ProtocolError("deposit notice from a non-primary")
    info = DepositInfo.decode(raw_info)
    rec.deposit_infos[info.output_id] = info
    mine = [pub for pub in info.address.keys if pub in program.btc_keys]
    if mine:
        rec.my_keys[info.output_id] = mine[0]
    return "recorded"


def check_committee_deposit(program: PaymentProgram, services, info: DepositInfo) -> None:
    """Primary-side validation when a committee deposit is presented."""
    cmt = info.committee
    rec = program.chains.get(cmt.chain_id)
    if rec is None or not rec.is_primary:
        raise StateMismatch("no committee chain headed by this enclave")
    if rec.members != cmt.members or rec.m != cmt.m:
        raise StateMismatch("committee descriptor does not match the chain")
    if set(cmt.members) != set(info.address.keys) and len(info.address.keys) != len(cmt.members):
        # Address keys are per-member deposit keys, not identity keys; only
        # the counts must line up.
        raise StateMismatch("deposit address arity does not match the committee")
    rec.deposit_infos[info.output_id] = info
    mine = [pub for pub in info.address.keys if pub in program.btc_keys]
    if mine:
        rec.my_keys[info.output_id] = mine[0]
    for member in rec.members[1:]:
        program.seal_to(services, member, ("chain_deposit", cmt.chain_id, info.encode()))


# ---------------------------------------------------------------------------
# Replica views and state updates
# ---------------------------------------------------------------------------


def replica_view(program: PaymentProgram, rec: ChainRecord) -> bytes:
    """Deterministic snapshot of everything this chain secures: its deposits
    and the channels they are associated with."""
    deposit_rows = []
    channel_ids = set()
    for oid in sorted(rec.deposit_infos):
        drec = program.deposits.get(tuple(oid))
        if drec is None:
            continue
        deposit_rows.append((tuple(oid), drec.amount, drec.status, drec.channel_id or ""))
        if drec.channel_id:
            channel_ids.add(drec.channel_id)
    channel_rows = []
    for cid in sorted(channel_ids):
        ch = program.channels.get(cid)
        if ch is None:
            continue
        channel_rows.append(
            (
                cid,
                ch.my_bal,
                ch.remote_bal,
                ch.my_addr.encode(),
                ch.remote_addr.encode(),
                tuple(tuple(oid) for oid in ch.my_deps),
                tuple(tuple(oid) for oid in ch.remote_deps),
            )
        )
    return encoding.encode(("replica", tuple(deposit_rows), tuple(channel_rows)))


def decode_replica(blob: bytes) -> tuple[dict, dict]:
    if not blob:
        return {}, {}
    _tag, deposit_rows, channel_rows = encoding.decode(blob)
    deposits = {
        tuple(oid): {"amount": amount, "status": status, "channel": cid or None}
        for oid, amount, status, cid in deposit_rows
    }
    channels = {
        cid: {
            "my_bal": my_bal,
            "remote_bal": remote_bal,
            "my_addr": tuple(my_addr),
            "remote_addr": tuple(remote_addr),
            "deps": {tuple(o) for o in my_deps} | {tuple(o) for o in remote_deps},
        }
        for cid, my_bal, remote_bal, my_addr, remote_addr, my_deps, remote_deps in channel_rows
    }
    return deposits, channels


def chains_for_channel(program: PaymentProgram, ch) -> tuple[str, ...]:
    """Chains replicating any of my deposits on this channel."""
    out = []
    for oid in ch.my_deps:
        rec = program.deposits[oid]
        if rec.info.committee is not None and rec.info.committee.chain_id not in out:
            out.append(rec.info.committee.chain_id)
    return tuple(out)


def _check_chains_usable(program: PaymentProgram, chain_ids) -> None:
    for chain_id in chain_ids:
        rec = program.chains.get(chain_id)
        if rec is None:
            raise StateMismatch(f"no chain {chain_id}")
        if rec.frozen or chain_id in program.frozen_chains:
            raise ChainFrozen(f"chain {chain_id} is frozen")


def guarded_apply(
    program: PaymentProgram,
    services,
    chain_ids,
    *,
    held_messages=(),
    notes=(),
    revert=(),
    then=None,
) -> None:
    """The caller already applied a state mutation.  Replicate the new state
    to every named chain; once all acknowledge, release the held messages and
    notes and run the follow-up spec.  If any chain breaks first, run the
    revert specs instead (the held messages are never sent)."""
    chain_ids = tuple(chain_ids)
    if not chain_ids:
        for dest, wire, not_before in held_messages:
            services.send(dest, wire, not_before)
        for note in notes:
            services.note(*note)
        if then is not None:
            _run_spec(program, services, then)
        return
    program.update_counter += 1
    uid = program.update_counter
    pending = PendingUpdate(
        uid=uid,
        chain_ids=chain_ids,
        waiting=set(),
        held_messages=list(held_messages),
        notes=list(notes),
        revert=list(revert),
        then=then,
    )
    for chain_id in chain_ids:
        rec = program.chains[chain_id]
        blob = replica_view(program, rec)
        backup = rec.backup_of(0)
        if backup is None or not rec.backup_active:
            rec.replica = blob  # single-member or not-yet-extended chain
            continue
        pending.waiting.add(chain_id)
        rec.pending_blobs[uid] = blob
        program.seal_to(services, backup, ("state_update", chain_id, uid, blob))
    if not pending.waiting:
        _finish_update(program, services, pending)
        return
    program.pending_updates[uid] = pending


def _finish_update(program: PaymentProgram, services, pending: PendingUpdate) -> None:
    for dest, wire, not_before in pending.held_messages:
        services.send(dest, wire, not_before)
    for note in pending.notes:
        services.note(*note)
    if pending.then is not None:
        _run_spec(program, services, pending.then)


def replicate_now(program: PaymentProgram, services, chain_id: str) -> None:
    guarded_apply(program, services, (chain_id,))


def replicate_then_send(program: PaymentProgram, services, chain_id: str, held_messages) -> None:
    held = [(dest, wire, 0.0) for dest, wire in held_messages]
    guarded_apply(program, services, (chain_id,), held_messages=held)


@message("state_update")
def _msg_state_update(program: PaymentProgram, services, peer: bytes, chain_id: str, uid: int, blob: bytes):
    rec = program.chains.get(chain_id)
    if rec is None or not rec.active:
        raise ProtocolError(f"not a member of chain {chain_id}")
    if rec.members[rec.my_index - 1] != peer:
        raise AuthenticationFailure("state update from a non-upstream member")
    if rec.frozen:
        program.seal_to(services, peer, ("state_refused", chain_id, uid, "ChainFrozen"))
        raise ChainFrozen(f"chain {chain_id} is frozen")
    backup = rec.backup_of(rec.my_index)
    if backup is not None and rec.backup_active:
        # Forward first and block (apply only after the downstream ack).
        rec.pending_blobs[uid] = blob
        program.seal_to(services, backup, ("state_update", chain_id, uid, blob))
        return "forwarded"
    rec.replica = blob
    program.seal_to(services, peer, ("state_ack", chain_id, uid))
    return "applied"


@message("state_ack")
def _msg_state_ack(program: PaymentProgram, services, peer: bytes, chain_id: str, uid: int):
    rec = program.chains.get(chain_id)
    if rec is None:
        raise ProtocolError(f"not a member of chain {chain_id}")
    if rec.backup_of(rec.my_index) != peer:
        raise AuthenticationFailure("ack from a non-downstream member")
    blob = rec.pending_blobs.pop(uid, None)
    if blob is None:
        raise ProtocolError(f"no pending update {uid}")
    rec.replica = blob
    if rec.is_primary:
        pending = program.pending_updates.get(uid)
        if pending is not None:
            pending.waiting.discard(chain_id)
            if not pending.waiting:
                del program.pending_updates[uid]
                _finish_update(program, services, pending)
        return "committed"
    program.seal_to(services, rec.members[rec.my_index - 1], ("state_ack", chain_id, uid))
    return "committed"


@message("state_refused")
def _msg_state_refused(program: PaymentProgram, services, peer: bytes, chain_id: str, uid: int, code: str):
    rec = program.chains.get(chain_id)
    if rec is None:
        raise ProtocolError(f"not a member of chain {chain_id}")
    rec.pending_blobs.pop(uid, None)
    _freeze_chain(program, services, chain_id, forward=True)
    if rec.is_primary:
        _break_pending(program, services, uid)
        raise ChainBroken(f"chain {chain_id} refused update: {code}")
    program.seal_to(services, rec.members[rec.my_index - 1], ("state_refused", chain_id, uid, code))
    return "refused"


def _break_pending(program: PaymentProgram, services, uid: int) -> None:
    pending = program.pending_updates.pop(uid, None)
    if pending is None:
        return
    for spec in pending.revert:
        _run_spec(program, services, spec)


@command("chain_timeout")
def _cmd_chain_timeout(program: PaymentProgram, services, chain_id: str):
    """Owner-declared member failure: freeze the chain and break every update
    still waiting on it (the protocol messages they held are never sent)."""
    rec = program.chains.get(chain_id)
    if rec is None:
        raise ProtocolError(f"no chain {chain_id}")
    _freeze_chain(program, services, chain_id, forward=True)
    for uid, pending in list(program.pending_updates.items()):
        if chain_id in pending.waiting:
            _break_pending(program, services, uid)
    return "frozen"


# ---------------------------------------------------------------------------
# Force-freeze
# ---------------------------------------------------------------------------


def _freeze_chain(program: PaymentProgram, services, chain_id: str, forward: bool, skip: bytes | None = None) -> None:
    rec = program.chains.get(chain_id)
    if rec is None or rec.frozen:
        return
    rec.frozen = True
    program.frozen_chains.add(chain_id)
    services.freeze_self()
    if not forward:
        return
    for neighbor_index in (rec.my_index - 1, rec.my_index + 1):
        if 0 <= neighbor_index < rec.n:
            neighbor = rec.members[neighbor_index]
            if neighbor != skip and neighbor in program.sessions:
                program.seal_to(services, neighbor, ("freeze", chain_id))


@command("read_backup")
def _cmd_read_backup(program: PaymentProgram, services, chain_id: str):
    """Read the replicated state; the read itself breaks the chain, freezing
    every member at the current state."""
    rec = program.chains.get(chain_id)
    if rec is None:
        raise ProtocolError(f"not a member of chain {chain_id}")
    blob = rec.replica
    _freeze_chain(program, services, chain_id, forward=True)
    return blob


@message("freeze")
def _msg_freeze(program: PaymentProgram, services, peer: bytes, chain_id: str):
    rec = program.chains.get(chain_id)
    if rec is None:
        return "ignored"
    already = rec.frozen
    _freeze_chain(program, services, chain_id, forward=not already, skip=peer)
    for uid, pending in list(program.pending_updates.items()):
        if chain_id in pending.waiting:
            _break_pending(program, services, uid)
    return "frozen"


# ---------------------------------------------------------------------------
# Payment batching over committee deposits
# ---------------------------------------------------------------------------


def plan_payment_batches(program: PaymentProgram, ch, amount: int) -> list[tuple[int, tuple[str, ...]]]:
    """Split a payment into sub-payments, each confined to collateral secured
    by one committee (unbacked credit and plain deposits need none).
    Adjacent chunks on the same committee merge into a single update."""
    chunks: list[tuple[int, str | None]] = []
    remaining = amount
    credit = ch.my_bal - sum(ch.deposit_shares.values())
    take = min(credit, remaining)
    if take > 0:
        chunks.append((take, None))
        remaining -= take
    for oid in ch.my_deps:
        if remaining <= 0:
            break
        share = ch.deposit_shares.get(oid, 0)
        take = min(share, remaining)
        if take <= 0:
            continue
        rec = program.deposits[oid]
        chain = rec.info.committee.chain_id if rec.info.committee is not None else None
        chunks.append((take, chain))
        remaining -= take
    if remaining > 0:
        chunks.append((remaining, None))  # defensive: shares out of sync
    merged: list[tuple[int, str | None]] = []
    for amt, chain in chunks:
        if merged and merged[-1][1] == chain:
            merged[-1] = (merged[-1][0] + amt, chain)
        else:
            merged.append((amt, chain))
    return [(amt, (chain,) if chain else ()) for amt, chain in merged]


def start_payment(program: PaymentProgram, services, cid: str, amount: int) -> list[int]:
    ch = program.channels[cid]
    batches = plan_payment_batches(program, ch, amount)
    _check_chains_usable(program, [c for _, chains in batches for c in chains])
    _run_batches(program, services, cid, batches)
    return [amt for amt, _ in batches]


def _run_batches(program: PaymentProgram, services, cid: str, batches) -> None:
    if not batches:
        return
    (sub_amount, chain_ids), rest = batches[0], list(batches[1:])
    ch = program.channels[cid]
    ch.my_bal -= sub_amount
    ch.remote_bal += sub_amount
    ch.pay_count += 1
    replication_consume_shares(program, ch, sub_amount)
    seq = ch.pay_count
    core = encoding.encode(("paid", cid, sub_amount, seq))
    payload = ("paid", cid, sub_amount, seq, services.sign(core))
    not_before = 0.0
    if program.config.persistence:
        not_before = services.persist(program.snapshot())
    dest, wire = program.sealed_wire(services, ch.remote_pub, payload)
    program.assert_capacity(cid)
    tag = f"{cid}:{seq}"
    then = ("next_pay_batch", cid, tuple((a, tuple(c)) for a, c in rest)) if rest else None
    guarded_apply(
        program,
        services,
        chain_ids,
        held_messages=[(dest, wire, not_before)],
        notes=[("pay", cid, sub_amount, tag)],
        revert=[("pay_revert", cid, sub_amount, seq)],
        then=then,
    )


def _run_spec(program: PaymentProgram, services, spec: tuple) -> None:
    kind = spec[0]
    if kind == "next_pay_batch":
        _, cid, batches = spec
        _run_batches(program, services, cid, [(a, tuple(c)) for a, c in batches])
    elif kind == "pay_revert":
        _, cid, amount, seq = spec
        apply_pay_revert(program, services, cid, amount, seq)
        ch = program.channels.get(cid)
        if ch is not None:
            ch.pay_count = seq - 1
    elif kind == "receive_revert":
        _, cid, amount, seq = spec
        ch = program.channels.get(cid)
        if ch is not None:
            ch.my_bal -= amount
            ch.remote_bal += amount
            ch.receive_count = seq - 1
    else:
        raise ProtocolError(f"unknown pending spec {kind}")


# ---------------------------------------------------------------------------
# Threshold signature collection
# ---------------------------------------------------------------------------


@dataclass
class CollectionRequest:
    """Returned to the untrusted host: gather member signatures for these
    inputs, then resume with collection_done."""

    txid: str
    tx: Transaction
    needs: tuple  # (chain_id, output_id, m)


def start_collection(program: PaymentProgram, services, tx: Transaction, infos: dict, missing) -> CollectionRequest:
    needs = []
    for chain_id, oid in missing:
        info = infos[oid]
        needs.append((chain_id, tuple(oid), info.address.m))
    program.pending_collections[tx.txid] = {
        "tx": _tx_to_wire(tx),
        "needs": tuple(needs),
    }
    return CollectionRequest(txid=tx.txid, tx=tx, needs=tuple(needs))


@command("sign_settlement")
def _cmd_sign_settlement(program: PaymentProgram, services, chain_id: str, tx_wire: tuple, raw_oid: tuple):
    """Committee member: sign a settlement or release for one of the chain's
    deposits, but only if it is consistent with the replicated state."""
    oid = tuple(raw_oid)
    rec = program.chains.get(chain_id)
    if rec is None:
        raise ProtocolError(f"not a member of chain {chain_id}")
    if oid not in rec.deposit_infos:
        raise StateMismatch(f"chain does not secure deposit {oid}")
    key_pub = rec.my_keys.get(oid)
    if key_pub is None:
        raise StateMismatch("no key slot for this deposit")
    tx = tx_from_wire(tx_wire)
    _verify_against_replica(program, rec, tx, oid)
    sig = crypto.sign(program.btc_keys[key_pub], tx.payload())
    return (key_pub, sig)


def _verify_against_replica(program: PaymentProgram, rec: ChainRecord, tx: Transaction, oid: OutputId) -> None:
    deposits, channels = decode_replica(rec.replica)
    drow = deposits.get(tuple(oid))
    if rec.is_primary and drow is None:
        # The primary's replica mirrors its live state.
        drec = program.deposits.get(tuple(oid))
        if drec is not None:
            drow = {"amount": drec.amount, "status": drec.status, "channel": drec.channel_id}
    if drow is None:
        raise StateMismatch(f"replica does not know deposit {oid}")
    inputs = {i.output_id for i in tx.inputs}
    outputs = {(addr.encode(), amount) for addr, amount in tx.outputs}
    if drow["channel"] is None or drow["status"] in ("free", "pending_settlement", "released"):
        # Release of an unassociated deposit: single input, full amount out.
        if inputs == {tuple(oid)} and sum(a for _, a in tx.outputs) == drow["amount"]:
            return
        raise StateMismatch("release does not match the replicated deposit")
    crow = channels.get(drow["channel"])
    if crow is None:
        raise StateMismatch("replica has no channel for this deposit")
    want_outputs = set()
    if crow["my_bal"] > 0:
        want_outputs.add((_as_addr_tuple(crow["my_addr"]), crow["my_bal"]))
    if crow["remote_bal"] > 0:
        want_outputs.add((_as_addr_tuple(crow["remote_addr"]), crow["remote_bal"]))
    if inputs == crow["deps"] and outputs == want_outputs:
        return
    raise StateMismatch("settlement does not match the replicated channel state")


def _as_addr_tuple(raw) -> tuple:
    kind, m, keys = raw
    return (kind, m, tuple(keys))


@command("collection_done")
def _cmd_collection_done(program: PaymentProgram, services, txid: str, shares: tuple):
    """Attach collected member signatures; submit once every input meets its
    threshold."""
    pending = program.pending_collections.get(txid)
    if pending is None:
        raise ProtocolError(f"no pending collection {txid}")
    tx = tx_from_wire(pending["tx"])
    payload = tx.payload()
    by_oid: dict = {}
    for raw_oid, pub, sig in shares:
        oid = tuple(raw_oid)
        if not crypto.verify(pub, payload, sig):
            continue
        by_oid.setdefault(oid, []).append((pub, sig))
    new_inputs = []
    for txin in tx.inputs:
        extra = by_oid.get(txin.output_id, [])
        have = {pk for pk, _ in txin.signatures}
        sigs = list(txin.signatures)
        for pub, sig in extra:
            if pub not in have:
                sigs.append((pub, sig))
                have.add(pub)
        new_inputs.append(type(txin)(txin.output_id, tuple(sigs)))
    tx = Transaction(tuple(new_inputs), tx.outputs, tx.lock_height)
    for chain_id, raw_oid, m in pending["needs"]:
        oid = tuple(raw_oid)
        got = next(len(i.signatures) for i in tx.inputs if i.output_id == oid)
        if got < m:
            raise InsufficientLiveMembers(f"only {got} of {m} signatures for {oid}")
    del program.pending_collections[txid]
    services.submit(tx)
    return tx


# ---------------------------------------------------------------------------
# Stable storage (crash-fault mode without committees)
# ---------------------------------------------------------------------------


@command("persist")
def _cmd_persist(program: PaymentProgram, services):
    """Seal the whole program state under a fresh monotonic counter value."""
    return services.persist(program.snapshot())


@command("pay_batch")
def _cmd_pay_batch(program: PaymentProgram, services, cid: str, amounts: tuple):
    """Client-side batching: apply several payments, persist once, release
    all their paid messages at the single counter slot."""
    ch = program.channels[cid]
    if chains_for_channel(program, ch):
        raise ProtocolError("pay_batch not supported on committee-backed channels")
    from .channel import _cmd_pay  # validation path

    wires = []
    tags = []
    for amount in amounts:
        amount = int(amount)
        if ch.my_bal < amount:
            raise ProtocolError("batch exceeds balance")
        ch.my_bal -= amount
        ch.remote_bal += amount
        ch.pay_count += 1
        replication_consume_shares(program, ch, amount)
        seq = ch.pay_count
        core = encoding.encode(("paid", cid, amount, seq))
        payload = ("paid", cid, amount, seq, services.sign(core))
        wires.append(program.sealed_wire(services, ch.remote_pub, payload))
        tags.append((amount, f"{cid}:{seq}"))
    not_before = services.persist(program.snapshot()) if program.config.persistence else 0.0
    for (dest, wire), (amount, tag) in zip(wires, tags):
        services.send(dest, wire, not_before)
        services.note("pay", cid, amount, tag)
    program.assert_capacity(cid)
    return not_before
