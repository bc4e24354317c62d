"""Bidirectional payment channel state machine.

This is the protocol program that runs inside an enclave.  It owns every
per-node table: network sessions, payment channels, deposits and the keys
backing them.  Inputs arrive as either local commands from the owning
participant or sealed messages from peer enclaves; outputs are messages,
ledger transactions and committed-event notes emitted through TeeServices.

Wire discipline: all post-handshake traffic is AEAD-sealed under the session
key with associated data (sender, receiver, sequence number).  Receivers
require strictly increasing session sequence numbers, so any recorded message
replays as a no-op.  Channel payments additionally carry their own
per-direction counters which must be strictly consecutive.

Multi-hop payments and chain replication register their handlers into the
same dispatch tables from their own modules.
"""

from __future__ import annotations

import pickle
from dataclasses import dataclass, field

from . import crypto, encoding
from .errors import (
    AlreadyApproved,
    AlreadyExists,
    AuthenticationFailure,
    ChainFrozen,
    ChannelClosed,
    ChannelLocked,
    DepositNotFree,
    DuplicateChannel,
    DuplicateDeposit,
    AddressMismatch,
    InsufficientBalance,
    NotApproved,
    NotAssociated,
    NotConfirmedOnLedger,
    NotFree,
    ProtocolError,
    StaleSequence,
    UnknownAddress,
    UnknownChannel,
)
from .ledger import Address, OutputId, Transaction, TxInput, single, unsigned_transaction

PROGRAM_ID = "teepay.channel.v1"

COMMANDS: dict[str, object] = {}
MESSAGES: dict[str, object] = {}

# Commands a frozen enclave still accepts: settle channels, release deposits,
# terminate in-flight path payments.  Everything else is refused.
FROZEN_COMMANDS = {
    "settle",
    "release_deposit",
    "reclaim_deposits",
    "eject",
    "eject_popt",
    "read_backup",
}
FROZEN_MESSAGES = {
    "freeze",
    "sign_request",
    "sign_share",
    "settle_neutral",
    "settled_notify",
    "dissociate_ack",
}


def command(name):
    def register(fn):
        COMMANDS[name] = fn
        return fn

    return register


def message(name):
    def register(fn):
        MESSAGES[name] = fn
        return fn

    return register


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------


@dataclass
class Session:
    key: bytes
    peer: bytes
    send_seq: int = 0
    recv_seq: int = 0


@dataclass
class CommitteeInfo:
    chain_id: str
    m: int
    members: tuple[bytes, ...]  # enclave identity keys, head (primary) first

    @property
    def n(self) -> int:
        return len(self.members)

    def encode(self) -> tuple:
        return (self.chain_id, self.m, tuple(self.members))


@dataclass
class DepositInfo:
    """Wire-shareable deposit descriptor."""

    output_id: OutputId
    amount: int
    address: Address
    owner: bytes  # owning enclave identity key
    committee: CommitteeInfo | None = None

    def encode(self) -> tuple:
        cmt = self.committee.encode() if self.committee else None
        return (tuple(self.output_id), self.amount, self.address.encode(), self.owner, cmt)

    @staticmethod
    def decode(raw: tuple) -> "DepositInfo":
        (txid, idx), amount, (kind, m, keys), owner, cmt = raw
        committee = CommitteeInfo(cmt[0], cmt[1], tuple(cmt[2])) if cmt else None
        return DepositInfo((txid, idx), amount, Address(kind, m, tuple(keys)), owner, committee)


@dataclass
class DepositRecord:
    """One of this enclave's own fund deposits."""

    info: DepositInfo
    key_public: bytes  # this enclave's key slot in the deposit address
    status: str = "free"  # free | associated | dissociating | pending_settlement | released
    channel_id: str | None = None

    @property
    def output_id(self) -> OutputId:
        return self.info.output_id

    @property
    def amount(self) -> int:
        return self.info.amount


@dataclass
class ChannelState:
    id: str
    remote_pub: bytes
    my_addr: Address
    remote_addr: Address
    my_bal: int = 0
    remote_bal: int = 0
    my_deps: list[OutputId] = field(default_factory=list)
    remote_deps: list[OutputId] = field(default_factory=list)
    is_open: bool = False
    pay_count: int = 0  # sequence of my outgoing payments
    receive_count: int = 0  # last accepted incoming payment sequence
    locked_by: str | None = None  # in-flight path payment id
    stage: str = "idle"
    closing: bool = False
    temporary: bool = False
    # remaining collateral per own deposit, for committee update batching
    deposit_shares: dict[OutputId, int] = field(default_factory=dict)

    def my_deposit_sum(self, program: "PaymentProgram") -> int:
        return sum(program.deposits[oid].amount for oid in self.my_deps)

    def remote_deposit_sum(self, program: "PaymentProgram") -> int:
        return sum(program.remote_deposits[oid].amount for oid in self.remote_deps)

    def capacity_ok(self, program: "PaymentProgram") -> bool:
        return (
            self.my_bal >= 0
            and self.remote_bal >= 0
            and self.my_bal + self.remote_bal
            <= self.my_deposit_sum(program) + self.remote_deposit_sum(program)
        )


@dataclass
class ProgramConfig:
    required_confirmations: int = 1
    persistence: bool = False


class PaymentProgram:
    """Per-enclave protocol state; one instance per installed enclave."""

    def __init__(self, config: ProgramConfig | None = None):
        self.config = config or ProgramConfig()
        self.sessions: dict[bytes, Session] = {}
        self.pending_offers: dict[bytes, crypto.ExchangeOffer] = {}
        self.channels: dict[str, ChannelState] = {}
        self.closed_channels: set[str] = set()
        self.deposits: dict[OutputId, DepositRecord] = {}
        self.free_deps: set[OutputId] = set()
        self.remote_deposits: dict[OutputId, DepositInfo] = {}
        self.approved: dict[bytes, dict[OutputId, DepositInfo]] = {}
        self.btc_keys: dict[bytes, bytes] = {}  # my generated keys, pub -> secret
        self.shared_keys: dict[OutputId, tuple[bytes, bytes]] = {}  # peer deposit keys
        # multi-hop payment state (handlers live in multihop.py)
        self.path_payments: dict[str, object] = {}
        # replication state (handlers live in replication.py)
        self.chains: dict[str, object] = {}
        self.backs: bytes | None = None  # whom I back (Alg 3 t.backs)
        self.pending_updates: dict[int, object] = {}
        self.pending_collections: dict[str, object] = {}
        self.update_counter: int = 0
        self.frozen_chains: set[str] = set()

    # -- dispatch -----------------------------------------------------------

    def handle(self, services, input_value):
        kind = input_value[0]
        if kind == "cmd":
            _, name, args = input_value
            fn = COMMANDS.get(name)
            if fn is None:
                raise ProtocolError(f"unknown command {name}")
            if services.frozen and name not in FROZEN_COMMANDS:
                raise ChainFrozen(f"frozen enclave refuses {name}")
            return fn(self, services, *args)
        if kind == "net":
            _, sender, wire = input_value
            return self._handle_wire(services, sender, wire)
        raise ProtocolError(f"unknown input kind {kind}")

    def _handle_wire(self, services, sender: bytes, wire: bytes):
        outer = encoding.decode(wire)
        if outer[0] == "clear":
            payload = outer[1]
            if payload[0] == "ake1":
                return _handle_ake1(self, services, payload)
            if payload[0] == "ake2":
                return _handle_ake2(self, services, payload)
            raise ProtocolError(f"unexpected clear message {payload[0]}")
        if outer[0] != "sealed":
            raise ProtocolError("unknown wire frame")
        _, claimed_sender, seq, blob = outer
        session = self.sessions.get(claimed_sender)
        if session is None:
            raise AuthenticationFailure("no session with sender")
        if seq <= session.recv_seq:
            raise StaleSequence(f"session seq {seq} already consumed")
        ad = encoding.encode(("msg", claimed_sender, services.identity_public, seq))
        payload = encoding.decode(crypto.decrypt(session.key, blob, ad))
        session.recv_seq = seq
        name = payload[0]
        fn = MESSAGES.get(name)
        if fn is None:
            raise ProtocolError(f"unknown message {name}")
        if services.frozen and name not in FROZEN_MESSAGES:
            raise ChainFrozen(f"frozen enclave refuses message {name}")
        return fn(self, services, claimed_sender, *payload[1:])

    # -- session plumbing -----------------------------------------------------

    def seal_to(self, services, peer: bytes, payload: tuple, not_before: float = 0.0) -> None:
        session = self.sessions.get(peer)
        if session is None:
            raise AuthenticationFailure("no session with peer")
        session.send_seq += 1
        ad = encoding.encode(("msg", services.identity_public, peer, session.send_seq))
        blob = crypto.encrypt(session.key, encoding.encode(payload), ad)
        wire = encoding.encode(("sealed", services.identity_public, session.send_seq, blob))
        services.send(peer, wire, not_before)

    def sealed_wire(self, services, peer: bytes, payload: tuple) -> tuple[bytes, bytes]:
        """Seal a payload without sending; returns (dest, wire) for deferred
        emission (replication gating, persistence throttling)."""
        session = self.sessions.get(peer)
        if session is None:
            raise AuthenticationFailure("no session with peer")
        session.send_seq += 1
        ad = encoding.encode(("msg", services.identity_public, peer, session.send_seq))
        blob = crypto.encrypt(session.key, encoding.encode(payload), ad)
        return peer, encoding.encode(("sealed", services.identity_public, session.send_seq, blob))

    # -- helpers ---------------------------------------------------------------

    def channel(self, cid: str) -> ChannelState:
        ch = self.channels.get(cid)
        if ch is None:
            raise UnknownChannel(f"no channel {cid}")
        return ch

    def open_channel(self, cid: str) -> ChannelState:
        ch = self.channel(cid)
        if not ch.is_open or ch.closing:
            raise ChannelClosed(f"channel {cid} is not open")
        return ch

    def deposit_key_secrets(self, oid: OutputId) -> dict[bytes, bytes]:
        """All secrets this enclave holds for a deposit address, pub -> secret."""
        held: dict[bytes, bytes] = {}
        info = None
        rec = self.deposits.get(oid)
        if rec is not None:
            info = rec.info
        elif oid in self.remote_deposits:
            info = self.remote_deposits[oid]
        if info is None:
            return held
        for pub in info.address.keys:
            if pub in self.btc_keys:
                held[pub] = self.btc_keys[pub]
        if oid in self.shared_keys:
            pub, secret = self.shared_keys[oid]
            if pub in info.address.keys:
                held[pub] = secret
        return held

    def deposit_info(self, oid: OutputId) -> DepositInfo:
        rec = self.deposits.get(oid)
        if rec is not None:
            return rec.info
        info = self.remote_deposits.get(oid)
        if info is None:
            raise NotAssociated(f"unknown deposit {oid}")
        return info

    def assert_capacity(self, cid: str) -> None:
        ch = self.channels.get(cid)
        if ch is not None and not ch.capacity_ok(self):
            raise ProtocolError(f"capacity invariant violated on {cid}")

    def snapshot(self) -> bytes:
        return pickle.dumps(self, protocol=4)

    def reset_channel(self, cid: str) -> None:
        self.channels.pop(cid, None)
        self.closed_channels.add(cid)


# ---------------------------------------------------------------------------
# Network channels (key exchange)
# ---------------------------------------------------------------------------


@command("new_network_channel")
def _cmd_new_network_channel(program: PaymentProgram, services, remote_pub: bytes):
    if remote_pub in program.sessions or remote_pub in program.pending_offers:
        raise AlreadyExists("network channel already exists")
    offer = crypto.initiate_exchange(
        services.identity_public, remote_pub, services.entropy("ake"), sign_fn=services.sign
    )
    program.pending_offers[remote_pub] = offer
    services.send(remote_pub, encoding.encode(("clear", offer.message)))
    return "offered"


def _handle_ake1(program: PaymentProgram, services, payload: tuple):
    peer = payload[1]
    if peer in program.sessions:
        raise AlreadyExists("network channel already exists")
    session_key, answer = crypto.respond_exchange(
        services.identity_public,
        payload,
        services.entropy("ake"),
        sign_fn=services.sign,
        verify_fn=services.verify_peer,
    )
    program.sessions[peer] = Session(key=session_key.key, peer=peer)
    services.send(peer, encoding.encode(("clear", answer)))
    services.note("session", peer)
    return "session"


def _handle_ake2(program: PaymentProgram, services, payload: tuple):
    peer = payload[1]
    offer = program.pending_offers.get(peer)
    if offer is None:
        raise AuthenticationFailure("no pending exchange with sender")
    session_key = crypto.complete_exchange(offer, payload, verify_fn=services.verify_peer)
    del program.pending_offers[peer]
    program.sessions[peer] = Session(key=session_key.key, peer=peer)
    services.note("session", peer)
    return "session"


# ---------------------------------------------------------------------------
# Payment channel creation
# ---------------------------------------------------------------------------


@command("new_pay_channel")
def _cmd_new_pay_channel(
    program: PaymentProgram, services, cid: str, remote_pub: bytes, remote_key: bytes, my_key: bytes
):
    if cid in program.channels or cid in program.closed_channels:
        raise DuplicateChannel(f"channel {cid} already exists")
    if remote_pub not in program.sessions:
        raise AuthenticationFailure("no session with counterparty")
    ch = ChannelState(
        id=cid,
        remote_pub=remote_pub,
        my_addr=single(my_key),
        remote_addr=single(remote_key),
    )
    program.channels[cid] = ch
    core = encoding.encode(("new_channel_ack", cid, my_key, remote_key))
    program.seal_to(program_services_check(services), remote_pub, ("new_channel_ack", cid, my_key, remote_key, services.sign(core)))
    services.note("open_channel", cid, remote_pub)
    return cid


def program_services_check(services):
    return services


@message("new_channel_ack")
def _msg_new_channel_ack(
    program: PaymentProgram, services, peer: bytes, cid: str, their_my_key: bytes, their_remote_key: bytes, sig: bytes
):
    ch = program.channel(cid)
    if ch.remote_pub != peer:
        raise AuthenticationFailure("ack from wrong counterparty")
    if ch.is_open:
        raise AlreadyExists("channel already open")
    core = encoding.encode(("new_channel_ack", cid, their_my_key, their_remote_key))
    if not services.verify_peer(peer, core, sig):
        raise AuthenticationFailure("bad channel ack signature")
    # Sender's (my, remote) is our (remote, my).
    if their_my_key != ch.remote_addr.keys[0] or their_remote_key != ch.my_addr.keys[0]:
        raise AddressMismatch("settlement addresses do not match")
    ch.is_open = True
    services.note("accept_channel", cid)
    return "open"


# ---------------------------------------------------------------------------
# Deposits: creation, approval, release
# ---------------------------------------------------------------------------


@command("new_address")
def _cmd_new_address(program: PaymentProgram, services):
    kp = crypto.keygen(services.entropy("btc-key"))
    program.btc_keys[kp.public] = kp.secret
    return kp.public


@command("new_deposit")
def _cmd_new_deposit(program: PaymentProgram, services, raw_info: tuple):
    info = DepositInfo.decode(raw_info)
    mine = [pub for pub in info.address.keys if pub in program.btc_keys]
    if not mine:
        raise UnknownAddress("no key held for deposit address")
    if info.output_id in program.deposits:
        raise DuplicateDeposit("can't add same deposit twice")
    if info.owner != services.identity_public:
        raise UnknownAddress("deposit descriptor owned by someone else")
    if info.committee is not None:
        from . import replication

        replication.check_committee_deposit(program, services, info)
    program.deposits[info.output_id] = DepositRecord(info=info, key_public=mine[0])
    program.free_deps.add(info.output_id)
    services.note("new_deposit", info.output_id, info.amount)
    if info.committee is not None:
        from . import replication

        replication.replicate_now(program, services, info.committee.chain_id)
    return info.output_id


@command("release_deposit")
def _cmd_release_deposit(program: PaymentProgram, services, oid: OutputId, payout_key: bytes):
    oid = tuple(oid)
    rec = program.deposits.get(oid)
    if rec is None or rec.status != "free" or oid not in program.free_deps:
        raise DepositNotFree(f"deposit {oid} is not free")
    tx = unsigned_transaction([oid], [(single(payout_key), rec.amount)])
    program.free_deps.discard(oid)
    rec.status = "released"
    services.note("release_submitted", oid, tx.txid, rec.amount)
    return _sign_and_dispatch(program, services, tx, {oid: rec.info})


def _sign_and_dispatch(program: PaymentProgram, services, tx: Transaction, infos: dict) -> Transaction:
    """Attach held signatures; submit if complete, otherwise start committee
    signature collection (replication module)."""
    missing: list[tuple[str, OutputId]] = []
    for oid, info in infos.items():
        held = program.deposit_key_secrets(oid)
        need = info.address.m
        added = 0
        for pub, secret in held.items():
            if added >= need:
                break
            tx = tx.signed_by(crypto.KeyPair(pub, secret), [oid])
            added += 1
        if added < need:
            if info.committee is None:
                raise ProtocolError(f"missing keys for deposit {oid}")
            missing.append((info.committee.chain_id, oid))
    if not missing:
        services.submit(tx)
        return tx
    from . import replication

    return replication.start_collection(program, services, tx, infos, missing)


@command("approve_my_deposit")
def _cmd_approve_my_deposit(program: PaymentProgram, services, remote_pub: bytes, oid: OutputId):
    oid = tuple(oid)
    if remote_pub not in program.sessions:
        raise AuthenticationFailure("no session with peer")
    if oid not in program.free_deps:
        raise DepositNotFree(f"deposit {oid} is not free")
    if oid in program.approved.get(remote_pub, {}):
        raise AlreadyApproved(f"deposit {oid} already approved for this peer")
    rec = program.deposits[oid]
    core = encoding.encode(("approve_deposit", rec.info.encode()))
    program.seal_to(services, remote_pub, ("approve_deposit", rec.info.encode(), services.sign(core)))
    return "requested"


@message("approve_deposit")
def _msg_approve_deposit(program: PaymentProgram, services, peer: bytes, raw_info: tuple, sig: bytes):
    info = DepositInfo.decode(raw_info)
    core = encoding.encode(("approve_deposit", raw_info))
    if not services.verify_peer(peer, core, sig):
        raise AuthenticationFailure("bad approval signature")
    if info.owner != peer:
        raise AuthenticationFailure("approval for a deposit the sender does not own")
    if info.output_id in program.approved.get(peer, {}):
        raise AlreadyApproved("deposit already approved")
    # Participant-mediated blockchain verification with the local
    # confirmation-count policy.
    out = services.chain.unspent_output(info.output_id) if services.chain else None
    depth = services.chain.output_depth(info.output_id) if services.chain else None
    if out is None or depth is None or depth < program.config.required_confirmations:
        raise NotConfirmedOnLedger(f"deposit {info.output_id} not confirmed")
    if out.address != info.address or out.amount != info.amount:
        raise AddressMismatch("on-chain output does not match descriptor")
    program.approved.setdefault(peer, {})[info.output_id] = info
    core = encoding.encode(("approved_deposit", tuple(info.output_id)))
    program.seal_to(services, peer, ("approved_deposit", tuple(info.output_id), services.sign(core)))
    services.note("approved_their_deposit", peer, info.output_id)
    return "approved"


@message("approved_deposit")
def _msg_approved_deposit(program: PaymentProgram, services, peer: bytes, raw_oid: tuple, sig: bytes):
    oid = tuple(raw_oid)
    core = encoding.encode(("approved_deposit", raw_oid))
    if not services.verify_peer(peer, core, sig):
        raise AuthenticationFailure("bad approved-deposit signature")
    if oid not in program.free_deps:
        raise DepositNotFree("approved deposit is no longer free")
    if oid in program.approved.get(peer, {}):
        raise AlreadyApproved("deposit already approved")
    rec = program.deposits[oid]
    program.approved.setdefault(peer, {})[oid] = rec.info
    services.note("deposit_approved", peer, oid, rec.amount)
    return "approved"


# ---------------------------------------------------------------------------
# Deposit association and dissociation
# ---------------------------------------------------------------------------


@command("associate_my_deposit")
def _cmd_associate_my_deposit(program: PaymentProgram, services, cid: str, oid: OutputId):
    oid = tuple(oid)
    ch = program.open_channel(cid)
    if ch.locked_by is not None:
        raise ChannelLocked(f"channel {cid} is locked")
    if oid not in program.approved.get(ch.remote_pub, {}):
        raise NotApproved(f"deposit {oid} not approved by counterparty")
    if oid not in program.free_deps:
        raise NotFree(f"deposit {oid} is not free")
    rec = program.deposits[oid]
    program.free_deps.discard(oid)
    rec.status = "associated"
    rec.channel_id = cid
    ch.my_deps.append(oid)
    ch.my_bal += rec.amount
    ch.deposit_shares[oid] = rec.amount
    if rec.info.committee is None:
        # 1-of-1: share the deposit key so the peer can settle unilaterally.
        key_pub = rec.key_public
        key_secret = program.btc_keys[key_pub]
    else:
        key_pub, key_secret = b"", b""
    core = encoding.encode(("associated", cid, rec.info.encode()))
    payload = ("associated", cid, rec.info.encode(), key_pub, key_secret, services.sign(core))
    services.note("associate", cid, oid, rec.amount)
    program.assert_capacity(cid)
    if rec.info.committee is not None:
        from . import replication

        dest, wire = program.sealed_wire(services, ch.remote_pub, payload)
        replication.replicate_then_send(program, services, rec.info.committee.chain_id, [(dest, wire)])
    else:
        program.seal_to(services, ch.remote_pub, payload)
    return "associated"


@message("associated")
def _msg_associated(
    program: PaymentProgram, services, peer: bytes, cid: str, raw_info: tuple, key_pub: bytes, key_secret: bytes, sig: bytes
):
    ch = program.open_channel(cid)
    if ch.remote_pub != peer:
        raise AuthenticationFailure("association from wrong counterparty")
    core = encoding.encode(("associated", cid, raw_info))
    if not services.verify_peer(peer, core, sig):
        raise AuthenticationFailure("bad association signature")
    info = DepositInfo.decode(raw_info)
    oid = info.output_id
    if oid not in program.approved.get(peer, {}):
        raise NotApproved(f"deposit {oid} was never approved")
    if oid in ch.remote_deps:
        raise DuplicateDeposit("deposit already associated")
    program.remote_deposits[oid] = info
    ch.remote_deps.append(oid)
    ch.remote_bal += info.amount
    if key_pub:
        if key_pub not in info.address.keys:
            raise AuthenticationFailure("shared key not part of deposit address")
        program.shared_keys[oid] = (key_pub, key_secret)
    services.note("accept_associate", cid, oid)
    program.assert_capacity(cid)
    return "associated"


@command("dissociate_deposit")
def _cmd_dissociate_deposit(program: PaymentProgram, services, cid: str, oid: OutputId):
    oid = tuple(oid)
    ch = program.channel(cid)
    if ch.locked_by is not None:
        raise ChannelLocked(f"channel {cid} is locked")
    if oid not in ch.my_deps:
        raise NotAssociated(f"deposit {oid} not associated with {cid}")
    rec = program.deposits[oid]
    if ch.my_bal < rec.amount:
        raise InsufficientBalance("balance below deposit amount; associate a smaller deposit first")
    if rec.status == "dissociating":
        raise NotAssociated("dissociation already in progress")
    rec.status = "dissociating"
    core = encoding.encode(("dissociate", cid, tuple(oid)))
    program.seal_to(services, ch.remote_pub, ("dissociate", cid, tuple(oid), services.sign(core)))
    services.note("dissociate", oid)
    return "requested"


@message("dissociate")
def _msg_dissociate(program: PaymentProgram, services, peer: bytes, cid: str, raw_oid: tuple, sig: bytes):
    oid = tuple(raw_oid)
    ch = program.channel(cid)
    if ch.remote_pub != peer:
        raise AuthenticationFailure("dissociation from wrong counterparty")
    core = encoding.encode(("dissociate", cid, raw_oid))
    if not services.verify_peer(peer, core, sig):
        raise AuthenticationFailure("bad dissociation signature")
    if oid not in ch.remote_deps:
        raise NotAssociated(f"deposit {oid} not associated")
    info = program.remote_deposits[oid]
    if ch.remote_bal < info.amount:
        raise InsufficientBalance("counterparty balance below deposit amount")
    ch.remote_deps.remove(oid)
    ch.remote_bal -= info.amount
    # Destroy our copy of the deposit key before acknowledging.
    program.shared_keys.pop(oid, None)
    core = encoding.encode(("dissociate_ack", cid, raw_oid))
    program.seal_to(services, peer, ("dissociate_ack", cid, raw_oid, services.sign(core)))
    services.note("accept_dissociate", oid)
    program.assert_capacity(cid)
    _maybe_finish_offchain_close(program, services, cid)
    return "acked"


@message("dissociate_ack")
def _msg_dissociate_ack(program: PaymentProgram, services, peer: bytes, cid: str, raw_oid: tuple, sig: bytes):
    oid = tuple(raw_oid)
    ch = program.channel(cid)
    if ch.remote_pub != peer:
        raise AuthenticationFailure("ack from wrong counterparty")
    core = encoding.encode(("dissociate_ack", cid, raw_oid))
    if not services.verify_peer(peer, core, sig):
        raise AuthenticationFailure("bad dissociation ack signature")
    if oid not in ch.my_deps:
        raise NotAssociated(f"deposit {oid} not associated")
    rec = program.deposits[oid]
    ch.my_deps.remove(oid)
    ch.my_bal -= rec.amount
    _drop_share(program, ch, oid, rec.amount)
    rec.status = "free"
    rec.channel_id = None
    program.free_deps.add(oid)
    services.note("ack_dissociate", oid)
    program.assert_capacity(cid)
    _maybe_finish_offchain_close(program, services, cid)
    return "dissociated"


def _drop_share(program: PaymentProgram, ch: ChannelState, oid: OutputId, amount: int) -> None:
    """Remove a deposit's collateral share, absorbing any spent part of it
    into the remaining shares so that sum(shares) <= my_bal stays true."""
    share = ch.deposit_shares.pop(oid, 0)
    overflow = amount - share  # part of this deposit already paid away
    credit = ch.my_bal - sum(ch.deposit_shares.values())
    take = min(credit, overflow) if overflow > 0 else 0
    overflow -= take
    for other in list(ch.deposit_shares):
        if overflow <= 0:
            break
        cut = min(ch.deposit_shares[other], overflow)
        ch.deposit_shares[other] -= cut
        overflow -= cut


# ---------------------------------------------------------------------------
# Payments
# ---------------------------------------------------------------------------


@command("pay")
def _cmd_pay(program: PaymentProgram, services, cid: str, amount: int):
    amount = int(amount)
    ch = program.open_channel(cid)
    if ch.locked_by is not None:
        raise ChannelLocked(f"channel {cid} is locked by a path payment")
    if amount <= 0:
        raise InsufficientBalance("payment amount must be positive")
    if ch.my_bal < amount:
        raise InsufficientBalance(f"balance {ch.my_bal} below payment {amount}")
    from . import replication

    return replication.start_payment(program, services, cid, amount)


def replication_consume_shares(program: PaymentProgram, ch: ChannelState, amount: int) -> None:
    """Spend collateral: unbacked credit first, then deposit shares in
    association order."""
    credit = ch.my_bal + amount - sum(ch.deposit_shares.values())  # before this payment
    remaining = amount - min(credit, amount)
    for oid in ch.my_deps:
        if remaining <= 0:
            break
        cut = min(ch.deposit_shares.get(oid, 0), remaining)
        ch.deposit_shares[oid] = ch.deposit_shares.get(oid, 0) - cut
        remaining -= cut


def apply_pay_revert(program: PaymentProgram, services, cid: str, amount: int, seq: int) -> None:
    """Undo a sub-payment whose replication never acknowledged; the paid
    message was withheld, so the counterparty never saw it."""
    ch = program.channels.get(cid)
    if ch is None:
        return
    ch.my_bal += amount
    ch.remote_bal -= amount
    # Restore collateral to the first deposit with room.
    remaining = amount
    for oid in ch.my_deps:
        rec = program.deposits[oid]
        room = rec.amount - ch.deposit_shares.get(oid, 0)
        give = min(room, remaining)
        ch.deposit_shares[oid] = ch.deposit_shares.get(oid, 0) + give
        remaining -= give
        if remaining <= 0:
            break


@message("paid")
def _msg_paid(program: PaymentProgram, services, peer: bytes, cid: str, amount: int, seq: int, sig: bytes):
    ch = program.open_channel(cid)
    if ch.remote_pub != peer:
        raise AuthenticationFailure("payment from wrong counterparty")
    core = encoding.encode(("paid", cid, amount, seq))
    if not services.verify_peer(peer, core, sig):
        raise AuthenticationFailure("bad payment signature")
    if seq != ch.receive_count + 1:
        raise StaleSequence(f"payment seq {seq}, expected {ch.receive_count + 1}")
    if ch.remote_bal < amount:
        raise InsufficientBalance("counterparty overspends its balance")
    tag = f"{cid}:{seq}"
    from . import replication

    chain_ids = replication.chains_for_channel(program, ch)
    replication._check_chains_usable(program, chain_ids)
    ch.receive_count = seq
    ch.my_bal += amount
    ch.remote_bal -= amount
    program.assert_capacity(cid)
    # Receiver-side committees must replicate before the credit is durable;
    # on a break the credit reverts (the sender's settlement still honors it).
    replication.guarded_apply(
        program,
        services,
        chain_ids,
        notes=[("receive", cid, amount, tag)],
        revert=[("receive_revert", cid, amount, seq)],
    )
    return "received"


# ---------------------------------------------------------------------------
# Settlement
# ---------------------------------------------------------------------------


@command("settle")
def _cmd_settle(program: PaymentProgram, services, cid: str):
    ch = program.channel(cid)
    if ch.locked_by is not None:
        raise ChannelLocked("locked channel: terminate via eject")
    neutral = (
        ch.my_bal == ch.my_deposit_sum(program)
        and ch.remote_bal == ch.remote_deposit_sum(program)
    )
    if neutral:
        ch.closing = True
        for oid in list(ch.my_deps):
            rec = program.deposits[oid]
            if rec.status == "dissociating":
                continue
            rec.status = "dissociating"
            core = encoding.encode(("dissociate", cid, tuple(oid)))
            program.seal_to(services, ch.remote_pub, ("dissociate", cid, tuple(oid), services.sign(core)))
            services.note("dissociate", oid)
        program.seal_to(services, ch.remote_pub, ("settle_neutral", cid))
        _maybe_finish_offchain_close(program, services, cid)
        return None
    tx = build_settlement(program, ch, ch.my_bal, ch.remote_bal)
    infos = {oid: program.deposit_info(oid) for oid in ch.my_deps + ch.remote_deps}
    for oid in ch.my_deps:
        rec = program.deposits[oid]
        rec.status = "pending_settlement"
        rec.channel_id = None
    services.note("settle", cid)
    services.note("settle_submitted", cid, tx.txid, ch.my_bal, ch.remote_bal)
    try:
        program.seal_to(services, ch.remote_pub, ("settled_notify", cid))
    except AuthenticationFailure:
        pass  # no session: unilateral close still works
    program.reset_channel(cid)
    return _sign_and_dispatch(program, services, tx, infos)


def build_settlement(program: PaymentProgram, ch: ChannelState, my_bal: int, remote_bal: int) -> Transaction:
    """Settlement transaction: spends all associated deposits, pays each side
    its balance at its settlement address."""
    inputs = list(ch.my_deps) + list(ch.remote_deps)
    outputs = []
    if my_bal > 0:
        outputs.append((ch.my_addr, my_bal))
    if remote_bal > 0:
        outputs.append((ch.remote_addr, remote_bal))
    return unsigned_transaction(inputs, outputs)


@message("settle_neutral")
def _msg_settle_neutral(program: PaymentProgram, services, peer: bytes, cid: str):
    if cid in program.closed_channels:
        return "closed"
    ch = program.channel(cid)
    if ch.remote_pub != peer:
        raise AuthenticationFailure("settle notice from wrong counterparty")
    ch.closing = True
    for oid in list(ch.my_deps):
        rec = program.deposits[oid]
        if rec.status == "dissociating":
            continue
        rec.status = "dissociating"
        core = encoding.encode(("dissociate", cid, tuple(oid)))
        program.seal_to(services, peer, ("dissociate", cid, tuple(oid), services.sign(core)))
        services.note("dissociate", oid)
    _maybe_finish_offchain_close(program, services, cid)
    return "closing"


@message("settled_notify")
def _msg_settled_notify(program: PaymentProgram, services, peer: bytes, cid: str):
    if cid in program.closed_channels:
        return "closed"
    ch = program.channels.get(cid)
    if ch is None or ch.remote_pub != peer:
        return "ignored"
    # Counterparty settled on-chain; our deposits are being spent by its
    # transaction.  Anything the chain race leaves unspent is reclaimable.
    for oid in list(ch.my_deps):
        rec = program.deposits[oid]
        rec.status = "pending_settlement"
        rec.channel_id = None
    services.note("settle", cid)
    program.reset_channel(cid)
    return "closed"


def _maybe_finish_offchain_close(program: PaymentProgram, services, cid: str) -> None:
    ch = program.channels.get(cid)
    if ch is None or not ch.closing:
        return
    if not ch.my_deps and not ch.remote_deps:
        services.note("settle", cid)
        program.reset_channel(cid)


# ---------------------------------------------------------------------------
# Reclaim (post-settlement recovery)
# ---------------------------------------------------------------------------


@command("reclaim_deposits")
def _cmd_reclaim_deposits(program: PaymentProgram, services, payout_key: bytes):
    """Release every own deposit that is still unspent on the ledger (free
    deposits plus deposits whose settlement lost a confirmation race)."""
    released = []
    for oid, rec in list(program.deposits.items()):
        if rec.status not in ("free", "pending_settlement"):
            continue
        out = services.chain.unspent_output(oid) if services.chain else None
        if out is None:
            if rec.status == "pending_settlement":
                rec.status = "released"
            continue
        tx = unsigned_transaction([oid], [(single(payout_key), rec.amount)])
        program.free_deps.discard(oid)
        rec.status = "released"
        services.note("release_submitted", oid, tx.txid, rec.amount)
        _sign_and_dispatch(program, services, tx, {oid: rec.info})
        released.append(oid)
    return released


# Multihop and replication handlers register themselves into the dispatch
# tables when their modules load.
from . import multihop as _multihop  # noqa: E402,F401
from . import replication as _replication  # noqa: E402,F401
