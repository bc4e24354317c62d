"""Atomic payments across a path of channels.

Six-stage pipeline: a lock pass travels toward the recipient collecting every
node's deposits and post-payment payouts into a path settlement transaction;
a sign pass travels back accumulating ledger signatures; the completed,
fully-signed path settlement is distributed forward (preUpdate); balance
deltas apply on the way back (update); the path settlement is discarded
forward (postUpdate); and locks release backward.

The path settlement transaction spends all deposits of all channels on the
path and pays everyone their post-payment balance, so it conflicts with every
individual channel settlement.  While a node holds it (stages preUpdate and
update inclusive) it may only terminate through it; outside that window it
terminates with individual pre- or post-payment settlements.  A node whose
channel was settled under it by someone else presents the confirmed
settlement as a proof of premature termination to authorize consistent local
settlement in the same state.

Paths may revisit the initiator (the self-cycle used to drain temporary
channels), so per-node payment state is keyed by (payment id, path index) and
lock messages name the hop channels explicitly.

Channels funded by committee deposits cannot join a path: their settlement
signatures are not locally available during the sign pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import encoding
from .channel import (
    ChannelState,
    PaymentProgram,
    build_settlement,
    command,
    message,
    replication_consume_shares,
)
from .errors import (
    ChannelLocked,
    InsufficientBalance,
    InsufficientFreeDeposits,
    InvalidEvidence,
    ProtocolError,
    StageMismatch,
    UnknownChannel,
)
from .ledger import Address, OutputId, Transaction, TxInput, unsigned_transaction
from . import crypto

IDLE = "idle"
LOCK = "lock"
SIGN = "sign"
PRE_UPDATE = "preUpdate"
UPDATE = "update"
POST_UPDATE = "postUpdate"
RELEASED = "released"
TERMINATED = "terminated"


@dataclass
class PathEntry:
    """One node's contribution to the path settlement: its deposits and its
    post-payment payout on each of its path channels."""

    node: bytes
    deposits: tuple  # (cid, output_id, amount, address_enc)
    payouts: tuple  # (cid, address_enc, amount)

    def encode(self) -> tuple:
        return (
            self.node,
            tuple((cid, tuple(oid), amt, addr) for cid, oid, amt, addr in self.deposits),
            tuple(self.payouts),
        )

    @staticmethod
    def decode(raw) -> "PathEntry":
        node, deposits, payouts = raw
        return PathEntry(
            node,
            tuple((cid, tuple(oid), amt, tuple(addr)) for cid, oid, amt, addr in deposits),
            tuple(tuple(p) for p in payouts),
        )


@dataclass
class PathPayment:
    pid: str
    amount: int
    path: tuple[bytes, ...]
    hop_cids: tuple[str, ...]  # channel id per hop, len(path) - 1
    my_index: int
    stage: str = IDLE
    upstream_cid: str | None = None
    downstream_cid: str | None = None
    entries: list = field(default_factory=list)  # encoded PathEntry tuples
    signatures: dict = field(default_factory=dict)  # output_id -> ((pub, sig), ...)
    tau: Transaction | None = None
    pre_balances: dict = field(default_factory=dict)  # cid -> (my, remote)
    post_balances: dict = field(default_factory=dict)
    done: bool = False
    merge_close_cid: str | None = None

    def key(self) -> str:
        return path_key(self.pid, self.my_index)

    def local_cids(self) -> list[str]:
        return [cid for cid in (self.upstream_cid, self.downstream_cid) if cid]


def path_key(pid: str, index: int) -> str:
    return f"{pid}#{index}"


def build_path_settlement(entries: list) -> Transaction:
    """Deterministic path settlement from the collected entries: inputs are
    all deposits in path order, outputs all payouts in path order."""
    input_ids: list[OutputId] = []
    outputs: list[tuple[Address, int]] = []
    for raw in entries:
        entry = PathEntry.decode(raw)
        for _cid, oid, _amt, _addr in entry.deposits:
            input_ids.append(oid)
        for _cid, addr_enc, amount in entry.payouts:
            if amount > 0:
                kind, m, keys = addr_enc
                outputs.append((Address(kind, m, tuple(keys)), amount))
    return unsigned_transaction(input_ids, outputs)


def _attach_signatures(tx: Transaction, signatures: dict) -> Transaction:
    new_inputs = []
    for txin in tx.inputs:
        sigs = tuple(signatures.get(txin.output_id, ()))
        new_inputs.append(TxInput(txin.output_id, sigs))
    return Transaction(tuple(new_inputs), tx.outputs, tx.lock_height)


def _channel_deposit_rows(program: PaymentProgram, cid: str) -> list:
    ch = program.channels[cid]
    rows = []
    for oid in ch.my_deps:
        rec = program.deposits[oid]
        rows.append((cid, oid, rec.amount, rec.info.address.encode()))
    return rows


def _my_entry(program: PaymentProgram, services, pp: PathPayment) -> PathEntry:
    deposits = []
    payouts = []
    if pp.upstream_cid:
        ch = program.channels[pp.upstream_cid]
        deposits.extend(_channel_deposit_rows(program, pp.upstream_cid))
        post_my = pp.post_balances[pp.upstream_cid][0]
        payouts.append((pp.upstream_cid, ch.my_addr.encode(), post_my))
    if pp.downstream_cid:
        ch = program.channels[pp.downstream_cid]
        deposits.extend(_channel_deposit_rows(program, pp.downstream_cid))
        post_my = pp.post_balances[pp.downstream_cid][0]
        payouts.append((pp.downstream_cid, ch.my_addr.encode(), post_my))
    return PathEntry(services.identity_public, tuple(deposits), tuple(payouts))


def _lock_channel(program: PaymentProgram, pp: PathPayment, cid: str, outgoing: bool) -> ChannelState:
    ch = program.open_channel(cid)
    if ch.locked_by is not None and ch.locked_by != pp.pid:
        raise ChannelLocked(f"channel {cid} already locked by {ch.locked_by}")
    if ch.stage not in (IDLE,) and ch.locked_by != pp.pid:
        raise StageMismatch(f"channel {cid} not idle")
    for oid in ch.my_deps:
        if program.deposits[oid].info.committee is not None:
            raise ChannelLocked("committee-backed deposits cannot join a path payment")
    ch.locked_by = pp.pid
    pre = (ch.my_bal, ch.remote_bal)
    pp.pre_balances[cid] = pre
    delta = -pp.amount if outgoing else pp.amount
    pp.post_balances[cid] = (pre[0] + delta, pre[1] - delta)
    return ch


def _set_stage(program: PaymentProgram, pp: PathPayment, stage: str) -> None:
    pp.stage = stage
    for cid in pp.local_cids():
        ch = program.channels.get(cid)
        if ch is not None:
            ch.stage = stage


def _unlock(program: PaymentProgram, pp: PathPayment) -> None:
    pp.stage = RELEASED
    pp.done = True
    pp.tau = None
    for cid in pp.local_cids():
        ch = program.channels.get(cid)
        if ch is not None:
            ch.stage = IDLE
            ch.locked_by = None


def _expect_stage(pp: PathPayment, *allowed: str) -> None:
    if pp.stage not in allowed:
        raise StageMismatch(f"payment {pp.pid} at {pp.stage}, handler expects {allowed}")


# ---------------------------------------------------------------------------
# Initiation and the six stage handlers
# ---------------------------------------------------------------------------


@command("pay_multihop")
def _cmd_pay_multihop(program: PaymentProgram, services, amount: int, path: tuple, hop_cids: tuple = ()):
    """Initiate a path payment from this node (path[0]) to path[-1]."""
    amount = int(amount)
    path = tuple(path)
    if len(path) < 2:
        raise ProtocolError("path needs at least two nodes")
    if path[0] != services.identity_public:
        raise ProtocolError("initiator must be the first path node")
    if amount <= 0:
        raise InsufficientBalance("payment amount must be positive")
    hop_cids = tuple(hop_cids) if hop_cids else _default_hops(program, path)
    pid = crypto.derive_seed(services.entropy("path"), "pid").hex()[:16]
    # The initiator delivers the lock to itself (index 0) directly.
    _handle_lock(program, services, pid, amount, path, hop_cids, 0, [])
    return pid


def _default_hops(program: PaymentProgram, path: tuple) -> tuple:
    """Pick, for each hop, the first open unlocked channel with that peer."""
    # Only hop 0 is resolvable locally; intermediate hops must be named by the
    # caller when a peer pair has more than one channel.
    cids = []
    prev = path[0]
    known = {(prev, path[1])}
    for a, b in zip(path, path[1:]):
        cid = None
        if (a, b) in known:
            for c, ch in program.channels.items():
                if ch.remote_pub == b and ch.is_open and ch.locked_by is None:
                    cid = c
                    break
            if cid is None:
                raise UnknownChannel("no open unlocked channel for first hop")
        if cid is None:
            raise UnknownChannel("hop channels must be named for multi-channel paths")
        cids.append(cid)
        known = set()
    return tuple(cids)


@message("mh_lock")
def _msg_mh_lock(program: PaymentProgram, services, peer: bytes, pid: str, amount: int, path: tuple, hop_cids: tuple, index: int, entries: tuple):
    path = tuple(path)
    hop_cids = tuple(hop_cids)
    if path[index] != services.identity_public:
        raise ProtocolError("lock delivered to wrong node")
    return _handle_lock(program, services, pid, amount, path, hop_cids, index, list(entries))


def _handle_lock(program: PaymentProgram, services, pid, amount, path, hop_cids, index, entries):
    n = len(path)
    if len(hop_cids) != n - 1:
        raise ProtocolError("one channel id required per hop")
    key = path_key(pid, index)
    if key in program.path_payments:
        raise StageMismatch("duplicate lock")
    pp = PathPayment(
        pid=pid,
        amount=amount,
        path=path,
        hop_cids=hop_cids,
        my_index=index,
        upstream_cid=hop_cids[index - 1] if index > 0 else None,
        downstream_cid=hop_cids[index] if index < n - 1 else None,
    )
    if pp.downstream_cid:
        ch = _lock_channel(program, pp, pp.downstream_cid, outgoing=True)
        if ch.remote_pub != path[index + 1]:
            _rollback_locks(program, pp)
            raise UnknownChannel("downstream channel does not reach the next hop")
        if pp.pre_balances[pp.downstream_cid][0] < amount:
            _rollback_locks(program, pp)
            raise InsufficientBalance("hop balance below payment amount")
    if pp.upstream_cid:
        ch = _lock_channel(program, pp, pp.upstream_cid, outgoing=False)
        if ch.remote_pub != path[index - 1]:
            _rollback_locks(program, pp)
            raise UnknownChannel("upstream channel does not reach the previous hop")
    program.path_payments[key] = pp
    entries = list(entries) + [_my_entry(program, services, pp).encode()]
    pp.entries = entries
    if index < n - 1:
        _set_stage(program, pp, LOCK)
        program.seal_to(
            services, path[index + 1], ("mh_lock", pid, amount, path, hop_cids, index + 1, tuple(entries))
        )
        return LOCK
    # Recipient: all entries collected; start the sign pass.
    _set_stage(program, pp, SIGN)
    tx = build_path_settlement(entries)
    sigs = _add_local_signatures(program, pp, tx, {})
    pp.signatures = sigs
    program.seal_to(services, path[index - 1], ("mh_sign", pid, tuple(entries), _encode_sigs(sigs)))
    return SIGN


def _rollback_locks(program: PaymentProgram, pp: PathPayment) -> None:
    for cid in pp.local_cids():
        ch = program.channels.get(cid)
        if ch is not None and ch.locked_by == pp.pid:
            ch.locked_by = None
            ch.stage = IDLE


def _encode_sigs(sigs: dict) -> tuple:
    return tuple((tuple(oid), tuple(pairs)) for oid, pairs in sigs.items())


def _decode_sigs(raw) -> dict:
    return {tuple(oid): tuple((bytes(pk), bytes(sig)) for pk, sig in pairs) for oid, pairs in raw}


def _add_local_signatures(program: PaymentProgram, pp: PathPayment, tx: Transaction, sigs: dict) -> dict:
    """Sign the path settlement with every deposit key this enclave holds."""
    payload = tx.payload()
    out = {oid: list(pairs) for oid, pairs in sigs.items()}
    for txin in tx.inputs:
        oid = txin.output_id
        held = program.deposit_key_secrets(oid)
        if not held:
            continue
        have = {pk for pk, _ in out.get(oid, [])}
        for pub, secret in held.items():
            if pub in have:
                continue
            out.setdefault(oid, []).append((pub, crypto.sign(secret, payload)))
            have.add(pub)
    return {oid: tuple(pairs) for oid, pairs in out.items()}


@message("mh_sign")
def _msg_mh_sign(program: PaymentProgram, services, peer: bytes, pid: str, entries: tuple, raw_sigs: tuple):
    pp, index = _locate(program, services, pid, peer, direction="from_downstream")
    _expect_stage(pp, LOCK)
    pp.entries = list(entries)
    tx = build_path_settlement(pp.entries)
    sigs = _add_local_signatures(program, pp, tx, _decode_sigs(raw_sigs))
    pp.signatures = sigs
    if index > 1:
        _set_stage(program, pp, SIGN)
        program.seal_to(services, pp.path[index - 1], ("mh_sign", pid, tuple(pp.entries), _encode_sigs(sigs)))
        return SIGN
    # Initiator: verify completeness and distribute the signed settlement.
    signed = _attach_signatures(tx, sigs)
    payload = signed.payload()
    for txin in signed.inputs:
        ok = {pk for pk, sig in txin.signatures if crypto.verify(pk, payload, sig)}
        info_m = _input_threshold(pp, txin.output_id)
        if len(ok) < info_m:
            raise InvalidEvidence(f"path settlement is missing signatures for {txin.output_id}")
    pp.tau = signed
    _set_stage(program, pp, PRE_UPDATE)
    program.seal_to(services, pp.path[1], ("mh_preupdate", pid, _tx_to_wire(signed)))
    return PRE_UPDATE


def _input_threshold(pp: PathPayment, oid: OutputId) -> int:
    for raw in pp.entries:
        entry = PathEntry.decode(raw)
        for _cid, e_oid, _amt, addr_enc in entry.deposits:
            if tuple(e_oid) == tuple(oid):
                return addr_enc[1]
    return 1


def _tx_to_wire(tx: Transaction) -> tuple:
    return (
        tuple((tuple(i.output_id), tuple(i.signatures)) for i in tx.inputs),
        tuple((addr.encode(), amount) for addr, amount in tx.outputs),
        tx.lock_height,
    )


def tx_from_wire(raw) -> Transaction:
    inputs, outputs, lock = raw
    return Transaction(
        tuple(TxInput((oid[0], oid[1]), tuple((bytes(pk), bytes(sig)) for pk, sig in sigs)) for oid, sigs in inputs),
        tuple((Address(kind, m, tuple(keys)), amount) for (kind, m, keys), amount in outputs),
        lock,
    )


def _locate(program: PaymentProgram, services, pid: str, peer: bytes, direction: str) -> tuple[PathPayment, int]:
    """Find this node's state for pid; with cycles, the sender pins the index."""
    candidates = [
        pp
        for pp in program.path_payments.values()
        if pp.pid == pid and not pp.done and pp.path[pp.my_index] == services.identity_public
    ]
    for pp in candidates:
        i = pp.my_index
        if direction == "from_downstream" and i + 1 < len(pp.path) and pp.path[i + 1] == peer:
            return pp, i
        if direction == "from_upstream" and i > 0 and pp.path[i - 1] == peer:
            return pp, i
    raise StageMismatch(f"no active payment {pid} matching sender")


@message("mh_preupdate")
def _msg_mh_preupdate(program: PaymentProgram, services, peer: bytes, pid: str, tau_wire: tuple):
    pp, index = _locate(program, services, pid, peer, direction="from_upstream")
    _expect_stage(pp, SIGN)
    pp.tau = tx_from_wire(tau_wire)
    n = len(pp.path)
    if index < n - 1:
        _set_stage(program, pp, PRE_UPDATE)
        program.seal_to(services, pp.path[index + 1], ("mh_preupdate", pid, tau_wire))
        return PRE_UPDATE
    # Recipient credits first, then starts the update pass backward.
    _set_stage(program, pp, UPDATE)
    ch = program.channels[pp.upstream_cid]
    ch.my_bal += pp.amount
    ch.remote_bal -= pp.amount
    services.note("mh_credit", pp.upstream_cid, pp.amount, pid)
    program.assert_capacity(pp.upstream_cid)
    program.seal_to(services, pp.path[index - 1], ("mh_update", pid))
    return UPDATE


@message("mh_update")
def _msg_mh_update(program: PaymentProgram, services, peer: bytes, pid: str):
    pp, index = _locate(program, services, pid, peer, direction="from_downstream")
    _expect_stage(pp, PRE_UPDATE)
    if index > 0:
        # Intermediate: credit the upstream channel, debit the downstream one.
        up = program.channels[pp.upstream_cid]
        up.my_bal += pp.amount
        up.remote_bal -= pp.amount
        program.assert_capacity(pp.upstream_cid)
    if pp.downstream_cid:
        down = program.channels[pp.downstream_cid]
        down.my_bal -= pp.amount
        down.remote_bal += pp.amount
        down.pay_count += 1
        replication_consume_shares(program, down, pp.amount)
        program.assert_capacity(pp.downstream_cid)
    if index > 0:
        _set_stage(program, pp, UPDATE)
        program.seal_to(services, pp.path[index - 1], ("mh_update", pid))
        return UPDATE
    # Initiator: discard the path settlement and push postUpdate forward.
    pp.tau = None
    _set_stage(program, pp, POST_UPDATE)
    program.seal_to(services, pp.path[1], ("mh_postupdate", pid))
    return POST_UPDATE


@message("mh_postupdate")
def _msg_mh_postupdate(program: PaymentProgram, services, peer: bytes, pid: str):
    pp, index = _locate(program, services, pid, peer, direction="from_upstream")
    _expect_stage(pp, UPDATE)
    pp.tau = None
    n = len(pp.path)
    if index < n - 1:
        _set_stage(program, pp, POST_UPDATE)
        program.seal_to(services, pp.path[index + 1], ("mh_postupdate", pid))
        return POST_UPDATE
    # Recipient releases first.
    _unlock(program, pp)
    program.seal_to(services, pp.path[index - 1], ("mh_release", pid))
    return RELEASED


@message("mh_release")
def _msg_mh_release(program: PaymentProgram, services, peer: bytes, pid: str):
    pp, index = _locate(program, services, pid, peer, direction="from_downstream")
    _expect_stage(pp, POST_UPDATE)
    if pp.downstream_cid:
        # This node's outgoing hop is final now; mirror it as a plain payment.
        services.note("pay", pp.downstream_cid, pp.amount, f"mh:{pid}:{index}")
    _unlock(program, pp)
    if index > 0:
        program.seal_to(services, pp.path[index - 1], ("mh_release", pid))
    if pp.merge_close_cid:
        from .channel import COMMANDS

        COMMANDS["settle"](program, services, pp.merge_close_cid)
    return RELEASED


# ---------------------------------------------------------------------------
# Premature termination
# ---------------------------------------------------------------------------


@command("eject")
def _cmd_eject(program: PaymentProgram, services, pid: str, index: int | None = None):
    """Terminate an in-flight path payment at this node.

    Stage lock/sign: individual pre-payment settlements of the local path
    channels.  Stage preUpdate/update: the held path settlement, settling the
    whole path post-payment.  Stage postUpdate/release: individual
    post-payment settlements.
    """
    pp = _my_payment(program, services, pid, index)
    stage = pp.stage
    txs: list[Transaction] = []
    if stage in (PRE_UPDATE, UPDATE):
        if pp.tau is None:
            raise StageMismatch("no path settlement held")
        txs.append(pp.tau)
        services.submit(pp.tau)
        _terminate_channels(program, services, pp, list(pp.local_cids()))
    elif stage in (LOCK, SIGN):
        txs.extend(_settle_local(program, services, pp, "pre"))
    elif stage in (POST_UPDATE, RELEASED):
        txs.extend(_settle_local(program, services, pp, "post"))
    else:
        raise StageMismatch(f"cannot eject at stage {stage}")
    pp.stage = TERMINATED
    pp.done = True
    return txs


def _my_payment(program: PaymentProgram, services, pid: str, index: int | None) -> PathPayment:
    if index is not None:
        pp = program.path_payments.get(path_key(pid, index))
        if pp is None:
            raise StageMismatch(f"no payment state {pid}#{index}")
        return pp
    for pp in program.path_payments.values():
        if pp.pid == pid and not pp.done:
            return pp
    raise StageMismatch(f"no active payment {pid}")


def _settle_local(program: PaymentProgram, services, pp: PathPayment, state: str) -> list[Transaction]:
    """Individual settlements of this node's path channels at the named
    payment state, from the snapshots taken at lock time."""
    balances = pp.pre_balances if state == "pre" else pp.post_balances
    txs = []
    for cid in pp.local_cids():
        ch = program.channels.get(cid)
        if ch is None:
            continue
        my_bal, remote_bal = balances[cid]
        tx = build_settlement(program, ch, my_bal, remote_bal)
        infos = {oid: program.deposit_info(oid) for oid in ch.my_deps + ch.remote_deps}
        from .channel import _sign_and_dispatch

        _sign_and_dispatch(program, services, tx, infos)
        txs.append(tx)
        services.note("settle_ejected", cid, state)
        _close_path_channel(program, ch)
    return txs


def _terminate_channels(program: PaymentProgram, services, pp: PathPayment, cids: list[str]) -> None:
    for cid in cids:
        ch = program.channels.get(cid)
        if ch is None:
            continue
        services.note("settle_ejected", cid, "tau")
        _close_path_channel(program, ch)


def _close_path_channel(program: PaymentProgram, ch: ChannelState) -> None:
    for oid in ch.my_deps:
        rec = program.deposits[oid]
        rec.status = "pending_settlement"
        rec.channel_id = None
    ch.stage = TERMINATED
    program.reset_channel(ch.id)


@command("eject_popt")
def _cmd_eject_popt(program: PaymentProgram, services, pid: str, evidence_wire: tuple, claimed_state: str, index: int | None = None):
    """Terminate consistently with a confirmed settlement of another channel
    on the path (proof of premature termination)."""
    pp = _my_payment(program, services, pid, index)
    evidence = tx_from_wire(evidence_wire)
    if services.chain is None or not services.chain.is_confirmed(evidence.txid):
        raise InvalidEvidence("evidence transaction is not confirmed")
    derived = _derive_state(program, pp, evidence)
    if derived is None:
        raise InvalidEvidence("evidence does not spend deposits of this path payment")
    if claimed_state not in ("pre", "post") or claimed_state != derived:
        raise InvalidEvidence(f"claimed state {claimed_state} does not match evidence ({derived})")
    evidence_inputs = {i.output_id for i in evidence.inputs}
    remaining = []
    for cid in pp.local_cids():
        ch = program.channels.get(cid)
        if ch is None:
            continue
        deps = set(ch.my_deps) | set(ch.remote_deps)
        if deps & evidence_inputs:
            # This channel was settled by the evidence itself.
            services.note("settle_ejected", cid, derived)
            _close_path_channel(program, ch)
        else:
            remaining.append(cid)
    txs = []
    balances = pp.pre_balances if derived == "pre" else pp.post_balances
    for cid in remaining:
        ch = program.channels[cid]
        my_bal, remote_bal = balances[cid]
        tx = build_settlement(program, ch, my_bal, remote_bal)
        infos = {oid: program.deposit_info(oid) for oid in ch.my_deps + ch.remote_deps}
        from .channel import _sign_and_dispatch

        _sign_and_dispatch(program, services, tx, infos)
        txs.append(tx)
        services.note("settle_ejected", cid, derived)
        _close_path_channel(program, ch)
    pp.stage = TERMINATED
    pp.done = True
    pp.tau = None
    return txs


def _derive_state(program: PaymentProgram, pp: PathPayment, evidence: Transaction) -> str | None:
    """Classify confirmed evidence as a pre- or post-payment settlement of
    some channel on this path, or None if it is unrelated."""
    evidence_inputs = {i.output_id for i in evidence.inputs}
    evidence_outputs = {(addr.encode(), amount) for addr, amount in evidence.outputs}
    # Deposits and post-payment payouts known from the lock-pass entries.
    path_deposits: dict[str, set] = {}
    post_payouts: dict[str, set] = {}
    for raw in pp.entries:
        entry = PathEntry.decode(raw)
        for cid, oid, _amt, _addr in entry.deposits:
            path_deposits.setdefault(cid, set()).add(tuple(oid))
        for cid, addr_enc, amount in entry.payouts:
            if amount > 0:
                post_payouts.setdefault(cid, set()).add((tuple(addr_enc[:2]) + (tuple(addr_enc[2]),), amount))
    if pp.tau is not None and evidence.txid == pp.tau.txid:
        return "post"
    all_deposits = set().union(*path_deposits.values()) if path_deposits else set()
    for cid in pp.local_cids():
        ch = program.channels.get(cid)
        if ch is not None:
            all_deposits |= set(ch.my_deps) | set(ch.remote_deps)
    if not (evidence_inputs & all_deposits):
        return None
    if len(evidence_inputs) == len(all_deposits) and evidence_inputs == all_deposits:
        return "post"  # the path settlement itself
    # My own channels: exact pre/post split comparison.
    for cid in pp.local_cids():
        ch = program.channels.get(cid)
        if ch is None:
            continue
        deps = set(ch.my_deps) | set(ch.remote_deps)
        if evidence_inputs == deps:
            for state, balances in (("pre", pp.pre_balances), ("post", pp.post_balances)):
                my_bal, remote_bal = balances[cid]
                want = set()
                if my_bal > 0:
                    want.add((ch.my_addr.encode(), my_bal))
                if remote_bal > 0:
                    want.add((ch.remote_addr.encode(), remote_bal))
                if evidence_outputs == want:
                    return state
            return None  # mangled split of my own channel: not acceptable
    # Foreign channel: post iff the outputs match its recorded post payouts.
    for cid, deps in path_deposits.items():
        if evidence_inputs == deps:
            if post_payouts.get(cid, set()) <= evidence_outputs:
                return "post"
            return "pre"
    # Partial knowledge (early-stage nodes): inputs overlap path deposits but
    # match no complete channel we know; treat as the opposite of post.
    return "pre"


# ---------------------------------------------------------------------------
# Temporary channels (lock contention relief)
# ---------------------------------------------------------------------------


@command("create_temporary_channel")
def _cmd_create_temporary_channel(program: PaymentProgram, services, primary_cid: str, deposit_oids: tuple):
    """Open an extra channel with the primary's counterparty, instantly and
    with no ledger writes, funded by free approved deposits."""
    primary = program.open_channel(primary_cid)
    peer = primary.remote_pub
    oids = [tuple(o) for o in deposit_oids]
    if not oids:
        raise InsufficientFreeDeposits("temporary channel needs at least one deposit")
    for oid in oids:
        if oid not in program.free_deps:
            raise InsufficientFreeDeposits(f"deposit {oid} is not free")
        if oid not in program.approved.get(peer, {}):
            raise InsufficientFreeDeposits(f"deposit {oid} is not approved by the peer")
    tmp_index = 1
    while f"{primary_cid}~tmp{tmp_index}" in program.channels or f"{primary_cid}~tmp{tmp_index}" in program.closed_channels:
        tmp_index += 1
    cid = f"{primary_cid}~tmp{tmp_index}"
    ch = ChannelState(
        id=cid,
        remote_pub=peer,
        my_addr=primary.my_addr,
        remote_addr=primary.remote_addr,
        temporary=True,
    )
    program.channels[cid] = ch
    core = encoding.encode(("temp_channel", cid, ch.my_addr.keys[0], ch.remote_addr.keys[0]))
    program.seal_to(
        services, peer, ("temp_channel", cid, ch.my_addr.keys[0], ch.remote_addr.keys[0], services.sign(core))
    )
    services.note("open_channel", cid, peer)
    # Associations ride behind the ack; is_open flips when the ack arrives,
    # so queue them through the normal command once open.
    ch.is_open = True  # optimistic: the ack only confirms addresses we chose
    from .channel import COMMANDS

    for oid in oids:
        COMMANDS["associate_my_deposit"](program, services, cid, oid)
    return cid


@message("temp_channel")
def _msg_temp_channel(program: PaymentProgram, services, peer: bytes, cid: str, their_key: bytes, my_key: bytes, sig: bytes):
    from .errors import AuthenticationFailure, DuplicateChannel

    core = encoding.encode(("temp_channel", cid, their_key, my_key))
    if not services.verify_peer(peer, core, sig):
        raise AuthenticationFailure("bad temporary channel signature")
    if cid in program.channels or cid in program.closed_channels:
        raise DuplicateChannel(f"channel {cid} already exists")
    ch = ChannelState(
        id=cid,
        remote_pub=peer,
        my_addr=Address("single", 1, (my_key,)),
        remote_addr=Address("single", 1, (their_key,)),
        is_open=True,
        temporary=True,
    )
    program.channels[cid] = ch
    core = encoding.encode(("new_channel_ack", cid, my_key, their_key))
    program.seal_to(services, peer, ("new_channel_ack", cid, my_key, their_key, services.sign(core)))
    services.note("open_channel", cid, peer)
    services.note("accept_channel", cid)
    return cid


@command("merge_temporary_channels")
def _cmd_merge_temporary_channels(program: PaymentProgram, services, primary_cid: str, temp_cids: tuple):
    """Drain each temporary channel to neutral with a self-cycle path payment
    along (me, peer, me), then close it off-chain."""
    primary = program.open_channel(primary_cid)
    results = {}
    for cid in temp_cids:
        tmp = program.open_channel(cid)
        if not tmp.temporary:
            raise UnknownChannel(f"{cid} is not a temporary channel")
        if tmp.remote_pub != primary.remote_pub:
            raise UnknownChannel("temporary channel has a different counterparty")
        skew = tmp.my_bal - tmp.my_deposit_sum(program)
        if skew == 0:
            from .channel import COMMANDS

            COMMANDS["settle"](program, services, cid)
            results[cid] = 0
            continue
        me = services.identity_public
        path = (me, tmp.remote_pub, me)
        # Surplus on the temp: push it out through the temp, take it back on
        # the primary.  Deficit: the other way around.
        hops = (cid, primary_cid) if skew > 0 else (primary_cid, cid)
        amount = abs(skew)
        pid = _cmd_pay_multihop(program, services, amount, path, hops)
        program.path_payments[path_key(pid, 0)].merge_close_cid = cid
        results[cid] = amount
    return results
