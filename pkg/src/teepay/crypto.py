"""Signatures, authenticated encryption and authenticated key exchange.

The concrete schemes (Ed25519, X25519, ChaCha20-Poly1305) are implementation
details behind this interface; the rest of the system only relies on
EUF-CMA signatures and AEAD.  Key generation is deterministic from a 32-byte
seed so simulation runs are reproducible.

Everything here is a pure function over immutable values except the key
exchange, which is a two-message protocol driven by the caller: the
initiator creates an offer, the responder answers it (deriving its session
key), and the initiator completes the exchange with the answer.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature as _InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric import ed25519, x25519
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from . import encoding
from .errors import AuthenticationFailure

SEED_BYTES = 32
KEY_BYTES = 32


@dataclass(frozen=True)
class KeyPair:
    """Signing identity: opaque verification key plus signing key."""

    public: bytes
    secret: bytes


@dataclass(frozen=True)
class SessionKey:
    """Symmetric AEAD key shared with an authenticated remote."""

    key: bytes
    peer: bytes


def keygen(seed: bytes) -> KeyPair:
    """Derive a signing key pair deterministically from 32 bytes of entropy."""
    if len(seed) != SEED_BYTES:
        raise ValueError("keygen seed must be exactly 32 bytes")
    sk = ed25519.Ed25519PrivateKey.from_private_bytes(seed)
    pub = sk.public_key().public_bytes_raw()
    return KeyPair(public=pub, secret=seed)


def derive_seed(seed: bytes, *labels: str | int) -> bytes:
    """Derive a sub-seed for auxiliary keys (per-deposit keys, ephemerals)."""
    h = hashlib.sha256(seed)
    for label in labels:
        h.update(encoding.encode(label))
    return h.digest()


def sign(secret: bytes, message: bytes) -> bytes:
    sk = ed25519.Ed25519PrivateKey.from_private_bytes(secret)
    return sk.sign(message)


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    """True iff signature is valid; never raises."""
    try:
        pk = ed25519.Ed25519PublicKey.from_public_bytes(public)
        pk.verify(signature, message)
        return True
    except Exception:
        return False


def _aead_nonce(associated_data: bytes) -> bytes:
    # AD must be unique per (key, message); the protocol guarantees this by
    # embedding a per-direction sequence number in every AD.
    return hashlib.sha256(b"teepay.nonce" + associated_data).digest()[:12]


def encrypt(key: bytes, plaintext: bytes, associated_data: bytes) -> bytes:
    return ChaCha20Poly1305(key).encrypt(_aead_nonce(associated_data), plaintext, associated_data)


def decrypt(key: bytes, blob: bytes, associated_data: bytes) -> bytes:
    """Raises AuthenticationFailure on wrong key, tampering or wrong AD."""
    try:
        return ChaCha20Poly1305(key).decrypt(_aead_nonce(associated_data), blob, associated_data)
    except (InvalidTag, ValueError) as exc:
        raise AuthenticationFailure("AEAD decryption failed") from exc


# ---------------------------------------------------------------------------
# Authenticated key exchange
# ---------------------------------------------------------------------------
#
# Two-message signed Diffie-Hellman.  Each side signs the transcript with its
# long-term identity key, binding its ephemeral share and the intended peer,
# so a man in the middle who substitutes either public key makes verification
# fail.  Fresh nonces and ephemerals make session keys unique per exchange.


@dataclass(frozen=True)
class ExchangeOffer:
    """Initiator-side state kept between the offer and the answer."""

    my_public: bytes
    remote_public: bytes
    eph_secret: bytes
    nonce: bytes
    message: tuple


def _eph_keys(seed: bytes) -> tuple[bytes, bytes]:
    sk = x25519.X25519PrivateKey.from_private_bytes(seed)
    return seed, sk.public_key().public_bytes_raw()


def _dh(eph_secret: bytes, peer_eph_public: bytes) -> bytes:
    sk = x25519.X25519PrivateKey.from_private_bytes(eph_secret)
    return sk.exchange(x25519.X25519PublicKey.from_public_bytes(peer_eph_public))


def _session_key(shared: bytes, transcript: bytes) -> bytes:
    return hashlib.sha256(b"teepay.session" + shared + transcript).digest()


def _offer_transcript(my_pub, eph_pub, nonce, remote_pub) -> bytes:
    return encoding.encode(("ake1", my_pub, eph_pub, nonce, remote_pub))


def _answer_transcript(my_pub, eph_pub, nonce, offer_msg) -> bytes:
    return encoding.encode(("ake2", my_pub, eph_pub, nonce, offer_msg))


def initiate_exchange(
    my: KeyPair | bytes,
    remote_public: bytes,
    entropy: bytes,
    sign_fn=None,
) -> ExchangeOffer:
    """Build the first exchange message, addressed to remote_public.

    sign_fn lets a caller substitute its own transcript signer (enclaves sign
    program-bound payloads); it must pair with the verify_fn used by the peer.
    """
    my_public, signer = _signer_for(my, sign_fn)
    eph_secret, eph_public = _eph_keys(derive_seed(entropy, "ake-eph"))
    nonce = derive_seed(entropy, "ake-nonce")[:16]
    sig = signer(_offer_transcript(my_public, eph_public, nonce, remote_public))
    message = ("ake1", my_public, eph_public, nonce, sig)
    return ExchangeOffer(my_public, remote_public, eph_secret, nonce, message)


def _signer_for(my: KeyPair | bytes, sign_fn):
    if isinstance(my, KeyPair):
        return my.public, (sign_fn or (lambda payload: sign(my.secret, payload)))
    if sign_fn is None:
        raise ValueError("sign_fn required when only a public key is given")
    return my, sign_fn


def respond_exchange(
    my: KeyPair | bytes,
    offer_message: tuple,
    entropy: bytes,
    sign_fn=None,
    verify_fn=None,
) -> tuple[SessionKey, tuple]:
    """Answer an offer; returns the responder's session key and reply message.

    Raises AuthenticationFailure if the offer was not addressed to us or its
    signature does not verify under the claimed initiator key.
    """
    my_public, signer = _signer_for(my, sign_fn)
    kind, peer_public, peer_eph, peer_nonce, peer_sig = offer_message
    if kind != "ake1":
        raise AuthenticationFailure("not a key exchange offer")
    checker = verify_fn or verify
    transcript1 = _offer_transcript(peer_public, peer_eph, peer_nonce, my_public)
    if not checker(peer_public, transcript1, peer_sig):
        raise AuthenticationFailure("exchange offer signature invalid")
    eph_secret, eph_public = _eph_keys(derive_seed(entropy, "ake-eph"))
    nonce = derive_seed(entropy, "ake-nonce")[:16]
    transcript2 = _answer_transcript(my_public, eph_public, nonce, offer_message)
    sig = signer(transcript2)
    key = _session_key(_dh(eph_secret, peer_eph), transcript2)
    message = ("ake2", my_public, eph_public, nonce, sig)
    return SessionKey(key=key, peer=peer_public), message


def complete_exchange(offer: ExchangeOffer, answer_message: tuple, verify_fn=None) -> SessionKey:
    """Finish the exchange at the initiator.

    Raises AuthenticationFailure unless the answer is signed by exactly the
    remote identity the offer was addressed to, over this offer's transcript.
    """
    kind, peer_public, peer_eph, peer_nonce, peer_sig = answer_message
    if kind != "ake2":
        raise AuthenticationFailure("not a key exchange answer")
    if peer_public != offer.remote_public:
        raise AuthenticationFailure("answer from unexpected identity")
    checker = verify_fn or verify
    transcript2 = _answer_transcript(peer_public, peer_eph, peer_nonce, offer.message)
    if not checker(peer_public, transcript2, peer_sig):
        raise AuthenticationFailure("exchange answer signature invalid")
    key = _session_key(_dh(offer.eph_secret, peer_eph), transcript2)
    return SessionKey(key=key, peer=peer_public)


def exchange_pair(a: KeyPair, b: KeyPair, entropy_a: bytes, entropy_b: bytes) -> tuple[SessionKey, SessionKey]:
    """Run a full honest exchange between two parties; returns both keys."""
    offer = initiate_exchange(a, b.public, entropy_a)
    key_b, answer = respond_exchange(b, offer.message, entropy_b)
    key_a = complete_exchange(offer, answer)
    return key_a, key_b
