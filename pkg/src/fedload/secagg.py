"""Dropout-tolerant secure aggregation over a prime field.

Clients quantize their clipped updates to fixed point, add pairwise
cancelling masks plus a personal mask, and the server learns only the field
sum. Every mask seed is Shamir t-out-of-n shared so the protocol survives
dropouts: the server reconstructs the *pairwise* seeds of dropped clients
and the *self* seeds of surviving clients, never both kinds for one client.

Mask streams come from the SHAKE-256 extendable-output function keyed per
(pair, round), standing in for a Diffie-Hellman key agreement; determinism
per seed is the contract. The default field is the Mersenne prime 2^61-1,
leaving headroom for sums of 16-bit fixed-point coordinates across more
than a thousand clients.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .net.params import ParamVector
from .seeding import derive_seed, rng_for

PRIME = 2**61 - 1


class SecAggError(ValueError):
    pass


class ThresholdError(SecAggError):
    """Fewer shares than the reconstruction threshold."""


class AbortError(SecAggError):
    """Too many dropouts for the round to complete."""


class ProtocolViolationError(SecAggError):
    """A request that would reveal both seed kinds for one participant."""


class QuantizationError(SecAggError):
    pass


@dataclass(frozen=True)
class Share:
    """One Shamir share: the polynomial evaluated at x (1-based index)."""

    x: int
    y: int

    def __post_init__(self):
        if self.x == 0:
            raise SecAggError("share index 0 would leak the secret")


def share_secret(secret: int, n: int, t: int, seed: int, prime: int = PRIME) -> list[Share]:
    """Split `secret` into n shares with reconstruction threshold t.

    A seeded degree-(t-1) polynomial with constant term `secret` is evaluated
    at x = 1..n.
    """
    if not 1 <= t <= n:
        raise SecAggError(f"need 1 <= t <= n, got t={t}, n={n}")
    if n >= prime:
        raise SecAggError(f"n={n} must be smaller than the field size {prime}")
    if not 0 <= secret < prime:
        raise SecAggError("secret must be a field element")
    rng = rng_for(seed, "shamir")
    coeffs = [secret] + [int(rng.integers(0, prime)) for _ in range(t - 1)]
    shares = []
    for x in range(1, n + 1):
        y = 0
        for c in reversed(coeffs):  # Horner evaluation in the field
            y = (y * x + c) % prime
        shares.append(Share(x=x, y=y))
    return shares


def reconstruct_secret(shares, t: int, prime: int = PRIME) -> int:
    """Lagrange-interpolate the polynomial at x=0 from at least t shares."""
    shares = list(shares)
    if len(shares) < t:
        raise ThresholdError(f"got {len(shares)} shares, threshold is {t}")
    xs = [s.x for s in shares]
    if len(set(xs)) != len(xs):
        raise SecAggError("duplicate share indices")
    secret = 0
    for j, sj in enumerate(shares):
        num, den = 1, 1
        for m, sm in enumerate(shares):
            if m != j:
                num = (num * (-sm.x)) % prime
                den = (den * (sj.x - sm.x)) % prime
        secret = (secret + sj.y * num * pow(den, prime - 2, prime)) % prime
    return secret


@dataclass(frozen=True)
class QuantizationSpec:
    """Fixed-point encoding of update coordinates into the field.

    Coordinates in [-clip_range, clip_range] map affinely to non-negative
    integers with step 2^-bits; the field must hold the sum across
    `max_participants` clients without wrapping.
    """

    clip_range: float = 1.0
    bits: int = 16
    max_participants: int = 1024
    prime: int = PRIME

    def __post_init__(self):
        if self.clip_range <= 0 or self.bits < 1 or self.max_participants < 1:
            raise QuantizationError("invalid quantization spec")
        if 2.0 * self.clip_range * 2.0**self.bits * self.max_participants >= self.prime:
            raise QuantizationError("field too small for the requested precision and headroom")

    @property
    def scale(self) -> float:
        return float(2**self.bits)


def quantize(update, spec: QuantizationSpec) -> np.ndarray:
    """Map float coordinates to field elements: round((v + B) * 2^bits)."""
    v = update.values if isinstance(update, ParamVector) else np.asarray(update, dtype=float)
    if not np.isfinite(v).all():
        raise QuantizationError("non-finite coordinate")
    if np.any(np.abs(v) > spec.clip_range):
        worst = float(np.abs(v).max())
        raise QuantizationError(f"coordinate magnitude {worst} exceeds clip_range {spec.clip_range}")
    codes = np.rint((v + spec.clip_range) * spec.scale).astype(np.uint64)
    return codes


def dequantize(codes: np.ndarray, spec: QuantizationSpec, n_participants: int) -> np.ndarray:
    """Invert `quantize` on a field *sum* of n participants' updates."""
    if n_participants < 1:
        raise QuantizationError("n_participants must be >= 1")
    return codes.astype(np.float64) / spec.scale - n_participants * spec.clip_range


def _field_add(a: np.ndarray, b: np.ndarray, prime: int) -> np.ndarray:
    return (a + b) % np.uint64(prime)


def _field_sub(a: np.ndarray, b: np.ndarray, prime: int) -> np.ndarray:
    return (a + (np.uint64(prime) - b)) % np.uint64(prime)


def prg_field_vector(seed: int, length: int, prime: int = PRIME) -> np.ndarray:
    """Deterministic mask stream: SHAKE-256 keystream reduced into the field."""
    raw = hashlib.shake_256(str(seed).encode()).digest(8 * length)
    return np.frombuffer(raw, dtype="<u8") % np.uint64(prime)


@dataclass
class SecAggSession:
    """One aggregation round's participants, threshold, seeds and transcript.

    Phases advance Share -> Mask -> Aggregate -> Unmask; the transcript
    records each phase with message counts/sizes and any dropout events.
    """

    participant_ids: tuple[str, ...]
    threshold: int
    master_seed: int
    round_index: int = 0
    prime: int = PRIME
    phase: str = field(default="init")
    transcript: list = field(default_factory=list)

    PHASES = ("init", "share", "mask", "aggregate", "unmask")

    def __post_init__(self):
        self.participant_ids = tuple(sorted(self.participant_ids))
        n = len(self.participant_ids)
        if n < 2:
            raise SecAggError("secure aggregation needs at least two participants")
        if not 1 <= self.threshold <= n:
            raise SecAggError(f"threshold {self.threshold} out of range for {n} participants")
        self._revealed: dict[str, str] = {}

    def _advance(self, phase: str, **info):
        if self.PHASES.index(phase) <= self.PHASES.index(self.phase):
            raise SecAggError(f"phase {phase!r} cannot follow {self.phase!r}")
        self.phase = phase
        self.transcript.append({"phase": phase, **info})

    def pair_seed(self, a: str, b: str) -> int:
        lo, hi = sorted((a, b))
        return derive_seed(self.master_seed, "secagg-pair", self.round_index, lo, hi) % self.prime

    def self_seed(self, pid: str) -> int:
        return derive_seed(self.master_seed, "secagg-self", self.round_index, pid) % self.prime

    def _mark_reveal(self, pid: str, kind: str):
        prev = self._revealed.get(pid)
        if prev is not None and prev != kind:
            raise ProtocolViolationError(
                f"both seed kinds requested for participant {pid!r} ({prev} then {kind})"
            )
        self._revealed[pid] = kind


def default_threshold(n: int) -> int:
    """Two-thirds threshold: tolerates up to floor(n/3) dropouts."""
    return max(1, -(-2 * n // 3))


def mask_update(session: SecAggSession, pid: str, codes: np.ndarray) -> np.ndarray:
    """Client-side masking: pairwise masks signed by id order, plus a self mask."""
    if pid not in session.participant_ids:
        raise SecAggError(f"unknown participant {pid!r}")
    prime = session.prime
    out = codes.astype(np.uint64) % np.uint64(prime)
    for other in session.participant_ids:
        if other == pid:
            continue
        mask = prg_field_vector(session.pair_seed(pid, other), codes.size, prime)
        out = _field_add(out, mask, prime) if pid < other else _field_sub(out, mask, prime)
    self_mask = prg_field_vector(session.self_seed(pid), codes.size, prime)
    return _field_add(out, self_mask, prime)


def run_secagg_round(
    session: SecAggSession,
    updates: dict[str, np.ndarray],
    dropouts: set[str] = frozenset(),
) -> np.ndarray:
    """Execute one full round; returns the field sum of the survivors' updates.

    `updates` maps every participant id to its quantized vector; ids in
    `dropouts` never deliver a masked vector and have their pairwise seeds
    reconstructed instead.
    """
    ids = session.participant_ids
    dropouts = set(dropouts)
    if not dropouts <= set(ids):
        raise SecAggError("dropouts must be a subset of the participants")
    survivors = [p for p in ids if p not in dropouts]
    n, t = len(ids), session.threshold
    if len(survivors) < t:
        raise AbortError(f"{len(survivors)} survivors below threshold {t}")
    missing = [p for p in survivors if p not in updates]
    if missing:
        raise SecAggError(f"missing updates for {missing}")
    length = next(iter(updates.values())).size

    # Share phase: every seed is split t-of-n; survivors' share indices are
    # the ones available for reconstruction later.
    self_shares = {
        p: share_secret(session.self_seed(p), n, t, derive_seed(session.master_seed, "sh-self", session.round_index, p), session.prime)
        for p in ids
    }
    pair_shares = {}
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            pair_shares[(a, b)] = share_secret(
                session.pair_seed(a, b), n, t,
                derive_seed(session.master_seed, "sh-pair", session.round_index, a, b),
                session.prime,
            )
    n_secrets = len(self_shares) + len(pair_shares)
    session._advance("share", secrets=n_secrets, messages=n_secrets * n, bytes=8 * n_secrets * n)

    masked = {p: mask_update(session, p, updates[p]) for p in survivors}
    session._advance("mask", messages=len(masked), bytes=8 * length * len(masked))

    agg = np.zeros(length, dtype=np.uint64)
    for p in survivors:
        agg = _field_add(agg, masked[p], session.prime)
    session._advance("aggregate", summed=len(masked))
    if dropouts:
        session.transcript.append({"phase": "aggregate", "dropouts": sorted(dropouts)})

    # Unmask phase. Survivor share indices: participant at position k holds x=k+1.
    survivor_x = {idx + 1 for idx, p in enumerate(ids) if p in survivors}
    reveals = 0

    def available(shares):
        picked = [s for s in shares if s.x in survivor_x][:t]
        return picked

    for p in survivors:
        session._mark_reveal(p, "self")
        secret = reconstruct_secret(available(self_shares[p]), t, session.prime)
        mask = prg_field_vector(secret, length, session.prime)
        agg = _field_sub(agg, mask, session.prime)
        reveals += 1
    for d in sorted(dropouts):
        session._mark_reveal(d, "pair")
        for s in survivors:
            lo, hi = sorted((d, s))
            secret = reconstruct_secret(available(pair_shares[(lo, hi)]), t, session.prime)
            mask = prg_field_vector(secret, length, session.prime)
            # survivor s applied sign(s, d); remove exactly that term
            if s < d:
                agg = _field_sub(agg, mask, session.prime)
            else:
                agg = _field_add(agg, mask, session.prime)
            reveals += 1
    session._advance("unmask", reconstructions=reveals)
    return agg


@dataclass(frozen=True)
class SecAggConfig:
    """Federation-facing knobs for the secure aggregation layer."""

    threshold: int | None = None  # None -> ceil(2n/3)
    bits: int = 16
    clip_range: float = 1.0
    prime: int = PRIME

    def quantization(self, n_participants: int) -> QuantizationSpec:
        return QuantizationSpec(
            clip_range=self.clip_range,
            bits=self.bits,
            max_participants=n_participants,
            prime=self.prime,
        )

    def threshold_for(self, n: int) -> int:
        return self.threshold if self.threshold is not None else default_threshold(n)
