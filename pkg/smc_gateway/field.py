"""
Prime-field arithmetic, fixed-point encoding of sensor readings, and additive
secret sharing.

The production field is GF(2^61 - 1). The modulus travels with every element
so that tests can use tiny fields (p=31, p=5) for exhaustive checks.
"""

import random
import secrets
from dataclasses import dataclass
from typing import Iterable, Iterator, Protocol, Sequence

from pydantic import BaseModel, ConfigDict, model_validator

from .config import MERSENNE_61, Settings
from .errors import DecodeOverflow, EmptyParticipants, EmptyShares, OutOfRange


def _reduce(x: int, modulus: int) -> int:
    if modulus == MERSENNE_61 and 0 <= x < (1 << 122):
        # x mod (2^61 - 1) = (x >> 61) + (x & M61), with a final correction
        r = (x >> 61) + (x & MERSENNE_61)
        return r - MERSENNE_61 if r >= MERSENNE_61 else r
    return x % modulus


@dataclass(frozen=True, slots=True)
class FieldElement:
    """Residue modulo a prime; every constructor reduces."""

    value: int
    modulus: int = MERSENNE_61

    def __post_init__(self):
        object.__setattr__(self, "value", _reduce(int(self.value), self.modulus))

    def __add__(self, other: "FieldElement") -> "FieldElement":
        return fe_add(self, other)

    def __neg__(self) -> "FieldElement":
        return fe_neg(self)

    def __sub__(self, other: "FieldElement") -> "FieldElement":
        return fe_add(self, fe_neg(other))

    def signed(self) -> int:
        """Balanced residue: values above p/2 are negative."""
        return self.value - self.modulus if self.value > self.modulus // 2 else self.value

    def to_wire(self) -> str:
        return str(self.value)

    @classmethod
    def from_wire(cls, text: str, modulus: int = MERSENNE_61) -> "FieldElement":
        if not isinstance(text, str) or not (text.isascii() and text.isdigit()):
            raise ValueError(f"field element must be a decimal string, got {text!r}")
        value = int(text)
        if value >= modulus:
            raise ValueError(f"field element {value} not reduced modulo {modulus}")
        return cls(value, modulus)


def _check_same_field(a: FieldElement, b: FieldElement) -> None:
    if a.modulus != b.modulus:
        raise ValueError(f"field mismatch: {a.modulus} vs {b.modulus}")


def fe_add(a: FieldElement, b: FieldElement) -> FieldElement:
    """(a + b) mod p."""
    _check_same_field(a, b)
    s = a.value + b.value
    if s >= a.modulus:
        s -= a.modulus
    return FieldElement(s, a.modulus)


def fe_neg(a: FieldElement) -> FieldElement:
    """(p - a) mod p."""
    return FieldElement(a.modulus - a.value if a.value else 0, a.modulus)


def fe_sum(elements: Iterable[FieldElement], modulus: int = MERSENNE_61) -> FieldElement:
    total = FieldElement(0, modulus)
    for element in elements:
        total = fe_add(total, element)
    return total


# ============= RANDOMNESS =============

class Randomness(Protocol):
    """Source of uniform integers; injected wherever shares are drawn."""

    def below(self, bound: int) -> int:
        ...


class SeededRandomness:
    """Deterministic randomness for reproducible simulations."""

    def __init__(self, seed: int | str):
        self.seed = seed
        self._rng = random.Random(seed)

    def below(self, bound: int) -> int:
        return self._rng.randrange(bound)

    def fork(self, label: str) -> "SeededRandomness":
        """Independent deterministic stream for a named consumer of randomness."""
        return SeededRandomness(f"{self.seed}:{label}")

    def uniform(self, low: float, high: float) -> float:
        return self._rng.uniform(low, high)

    def token(self, bits: int = 64) -> str:
        return f"{self._rng.getrandbits(bits):0{bits // 4}x}"


class SystemRandomness:
    """Cryptographic randomness for real deployments."""

    def below(self, bound: int) -> int:
        return secrets.randbelow(bound)


class ScriptedRandomness:
    """Replays a fixed sequence of draws; used by exhaustive oracles."""

    def __init__(self, values: Iterable[int]):
        self._values: Iterator[int] = iter(values)

    def below(self, bound: int) -> int:
        try:
            value = next(self._values)
        except StopIteration:
            raise RuntimeError("scripted randomness exhausted") from None
        if not 0 <= value < bound:
            raise ValueError(f"scripted draw {value} outside [0, {bound})")
        return value


# ============= FIXED POINT =============

class FixedPointCodec(BaseModel):
    """Maps reals to field elements as round(x * 2^fraction_bits) mod p."""

    model_config = ConfigDict(frozen=True)

    fraction_bits: int = 16
    half_range: int = 1 << 40
    modulus: int = MERSENNE_61
    max_participants: int = 16

    @model_validator(mode="after")
    def _no_wraparound(self) -> "FixedPointCodec":
        if self.fraction_bits < 0 or self.half_range <= 0:
            raise ValueError("fraction_bits must be >= 0 and half_range positive")
        if 2 * self.half_range * (1 << self.fraction_bits) >= self.modulus:
            raise ValueError(
                f"2 * half_range * 2^fraction_bits must stay below the modulus {self.modulus}")
        return self

    @classmethod
    def from_settings(cls, settings: Settings) -> "FixedPointCodec":
        return cls(fraction_bits=settings.fraction_bits, half_range=settings.half_range,
                   modulus=settings.modulus, max_participants=settings.max_participants)

    @property
    def scale(self) -> int:
        return 1 << self.fraction_bits

    def element(self, value: int) -> FieldElement:
        return FieldElement(value, self.modulus)


def encode_fixed(x: float, codec: FixedPointCodec) -> FieldElement:
    if abs(x) > codec.half_range:
        raise OutOfRange(x, codec.half_range)
    return FieldElement(round(x * codec.scale), codec.modulus)


def decode_fixed(a: FieldElement, codec: FixedPointCodec) -> float:
    signed = a.signed()
    bound = codec.half_range * codec.scale * codec.max_participants
    if abs(signed) > bound:
        raise DecodeOverflow(abs(signed), bound)
    return signed / codec.scale


# ============= SHARING =============

@dataclass(frozen=True)
class ShareVector:
    """Ordered (party_id, share) pairs whose values sum to the secret."""

    shares: tuple[tuple[str, FieldElement], ...]

    def __post_init__(self):
        parties = [party for party, _ in self.shares]
        if len(set(parties)) != len(parties):
            raise ValueError(f"duplicate party ids in {parties}")

    def as_dict(self) -> dict[str, FieldElement]:
        return dict(self.shares)

    def parties(self) -> list[str]:
        return [party for party, _ in self.shares]

    def __len__(self) -> int:
        return len(self.shares)


def share_additive(secret: FieldElement, party_ids: Sequence[str], rng: Randomness) -> ShareVector:
    """Split a secret into |party_ids| uniformly random summands."""
    if not party_ids:
        raise EmptyParticipants("cannot share among zero parties")
    if len(set(party_ids)) != len(party_ids):
        raise ValueError(f"duplicate party ids in {list(party_ids)}")
    p = secret.modulus
    drawn = [FieldElement(rng.below(p), p) for _ in party_ids[:-1]]
    last = fe_add(secret, fe_neg(fe_sum(drawn, p)))
    return ShareVector(tuple(zip(party_ids, drawn + [last])))


def reconstruct_additive(shares: ShareVector) -> FieldElement:
    if not len(shares):
        raise EmptyShares("nothing to reconstruct")
    modulus = shares.shares[0][1].modulus
    return fe_sum((share for _, share in shares.shares), modulus)
