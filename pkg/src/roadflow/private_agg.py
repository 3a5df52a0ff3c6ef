"""Encrypted edge-occupancy aggregation for private schedule coordination.

Paillier encryption (additively homomorphic) lets a ring of vehicles
accumulate per-(edge, step) occupancy counts without revealing any
individual walk: the querying vehicle sends a matrix of encrypted zeros
around the ring, every other vehicle multiplies in a fresh encryption of
its 0/1 occupancy indicator, and only the querying vehicle decrypts the
returned totals.  The decrypted counts feed the exact same scoring code
as the plaintext scheduler, so the private drive produces bit-identical
learning trajectories.

Key sizes of 512 bits keep the tests fast and are NOT a production
choice; use 2048 bits or more for anything real.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (DimensionMismatch, KeyMismatch, PlaintextOutOfRange,
                     PrimeGenerationFailed)
from .scheduler import (FreightGraph, ScheduleState, VehicleAssignment,
                        coordination_cost, default_horizon, gibbs_row,
                        occupancy_with_vehicle, platoon_term, _sample_index)

try:
    from gmpy2 import mpz, powmod

    def _powmod(base, exp, mod):
        return int(powmod(base, exp, mod))
except ImportError:  # pragma: no cover - exercised only without gmpy2
    mpz = int

    def _powmod(base, exp, mod):
        return pow(base, exp, mod)

#: candidate primes tried before giving up
PRIME_ATTEMPTS = 20_000
#: Miller-Rabin witness rounds
MR_ROUNDS = 40

_SMALL_PRIMES = (3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53,
                 59, 61, 67, 71, 73, 79, 83, 89, 97)


def _rand_below(rng: np.random.Generator, bound: int) -> int:
    """Uniform integer in [0, bound) from generator bytes."""
    nbytes = (bound.bit_length() + 7) // 8 + 1
    while True:
        r = int.from_bytes(rng.bytes(nbytes), "big")
        if r < (256 ** nbytes // bound) * bound:
            return r % bound


def _is_probable_prime(n: int, rng: np.random.Generator) -> bool:
    if n < 2:
        return False
    for p in _SMALL_PRIMES:
        if n % p == 0:
            return n == p
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for _ in range(MR_ROUNDS):
        a = 2 + _rand_below(rng, n - 3)
        x = _powmod(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = _powmod(x, 2, n)
            if x == n - 1:
                break
        else:
            return False
    return True


def _random_prime(bits: int, rng: np.random.Generator) -> int:
    for _ in range(PRIME_ATTEMPTS):
        candidate = int.from_bytes(rng.bytes((bits + 7) // 8), "big")
        candidate |= (1 << (bits - 1)) | (1 << (bits - 2)) | 1
        candidate &= (1 << bits) - 1
        if _is_probable_prime(candidate, rng):
            return candidate
    raise PrimeGenerationFailed(f"no {bits}-bit prime in {PRIME_ATTEMPTS} attempts")


@dataclass(frozen=True)
class PublicKey:
    n: int
    bits: int

    @property
    def n_squared(self) -> int:
        return self.n * self.n

    @property
    def generator(self) -> int:
        # n + 1 makes g^m = 1 + m n (mod n^2), avoiding one modexp
        return self.n + 1


@dataclass(frozen=True)
class PrivateKey:
    lam: int
    mu: int
    n: int


@dataclass(frozen=True)
class Keypair:
    public: PublicKey
    secret: PrivateKey


def keygen(bits: int, rng: np.random.Generator) -> Keypair:
    """Paillier keypair with an n of roughly ``bits`` bits.

    Deterministic for a seeded generator.  Primes come from seeded
    Miller-Rabin search; the n+1 generator fixes mu = lam^-1 mod n.
    """
    if bits < 256:
        raise ValueError("modulus below 256 bits is meaningless even for tests")
    half = bits // 2
    for _ in range(PRIME_ATTEMPTS):
        p = _random_prime(half, rng)
        q = _random_prime(bits - half, rng)
        if p != q:
            break
    else:  # pragma: no cover
        raise PrimeGenerationFailed("could not find two distinct primes")
    n = p * q
    lam = math.lcm(p - 1, q - 1)
    mu = pow(lam, -1, n)
    return Keypair(PublicKey(n, bits), PrivateKey(lam, mu, n))


@dataclass(frozen=True)
class Ciphertext:
    value: int
    n: int

    def digest(self) -> bytes:
        size = (self.n.bit_length() * 2 + 7) // 8
        return hashlib.sha256(self.value.to_bytes(size, "big")).digest()


def encrypt(m: int, public: PublicKey, rng: np.random.Generator) -> Ciphertext:
    """Probabilistic encryption; fresh randomness every call."""
    m = int(m)
    if not 0 <= m < public.n:
        raise PlaintextOutOfRange(f"plaintext must lie in [0, {public.n})")
    n, n2 = public.n, public.n_squared
    while True:
        r = 1 + _rand_below(rng, n - 1)
        if math.gcd(r, n) == 1:
            break
    value = ((1 + m * n) % n2) * _powmod(r, n, n2) % n2
    return Ciphertext(value, n)


def decrypt(c: Ciphertext, keypair: Keypair) -> int:
    secret = keypair.secret
    if c.n != secret.n:
        raise KeyMismatch("ciphertext was produced under a different modulus")
    n = secret.n
    x = _powmod(c.value, secret.lam, n * n)
    return (x - 1) // n * secret.mu % n


def homomorphic_add(c1: Ciphertext, c2: Ciphertext,
                    public: PublicKey) -> Ciphertext:
    if c1.n != c2.n or c1.n != public.n:
        raise KeyMismatch("ciphertexts are not under the given public key")
    return Ciphertext(c1.value * c2.value % public.n_squared, c1.n)


class CipherMatrix:
    """|E| x horizon grid of ciphertexts under one public key.

    The edge labelling is positional: row ``k`` is the graph's edge ``k``,
    which every party knows in advance.
    """

    def __init__(self, entries: Sequence[Sequence[Ciphertext]], public: PublicKey):
        rows = [tuple(row) for row in entries]
        if not rows or not rows[0]:
            raise DimensionMismatch("empty cipher matrix")
        width = len(rows[0])
        for row in rows:
            if len(row) != width:
                raise DimensionMismatch("ragged cipher matrix")
            for cell in row:
                if cell.n != public.n:
                    raise KeyMismatch("matrix entry under a different modulus")
        self.entries = tuple(rows)
        self.public = public
        self.shape = (len(rows), width)

    @classmethod
    def zeros(cls, shape: tuple[int, int], public: PublicKey,
              rng: np.random.Generator) -> "CipherMatrix":
        rows = [[encrypt(0, public, rng) for _ in range(shape[1])]
                for _ in range(shape[0])]
        return cls(rows, public)

    def add_indicator(self, indicator: np.ndarray,
                      rng: np.random.Generator) -> "CipherMatrix":
        """Fresh encryption of each 0/1 entry multiplied in, every cell."""
        if indicator.shape != self.shape:
            raise DimensionMismatch(
                f"indicator shape {indicator.shape} vs matrix {self.shape}")
        rows = [[homomorphic_add(cell, encrypt(int(flag), self.public, rng),
                                 self.public)
                 for cell, flag in zip(row, irow)]
                for row, irow in zip(self.entries, indicator)]
        return CipherMatrix(rows, self.public)

    def digest(self) -> bytes:
        h = hashlib.sha256()
        for row in self.entries:
            for cell in row:
                h.update(cell.digest())
        return h.digest()


def occupancy_indicator(vehicle: VehicleAssignment, tau: int,
                        n_edges: int, horizon: int) -> np.ndarray:
    """0/1 matrix of the vehicle's delayed walk, truncated to the horizon."""
    grid = np.zeros((n_edges, horizon), dtype=int)
    cols = vehicle.occupied_steps + int(tau)
    keep = (cols >= 0) & (cols < horizon)
    grid[vehicle.occupied_edges[keep], cols[keep]] = 1
    return grid


def chain_aggregate(vehicles: Sequence[tuple[VehicleAssignment, int]],
                    graph: FreightGraph, horizon: int, keypair: Keypair,
                    rng: np.random.Generator,
                    transcript: Optional[list] = None) -> np.ndarray:
    """Ring pass computing counts of vehicles 2..n, decrypted by vehicle 1.

    ``vehicles`` is the ring order; the first entry holds the keypair and
    contributes nothing to the counts.  Every hop re-randomises every
    cell, so consecutive messages look unrelated.  The transcript records
    (hop, sender, receiver, matrix digest) tuples plus one final
    ("decrypt", holder_index) marker; no other party ever sees the secret
    key, which the marker makes checkable.
    """
    if len(vehicles) < 2:
        raise ValueError("the ring needs at least two vehicles")
    shape = (len(graph), int(horizon))
    matrix = CipherMatrix.zeros(shape, keypair.public, rng)
    if transcript is not None:
        transcript.append(("hop", 0, 0, 1, matrix.digest()))
    for hop in range(1, len(vehicles)):
        vehicle, tau = vehicles[hop]
        indicator = occupancy_indicator(vehicle, tau, *shape)
        matrix = matrix.add_indicator(indicator, rng)
        if transcript is not None:
            receiver = (hop + 1) % len(vehicles)
            transcript.append(("hop", hop, hop, receiver, matrix.digest()))
    zeta = np.empty(shape, dtype=int)
    for a, row in enumerate(matrix.entries):
        for b, cell in enumerate(row):
            zeta[a, b] = decrypt(cell, keypair)
    if transcript is not None:
        transcript.append(("decrypt", 0))
    return zeta


def private_g(zeta: np.ndarray, vehicle: VehicleAssignment, tau_prime: int,
              gamma: float, weights: np.ndarray,
              reward: Callable) -> float:
    """Platooning term seen by the querying vehicle at a candidate delay.

    Adds the vehicle's own indicator locally on top of the decrypted
    counts and evaluates through the scheduler's scoring code, so the
    value matches the plaintext path exactly.
    """
    total = occupancy_with_vehicle(vehicle, np.asarray(zeta, dtype=int),
                                   int(tau_prime))
    return platoon_term(np.asarray(weights, dtype=float), total,
                        gamma, reward)


def _ring_order(n: int, first: int) -> list:
    return [(first + k) % n for k in range(n)]


def run_private_learning(state0: ScheduleState, iterations: int,
                         rng_seed: int, *, bits: int = 512,
                         horizon: Optional[int] = None):
    """Log-linear learning where every score comes from the ring protocol.

    The learning stream consumes exactly the draws of the plaintext
    ``run_learning`` (vehicle index, then one uniform per iteration), so
    matched seeds give bit-identical trajectories.  Encryption randomness
    and per-vehicle keypairs come from a separate stream.
    """
    from .scheduler import LearningResult

    if iterations < 1:
        raise ValueError("need at least one iteration")
    rng = np.random.default_rng(rng_seed)
    crypto_rng = np.random.default_rng([rng_seed, 0x5EC2E7])
    state = state0
    n_vehicles = len(state.assignments)
    horizon = default_horizon(state.assignments) if horizon is None else horizon
    keypairs = [keygen(bits, crypto_rng) for _ in range(n_vehicles)]

    trajectory = np.empty((iterations + 1, n_vehicles), dtype=int)
    trajectory[0] = state.tau
    cost_trace = np.empty(iterations + 1)
    cost = state.cost()
    cost_trace[0] = cost
    best_tau = state.tau.copy()
    best_cost = cost
    visits: dict = {}
    tau = state.tau.copy()

    for step in range(1, iterations + 1):
        i = int(rng.integers(n_vehicles))
        u = float(rng.random())
        ring = [(state.assignments[j], int(tau[j]))
                for j in _ring_order(n_vehicles, i)]
        zeta = chain_aggregate(ring, state.graph, horizon, keypairs[i],
                               crypto_rng)
        vehicle = state.assignments[i]
        h_vals = vehicle.delay_costs()
        delays = vehicle.delays()
        scores = np.empty(len(delays))
        for k, tp in enumerate(delays):
            scores[k] = h_vals[k] + private_g(zeta, vehicle, int(tp),
                                              state.gamma,
                                              state.graph.weights,
                                              state.reward)
        k = _sample_index(gibbs_row(scores, state.temperature), u)
        old_k = int(tau[i]) - delays[0]
        cost += float(scores[k] - scores[old_k])
        tau[i] = delays[k]
        trajectory[step] = tau
        cost_trace[step] = cost
        if cost < best_cost - 1e-12:
            exact = coordination_cost(state.graph, state.assignments, tau,
                                      gamma=state.gamma, reward=state.reward,
                                      horizon=horizon)
            if exact < best_cost:
                best_cost = exact
                best_tau = tau.copy()
        key = tuple(int(t) for t in tau)
        visits[key] = visits.get(key, 0) + 1

    return LearningResult(trajectory, cost_trace, visits, best_tau, best_cost)
