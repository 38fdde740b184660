"""Stochastic popularity processes and request generation.

Per-user content popularity is a probability mass function over a fixed
library of ``N`` contents.  Each user draws its instantaneous popularity
from a rank-based power law whose skew parameter walks a finite Markov
chain, and issues at most one request per time slot with probability
``arrival_rate``.  The server-side (global) popularity is the
arrival-rate-weighted mixture of the user-side (local) popularities;
``global_mixture`` computes it in closed form and ``monte_carlo_global``
estimates it by counting simulated requests, which is the independent
check of the mixture formula.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

PROB_TOL = 1e-9

DISTRIBUTION_KINDS = ("Zipf", "Poisson", "nBernoulli", "Gaussian")


@dataclass(frozen=True, eq=False)
class PopularityVector:
    """Probability mass per content, indexed by 1-based content id."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("popularity must be a nonempty 1-D vector")
        if np.any(p < 0.0):
            raise ValueError("popularity entries must be nonnegative")
        total = float(p.sum())
        if abs(total - 1.0) > PROB_TOL:
            raise ValueError(f"popularity must sum to 1, got {total!r}")
        object.__setattr__(self, "probs", p)

    def __len__(self) -> int:
        return self.probs.size

    def as_array(self) -> np.ndarray:
        return self.probs


@dataclass(frozen=True)
class DistributionSpec:
    """One of the supported local-popularity families with its parameters.

    kind/params pairs: Zipf(alpha), Poisson(l), nBernoulli(p),
    Gaussian(mu, sigma).
    """

    kind: str
    params: tuple[float, ...]

    def __post_init__(self):
        if self.kind not in DISTRIBUTION_KINDS:
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        params = tuple(float(v) for v in self.params)
        object.__setattr__(self, "params", params)
        if self.kind == "Zipf":
            if len(params) != 1 or params[0] < 0.0:
                raise ValueError("Zipf requires alpha >= 0")
        elif self.kind == "Poisson":
            if len(params) != 1 or params[0] <= 0.0:
                raise ValueError("Poisson requires l > 0")
        elif self.kind == "nBernoulli":
            if len(params) != 1 or not 0.0 <= params[0] <= 1.0:
                raise ValueError("nBernoulli requires 0 <= p <= 1")
        else:
            if len(params) != 2 or params[1] <= 0.0:
                raise ValueError("Gaussian requires (mu, sigma) with sigma > 0")


@dataclass(eq=False)
class MarkovChain:
    """Finite chain over skew-parameter states with a row-stochastic matrix."""

    states: np.ndarray
    transition: np.ndarray
    current: int
    _row_cdfs: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.states = np.ascontiguousarray(self.states, dtype=np.float64)
        self.transition = np.ascontiguousarray(self.transition, dtype=np.float64)
        g = self.states.size
        if g < 1:
            raise ValueError("chain needs at least one state")
        if self.transition.shape != (g, g):
            raise ValueError("transition matrix must be square over the states")
        if np.any(self.transition < 0.0) or np.any(self.transition > 1.0):
            raise ValueError("transition entries must lie in [0, 1]")
        rowsums = self.transition.sum(axis=1)
        if np.any(np.abs(rowsums - 1.0) > PROB_TOL):
            raise ValueError("each transition row must sum to 1")
        if not 0 <= self.current < g:
            raise ValueError("current state index out of range")
        self._row_cdfs = np.cumsum(self.transition, axis=1)

    @property
    def n_states(self) -> int:
        return self.states.size

    def clone(self) -> "MarkovChain":
        return MarkovChain(self.states.copy(), self.transition.copy(), self.current)


@dataclass
class UserProfile:
    """Request behaviour of one user: popularity chain plus arrival rate.

    ``lambda_schedule`` optionally overrides the arrival rate piecewise:
    each (slot, rate) entry takes effect from that slot onward.
    """

    chain: MarkovChain
    arrival_rate: float
    user_id: int
    n_contents: int
    lambda_schedule: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.arrival_rate <= 1.0:
            raise ValueError("arrival_rate must lie in [0, 1]")
        if self.n_contents < 1:
            raise ValueError("n_contents must be positive")
        sched = tuple((int(s), float(r)) for s, r in self.lambda_schedule)
        if any(not 0.0 <= r <= 1.0 for _, r in sched):
            raise ValueError("scheduled rates must lie in [0, 1]")
        self.lambda_schedule = tuple(sorted(sched))

    def rate_at(self, slot: int) -> float:
        rate = self.arrival_rate
        for start, value in self.lambda_schedule:
            if slot >= start:
                rate = value
        return rate


@dataclass(eq=False)
class RequestTrace:
    """Per-slot request history with the generating ground truth kept aside.

    ``requests[t]`` is the 1-based content id requested at slot t, or None
    when the user stayed silent.  The truth arrays exist for evaluation
    only and are never visible to any model.
    """

    requests: list[Optional[int]]
    truth_alpha: np.ndarray
    truth_popularity: np.ndarray

    def __post_init__(self):
        self.truth_alpha = np.ascontiguousarray(self.truth_alpha, dtype=np.float64)
        self.truth_popularity = np.ascontiguousarray(
            self.truth_popularity, dtype=np.float64
        )
        n_slots = len(self.requests)
        if self.truth_popularity.shape[0] != n_slots or self.truth_alpha.shape[0] != n_slots:
            raise ValueError("truth arrays must cover every slot")
        n = self.truth_popularity.shape[1]
        for r in self.requests:
            if r is not None and not 1 <= r <= n:
                raise ValueError(f"request id {r} outside 1..{n}")

    @property
    def n_slots(self) -> int:
        return len(self.requests)

    @property
    def n_contents(self) -> int:
        return self.truth_popularity.shape[1]


@dataclass(frozen=True)
class FixedProfile:
    """A user whose popularity is one fixed distribution (no chain).

    Used by the mixture validation, where parameters are held constant
    for the whole run.
    """

    spec: DistributionSpec
    arrival_rate: float

    def __post_init__(self):
        if not 0.0 <= self.arrival_rate <= 1.0:
            raise ValueError("arrival_rate must lie in [0, 1]")


def zipf_pmf(alpha: float, n_contents: int) -> PopularityVector:
    """Rank-based power-law PMF: P(n) = 1 / (n^alpha * sum_l l^-alpha)."""
    if alpha < 0.0:
        raise ValueError("alpha must be nonnegative")
    if n_contents < 1:
        raise ValueError("n_contents must be positive")
    ranks = np.arange(1, n_contents + 1, dtype=np.float64)
    weights = ranks ** (-float(alpha))
    return PopularityVector(weights / weights.sum())


def distribution_pmf(spec: DistributionSpec, n_contents: int) -> PopularityVector:
    """PMF of any supported family over contents 1..N.

    Unbounded families are truncated to the library: Poisson mass at
    k = 0..N-1 maps to content k+1 and is renormalized; Gaussian density
    is evaluated at the integer content ids and renormalized.
    nBernoulli(p) is the Binomial(N-1, p) over k = 0..N-1.
    """
    if n_contents < 1:
        raise ValueError("n_contents must be positive")
    if spec.kind == "Zipf":
        return zipf_pmf(spec.params[0], n_contents)
    if spec.kind == "Poisson":
        k = np.arange(n_contents)
        mass = stats.poisson.pmf(k, spec.params[0])
    elif spec.kind == "nBernoulli":
        k = np.arange(n_contents)
        mass = stats.binom.pmf(k, n_contents - 1, spec.params[0])
    else:
        mu, sigma = spec.params
        ids = np.arange(1, n_contents + 1, dtype=np.float64)
        mass = stats.norm.pdf(ids, loc=mu, scale=sigma)
    total = mass.sum()
    if not total > 0.0:
        raise ValueError("distribution has no mass on the content library")
    return PopularityVector(mass / total)


def step_state(chain: MarkovChain, rng: np.random.Generator) -> int:
    """Advance the chain one step and return the new state index."""
    cdf = chain._row_cdfs[chain.current]
    nxt = int(np.searchsorted(cdf, rng.random(), side="right"))
    nxt = min(nxt, chain.n_states - 1)
    chain.current = nxt
    return nxt


def sample_request(
    popularity: PopularityVector, arrival_rate: float, rng: np.random.Generator
) -> Optional[int]:
    """Draw one slot's request: None with prob 1-lambda, else content n
    with prob lambda * P(n)."""
    if not 0.0 <= arrival_rate <= 1.0:
        raise ValueError("arrival_rate must lie in [0, 1]")
    if rng.random() >= arrival_rate:
        return None
    cdf = np.cumsum(popularity.probs)
    idx = int(np.searchsorted(cdf, rng.random(), side="right"))
    return min(idx, len(popularity) - 1) + 1


def generate_trace(
    profile: UserProfile, n_slots: int, rng: np.random.Generator
) -> RequestTrace:
    """Simulate n_slots of one user: step the chain, record the truth,
    then sample the slot's request.  Deterministic given the rng state;
    the profile's chain is advanced in place so traces can be continued.
    """
    if n_slots < 1:
        raise ValueError("n_slots must be positive")
    chain = profile.chain
    n = profile.n_contents
    state_pmfs = [zipf_pmf(a, n) for a in chain.states]
    requests: list[Optional[int]] = []
    alphas = np.empty(n_slots)
    truth = np.empty((n_slots, n))
    for t in range(n_slots):
        idx = step_state(chain, rng)
        alphas[t] = chain.states[idx]
        truth[t] = state_pmfs[idx].probs
        requests.append(sample_request(state_pmfs[idx], profile.rate_at(t), rng))
    return RequestTrace(requests, alphas, truth)


def global_mixture(
    locals_: Sequence[PopularityVector], lambdas: Sequence[float]
) -> PopularityVector:
    """Arrival-rate-weighted mixture of local popularities,
    sum_i lambda_i P_i / sum_i lambda_i."""
    if len(locals_) != len(lambdas) or not locals_:
        raise ValueError("need equally many popularity vectors and rates")
    lam = np.asarray(lambdas, dtype=np.float64)
    if np.any(lam < 0.0):
        raise ValueError("arrival rates must be nonnegative")
    total = lam.sum()
    if total <= 0.0:
        raise ValueError("mixture undefined: all arrival rates are zero")
    stacked = np.stack([p.probs for p in locals_])
    return PopularityVector((lam @ stacked) / total)


def monte_carlo_global(
    users: Sequence[FixedProfile],
    n_contents: int,
    n_slots: int,
    rng: np.random.Generator,
) -> PopularityVector:
    """Empirical global popularity: the normalized frequency of each content
    among all non-empty requests simulated over n_slots for every user."""
    if n_slots < 1:
        raise ValueError("n_slots must be positive")
    if not users:
        raise ValueError("need at least one user")
    counts = np.zeros(n_contents, dtype=np.int64)
    for user in users:
        pmf = distribution_pmf(user.spec, n_contents)
        active = rng.random(n_slots) < user.arrival_rate
        m = int(active.sum())
        if m == 0:
            continue
        cdf = np.cumsum(pmf.probs)
        ids = np.searchsorted(cdf, rng.random(m), side="right")
        np.minimum(ids, n_contents - 1, out=ids)
        counts += np.bincount(ids, minlength=n_contents)
    total = counts.sum()
    if total == 0:
        raise ValueError("no requests occurred; estimate undefined")
    return PopularityVector(counts / total)


def random_profile(
    user_id: int,
    n_contents: int,
    rng: np.random.Generator,
    g_range: tuple[int, int] = (2, 6),
    alpha_range: tuple[float, float] = (0.0, 2.5),
    lambda_range: tuple[float, float] = (0.5, 1.0),
) -> UserProfile:
    """Draw a user profile: state count uniform in g_range, state values
    uniform in alpha_range, flat-Dirichlet transition rows, arrival rate
    uniform in lambda_range."""
    g = int(rng.integers(g_range[0], g_range[1] + 1))
    states = rng.uniform(alpha_range[0], alpha_range[1], size=g)
    transition = rng.dirichlet(np.ones(g), size=g)
    current = int(rng.integers(0, g))
    rate = float(rng.uniform(lambda_range[0], lambda_range[1]))
    chain = MarkovChain(states, transition, current)
    return UserProfile(chain, rate, user_id, n_contents)


# ---------------------------------------------------------------------------
# Persistence: one trace CSV per user plus a truth CSV, key/value profiles.
# ---------------------------------------------------------------------------

def save_trace(trace_path, truth_path, trace: RequestTrace) -> None:
    lines = ["slot,request,alpha"]
    for t, req in enumerate(trace.requests):
        rid = "" if req is None else str(req)
        lines.append(f"{t},{rid},{float(trace.truth_alpha[t])!r}")
    Path(trace_path).write_text("\n".join(lines) + "\n")
    n = trace.n_contents
    header = ",".join(f"p{j}" for j in range(1, n + 1))
    rows = [header]
    for t in range(trace.n_slots):
        rows.append(",".join(repr(float(v)) for v in trace.truth_popularity[t]))
    Path(truth_path).write_text("\n".join(rows) + "\n")


def load_trace(trace_path, truth_path) -> RequestTrace:
    lines = Path(trace_path).read_text().splitlines()
    if lines[0] != "slot,request,alpha":
        raise ValueError(f"unrecognized trace header in {trace_path}")
    requests: list[Optional[int]] = []
    alphas = []
    for line in lines[1:]:
        _, rid, alpha = line.split(",")
        requests.append(int(rid) if rid else None)
        alphas.append(float(alpha))
    truth_lines = Path(truth_path).read_text().splitlines()
    truth = np.array(
        [[float(v) for v in row.split(",")] for row in truth_lines[1:]]
    )
    return RequestTrace(requests, np.array(alphas), truth)


def save_profile(path, profile: UserProfile, seed: int) -> None:
    chain = profile.chain
    lines = [
        f"user_id = {profile.user_id}",
        f"seed = {seed}",
        f"n_contents = {profile.n_contents}",
        f"arrival_rate = {float(profile.arrival_rate)!r}",
        f"initial_state = {chain.current}",
        "states = " + ",".join(repr(float(v)) for v in chain.states),
    ]
    for gi in range(chain.n_states):
        lines.append(
            f"transition_{gi} = " + ",".join(repr(float(v)) for v in chain.transition[gi])
        )
    if profile.lambda_schedule:
        sched = ";".join(f"{s}:{r!r}" for s, r in profile.lambda_schedule)
        lines.append(f"lambda_schedule = {sched}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_profile(path) -> tuple[UserProfile, int]:
    pairs: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(" = ")
        pairs[key.strip()] = value.strip()
    states = np.array([float(v) for v in pairs["states"].split(",")])
    transition = np.array(
        [
            [float(v) for v in pairs[f"transition_{gi}"].split(",")]
            for gi in range(states.size)
        ]
    )
    chain = MarkovChain(states, transition, int(pairs["initial_state"]))
    schedule: tuple[tuple[int, float], ...] = ()
    if "lambda_schedule" in pairs and pairs["lambda_schedule"]:
        schedule = tuple(
            (int(part.split(":")[0]), float(part.split(":")[1]))
            for part in pairs["lambda_schedule"].split(";")
        )
    profile = UserProfile(
        chain,
        float(pairs["arrival_rate"]),
        int(pairs["user_id"]),
        int(pairs["n_contents"]),
        schedule,
    )
    return profile, int(pairs["seed"])
