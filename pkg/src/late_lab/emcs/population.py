"""Synthetic base population and the design transformations that turn it into simulation populations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import special, stats

from ..dataset import Dataset
from ..errors import InsufficientDonors, NoCompliers
from ..numopt import add_intercept, fit_binary_glm
from .designs import DgpSpec

__all__ = [
    "BASE_COLUMNS",
    "BasePopulation",
    "Population",
    "DesignConfig",
    "synth_base_population",
    "build_population",
    "true_late",
    "matching_without_replacement",
    "heterogeneity_features",
    "choose_m_random",
    "choose_m_selective",
]

BASE_COLUMNS = ("age", "age_first_birth", "black", "other_race", "q1", "q2", "q3")
SHARE_BAND = (0.45, 0.55)


@dataclass(frozen=True)
class BasePopulation:
    """Stand-in for the large survey sample: covariates, treatment, two outcomes and a rare instrument.

    ``x`` holds age/10, age at first birth/10 and five dummies (black, other
    race, quarters of birth 1 to 3). ``weeks`` is weeks worked / 10 (zero
    for non-participants) and ``worked`` the participation indicator.
    """

    x: np.ndarray
    d: np.ndarray
    z: np.ndarray
    weeks: np.ndarray
    worked: np.ndarray
    column_names: tuple = BASE_COLUMNS
    seed: int = 0

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class Population:
    """A simulation population with potential treatments and outcomes.

    ``d1``/``d0`` are the treatment states under z = 1 and z = 0; ``y1``/``y0``
    the outcomes under treatment and non-treatment. Observed data follow
    ``D = d1 Z + d0 (1 - Z)`` and ``Y = y1 D + y0 (1 - D)``.
    """

    x: np.ndarray
    z: np.ndarray
    d1: np.ndarray
    d0: np.ndarray
    y1: np.ndarray
    y0: np.ndarray
    column_names: tuple = BASE_COLUMNS
    provenance: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> np.ndarray:
        return self.d1 * self.z + self.d0 * (1.0 - self.z)

    def outcome_by_instrument(self) -> tuple[np.ndarray, np.ndarray]:
        """``(Y_1, Y_0)``: the outcome each unit shows under z = 1 and z = 0."""
        return (np.where(self.d1 == 1.0, self.y1, self.y0), np.where(self.d0 == 1.0, self.y1, self.y0))

    @property
    def y(self) -> np.ndarray:
        yz1, yz0 = self.outcome_by_instrument()
        return yz1 * self.z + yz0 * (1.0 - self.z)

    @property
    def true_late(self) -> float:
        return true_late(self)

    def sample(self, idx) -> Dataset:
        idx = np.asarray(idx)
        return Dataset(self.y[idx], self.d[idx], self.z[idx], self.x[idx], self.column_names)

    def as_dataset(self) -> Dataset:
        return Dataset(self.y, self.d, self.z, self.x, self.column_names)


@dataclass(frozen=True)
class DesignConfig:
    """Constants of the design transformations."""

    m_random: int = 58
    m_selective: int = 22
    m_discard: int = 3
    selection_amplifier: float = 1.5
    weak_threshold: float = 1.25


# --------------------------------------------------------------------------- base population


def synth_base_population(size: int = 100_000, seed: int = 0) -> BasePopulation:
    """Draw a synthetic base population with moments close to the survey data it replaces.

    Age/10 is a normal(3.0, 0.35) truncated to [2.1, 3.5]; age at first
    birth/10 is centred at 2.0 with sd about 0.29 and rises with age; race
    dummies have means 0.12 and 0.18; quarter of birth is multinomial with
    probabilities (0.24, 0.24, 0.27, 0.25). Treatment (a third child) comes
    from a probit index lowered by a later first birth. Participation in
    work comes from a probit index sharing an error component with the
    treatment index, so treatment is endogenous; weeks worked/10 is zero for
    non-participants and a right-skewed gamma, capped at 5.2, otherwise. The
    instrument is a rare event (probability about 0.0086) that is almost
    unrelated to the covariates and forces treatment.
    """
    if size < 10_000:
        raise ValueError("base population needs at least 10000 rows")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) % (1 << 63), 7001]))
    a, b = (2.1 - 3.0) / 0.35, (3.5 - 3.0) / 0.35
    age = stats.truncnorm.rvs(a, b, loc=3.0, scale=0.35, size=size, random_state=rng)
    afb = 2.0 + 0.25 * (age - age.mean()) + rng.normal(0.0, 0.28, size)
    afb = np.clip(afb, 1.5, age - 0.1)
    race = rng.choice(3, size=size, p=[0.70, 0.12, 0.18])
    black = (race == 1).astype(float)
    other = (race == 2).astype(float)
    quarter = rng.choice(4, size=size, p=[0.24, 0.24, 0.27, 0.25])
    q = [(quarter == j).astype(float) for j in range(3)]
    x = np.column_stack([age, afb, black, other, *q])

    common = rng.normal(size=size)
    e_d = np.sqrt(0.6) * rng.normal(size=size) + np.sqrt(0.4) * common
    idx_d = -0.27 + 0.55 * (age - 3.0) - 1.3 * (afb - 2.0) + 0.35 * black + 0.02 * other + e_d
    d = (idx_d > 0).astype(float)

    idx_z = -2.383 + 0.02 * (age - 3.0) + 0.03 * (afb - 2.0) + 0.03 * black
    z = (rng.random(size) < special.ndtr(idx_z)).astype(float)
    d = np.maximum(d, z)

    e_w = np.sqrt(0.6) * rng.normal(size=size) - np.sqrt(0.4) * common
    idx_w = 0.33 - 0.30 * d + 0.25 * (age - 3.0) + 0.45 * (afb - 2.0) + 0.10 * black - 0.05 * other + e_w
    worked = (idx_w > 0).astype(float)
    scale = 0.92 * np.exp(0.10 * (age - 3.0) - 0.12 * d)
    positive = np.minimum(rng.gamma(4.0, scale), 5.2)
    weeks = np.where(worked == 1.0, np.maximum(positive, 0.01), 0.0)
    arrays = [x, d, z, weeks, worked]
    for arr in arrays:
        arr.setflags(write=False)
    return BasePopulation(x, d, z, weeks, worked, BASE_COLUMNS, int(seed))


# --------------------------------------------------------------------------- matching without replacement


@numba.njit(cache=True)
def _greedy_1d(ref, donor_sorted, donor_index, M):
    """Greedy 1:M nearest-unclaimed matching on a line.

    ``donor_sorted`` holds donor values sorted ascending with ties ordered
    by ascending ``donor_index``. Unclaimed donors form a doubly linked
    list over sorted positions. Candidates are compared by (distance,
    donor index).
    """
    nd = donor_sorted.size
    nxt = np.arange(1, nd + 1)
    prv = np.arange(-1, nd - 1)
    head = 0
    out = np.empty((ref.size, M), dtype=np.int64)
    for r in range(ref.size):
        v = ref[r]
        pos = np.searchsorted(donor_sorted, v)
        # nearest unclaimed at or right of pos
        right = pos
        while right < nd and right != -1 and _claimed(nxt, prv, right, head):
            right += 1
        if right >= nd:
            right = -1
        # nearest unclaimed left of pos
        left = pos - 1
        while left >= 0 and _claimed(nxt, prv, left, head):
            left -= 1
        for m in range(M):
            # left candidate: lowest index among the equal-valued run ending at ``left``
            lc = -1
            if left >= 0:
                lc = left
                p = prv[lc]
                while p >= 0 and donor_sorted[p] == donor_sorted[lc]:
                    lc = p
                    p = prv[p]
            if lc < 0 and right < 0:
                return out, r
            take_left = False
            if right < 0:
                take_left = True
            elif lc >= 0:
                dl = v - donor_sorted[lc]
                dr = donor_sorted[right] - v
                if dl < dr or (dl == dr and donor_index[lc] < donor_index[right]):
                    take_left = True
            pick = lc if take_left else right
            out[r, m] = pick
            # unlink pick
            a = prv[pick]
            b = nxt[pick]
            if a >= 0:
                nxt[a] = b
            else:
                head = b
            if b < nd:
                prv[b] = a
            nxt[pick] = -2  # mark claimed
            if take_left:
                if pick == left:
                    left = a
            else:
                right = b if b < nd else -1
        # positions claimed in this round are linked out; nothing else to reset
    return out, ref.size


@numba.njit(cache=True)
def _claimed(nxt, prv, p, head):
    return nxt[p] == -2


def matching_without_replacement(references, donors, M: int, distance: str = "euclidean") -> np.ndarray:
    """Greedy 1:M matching of references to donors without replacement.

    References are processed in index order; each claims its ``M`` nearest
    donors not yet claimed, ranking by (distance, donor index).

    Parameters
    ----------
    references, donors : array_like
        Coordinates, one row per unit (1-D arrays are a single coordinate).
    M : int
    distance : {"euclidean", "normalized_euclidean"}
        ``normalized_euclidean`` scales each coordinate by its donor
        standard deviation first.

    Returns
    -------
    ndarray of int, shape (n_references, M)
        Donor row indices claimed by each reference.

    Raises
    ------
    InsufficientDonors
        If there are fewer than ``M * n_references`` donors.
    """
    R = np.asarray(references, dtype=float)
    D = np.asarray(donors, dtype=float)
    if R.ndim == 1:
        R = R.reshape(-1, 1)
    if D.ndim == 1:
        D = D.reshape(-1, 1)
    if M < 1:
        raise ValueError("M must be positive")
    nr, nd = R.shape[0], D.shape[0]
    if nd < M * nr:
        raise InsufficientDonors(f"{nd} donors cannot supply {M} matches to each of {nr} references")
    if distance == "normalized_euclidean":
        sd = D.std(axis=0, ddof=1)
        sd = np.where(sd > 0, sd, 1.0)
        R, D = R / sd, D / sd
    elif distance != "euclidean":
        raise ValueError(f"unknown distance {distance!r}")
    if R.shape[1] == 1:
        order = np.lexsort((np.arange(nd), D[:, 0]))
        picks, done = _greedy_1d(np.ascontiguousarray(R[:, 0]), np.ascontiguousarray(D[order, 0]),
                                 order.astype(np.int64), int(M))
        if done < nr:  # pragma: no cover - guarded by the donor count check
            raise InsufficientDonors("donor pool exhausted")
        return order[picks]
    claimed = np.zeros(nd, dtype=bool)
    out = np.empty((nr, M), dtype=np.int64)
    idx = np.arange(nd)
    for r in range(nr):
        diff = D - R[r]
        dist = np.einsum("ij,ij->i", diff, diff)
        dist[claimed] = np.inf
        kth = np.partition(dist, M - 1)[M - 1]
        cand = np.flatnonzero(dist <= kth)
        cand = cand[np.lexsort((idx[cand], dist[cand]))][:M]
        out[r] = cand
        claimed[cand] = True
    return out


# --------------------------------------------------------------------------- design transformations


def choose_m_random(n_ref: int, n_donors: int, default: int) -> int:
    """``default`` if it gives an instrument share inside [0.45, 0.55], else the smallest M that does."""

    def share(m):
        return n_ref * m / n_donors

    if SHARE_BAND[0] <= share(default) <= SHARE_BAND[1] and n_ref * default <= n_donors:
        return default
    for m in range(1, n_donors // max(n_ref, 1) + 1):
        if SHARE_BAND[0] <= share(m) <= SHARE_BAND[1]:
            return m
    raise InsufficientDonors("no M gives an instrument share between 0.45 and 0.55")


def choose_m_selective(n_ref: int, n_donors: int, default: int, discard: int) -> int:
    """As :func:`choose_m_random`, counting the ``discard`` removals per newly instrumented unit."""

    def feasible(m):
        a = n_ref * m
        rest = n_donors - a - discard * a
        return rest > 0 and SHARE_BAND[0] <= a / (a + rest) <= SHARE_BAND[1]

    if feasible(default):
        return default
    for m in range(1, n_donors // max(n_ref * (1 + discard), 1) + 1):
        if feasible(m):
            return m
    raise InsufficientDonors("no M gives an instrument share between 0.45 and 0.55 after discarding")


def heterogeneity_features(x: np.ndarray) -> np.ndarray:
    """Covariates plus squares and cubes of both age variables and their interactions with the black dummy."""
    age, afb, black = x[:, 0], x[:, 1], x[:, 2]
    return np.column_stack([x, age**2, age**3, afb**2, afb**3, age * black, afb * black])


def _rng(seed, *tags) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) % (1 << 63), *[int(t) for t in tags]]))


def _ols(X, y):
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    resid = y - X @ beta
    sigma = float(np.sqrt(resid @ resid / max(X.shape[0] - X.shape[1], 1)))
    return beta, sigma


def build_population(base: BasePopulation, spec: DgpSpec, seed: int = 0,
                     config: DesignConfig | None = None) -> Population:
    """Apply the instrument, strength and heterogeneity designs to the base population.

    1. Rows with ``z = 1`` are removed; they serve as references.
    2. Random instrument: the references claim their ``M`` nearest remaining
       rows on normalized covariates (greedy, without replacement), which
       receive ``z = 1``. Selective instrument: matching is on the probit
       score of the original instrument evaluated with slopes amplified by
       ``selection_amplifier``; then every newly instrumented row discards
       its ``m_discard`` nearest ``z = 0`` rows on a re-estimated probit score.
    3. Observed strength: ``d1 = 1``. Weak strength: ``d1 = max(d0, 1(u > 1.25))``.
    4. Homogeneous effects: ``y1 = y0`` equal to the base outcome. Heterogeneous
       effects: ``y1``/``y0`` from OLS (probit for the binary outcome) on the
       enriched covariates fitted in the ``z = 1`` / ``z = 0`` subsamples plus
       a shared standard normal shock, and ``d0`` from a probit of the base
       treatment in the ``z = 0`` subsample with the same shock.

    Raises
    ------
    InsufficientDonors
        If the matching quotas cannot be filled.
    """
    cfg = config or DesignConfig()
    tag = (spec.heterogeneity, spec.strong_selection, spec.observed_strength, spec.binary_outcome)
    rng = _rng(seed, 31, *tag)
    refs = np.flatnonzero(base.z == 1.0)
    keep = np.flatnonzero(base.z == 0.0)
    x = base.x[keep]
    d_orig = base.d[keep]
    y_orig = (base.worked if spec.binary_outcome else base.weeks)[keep]
    n_ref, n_don = refs.size, keep.size
    prov: dict = {"n_references": int(n_ref), "base_size": int(base.n)}

    if not spec.strong_selection:
        m = choose_m_random(n_ref, n_don, cfg.m_random)
        picks = matching_without_replacement(base.x[refs], x, m, "normalized_euclidean")
        z = np.zeros(n_don)
        z[picks.ravel()] = 1.0
        rows = np.arange(n_don)
        prov["m"] = m
    else:
        m = choose_m_selective(n_ref, n_don, cfg.m_selective, cfg.m_discard)
        X_full = add_intercept(base.x)
        beta = fit_binary_glm(X_full, base.z, "probit").coefficients
        amp = beta.copy()
        amp[1:] *= cfg.selection_amplifier
        score = special.ndtr(X_full @ amp)
        picks = matching_without_replacement(score[refs], score[keep], m)
        z = np.zeros(n_don)
        z[picks.ravel()] = 1.0
        X_pop = add_intercept(x)
        p_new = special.ndtr(X_pop @ fit_binary_glm(X_pop, z, "probit").coefficients)
        new = np.flatnonzero(z == 1.0)
        pool = np.flatnonzero(z == 0.0)
        gone = pool[matching_without_replacement(p_new[new], p_new[pool], cfg.m_discard).ravel()]
        mask = np.ones(n_don, dtype=bool)
        mask[gone] = False
        rows = np.flatnonzero(mask)
        prov.update(m=m, m_discard=cfg.m_discard, n_discarded=int(gone.size))
    x, z, d_orig, y_orig = x[rows], z[rows], d_orig[rows], y_orig[rows]
    n = x.shape[0]

    v = rng.normal(size=n)
    u = rng.normal(size=n)
    if spec.heterogeneity:
        H = add_intercept(heterogeneity_features(x))
        d0_model = fit_binary_glm(H[z == 0.0], d_orig[z == 0.0], "probit").coefficients
        d0 = (H @ d0_model + v > 0).astype(float)
        if spec.binary_outcome:
            b1 = fit_binary_glm(H[z == 1.0], y_orig[z == 1.0], "probit").coefficients
            b0 = fit_binary_glm(H[z == 0.0], y_orig[z == 0.0], "probit").coefficients
            y1 = (H @ b1 + v > 0).astype(float)
            y0 = (H @ b0 + v > 0).astype(float)
        else:
            b1, s1 = _ols(H[z == 1.0], y_orig[z == 1.0])
            b0, s0 = _ols(H[z == 0.0], y_orig[z == 0.0])
            y1 = H @ b1 + s1 * v
            y0 = H @ b0 + s0 * v
    else:
        d0 = d_orig.copy()
        y1 = y_orig.copy()
        y0 = y_orig.copy()
    if spec.observed_strength:
        d1 = np.ones(n)
    else:
        d1 = np.maximum(d0, (u > cfg.weak_threshold).astype(float))
    prov.update(size=int(n), instrument_share=float(z.mean()))
    arrays = [x, z, d1, d0, y1, y0]
    for a in arrays:
        a.setflags(write=False)
    return Population(x, z, d1, d0, y1, y0, base.column_names, prov)


def true_late(pop: Population) -> float:
    """Mean of ``y1 - y0`` over compliers (``d1 - d0 = 1``).

    Raises
    ------
    NoCompliers
        If no unit switches treatment with the instrument.
    """
    c = (np.asarray(pop.d1) - np.asarray(pop.d0)) == 1.0
    if not c.any():
        raise NoCompliers("population has no compliers")
    return float(np.mean(np.asarray(pop.y1)[c] - np.asarray(pop.y0)[c]))
