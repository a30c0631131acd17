"""Gibbs multiple particle filter for a time-varying number of dipoles.

One bootstrap filter (iPF) runs per active source, conditioned on the
current states of the others; a configurable number of Gibbs sweeps
refreshes those conditioning states within each time step.  Three
dipole-count hypotheses (death / copy / birth) are filtered independently
and an approximate marginal-likelihood criterion picks the winner.

All weight arithmetic is in the log domain.  Weights are Gaussian
likelihood kernels with the normalisation constant dropped; the constant
would otherwise enter candidate scores a different number of times per
hypothesis and swamp the data term.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .dynamics import (
    DipoleState,
    JointState,
    NumberTransition,
    number_transition_probs,
    propagate_particles,
    remove_dipole,
    sample_birth,
)
from .errors import CortlocError
from .forward import LeadField, Measurement
from .mesh import (
    CorticalMesh,
    SurfacePoint,
    sample_uniform_surface_points,
    surface_point_for_vertex,
)
from .mne import PointSet, ROI, cluster_rois, default_regularisation, mne_solve, probabilistic_sample

log = logging.getLogger(__name__)

HYPOTHESES = ("-", "0", "+")
_TIE_RANK = {"0": 0, "-": 1, "+": 2}


@dataclass
class FilterConfig:
    """Knobs for the localiser.

    ``sigma`` is the likelihood noise std used inside the filter (by
    convention twice the ground-truth noise variance, set by the caller).
    """

    sigma: float
    particles: int = 10_000
    min_particles: int = 500
    gibbs_iters: int = 1
    sigma_q: float = 0.1
    p_birth: float = 0.25
    p_death: float = 0.25
    p_stay: float = 0.5
    random_pi: bool = False
    adaptive: bool = True
    adapt_low_mm: float = 10.0
    adapt_high_mm: float = 20.0
    criterion: str = "mean"  # "mean" or "literal"
    fixed_n: int | None = None  # known dipole count; freezes number dynamics
    # Amplitude prior for fresh clouds.  Centred on the nominal unit moment:
    # a zero-centred prior admits sign-cancelling dipole pairs, a stable
    # local optimum that single-site Gibbs updates cannot escape.
    amp_init_mean: float = 1.0
    amp_init_std: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.sigma <= 0:
            raise CortlocError("filter sigma must be positive")
        if self.gibbs_iters < 1:
            raise CortlocError("at least one Gibbs iteration is required")
        if not self.particles >= self.min_particles >= 1:
            raise CortlocError("need particles >= min_particles >= 1")
        if self.criterion not in ("mean", "literal"):
            raise CortlocError(f"unknown criterion {self.criterion!r}")

    @property
    def known_n(self) -> bool:
        return self.fixed_n is not None


@dataclass(frozen=True)
class Particle:
    """Single weighted sample of one dipole state."""

    state: DipoleState
    weight: float


@dataclass
class ParticleSet:
    """Weighted samples for one source, stored column-wise."""

    faces: np.ndarray
    phis: np.ndarray
    varphis: np.ndarray
    amps: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if not len(self.faces) >= 1:
            raise CortlocError("particle set cannot be empty")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise CortlocError("particle weights must be normalised")

    def __len__(self) -> int:
        return len(self.faces)

    def particle(self, i: int) -> Particle:
        return Particle(
            DipoleState(
                SurfacePoint(int(self.faces[i]), float(self.phis[i]), float(self.varphis[i])),
                float(self.amps[i]),
            ),
            float(self.weights[i]),
        )

    @classmethod
    def uniform_weights(cls, faces, phis, varphis, amps) -> "ParticleSet":
        n = len(faces)
        return cls(faces, phis, varphis, amps, np.full(n, 1.0 / n))

    @classmethod
    def from_grid_vertices(
        cls, mesh: CorticalMesh, n: int, rng, amp_mean: float, amp_std: float
    ) -> "ParticleSet":
        """Initial cloud: uniform over grid vertices, mapped onto faces."""
        anchor_faces, anchor_phis, anchor_varphis = vertex_anchor_table(mesh)
        verts = rng.integers(0, mesh.num_vertices, size=n)
        amps = amp_mean + amp_std * rng.standard_normal(n)
        return cls.uniform_weights(
            anchor_faces[verts].copy(),
            anchor_phis[verts].copy(),
            anchor_varphis[verts].copy(),
            amps,
        )

    @classmethod
    def uniform_on_surface(
        cls, mesh: CorticalMesh, n: int, rng, amp_mean: float, amp_std: float
    ) -> "ParticleSet":
        """Fresh birth cloud: area-uniform over the whole surface."""
        faces, phis, varphis = sample_uniform_surface_points(mesh, rng, n)
        amps = amp_mean + amp_std * rng.standard_normal(n)
        return cls.uniform_weights(faces, phis, varphis, amps)


def vertex_anchor_table(mesh: CorticalMesh):
    """Per-vertex (face, phi, varphi) anchors, cached on the mesh."""
    table = getattr(mesh, "_vertex_anchor_table", None)
    if table is None:
        faces = np.empty(mesh.num_vertices, dtype=np.int64)
        phis = np.empty(mesh.num_vertices)
        varphis = np.empty(mesh.num_vertices)
        for v in range(mesh.num_vertices):
            p = surface_point_for_vertex(mesh, v)
            faces[v], phis[v], varphis[v] = p.face, p.phi, p.varphi
        table = (faces, phis, varphis)
        mesh._vertex_anchor_table = table
    return table


@dataclass
class GibbsState:
    """Conditioning bookkeeping for one candidate's sweep."""

    chosen: list[DipoleState]
    iteration: int = 1

    def conditioning(self, active: int) -> list[DipoleState]:
        """All chosen states except the active source's."""
        return self.chosen[:active] + self.chosen[active + 1 :]


@dataclass
class CandidateResult:
    """One dipole-count hypothesis after its Gibbs sweeps."""

    hypothesis: str
    n_dipoles: int
    states: list[DipoleState]
    mean_states: list[DipoleState]
    particle_sets: list[ParticleSet]
    log_weight_vectors: list[np.ndarray]
    log_mean_weights: list[float]
    empty_log_lik: float = 0.0

    def log_likelihood(self, criterion: str = "mean") -> float:
        """Approximate log marginal likelihood of the hypothesis."""
        if self.n_dipoles == 0:
            return self.empty_log_lik
        if criterion == "mean":
            return float(sum(self.log_mean_weights) - math.log(self.n_dipoles))
        stacked = np.stack(self.log_weight_vectors)  # (N, I)
        return float(logsumexp(stacked.sum(axis=0)) - math.log(self.n_dipoles))


@dataclass
class FilterState:
    """Carry-over between time steps: count, point estimates, clouds."""

    n_hat: int
    states: list[DipoleState]
    sets: list[ParticleSet]


@dataclass
class StepResult:
    """Everything the driver records about one filtered time step."""

    k: int
    winner: str
    n_hat: int
    estimate: JointState
    candidates: dict[str, dict]
    i_k: int
    range_scale: float
    state: FilterState = field(repr=False)


# -- weights and resampling -----------------------------------------------------


def _predict_states(interp, states: list[DipoleState]) -> np.ndarray:
    """Noiseless prediction of a list of dipole states."""
    if not states:
        return np.zeros(interp.leadfield.num_sensors)
    faces = np.array([s.location.face for s in states])
    phis = np.array([s.location.phi for s in states])
    varphis = np.array([s.location.varphi for s in states])
    amps = np.array([s.amplitude for s in states])
    return amps @ interp.response(faces, phis, varphis)


def log_weights(
    interp,
    faces,
    phis,
    varphis,
    amps,
    base: np.ndarray,
    sigma: float,
) -> np.ndarray:
    """Unnormalised Gaussian log kernels against the residual ``base``.

    ``base`` is the measurement minus the conditioning states' prediction;
    the kernel is exp(-|base - amp * response|^2 / (2 sigma^2)) with the
    normalisation constant dropped.
    """
    dots, norm2 = interp.response_stats(faces, phis, varphis, base)
    base_sq = float(base @ base)
    resid_sq = base_sq - 2.0 * amps * dots + amps**2 * norm2
    return -0.5 * resid_sq / sigma**2


def compute_weight(
    p: Particle,
    y: Measurement,
    others: list[DipoleState],
    mesh: CorticalMesh,
    leadfield: LeadField,
    sigma: float,
) -> float:
    """Unnormalised log weight of a single particle given the others."""
    if sigma <= 0:
        raise CortlocError("likelihood sigma must be positive")
    interp = leadfield.interpolator(mesh)
    base = y.values - _predict_states(interp, others)
    lw = log_weights(
        interp,
        np.array([p.state.location.face]),
        np.array([p.state.location.phi]),
        np.array([p.state.location.varphi]),
        np.array([p.state.amplitude]),
        base,
        sigma,
    )
    return float(lw[0])


def residual_resample(weights, rng, size: int | None = None) -> np.ndarray:
    """Residual resampling: deterministic floor copies plus multinomial rest.

    Returns ``size`` indices (defaults to ``len(weights)``).  Index order
    is deterministic copies in ascending index, then the multinomial part.
    """
    weights = np.asarray(weights, dtype=np.float64)
    size = len(weights) if size is None else int(size)
    scaled = size * weights
    counts = np.floor(scaled + 1e-12).astype(np.int64)
    deterministic = np.repeat(np.arange(len(weights)), counts)
    remainder = size - int(counts.sum())
    if remainder == 0:
        return deterministic
    residual = np.maximum(scaled - counts, 0.0)
    total = residual.sum()
    if total <= 0:
        probs = None
    else:
        probs = residual / total
    extra = rng.choice(len(weights), size=remainder, replace=True, p=probs)
    return np.concatenate([deterministic, extra])


@dataclass
class IpfResult:
    particle_set: ParticleSet
    chosen: DipoleState
    log_weight_vector: np.ndarray
    log_mean_weight: float


def ipf_step(
    ps: ParticleSet,
    y: Measurement,
    others: list[DipoleState],
    mesh: CorticalMesh,
    leadfield: LeadField,
    cfg: FilterConfig,
    rng: np.random.Generator,
    size: int | None = None,
    range_scale: float = 1.0,
) -> IpfResult:
    """One bootstrap-filter update of a single source.

    Propagates every particle, weights it against the measurement given
    the conditioning states, resamples to ``size`` equal-weight copies,
    and picks the chosen state uniformly from the resampled cloud.
    """
    interp = leadfield.interpolator(mesh)
    faces, phis, varphis, amps = propagate_particles(
        mesh,
        ps.faces,
        ps.phis,
        ps.varphis,
        ps.amps,
        rng,
        range_scale=range_scale,
        sigma_q=cfg.sigma_q,
    )
    base = y.values - _predict_states(interp, others)
    lw = log_weights(interp, faces, phis, varphis, amps, base, cfg.sigma)
    shift = logsumexp(lw)
    if not np.isfinite(shift):
        log.warning(
            "all particle weights vanished at step %d; falling back to flat "
            "weights (model mismatch?)",
            y.time_index,
        )
        lw = np.zeros(len(faces))
        shift = logsumexp(lw)
    norm = np.exp(lw - shift)
    norm /= norm.sum()
    idx = residual_resample(norm, rng, size=size)
    new = ParticleSet.uniform_weights(
        faces[idx], phis[idx], varphis[idx], amps[idx]
    )
    pick = int(rng.integers(len(new)))
    chosen = DipoleState(
        SurfacePoint(
            int(new.faces[pick]), float(new.phis[pick]), float(new.varphis[pick])
        ),
        float(new.amps[pick]),
    )
    log_mean = float(shift - math.log(len(faces)))
    return IpfResult(new, chosen, lw, log_mean)


# -- Gibbs sweep and candidates ---------------------------------------------------


def posterior_mean_state(ps: ParticleSet) -> DipoleState:
    """Surface-constrained mean of a resampled cloud.

    The face carrying the most particles is chosen (ties toward the lowest
    index); the barycentric coefficients are averaged over the particles
    on that face, which stays inside the simplex by convexity.  The
    amplitude is the mean over the whole set.
    """
    counts = np.bincount(ps.faces)
    face = int(np.argmax(counts))
    on_face = ps.faces == face
    return DipoleState(
        SurfacePoint(
            face, float(ps.phis[on_face].mean()), float(ps.varphis[on_face].mean())
        ),
        float(ps.amps.mean()),
    )


def gibbs_sweep(
    hypothesis: str,
    init_states: list[DipoleState],
    base_sets: list[ParticleSet],
    y: Measurement,
    mesh: CorticalMesh,
    leadfield: LeadField,
    cfg: FilterConfig,
    rng: np.random.Generator,
    size: int | None = None,
    range_scale: float = 1.0,
) -> CandidateResult:
    """Run the configured number of Gibbs sweeps over all sources.

    Within a sweep, sources are updated in index order; each freshly
    chosen state immediately replaces its slot in the conditioning
    vector.  Every iPF re-propagates from the previous step's cloud,
    so only the conditioning changes between sweeps.
    """
    n = len(init_states)
    gibbs = GibbsState(list(init_states))
    final_sets: list[ParticleSet] = list(base_sets)
    final_lw: list[np.ndarray] = [np.zeros(0)] * n
    final_lmw: list[float] = [0.0] * n
    for sweep in range(cfg.gibbs_iters):
        gibbs.iteration = sweep + 1
        for src in range(n):
            res = ipf_step(
                base_sets[src],
                y,
                gibbs.conditioning(src),
                mesh,
                leadfield,
                cfg,
                rng,
                size=size,
                range_scale=range_scale,
            )
            gibbs.chosen[src] = res.chosen
            final_sets[src] = res.particle_set
            final_lw[src] = res.log_weight_vector
            final_lmw[src] = res.log_mean_weight
    mean_states = [posterior_mean_state(s) for s in final_sets] if n else []
    return CandidateResult(
        hypothesis=hypothesis,
        n_dipoles=n,
        states=gibbs.chosen,
        mean_states=mean_states,
        particle_sets=final_sets,
        log_weight_vectors=final_lw,
        log_mean_weights=final_lmw,
    )


def selection_criterion(
    candidates: list[CandidateResult],
    prior: NumberTransition,
    criterion: str = "mean",
) -> CandidateResult:
    """Pick the hypothesis maximising likelihood times count prior.

    Scores are compared in the log domain; exact ties break toward the
    copy hypothesis, then death, then birth.
    """
    if not candidates:
        raise CortlocError("no candidates to select from")

    def score(c: CandidateResult) -> float:
        p = prior.prob(c.hypothesis)
        return c.log_likelihood(criterion) + (math.log(p) if p > 0 else -math.inf)

    return max(
        candidates, key=lambda c: (score(c), -_TIE_RANK[c.hypothesis])
    )


def adaptive_update(e_k: float | None, cfg: FilterConfig) -> tuple[int, float]:
    """Particle budget and transition range for the next step.

    Three tiers on the region-vs-estimate error: locked on (small error)
    runs the minimum budget with a tight transition range, unlocked runs
    the full budget with the full range.  ``None`` (no usable error)
    behaves like a large error.
    """
    if not cfg.adaptive:
        return cfg.particles, 1.0
    if e_k is None or e_k >= cfg.adapt_high_mm:
        return cfg.particles, 1.0
    if e_k >= cfg.adapt_low_mm:
        return max(cfg.particles // 2, cfg.min_particles), 0.5
    return cfg.min_particles, 0.25


@dataclass
class AssociationResult:
    rmse: float
    pairs: list[tuple[int, int]]
    unmatched_estimates: list[int]
    unmatched_refs: list[int]


def associate_and_rmse(estimates, refs, mesh: CorticalMesh | None = None) -> AssociationResult:
    """Greedy nearest-pair association and the RMSE of matched pairs.

    Repeatedly matches the globally closest remaining (estimate, ref)
    pair.  Inputs may be JointStates (requires ``mesh``), ROI lists, or
    plain (n, 3) arrays.
    """
    a = _as_points(estimates, mesh)
    b = _as_points(refs, mesh)
    if len(a) == 0 or len(b) == 0:
        raise CortlocError("association needs at least one point on each side")
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    pairs: list[tuple[int, int]] = []
    cost = d.copy()
    for _ in range(min(len(a), len(b))):
        i, j = np.unravel_index(np.argmin(cost), cost.shape)
        pairs.append((int(i), int(j)))
        cost[i, :] = np.inf
        cost[:, j] = np.inf
    sq = [d[i, j] ** 2 for i, j in pairs]
    matched_a = {i for i, _ in pairs}
    matched_b = {j for _, j in pairs}
    return AssociationResult(
        rmse=float(np.sqrt(np.mean(sq))),
        pairs=pairs,
        unmatched_estimates=[i for i in range(len(a)) if i not in matched_a],
        unmatched_refs=[j for j in range(len(b)) if j not in matched_b],
    )


def _as_points(obj, mesh: CorticalMesh | None) -> np.ndarray:
    if isinstance(obj, JointState):
        if mesh is None:
            raise CortlocError("mesh required to place dipole states in 3D")
        return obj.positions(mesh)
    if isinstance(obj, (list, tuple)) and obj and isinstance(obj[0], ROI):
        return np.stack([roi.centre for roi in obj])
    arr = np.asarray(obj, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise CortlocError(f"expected (n, 3) points, got shape {arr.shape}")
    return arr


# -- one full time step -------------------------------------------------------------


def _lane_rng(seed: int, k: int, lane: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((int(seed), int(k), int(lane))))


def gmpf_step(
    prev: FilterState,
    y: Measurement,
    psi: PointSet | None,
    mesh: CorticalMesh,
    leadfield: LeadField,
    cfg: FilterConfig,
    k: int,
    i_k: int,
    range_scale: float,
) -> StepResult:
    """Build, filter, and score the count hypotheses for one time step.

    The copy hypothesis reuses the previous clouds; birth appends a fresh
    area-uniform cloud seeded from the sampled point set; death removes a
    uniformly chosen source and its cloud.  Each hypothesis runs its own
    Gibbs sweeps on an independent deterministic RNG lane, so they can be
    evaluated in any order or in parallel.
    """
    misc_rng = _lane_rng(cfg.seed, k, 0)
    if cfg.known_n:
        hyps = ["0"]
        prior = NumberTransition(0.0, 1.0, 0.0)
    else:
        if cfg.random_pi:
            p_i = float(misc_rng.random())
            if prev.n_hat == 0:
                p_b, p_d = p_i, 0.0
            else:
                p_b = p_d = p_i / 2.0
            prior = number_transition_probs(prev.n_hat, p_b, p_d, cfg.p_stay)
        else:
            prior = number_transition_probs(
                prev.n_hat, cfg.p_birth, cfg.p_death, cfg.p_stay
            )
        hyps = ["-", "0", "+"] if prev.n_hat > 0 else ["0", "+"]

    base_size = len(prev.sets[0]) if prev.sets else i_k
    candidates: list[CandidateResult] = []
    for hyp in hyps:
        lane = 1 + HYPOTHESES.index(hyp)
        rng = _lane_rng(cfg.seed, k, lane)
        states = list(prev.states)
        sets = list(prev.sets)
        if hyp == "+":
            born = sample_birth(
                JointState(states, k),
                None if psi is None else psi.points,
                mesh,
                rng,
                amp_mean=cfg.amp_init_mean,
                amp_std=cfg.amp_init_std,
            )
            states = born.dipoles
            sets = sets + [
                ParticleSet.uniform_on_surface(
                    mesh, base_size, rng, cfg.amp_init_mean, cfg.amp_init_std
                )
            ]
        elif hyp == "-":
            dead = int(rng.integers(len(states)))
            states = remove_dipole(JointState(states, k), dead).dipoles
            sets = sets[:dead] + sets[dead + 1 :]
        cand = gibbs_sweep(
            hyp, states, sets, y, mesh, leadfield, cfg, rng,
            size=i_k, range_scale=range_scale,
        )
        cand.empty_log_lik = float(-0.5 * (y.values @ y.values) / cfg.sigma**2)
        candidates.append(cand)

    winner = selection_criterion(candidates, prior, cfg.criterion)
    diag = {
        c.hypothesis: {
            "n": c.n_dipoles,
            "log_lik_mean": c.log_likelihood("mean"),
            "log_lik_literal": c.log_likelihood("literal"),
            "log_prior": math.log(prior.prob(c.hypothesis))
            if prior.prob(c.hypothesis) > 0
            else -math.inf,
        }
        for c in candidates
    }
    new_state = FilterState(
        n_hat=winner.n_dipoles,
        states=winner.mean_states,
        sets=winner.particle_sets,
    )
    return StepResult(
        k=k,
        winner=winner.hypothesis,
        n_hat=winner.n_dipoles,
        estimate=JointState(list(winner.mean_states), k),
        candidates=diag,
        i_k=i_k,
        range_scale=range_scale,
        state=new_state,
    )


# -- full run ----------------------------------------------------------------------


@dataclass
class RoiParams:
    """Settings for the per-step region-of-interest estimation."""

    lam: float | None = None
    sample_count: int | None = None  # default: quarter of the grid
    cutoff_mm: float = 20.0
    min_members: int = 3


@dataclass
class StepRecord:
    """Public per-step diagnostics emitted by the driver."""

    k: int
    winner: str
    n_hat: int
    estimate: JointState
    positions: np.ndarray
    candidates: dict[str, dict]
    i_k: int
    range_scale: float
    e_roi: float | None
    n_rois: int


def run_filter(
    measurements: list[Measurement],
    mesh: CorticalMesh,
    leadfield: LeadField,
    cfg: FilterConfig,
    roi: RoiParams | None = None,
) -> list[StepRecord]:
    """Drive the full localisation pipeline over a measurement sequence.

    Per step: region-of-interest estimation, the count-hypothesis sweep,
    selection, and the adaptive budget update for the next step.
    """
    roi = roi or RoiParams()
    records: list[StepRecord] = []
    state: FilterState | None = None
    i_k = cfg.particles
    range_scale = 1.0
    sample_count = roi.sample_count or max(mesh.num_vertices // 4, 8)

    for k, y in enumerate(measurements):
        roi_rng = _lane_rng(cfg.seed, k, 7)
        lam = roi.lam or default_regularisation(leadfield, y, cfg.sigma)
        amplitude_field = mne_solve(leadfield, y, lam)
        psi = probabilistic_sample(amplitude_field, sample_count, roi_rng)
        rois = cluster_rois(psi, mesh, roi.cutoff_mm, roi.min_members)

        if state is None:
            n0 = cfg.fixed_n if cfg.known_n else len(rois)
            init_rng = _lane_rng(cfg.seed, 0, 9)
            states = []
            sets = []
            for _ in range(n0):
                faces, phis, varphis = sample_uniform_surface_points(mesh, init_rng, 1)
                amp = cfg.amp_init_mean + cfg.amp_init_std * init_rng.standard_normal()
                states.append(
                    DipoleState(
                        SurfacePoint(int(faces[0]), float(phis[0]), float(varphis[0])),
                        float(amp),
                    )
                )
                sets.append(
                    ParticleSet.from_grid_vertices(
                        mesh, cfg.particles, init_rng, cfg.amp_init_mean, cfg.amp_init_std
                    )
                )
            state = FilterState(n0, states, sets)

        step = gmpf_step(
            state, y, psi, mesh, leadfield, cfg, k, i_k, range_scale
        )
        state = step.state

        e_roi = None
        if rois and step.n_hat > 0:
            e_roi = associate_and_rmse(step.estimate, rois, mesh).rmse
        next_i, next_scale = adaptive_update(e_roi, cfg)

        records.append(
            StepRecord(
                k=k,
                winner=step.winner,
                n_hat=step.n_hat,
                estimate=step.estimate,
                positions=step.estimate.positions(mesh),
                candidates=step.candidates,
                i_k=i_k,
                range_scale=range_scale,
                e_roi=e_roi,
                n_rois=len(rois),
            )
        )
        i_k, range_scale = next_i, next_scale
    return records


# -- joint-state bootstrap baseline ---------------------------------------------------


def run_sir(
    measurements: list[Measurement],
    mesh: CorticalMesh,
    leadfield: LeadField,
    cfg: FilterConfig,
) -> list[StepRecord]:
    """Plain bootstrap filter over the concatenated multi-dipole state.

    One particle cloud carries all ``cfg.fixed_n`` sources jointly; no
    conditioning, no count dynamics, no adaptive budget.  Used as the
    baseline in algorithm comparisons.
    """
    if not cfg.known_n or cfg.fixed_n < 1:
        raise CortlocError("the joint bootstrap baseline needs a fixed dipole count")
    n_dip = cfg.fixed_n
    interp = leadfield.interpolator(mesh)
    rng = _lane_rng(cfg.seed, 0, 3)
    i_0 = cfg.particles

    clouds = [
        ParticleSet.from_grid_vertices(mesh, i_0, rng, cfg.amp_init_mean, cfg.amp_init_std)
        for _ in range(n_dip)
    ]
    faces = np.stack([c.faces for c in clouds], axis=1)  # (I, N)
    phis = np.stack([c.phis for c in clouds], axis=1)
    varphis = np.stack([c.varphis for c in clouds], axis=1)
    amps = np.stack([c.amps for c in clouds], axis=1)

    records: list[StepRecord] = []
    for k, y in enumerate(measurements):
        rng = _lane_rng(cfg.seed, k, 4)
        pred = np.zeros((i_0, leadfield.num_sensors))
        for n in range(n_dip):
            faces[:, n], phis[:, n], varphis[:, n], amps[:, n] = propagate_particles(
                mesh, faces[:, n], phis[:, n], varphis[:, n], amps[:, n], rng,
                range_scale=1.0, sigma_q=cfg.sigma_q,
            )
            pred += amps[:, n, None] * interp.response(
                faces[:, n], phis[:, n], varphis[:, n]
            )
        resid = pred - y.values
        lw = -0.5 * np.einsum("im,im->i", resid, resid) / cfg.sigma**2
        shift = logsumexp(lw)
        if not np.isfinite(shift):
            lw = np.zeros(i_0)
            shift = logsumexp(lw)
        w = np.exp(lw - shift)
        w /= w.sum()
        idx = residual_resample(w, rng)
        faces, phis, varphis, amps = faces[idx], phis[idx], varphis[idx], amps[idx]

        estimates = []
        for n in range(n_dip):
            ps = ParticleSet.uniform_weights(
                faces[:, n], phis[:, n], varphis[:, n], amps[:, n]
            )
            estimates.append(posterior_mean_state(ps))
        est = JointState(estimates, k)
        records.append(
            StepRecord(
                k=k,
                winner="0",
                n_hat=n_dip,
                estimate=est,
                positions=est.positions(mesh),
                candidates={},
                i_k=i_0,
                range_scale=1.0,
                e_roi=None,
                n_rois=0,
            )
        )
    return records
