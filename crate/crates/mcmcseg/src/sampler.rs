//! Chain orchestration: data-driven initialization, random class decision,
//! similarity-weighted subset selection, gradient-biased proposals and the
//! Metropolis-Hastings acceptance rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::align::{align_to_training, apply_pose_scalar, apply_pose_sdf, Pose, TrainingSet};
use crate::energy::{
    self, logsumexp, ChanVeseParams, EnergyBreakdown, TargetMode,
};
use crate::grid::{mask_to_sdf, reinitialize, sdf_to_mask};
use crate::local::{
    composite_perturbation, log_patch_similarities, log_prob_of_patch_selection,
    make_patch_layout, select_patch_sources, PatchLayout, PatchSelection,
};
use crate::{BinaryMask, Error, Result, ScalarField, SignedDistanceField};

/// The gamma training shapes randomly selected at one iteration, with the
/// total log probability of that draw. These log probabilities are the
/// factors of the forward and reverse perturbation probabilities.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SelectionRecord {
    pub class_id: usize,
    pub shape_indices: Vec<usize>,
    /// Sum of log normalized selection probabilities of the drawn indices.
    pub log_prob: f64,
    /// Set when every similarity underflowed and the draw fell back to
    /// uniform.
    pub fallback: bool,
}

/// How the reverse perturbation probability is evaluated in the acceptance
/// ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseEval {
    /// Probability of re-drawing the forward selection under the candidate
    /// curve's similarities.
    Candidate,
    /// Probability of the previous iteration's selection under the
    /// candidate curve's similarities; falls back to `Candidate` when no
    /// previous selection exists yet.
    LiteralPrevCurve,
}

/// What the chain samples from.
pub use crate::energy::TargetMode as Target;

/// Per-chain sampling parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChainConfig {
    pub n_iters: usize,
    /// Number of training shapes drawn (with replacement) per iteration.
    pub gamma: usize,
    /// Step size of the level set update; the effective step is clamped so
    /// that max |alpha * f| never exceeds one pixel.
    pub alpha: f64,
    /// Data-only curve evolution iterations before sampling starts.
    pub data_only_iters: usize,
    /// Signed distance re-extraction cadence, in iterations.
    pub reinit_period: usize,
    pub target_mode: TargetMode,
    /// Weight of the shape term, both in the proposal field and in the
    /// full-target energy.
    pub beta_shape: f64,
    pub chan_vese: ChanVeseParams,
    pub reverse_eval: ReverseEval,
    /// `Some((rows, cols))` enables per-patch source selection.
    pub patch_grid: Option<(usize, usize)>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            n_iters: 200,
            gamma: 5,
            alpha: 1.0,
            data_only_iters: 300,
            reinit_period: 10,
            target_mode: TargetMode::Full,
            beta_shape: 1.0,
            chan_vese: ChanVeseParams::default(),
            reverse_eval: ReverseEval::Candidate,
            patch_grid: None,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iters == 0 {
            return Err(Error::InvalidParameter("n_iters must be >= 1".into()));
        }
        if self.gamma == 0 {
            return Err(Error::InvalidParameter("gamma must be >= 1".into()));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidParameter(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.reinit_period == 0 {
            return Err(Error::InvalidParameter("reinit_period must be >= 1".into()));
        }
        if !self.beta_shape.is_finite() || self.beta_shape < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "beta_shape must be non-negative, got {}",
                self.beta_shape
            )));
        }
        Ok(())
    }
}

/// Multi-chain run parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub chain: ChainConfig,
    pub n_chains: usize,
    pub seed: u64,
}

/// Either one full-frame draw or one draw per patch.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Selection {
    Global(SelectionRecord),
    Local(PatchSelection),
}

impl Selection {
    pub fn log_prob(&self) -> f64 {
        match self {
            Selection::Global(r) => r.log_prob,
            Selection::Local(p) => p.total_log_prob(),
        }
    }

    pub fn any_fallback(&self) -> bool {
        match self {
            Selection::Global(r) => r.fallback,
            Selection::Local(p) => p.any_fallback(),
        }
    }

    pub fn class_id(&self) -> usize {
        match self {
            Selection::Global(r) => r.class_id,
            Selection::Local(p) => p.class_id,
        }
    }
}

/// Outcome of one Metropolis-Hastings step.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepOutcome {
    pub accepted: bool,
    /// First step of a chain is always taken.
    pub forced: bool,
    pub log_ratio: f64,
    pub selection: Selection,
}

/// Per-iteration record kept for reporting.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub accepted: bool,
    pub forced: bool,
    pub log_ratio: f64,
    pub e_data: f64,
    pub e_shape: f64,
    pub e_total: f64,
}

/// Final product of one chain.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SampleRecord {
    pub chain_id: usize,
    /// Segmentation in the original image frame.
    pub mask: BinaryMask,
    pub class_id: usize,
    pub pose_to_training: Pose,
    pub accept_count: usize,
    /// FNV-1a digest over the selection history, for cheap cross-run
    /// comparisons.
    pub selection_digest: u64,
    /// Any iteration fell back to uniform selection.
    pub any_fallback: bool,
    /// A candidate energy came out non-finite (the step was rejected).
    pub any_nonfinite: bool,
    pub trace: Vec<TraceEntry>,
}

/// Evolving state of one chain, kept in the training-aligned frame.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub sdf: SignedDistanceField,
    pub class_id: usize,
    pub energy: EnergyBreakdown,
    pub prev_selection: Option<Selection>,
    pub layout: Option<PatchLayout>,
    pub accept_count: usize,
    pub selection_digest: u64,
    pub any_fallback: bool,
    pub any_nonfinite: bool,
}

// ---------------------------------------------------------------------------
// random selection

/// Draws `gamma` indices independently, each with probability proportional
/// to exp(log similarity); all-underflow inputs fall back to uniform.
pub fn select_subset_log(
    rng: &mut impl Rng,
    log_sims: &[f64],
    gamma: usize,
    class_id: usize,
) -> Result<SelectionRecord> {
    if log_sims.is_empty() {
        return Err(Error::EmptyInput("no shapes to select from"));
    }
    if gamma == 0 {
        return Err(Error::InvalidParameter("gamma must be >= 1".into()));
    }
    let m = log_sims.len();
    let lse = logsumexp(log_sims);
    let (probs, fallback) = if lse.is_finite() {
        (log_sims.iter().map(|l| (l - lse).exp()).collect::<Vec<_>>(), false)
    } else {
        (vec![1.0 / m as f64; m], true)
    };
    let mut indices = Vec::with_capacity(gamma);
    let mut log_prob = 0.0;
    for _ in 0..gamma {
        let idx = draw_categorical(rng, &probs);
        log_prob += if fallback { -(m as f64).ln() } else { log_sims[idx] - lse };
        indices.push(idx);
    }
    Ok(SelectionRecord { class_id, shape_indices: indices, log_prob, fallback })
}

/// As `select_subset_log` but from linear-domain similarities.
pub fn select_subset(
    rng: &mut impl Rng,
    sims: &[f64],
    gamma: usize,
    class_id: usize,
) -> Result<SelectionRecord> {
    let logs: Vec<f64> = sims.iter().map(|&s| s.ln()).collect();
    select_subset_log(rng, &logs, gamma, class_id)
}

/// Log probability of drawing exactly `indices` (in order) from the
/// normalized similarities, with the same uniform fallback rule.
pub fn log_prob_of_indices(log_sims: &[f64], indices: &[usize]) -> f64 {
    let lse = logsumexp(log_sims);
    if lse.is_finite() {
        indices.iter().map(|&j| log_sims[j] - lse).sum()
    } else {
        -(log_sims.len() as f64).ln() * indices.len() as f64
    }
}

/// One class drawn with probability proportional to its class-conditional
/// density at the current curve; the flag reports an underflow fallback to
/// uniform.
pub fn select_class(
    rng: &mut impl Rng,
    sdf: &SignedDistanceField,
    ts: &TrainingSet,
) -> Result<(usize, bool)> {
    let logs: Vec<f64> = (0..ts.n_classes())
        .map(|i| energy::log_class_conditional(sdf, ts, i))
        .collect::<Result<_>>()?;
    let lse = logsumexp(&logs);
    let (probs, fallback) = if lse.is_finite() {
        (logs.iter().map(|l| (l - lse).exp()).collect::<Vec<_>>(), false)
    } else {
        (vec![1.0 / logs.len() as f64; logs.len()], true)
    };
    Ok((draw_categorical(rng, &probs), fallback))
}

fn draw_categorical(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1 // guard against rounding at the top of the CDF
}

// ---------------------------------------------------------------------------
// proposals

/// Step size keeping the largest pixel move at one: min(alpha, 1/max|f|).
pub fn clamp_step(alpha: f64, field: &ScalarField) -> f64 {
    let max_abs = field.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs > 0.0 {
        alpha.min(1.0 / max_abs)
    } else {
        alpha
    }
}

/// Raw additive level set update phi + alpha * f; distance re-extraction is
/// a separate maintenance pass on the caller's cadence.
pub fn propose(
    sdf: &SignedDistanceField,
    field: &ScalarField,
    alpha: f64,
) -> Result<SignedDistanceField> {
    crate::grid::check_dims(sdf.dims(), field.dims())?;
    let mut out = sdf.clone();
    for (p, &f) in out.phi_mut().iter_mut().zip(field.values()) {
        *p += alpha * f;
    }
    if out.phi().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("proposed level set"));
    }
    Ok(out)
}

fn draw_selection(
    rng: &mut impl Rng,
    sdf: &SignedDistanceField,
    ts: &TrainingSet,
    class_id: usize,
    gamma: usize,
    layout: Option<&PatchLayout>,
) -> Result<Selection> {
    match layout {
        None => {
            let logs = energy::log_shape_similarities(sdf, ts, class_id)?;
            Ok(Selection::Global(select_subset_log(rng, &logs, gamma, class_id)?))
        }
        Some(layout) => {
            let logs = log_patch_similarities(sdf, ts, class_id, layout)?;
            Ok(Selection::Local(select_patch_sources(rng, &logs, gamma, class_id)?))
        }
    }
}

/// Log probability of re-drawing `sel` with the similarities evaluated at
/// `sdf`; the reverse factor of the acceptance ratio.
pub fn log_prob_of_selection_at(
    sdf: &SignedDistanceField,
    ts: &TrainingSet,
    layout: Option<&PatchLayout>,
    sel: &Selection,
) -> Result<f64> {
    match (sel, layout) {
        (Selection::Global(rec), None) => {
            let logs = energy::log_shape_similarities(sdf, ts, rec.class_id)?;
            Ok(log_prob_of_indices(&logs, &rec.shape_indices))
        }
        (Selection::Local(ps), Some(layout)) => {
            let logs = log_patch_similarities(sdf, ts, ps.class_id, layout)?;
            Ok(log_prob_of_patch_selection(&logs, ps))
        }
        _ => Err(Error::InvalidParameter("selection kind does not match patch layout".into())),
    }
}

fn perturbation(
    sdf: &SignedDistanceField,
    sel: &Selection,
    image: &ScalarField,
    ts: &TrainingSet,
    p: &ChanVeseParams,
    beta_shape: f64,
    layout: Option<&PatchLayout>,
) -> Result<ScalarField> {
    match (sel, layout) {
        (Selection::Global(rec), None) => {
            energy::perturbation_field(sdf, rec, image, ts, p, beta_shape)
        }
        (Selection::Local(ps), Some(layout)) => {
            composite_perturbation(sdf, ps, image, ts, p, beta_shape, layout)
        }
        _ => Err(Error::InvalidParameter("selection kind does not match patch layout".into())),
    }
}

// ---------------------------------------------------------------------------
// Metropolis-Hastings

fn fnv1a_extend(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;

fn digest_selection(hash: u64, sel: &Selection) -> u64 {
    let mut h = fnv1a_extend(hash, &[match sel {
        Selection::Global(_) => 0u8,
        Selection::Local(_) => 1u8,
    }]);
    let push_record = |h: u64, r: &SelectionRecord| {
        let mut h = fnv1a_extend(h, &(r.class_id as u64).to_le_bytes());
        for &j in &r.shape_indices {
            h = fnv1a_extend(h, &(j as u64).to_le_bytes());
        }
        h
    };
    match sel {
        Selection::Global(r) => h = push_record(h, r),
        Selection::Local(ps) => {
            for r in &ps.patches {
                h = push_record(h, r);
            }
        }
    }
    h
}

/// One sampling step. The selection history advances whether or not the
/// candidate is taken, and the acceptance uniform is always drawn so the
/// random stream does not depend on outcomes.
pub fn mh_step(
    rng: &mut impl Rng,
    state: &mut ChainState,
    image: &ScalarField,
    ts: &TrainingSet,
    cfg: &ChainConfig,
    t: usize,
) -> Result<StepOutcome> {
    let sel = draw_selection(rng, &state.sdf, ts, state.class_id, cfg.gamma, state.layout.as_ref())?;
    let field = perturbation(
        &state.sdf,
        &sel,
        image,
        ts,
        &cfg.chan_vese,
        cfg.beta_shape,
        state.layout.as_ref(),
    )?;
    let candidate = propose(&state.sdf, &field, clamp_step(cfg.alpha, &field))?;
    // the acceptance decision always sees the raw additive candidate;
    // distance re-extraction happens after acceptance as maintenance
    let e_cand = energy::total_energy(
        image,
        &candidate,
        ts,
        &cfg.chan_vese,
        cfg.beta_shape,
        cfg.target_mode,
    )?;

    let log_q_fwd = sel.log_prob();
    let reverse_sel = match (cfg.reverse_eval, &state.prev_selection) {
        (ReverseEval::LiteralPrevCurve, Some(prev)) => prev,
        _ => &sel,
    };
    let log_q_rev = log_prob_of_selection_at(&candidate, ts, state.layout.as_ref(), reverse_sel)?;
    let log_ratio = (state.energy.e_total - e_cand.e_total) + (log_q_rev - log_q_fwd);

    let u: f64 = rng.gen(); // drawn unconditionally
    let forced = t == 0;
    let finite = e_cand.is_finite();
    state.any_nonfinite |= !finite;
    let accepted = forced || (finite && u.ln() < log_ratio);
    if accepted {
        state.sdf = candidate;
        state.energy = e_cand;
        state.accept_count += 1;
        if state.accept_count % cfg.reinit_period == 0 {
            state.sdf = reinitialize(&state.sdf)?;
            state.energy = energy::total_energy(
                image,
                &state.sdf,
                ts,
                &cfg.chan_vese,
                cfg.beta_shape,
                cfg.target_mode,
            )?;
        }
    }
    state.selection_digest = digest_selection(state.selection_digest, &sel);
    state.any_fallback |= sel.any_fallback();
    state.prev_selection = Some(sel.clone());
    Ok(StepOutcome { accepted, forced, log_ratio, selection: sel })
}

// ---------------------------------------------------------------------------
// chain setup and runs

/// Curve evolution on the data term alone, from a centered circle of radius
/// min(H, W)/4. Deterministic; used to seed every chain.
pub fn data_driven_init(image: &ScalarField, cfg: &ChainConfig) -> Result<SignedDistanceField> {
    cfg.validate()?;
    let dims = image.dims();
    let r = dims.height.min(dims.width) as f64 / 4.0;
    let (cx, cy) = dims.center();
    let mut disk = BinaryMask::filled(dims, false);
    for y in 0..dims.height {
        for x in 0..dims.width {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            disk.set(y, x, dy * dy + dx * dx <= r * r);
        }
    }
    let mut sdf = mask_to_sdf(&disk)?;
    for k in 0..cfg.data_only_iters {
        let f = energy::chan_vese_gradient(image, &sdf, &cfg.chan_vese)?;
        let max_abs = f.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_abs == 0.0 {
            break;
        }
        // keep the update below one pixel even where the field is large
        let step = cfg.alpha.min(1.0 / max_abs);
        for (p, &g) in sdf.phi_mut().iter_mut().zip(f.values()) {
            *p += step * g;
        }
        if (k + 1) % cfg.reinit_period == 0 {
            sdf = reinitialize(&sdf)?;
        }
    }
    reinitialize(&sdf)
}

/// Aligned-frame chain state plus the pose and the image warped into the
/// training frame.
pub fn init_chain_state(
    rng: &mut impl Rng,
    image: &ScalarField,
    ts: &TrainingSet,
    cfg: &ChainConfig,
) -> Result<(ChainState, Pose, ScalarField)> {
    cfg.validate()?;
    crate::grid::check_dims(image.dims(), ts.dims())?;
    let init = data_driven_init(image, cfg)?;
    let (aligned, pose) = align_to_training(&init, ts)?;
    let warped = apply_pose_scalar(image, &pose);
    let (class_id, class_fallback) = select_class(rng, &aligned, ts)?;
    let layout = match cfg.patch_grid {
        Some((r, c)) => Some(make_patch_layout(ts.dims(), r, c)?),
        None => None,
    };
    // The chain itself runs without the length penalty (the shape prior
    // regularizes the curve), so the reference energy drops it too.
    let energy = energy::total_energy(
        &warped,
        &aligned,
        ts,
        &cfg.chan_vese.with_mu(0.0),
        cfg.beta_shape,
        cfg.target_mode,
    )?;
    Ok((
        ChainState {
            sdf: aligned,
            class_id,
            energy,
            prev_selection: None,
            layout,
            accept_count: 0,
            selection_digest: FNV_OFFSET,
            any_fallback: class_fallback,
            any_nonfinite: false,
        },
        pose,
        warped,
    ))
}

/// Runs one chain to completion and maps the final curve back to the image
/// frame.
pub fn run_chain(
    image: &ScalarField,
    ts: &TrainingSet,
    cfg: &ChainConfig,
    chain_id: usize,
    seed: u64,
) -> Result<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // the data-driven init honors the configured length penalty; the
    // sampling loop drops it and lets the shape prior regularize instead
    let (mut state, pose, warped) = init_chain_state(&mut rng, image, ts, cfg)?;
    let mut cfg = cfg.clone();
    cfg.chan_vese = cfg.chan_vese.with_mu(0.0);
    let mut trace = Vec::with_capacity(cfg.n_iters);
    for t in 0..cfg.n_iters {
        let out = mh_step(&mut rng, &mut state, &warped, ts, &cfg, t)?;
        trace.push(TraceEntry {
            iter: t,
            accepted: out.accepted,
            forced: out.forced,
            log_ratio: out.log_ratio,
            e_data: state.energy.e_data,
            e_shape: state.energy.e_shape,
            e_total: state.energy.e_total,
        });
    }
    let back = apply_pose_sdf(&state.sdf, &pose.inverse());
    Ok(SampleRecord {
        chain_id,
        mask: sdf_to_mask(&back),
        class_id: state.class_id,
        pose_to_training: pose,
        accept_count: state.accept_count,
        selection_digest: state.selection_digest,
        any_fallback: state.any_fallback,
        any_nonfinite: state.any_nonfinite,
        trace,
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Seed of chain `i` for a run seeded with `seed`; chains never share a
/// stream.
pub fn chain_seed(seed: u64, chain_id: usize) -> u64 {
    seed ^ splitmix64(chain_id as u64 + 1)
}

/// All chains, in parallel; output order and content are identical to the
/// serial run.
pub fn run_sampling(
    image: &ScalarField,
    ts: &TrainingSet,
    run: &RunConfig,
) -> Result<Vec<SampleRecord>> {
    if run.n_chains == 0 {
        return Err(Error::InvalidParameter("n_chains must be >= 1".into()));
    }
    (0..run.n_chains)
        .into_par_iter()
        .map(|i| run_chain(image, ts, &run.chain, i, chain_seed(run.seed, i)))
        .collect()
}

/// Single-threaded reference run; byte-identical to `run_sampling`.
pub fn run_sampling_serial(
    image: &ScalarField,
    ts: &TrainingSet,
    run: &RunConfig,
) -> Result<Vec<SampleRecord>> {
    if run.n_chains == 0 {
        return Err(Error::InvalidParameter("n_chains must be >= 1".into()));
    }
    (0..run.n_chains)
        .map(|i| run_chain(image, ts, &run.chain, i, chain_seed(run.seed, i)))
        .collect()
}
