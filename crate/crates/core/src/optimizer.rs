//! Gain search by simulated annealing under the loop stability constraint.
//!
//! Every iterate is feasible: neighbours are projected onto `[0, g_max]` and
//! resampled until the spectral radius clears the margin.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OweError, Result};
use crate::ether::{
    is_stable, spectral_radius, BssLink, ChannelMatrix, GainVector, NoiseModel, NoiseVectors, SolvedNetwork,
};

/// Neighbour draws attempted before giving up and staying put.
pub const NEIGHBOR_RESAMPLES: usize = 50;
/// Relative distance kept from the margin after a radial pull-back.
const RADIAL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealSchedule {
    pub t0: f64,
    pub alpha: f64,
    pub t_min: f64,
    pub max_iter: usize,
    /// Perturbation standard deviation as a fraction of `g_max`.
    pub step_scale: f64,
    pub rng_seed: u64,
    /// Independent runs; the best is kept.
    pub restarts: usize,
    /// Coordinates perturbed per move.
    pub perturb_count: usize,
    pub projection: Projection,
    pub record_trace: bool,
}

/// What to do with a neighbour draw that violates the stability margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Projection {
    /// Scale the whole vector back just inside the margin; the loop gain is linear in a common scale.
    #[default]
    Radial,
    /// Discard and redraw.
    Resample,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            t0: 10.0,
            alpha: 0.995,
            t_min: 1e-4,
            max_iter: 50_000,
            step_scale: 0.1,
            rng_seed: 0,
            restarts: 8,
            perturb_count: 1,
            projection: Projection::Radial,
            record_trace: false,
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.t0 > self.t_min && self.t_min > 0.0) {
            return Err(OweError::domain("temperatures", "need t0 > t_min > 0"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(OweError::domain("cooling rate", format!("{} not in (0, 1)", self.alpha)));
        }
        if self.max_iter == 0 || self.restarts == 0 || self.perturb_count == 0 {
            return Err(OweError::domain("schedule", "max_iter, restarts and perturb_count must be >= 1"));
        }
        if !(self.step_scale >= 0.0) {
            return Err(OweError::domain("step scale", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainBounds {
    pub g_max: f64,
    pub margin: f64,
}

impl Default for GainBounds {
    fn default() -> Self {
        Self { g_max: 2e5, margin: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub temperature: f64,
    pub objective: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptResult {
    pub best_gains: GainVector,
    pub best_objective: f64,
    pub accepted_moves: usize,
    pub rejected_moves: usize,
    pub trace: Option<Vec<TraceRow>>,
    /// Index of the restart that produced the result.
    pub restart: usize,
}

pub fn neighbor(
    g: &GainVector,
    h: &ChannelMatrix,
    schedule: &AnnealSchedule,
    bounds: &GainBounds,
    rng: &mut ChaCha8Rng,
) -> GainVector {
    let sigma = schedule.step_scale * bounds.g_max;
    if sigma == 0.0 || g.is_empty() {
        return g.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let count = schedule.perturb_count.min(g.len());
    for _ in 0..NEIGHBOR_RESAMPLES {
        let mut next = g.as_slice().to_vec();
        for i in sample(rng, g.len(), count) {
            next[i] = (next[i] + normal.sample(rng)).clamp(0.0, bounds.g_max);
        }
        let next = GainVector::new(next).expect("clamped gains are valid");
        if is_stable(h, &next, bounds.margin) {
            return next;
        }
        if schedule.projection == Projection::Radial {
            if let Ok(rho) = spectral_radius(h, &next) {
                let scale = (1.0 - bounds.margin) / rho * (1.0 - RADIAL_SLACK);
                let pulled = GainVector::new(next.as_slice().iter().map(|v| v * scale).collect())
                    .expect("scaled gains are valid");
                if is_stable(h, &pulled, bounds.margin) {
                    return pulled;
                }
            }
        }
    }
    g.clone()
}

fn restart_seed(seed: u64, restart: usize) -> u64 {
    seed ^ (restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn check_start(h: &ChannelMatrix, g0: &GainVector, bounds: &GainBounds) -> Result<()> {
    let rho = spectral_radius(h, g0)?;
    let limit = 1.0 - bounds.margin;
    if !(rho < limit) || g0.max() > bounds.g_max {
        return Err(OweError::InfeasibleStart { spectral_radius: rho, limit });
    }
    Ok(())
}

fn anneal_once<F>(
    objective: &F,
    h: &ChannelMatrix,
    g0: &GainVector,
    schedule: &AnnealSchedule,
    bounds: &GainBounds,
    seed: u64,
) -> OptResult
where
    F: Fn(&GainVector) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = g0.clone();
    let mut f = objective(&current);
    let mut best = current.clone();
    let mut f_best = f;
    let mut t = schedule.t0;
    let (mut accepted, mut rejected) = (0, 0);
    let mut trace = schedule.record_trace.then(Vec::new);
    let mut iter = 0;
    while t > schedule.t_min && iter < schedule.max_iter {
        let cand = neighbor(&current, h, schedule, bounds, &mut rng);
        let fc = objective(&cand);
        let delta = fc - f;
        let u: f64 = rng.random();
        let take = delta < 0.0 || u < (-delta / t).exp();
        if take {
            current = cand;
            f = fc;
            accepted += 1;
            if f < f_best {
                best = current.clone();
                f_best = f;
            }
        } else {
            rejected += 1;
        }
        if let Some(tr) = trace.as_mut() {
            tr.push(TraceRow { iteration: iter, temperature: t, objective: f, accepted: take });
        }
        t *= schedule.alpha;
        iter += 1;
    }
    OptResult {
        best_gains: best,
        best_objective: f_best,
        accepted_moves: accepted,
        rejected_moves: rejected,
        trace,
        restart: 0,
    }
}

/// Minimize `objective` from a feasible `g0`; restarts run in parallel and the best wins.
pub fn anneal<F>(
    objective: F,
    h: &ChannelMatrix,
    g0: &GainVector,
    schedule: &AnnealSchedule,
    bounds: &GainBounds,
) -> Result<OptResult>
where
    F: Fn(&GainVector) -> f64 + Sync,
{
    schedule.validate()?;
    if g0.len() != h.n() {
        return Err(OweError::DimensionMismatch { expected: h.n(), found: g0.len() });
    }
    check_start(h, g0, bounds)?;
    let runs: Vec<OptResult> = (0..schedule.restarts)
        .into_par_iter()
        .map(|k| {
            let mut r = anneal_once(&objective, h, g0, schedule, bounds, restart_seed(schedule.rng_seed, k));
            r.restart = k;
            r
        })
        .collect();
    // ties go to the lowest restart index so the choice is independent of scheduling
    let best = runs
        .into_iter()
        .reduce(|a, b| if b.best_objective < a.best_objective { b } else { a })
        .expect("at least one restart");
    Ok(best)
}

/// Largest common gain whose loop stays strictly inside the margin.
pub fn max_equal_gain(h: &ChannelMatrix, margin: f64) -> Result<f64> {
    max_scale(h, &GainVector::uniform(h.n(), 1.0), margin)
}

/// Largest `s` with `s · direction` strictly inside the margin, to 1e-9 relative.
///
/// The loop gain is linear in a common scale, so the bisection starts from the
/// exact ratio and only guards against rounding in the eigenvalue solver.
pub fn max_scale(h: &ChannelMatrix, direction: &GainVector, margin: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&margin) {
        return Err(OweError::domain("margin", format!("{margin} not in [0, 1)")));
    }
    let rho = spectral_radius(h, direction)?;
    if rho == 0.0 {
        return Err(OweError::ZeroChannel);
    }
    let scaled = |s: f64| GainVector::new(direction.as_slice().iter().map(|v| v * s).collect()).expect("scaled gains");
    let feasible = |s: f64| is_stable(h, &scaled(s), margin);
    let guess = (1.0 - margin) / rho;
    let (mut lo, mut hi) = (guess * (1.0 - 1e-6), guess * (1.0 + 1e-6));
    while !feasible(lo) {
        hi = lo;
        lo *= 0.5;
    }
    while feasible(hi) {
        lo = hi;
        hi *= 1.5;
    }
    while hi - lo > 1e-9 * lo {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Equal-gain vector at the stability limit, capped by the hardware maximum.
pub fn equal_gain_baseline(h: &ChannelMatrix, bounds: &GainBounds) -> Result<GainVector> {
    let gamma = max_equal_gain(h, bounds.margin)?.min(bounds.g_max);
    Ok(GainVector::uniform(h.n(), gamma))
}

#[derive(Debug, Clone)]
pub struct SingleBssProblem<'a> {
    pub h: &'a ChannelMatrix,
    pub link: &'a BssLink,
    pub noise: &'a NoiseVectors,
    pub model: NoiseModel,
    pub bounds: GainBounds,
    pub schedule: AnnealSchedule,
    /// Start point; the equal-gain baseline when absent.
    pub g0: Option<GainVector>,
}

/// `SNR_SA` for gains already known to be stable; 0 when the solve fails.
pub fn link_snr(h: &ChannelMatrix, g: &GainVector, link: &BssLink, noise: &NoiseVectors, model: NoiseModel) -> f64 {
    SolvedNetwork::new(h, g, 0.0).map(|net| net.snr_sa(link, noise, model)).unwrap_or(0.0)
}

pub fn optimize_single_bss(p: &SingleBssProblem<'_>) -> Result<OptResult> {
    if p.link.n() != p.h.n() || p.noise.len() != p.h.n() {
        return Err(OweError::DimensionMismatch { expected: p.h.n(), found: p.link.n() });
    }
    let g0 = match &p.g0 {
        Some(g) => g.clone(),
        None => equal_gain_baseline(p.h, &p.bounds)?,
    };
    anneal(|g| -link_snr(p.h, g, p.link, p.noise, p.model), p.h, &g0, &p.schedule, &p.bounds)
}

#[derive(Debug, Clone)]
pub struct MultiBssProblem<'a> {
    pub h: &'a ChannelMatrix,
    pub links: &'a [BssLink],
    pub noise: &'a NoiseVectors,
    pub model: NoiseModel,
    pub bounds: GainBounds,
    pub schedule: AnnealSchedule,
    pub g0: Option<GainVector>,
}

#[derive(Debug, Clone)]
pub struct MultiBssResult {
    pub joint: OptResult,
    pub gamma_star: Vec<f64>,
    pub single: Vec<OptResult>,
    pub sinr: Vec<f64>,
}

pub fn validate_links(links: &[BssLink], n: usize) -> Result<()> {
    for (i, a) in links.iter().enumerate() {
        if a.n() != n {
            return Err(OweError::DimensionMismatch { expected: n, found: a.n() });
        }
        for (j, b) in links.iter().enumerate().skip(i + 1) {
            if a.ap_ea_index == b.ap_ea_index {
                return Err(OweError::SameBss(i, j));
            }
        }
    }
    Ok(())
}

fn multi_objective(p: &MultiBssProblem<'_>, g: &GainVector, gamma_star: &[f64]) -> f64 {
    SolvedNetwork::new(p.h, g, 0.0)
        .and_then(|net| net.sinr_multi(p.links, p.noise, p.model, gamma_star))
        .map(|m| m.objective)
        .unwrap_or(f64::INFINITY)
}

pub fn optimize_multi_bss(p: &MultiBssProblem<'_>) -> Result<MultiBssResult> {
    if p.links.len() < 2 {
        return Err(OweError::domain("links", "multi-BSS optimization needs at least two links"));
    }
    validate_links(p.links, p.h.n())?;
    let mut single = Vec::with_capacity(p.links.len());
    let mut gamma_star = Vec::with_capacity(p.links.len());
    for link in p.links {
        let r = optimize_single_bss(&SingleBssProblem {
            h: p.h,
            link,
            noise: p.noise,
            model: p.model,
            bounds: p.bounds,
            schedule: p.schedule,
            g0: p.g0.clone(),
        })?;
        gamma_star.push(-r.best_objective);
        single.push(r);
    }
    if let Some(i) = gamma_star.iter().position(|g| !(g.is_finite() && *g > 0.0)) {
        return Err(OweError::domain(
            "single-BSS optimum",
            format!("link {i} has SNR {}; normalization needs a finite positive value", gamma_star[i]),
        ));
    }
    let g0 = match &p.g0 {
        Some(g) => g.clone(),
        None => equal_gain_baseline(p.h, &p.bounds)?,
    };
    let joint = anneal(|g| multi_objective(p, g, &gamma_star), p.h, &g0, &p.schedule, &p.bounds)?;
    let sinr =
        SolvedNetwork::new(p.h, &joint.best_gains, 0.0)?.sinr_multi(p.links, p.noise, p.model, &gamma_star)?.sinr;
    Ok(MultiBssResult { joint, gamma_star, single, sinr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn pair(c: f64) -> ChannelMatrix {
        ChannelMatrix::from_rows(&[vec![0.0, c], vec![c, 0.0]]).unwrap()
    }

    fn quick() -> AnnealSchedule {
        AnnealSchedule { restarts: 2, ..Default::default() }
    }

    #[test]
    fn equal_gain_analytic() {
        let g = max_equal_gain(&pair(0.25), 0.0).unwrap();
        assert!((g / 4.0 - 1.0).abs() < 2e-9 && g < 4.0);
        let g2 = max_equal_gain(&pair(0.5), 0.0).unwrap();
        assert_relative_eq!(g2, g / 2.0, max_relative = 2e-9);
        let gm = max_equal_gain(&pair(0.25), 0.05).unwrap();
        assert!((gm / 3.8 - 1.0).abs() < 2e-9);
        assert!(matches!(max_equal_gain(&ChannelMatrix::zeros(2), 0.0), Err(OweError::ZeroChannel)));
    }

    #[test]
    fn zero_step_is_identity() {
        let h = pair(1e-6);
        let g = GainVector::uniform(2, 1e4);
        let s = AnnealSchedule { step_scale: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(neighbor(&g, &h, &s, &GainBounds::default(), &mut rng), g);
    }

    #[test]
    fn neighbors_always_feasible() {
        let h = ChannelMatrix::from_rows(&[vec![2e-6, 6e-6, 1e-6], vec![6e-6, 2e-6, 6e-6], vec![1e-6, 6e-6, 2e-6]])
            .unwrap();
        let bounds = GainBounds::default();
        let s = AnnealSchedule { step_scale: 0.3, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = equal_gain_baseline(&h, &bounds).unwrap();
        for _ in 0..10_000 {
            g = neighbor(&g, &h, &s, &bounds, &mut rng);
            assert!(is_stable(&h, &g, bounds.margin));
            assert!(g.as_slice().iter().all(|v| (0.0..=bounds.g_max).contains(v)));
        }
    }

    #[test]
    fn constant_objective_returns_start() {
        let h = pair(1e-6);
        let g0 = GainVector::uniform(2, 1e3);
        let r = anneal(|_| 3.5, &h, &g0, &quick(), &GainBounds::default()).unwrap();
        assert_eq!(r.best_objective, 3.5);
        assert_eq!(r.best_gains, g0);
    }

    #[test]
    fn infeasible_start_rejected() {
        let h = pair(1e-5);
        let g0 = GainVector::uniform(2, 1e5);
        assert!(matches!(
            anneal(|_| 0.0, &h, &g0, &quick(), &GainBounds::default()),
            Err(OweError::InfeasibleStart { .. })
        ));
    }

    #[test]
    fn quadratic_minimum_found() {
        let h = ChannelMatrix::from_rows(&[vec![1e-9]]).unwrap();
        let bounds = GainBounds { g_max: 1.0, margin: 0.0 };
        let target = 0.37;
        for seed in 0..20 {
            let s = AnnealSchedule { rng_seed: seed, restarts: 1, t0: 1.0, t_min: 1e-6, ..Default::default() };
            let r =
                anneal(|g| (g.as_slice()[0] - target).powi(2), &h, &GainVector::uniform(1, 0.9), &s, &bounds).unwrap();
            assert!((r.best_gains.as_slice()[0] - target).abs() < 1e-3, "seed {seed}");
        }
    }

    #[test]
    fn deterministic_with_trace() {
        let h = ChannelMatrix::from_rows(&[vec![1e-6, 4e-6], vec![4e-6, 1e-6]]).unwrap();
        let s = AnnealSchedule { record_trace: true, restarts: 3, rng_seed: 11, ..Default::default() };
        let f = |g: &GainVector| (g.as_slice()[0] - 5e4).abs() + (g.as_slice()[1] - 2e4).abs();
        let g0 = GainVector::uniform(2, 1e4);
        let a = anneal(f, &h, &g0, &s, &GainBounds::default()).unwrap();
        let b = anneal(f, &h, &g0, &s, &GainBounds::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.trace.as_ref().unwrap().len() == a.accepted_moves + a.rejected_moves);
    }

    #[test]
    fn single_ea_sweep() {
        // one EA that is also the AP; its own gain only adds noise, so the optimum is zero
        let h = ChannelMatrix::from_rows(&[vec![1e-5]]).unwrap();
        let link = BssLink::single(1, 0, 26e-6, 0).unwrap();
        let noise = NoiseVectors::new(vec![3e-8], vec![0.0]).unwrap();
        let p = SingleBssProblem {
            h: &h,
            link: &link,
            noise: &noise,
            model: NoiseModel::coherent(),
            bounds: GainBounds::default(),
            schedule: quick(),
            g0: None,
        };
        let r = optimize_single_bss(&p).unwrap();
        assert_eq!(r.best_objective, f64::NEG_INFINITY);
        assert_eq!(r.best_gains.as_slice()[0], 0.0);
    }

    #[test]
    fn duplicate_ap_rejected() {
        let h = pair(1e-6);
        let l = BssLink::single(2, 0, 1e-6, 1).unwrap();
        let links = [l.clone(), l];
        let noise = NoiseVectors::zeros(2);
        let p = MultiBssProblem {
            h: &h,
            links: &links,
            noise: &noise,
            model: NoiseModel::coherent(),
            bounds: GainBounds::default(),
            schedule: quick(),
            g0: None,
        };
        assert!(matches!(optimize_multi_bss(&p), Err(OweError::SameBss(0, 1))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn never_worse_than_start(seed in any::<u64>(), a in 0.0f64..2e5, b in 0.0f64..2e5) {
            let h = ChannelMatrix::from_rows(&[vec![1e-6, 3e-6], vec![3e-6, 1e-6]]).unwrap();
            let s = AnnealSchedule { rng_seed: seed, restarts: 1, max_iter: 300, ..Default::default() };
            let f = |g: &GainVector| (g.as_slice()[0] - a).powi(2) + (g.as_slice()[1] - b).powi(2);
            let g0 = GainVector::uniform(2, 1e3);
            let r = anneal(f, &h, &g0, &s, &GainBounds::default()).unwrap();
            prop_assert!(r.best_objective <= f(&g0));
            prop_assert_eq!(r.best_objective, f(&r.best_gains));
            prop_assert!(is_stable(&h, &r.best_gains, 0.05));
        }
    }
}
