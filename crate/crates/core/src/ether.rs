//! Closed-loop network of EAs.
//!
//! With channel matrix `H` (entry `(i, j)` carries EA i's LED current into
//! EA j's photocurrent) and gains `G = diag(g)`, the photocurrents satisfy
//! `y = x + Hᵀ G y + Hᵀ (G ñ + ñ_a)`, so `y = A (x + Hᵀ(G ñ + ñ_a))` with
//! `A = (I − HᵀG)⁻¹`. The loop is only meaningful while the spectral radius
//! of `HᵀG` stays below one.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::circuit::{EaCircuitParams, NoiseBudget};
use crate::error::{OweError, Result};
use crate::radiometry::{diffuse_power_gain, EmitterParams, FloorModel, Pose, ReceiverParams};

/// Largest system solved with a dense eigendecomposition.
pub const DENSE_EIGEN_LIMIT: usize = 64;
const POWER_ITER_TOL: f64 = 1e-10;
const POWER_ITER_MAX: usize = 200_000;

/// Current-to-current gains between EAs.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    h: DMatrix<f64>,
}

impl ChannelMatrix {
    pub fn new(h: DMatrix<f64>) -> Result<Self> {
        if h.nrows() != h.ncols() {
            return Err(OweError::DimensionMismatch { expected: h.nrows(), found: h.ncols() });
        }
        if let Some(v) = h.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(OweError::domain("channel entry", format!("{v} must be finite and >= 0")));
        }
        Ok(Self { h })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if let Some(r) = rows.iter().find(|r| r.len() != n) {
            return Err(OweError::DimensionMismatch { expected: n, found: r.len() });
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn zeros(n: usize) -> Self {
        Self { h: DMatrix::zeros(n, n) }
    }

    pub fn n(&self) -> usize {
        self.h.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.h[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new(&self.h * k)
    }

    /// Copy with entry `(i, j)` replaced.
    pub fn with_entry(&self, i: usize, j: usize, value: f64) -> Result<Self> {
        let mut h = self.h.clone();
        h[(i, j)] = value;
        Self::new(h)
    }

    /// Copy with rows and columns reordered so that new index `k` is old index `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n();
        Self { h: DMatrix::from_fn(n, n, |i, j| self.h[(perm[i], perm[j])]) }
    }

    pub fn max_off_diagonal(&self) -> f64 {
        let n = self.n();
        let mut best = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    best = best.max(self.h[(i, j)]);
                }
            }
        }
        best
    }

    /// Write as CSV with 15 significant digits, one matrix row per line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        for i in 0..self.n() {
            let row: Vec<String> = (0..self.n()).map(|j| format!("{:.14e}", self.h[(i, j)])).collect();
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| OweError::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|e| OweError::Parse {
                        path: path.display().to_string(),
                        message: format!("row {}: {e}", rows.len() + 1),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }
}

/// Per-EA current gains, all non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct GainVector(DVector<f64>);

impl GainVector {
    pub fn new(g: Vec<f64>) -> Result<Self> {
        if let Some(v) = g.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(OweError::domain("gain", format!("{v} must be finite and >= 0")));
        }
        Ok(Self(DVector::from_vec(g)))
    }

    pub fn uniform(n: usize, g: f64) -> Self {
        Self(DVector::from_element(n, g.max(0.0)))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DVector::zeros(n))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    pub fn argmax(&self) -> usize {
        self.0.argmax().0
    }

    pub fn with(&self, i: usize, value: f64) -> Self {
        let mut g = self.0.clone();
        g[i] = value.max(0.0);
        Self(g)
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self(DVector::from_fn(self.len(), |k, _| self.0[perm[k]]))
    }
}

/// RMS noise sources per EA.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVectors {
    /// Referred to the EA input, multiplied by the EA gain.
    pub gain_dependent: DVector<f64>,
    /// Injected at the LED regardless of gain.
    pub additive: DVector<f64>,
}

impl NoiseVectors {
    pub fn new(gain_dependent: Vec<f64>, additive: Vec<f64>) -> Result<Self> {
        if gain_dependent.len() != additive.len() {
            return Err(OweError::DimensionMismatch { expected: gain_dependent.len(), found: additive.len() });
        }
        if gain_dependent.iter().chain(&additive).any(|v| !(*v >= 0.0)) {
            return Err(OweError::domain("noise", "RMS values must be >= 0"));
        }
        Ok(Self { gain_dependent: DVector::from_vec(gain_dependent), additive: DVector::from_vec(additive) })
    }

    pub fn uniform(n: usize, budget: &NoiseBudget) -> Self {
        Self {
            gain_dependent: DVector::from_element(n, budget.gain_dependent()),
            additive: DVector::from_element(n, budget.n_dcdc_a),
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self { gain_dependent: DVector::zeros(n), additive: DVector::zeros(n) }
    }

    pub fn len(&self) -> usize {
        self.additive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.additive.is_empty()
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.len();
        Self {
            gain_dependent: DVector::from_fn(n, |k, _| self.gain_dependent[perm[k]]),
            additive: DVector::from_fn(n, |k, _| self.additive[perm[k]]),
        }
    }

    /// Per-EA output source `G ñ + ñ_a`.
    fn sources(&self, g: &GainVector) -> DVector<f64> {
        self.gain_dependent.component_mul(g.vector()) + &self.additive
    }
}

/// One BSS: station photocurrents at the entry EAs and the EA that feeds the AP.
#[derive(Debug, Clone, PartialEq)]
pub struct BssLink {
    pub entry_weights: DVector<f64>,
    pub ap_ea_index: usize,
}

impl BssLink {
    pub fn new(entry_weights: Vec<f64>, ap_ea_index: usize) -> Result<Self> {
        let n = entry_weights.len();
        if ap_ea_index >= n {
            return Err(OweError::domain("AP EA index", format!("{ap_ea_index} not below {n}")));
        }
        if entry_weights.iter().any(|v| !(*v >= 0.0)) {
            return Err(OweError::domain("entry photocurrent", "must be >= 0"));
        }
        Ok(Self { entry_weights: DVector::from_vec(entry_weights), ap_ea_index })
    }

    /// Single entry EA carrying photocurrent `v`.
    pub fn single(n: usize, entry: usize, v: f64, ap_ea_index: usize) -> Result<Self> {
        if entry >= n {
            return Err(OweError::domain("entry EA index", format!("{entry} not below {n}")));
        }
        let mut w = vec![0.0; n];
        w[entry] = v;
        Self::new(w, ap_ea_index)
    }

    pub fn n(&self) -> usize {
        self.entry_weights.len()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self { entry_weights: &self.entry_weights * k, ap_ea_index: self.ap_ea_index }
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        let inv = inverse_permutation(perm);
        Self {
            entry_weights: DVector::from_fn(self.n(), |k, _| self.entry_weights[perm[k]]),
            ap_ea_index: inv[self.ap_ea_index],
        }
    }

    /// Indices with a nonzero entry photocurrent.
    pub fn entries(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.entry_weights[i] > 0.0).collect()
    }
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

/// How RMS noise from different sources is combined into one figure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseCombination {
    /// Magnitude of the propagated noise vector expression, sources added as amplitudes.
    #[default]
    Coherent,
    /// Each EA's output source independent of the others; contributions add in power.
    Quadrature,
}

/// Noise options for AP-side evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseModel {
    pub combination: NoiseCombination,
    /// Constant AP receiver noise, A RMS; zero disables it.
    pub ap_noise_a: f64,
}

impl NoiseModel {
    pub fn coherent() -> Self {
        Self::default()
    }
}

fn combine(coeffs: impl Iterator<Item = f64>, combination: NoiseCombination) -> f64 {
    match combination {
        NoiseCombination::Coherent => coeffs.sum::<f64>().abs(),
        NoiseCombination::Quadrature => coeffs.map(|c| c * c).sum::<f64>().sqrt(),
    }
}

fn check_dims(h: &ChannelMatrix, g: &GainVector) -> Result<()> {
    if g.len() != h.n() {
        return Err(OweError::DimensionMismatch { expected: h.n(), found: g.len() });
    }
    Ok(())
}

/// HᵀG as a dense matrix.
fn loop_matrix(h: &ChannelMatrix, g: &GainVector) -> DMatrix<f64> {
    let mut k = h.matrix().transpose();
    for (j, gj) in g.as_slice().iter().enumerate() {
        k.column_mut(j).scale_mut(*gj);
    }
    k
}

pub fn spectral_radius(h: &ChannelMatrix, g: &GainVector) -> Result<f64> {
    check_dims(h, g)?;
    let n = h.n();
    if n == 0 || g.max() == 0.0 {
        return Ok(0.0);
    }
    let k = loop_matrix(h, g);
    if k.iter().any(|v| *v < 0.0) {
        return dense_radius(&k);
    }
    // Split into strongly connected blocks: each irreducible block has a simple
    // Perron root, whereas a triangular loop with repeated diagonal entries is
    // defective and the dense solver loses most of its digits on it.
    let mut graph = petgraph::graph::DiGraph::<(), ()>::new();
    let nodes: Vec<_> = (0..n).map(|_| graph.add_node(())).collect();
    for i in 0..n {
        for j in 0..n {
            if i != j && k[(i, j)] > 0.0 {
                graph.add_edge(nodes[i], nodes[j], ());
            }
        }
    }
    let mut rho = 0.0f64;
    for comp in petgraph::algo::tarjan_scc(&graph) {
        let idx: Vec<usize> = comp.iter().map(|v| v.index()).collect();
        let r =
            if idx.len() == 1 { k[(idx[0], idx[0])] } else { dense_radius(&k.select_rows(&idx).select_columns(&idx))? };
        rho = rho.max(r);
    }
    Ok(rho)
}

fn dense_radius(k: &DMatrix<f64>) -> Result<f64> {
    if k.nrows() <= DENSE_EIGEN_LIMIT {
        Ok(k.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max))
    } else {
        perron_root(k)
    }
}

/// Perron root of a non-negative matrix by power iteration on `K + I`.
///
/// The shift makes the Perron eigenvalue strictly dominant even when the
/// loop graph is periodic.
fn perron_root(k: &DMatrix<f64>) -> Result<f64> {
    let n = k.nrows();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for it in 0..POWER_ITER_MAX {
        let w = k * &v + &v;
        let norm = w.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let next = norm;
        v = w / norm;
        if it > 0 && (next - lambda).abs() <= POWER_ITER_TOL * next {
            return Ok((next - 1.0).max(0.0));
        }
        lambda = next;
    }
    Err(OweError::NonConvergence { iterations: POWER_ITER_MAX })
}

pub fn is_stable(h: &ChannelMatrix, g: &GainVector, margin: f64) -> bool {
    match spectral_radius(h, g) {
        Ok(rho) => rho < 1.0 - margin,
        Err(_) => false,
    }
}

/// A stable network with its loop inverse `A = (I − HᵀG)⁻¹` factored once.
#[derive(Debug, Clone)]
pub struct SolvedNetwork {
    h: ChannelMatrix,
    g: GainVector,
    a: DMatrix<f64>,
    /// `A Hᵀ`: photocurrent at each EA per unit of LED-side source at each EA.
    a_ht: DMatrix<f64>,
    pub spectral_radius: f64,
}

impl SolvedNetwork {
    /// Fails unless the spectral radius is below `1 − margin`.
    pub fn new(h: &ChannelMatrix, g: &GainVector, margin: f64) -> Result<Self> {
        check_dims(h, g)?;
        let rho = spectral_radius(h, g)?;
        let limit = 1.0 - margin;
        if !(rho < limit) {
            return Err(OweError::Unstable { spectral_radius: rho, limit });
        }
        let n = h.n();
        let m = DMatrix::identity(n, n) - loop_matrix(h, g);
        let a = m.lu().try_inverse().ok_or(OweError::Unstable { spectral_radius: rho, limit })?;
        let a_ht = &a * h.matrix().transpose();
        Ok(Self { h: h.clone(), g: g.clone(), a, a_ht, spectral_radius: rho })
    }

    pub fn n(&self) -> usize {
        self.h.n()
    }

    pub fn loop_inverse(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn gains(&self) -> &GainVector {
        &self.g
    }

    pub fn channel(&self) -> &ChannelMatrix {
        &self.h
    }

    /// Photocurrent at every EA for injected photocurrents `x`.
    pub fn signal(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x
    }

    /// Coefficients mapping each EA's output source onto the photocurrent of EA `i`.
    fn noise_row(&self, i: usize, noise: &NoiseVectors) -> impl Iterator<Item = f64> + '_ {
        let s = noise.sources(&self.g);
        (0..self.n()).map(move |j| self.a_ht[(i, j)] * s[j])
    }

    /// RMS noise in the photocurrent of EA `i`.
    pub fn noise_at(&self, i: usize, noise: &NoiseVectors, combination: NoiseCombination) -> f64 {
        combine(self.noise_row(i, noise), combination)
    }

    /// Noise photocurrent at every EA.
    pub fn noise_vector(&self, noise: &NoiseVectors, combination: NoiseCombination) -> DVector<f64> {
        DVector::from_fn(self.n(), |i, _| self.noise_at(i, noise, combination))
    }

    /// RMS noise in the LED current of EA `i`, including its own output source.
    pub fn led_noise_at(&self, i: usize, noise: &NoiseVectors, combination: NoiseCombination) -> f64 {
        let s = noise.sources(&self.g);
        let gi = self.g.as_slice()[i];
        let coeffs = (0..self.n()).map(|j| {
            let own = if j == i { 1.0 } else { 0.0 };
            (gi * self.a_ht[(i, j)] + own) * s[j]
        });
        combine(coeffs, combination)
    }

    /// Signal at the AP for a link's station photocurrents.
    pub fn link_signal(&self, link: &BssLink) -> f64 {
        self.a.row(link.ap_ea_index).dot(&link.entry_weights.transpose())
    }

    /// AP-side RMS noise for a link.
    pub fn link_noise(&self, link: &BssLink, noise: &NoiseVectors, model: NoiseModel) -> f64 {
        let core = self.noise_at(link.ap_ea_index, noise, model.combination);
        match model.combination {
            NoiseCombination::Coherent => core + model.ap_noise_a,
            NoiseCombination::Quadrature => core.hypot(model.ap_noise_a),
        }
    }

    pub fn ap_received(&self, link: &BssLink, noise: &NoiseVectors, model: NoiseModel) -> (f64, f64) {
        (self.link_signal(link), self.link_noise(link, noise, model))
    }

    pub fn snr_sa(&self, link: &BssLink, noise: &NoiseVectors, model: NoiseModel) -> f64 {
        let (s, n) = self.ap_received(link, noise, model);
        ratio(s * s, n * n)
    }

    /// Signal of `from` reaching the AP of `to`.
    pub fn interference(&self, from: &BssLink, to: &BssLink) -> f64 {
        self.a.row(to.ap_ea_index).dot(&from.entry_weights.transpose())
    }

    pub fn sinr_multi(
        &self,
        links: &[BssLink],
        noise: &NoiseVectors,
        model: NoiseModel,
        gamma_star: &[f64],
    ) -> Result<MultiSinr> {
        if gamma_star.len() != links.len() {
            return Err(OweError::DimensionMismatch { expected: links.len(), found: gamma_star.len() });
        }
        let mut sinr = Vec::with_capacity(links.len());
        for (i, li) in links.iter().enumerate() {
            let s = self.link_signal(li);
            let n = self.link_noise(li, noise, model);
            let interf: f64 = links
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, lj)| self.interference(lj, li).powi(2))
                .sum();
            sinr.push(ratio(s * s, n * n + interf));
        }
        let objective =
            if sinr.contains(&0.0) { f64::INFINITY } else { sinr.iter().zip(gamma_star).map(|(s, g)| g / s).sum() };
        Ok(MultiSinr { sinr, objective })
    }
}

/// `num/den` with the infinite sentinel for a noiseless nonzero signal.
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiSinr {
    pub sinr: Vec<f64>,
    pub objective: f64,
}

/// Signal and noise photocurrent at every EA.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub signal: DVector<f64>,
    pub noise: DVector<f64>,
}

pub fn solve_response(
    h: &ChannelMatrix,
    g: &GainVector,
    x: &DVector<f64>,
    noise: &NoiseVectors,
    combination: NoiseCombination,
) -> Result<Response> {
    if x.len() != h.n() {
        return Err(OweError::DimensionMismatch { expected: h.n(), found: x.len() });
    }
    let net = SolvedNetwork::new(h, g, 0.0)?;
    Ok(Response { signal: net.signal(x), noise: net.noise_vector(noise, combination) })
}

pub fn ap_received(
    h: &ChannelMatrix,
    g: &GainVector,
    link: &BssLink,
    noise: &NoiseVectors,
    model: NoiseModel,
) -> Result<(f64, f64)> {
    Ok(SolvedNetwork::new(h, g, 0.0)?.ap_received(link, noise, model))
}

pub fn snr_sa(
    h: &ChannelMatrix,
    g: &GainVector,
    link: &BssLink,
    noise: &NoiseVectors,
    model: NoiseModel,
) -> Result<f64> {
    Ok(SolvedNetwork::new(h, g, 0.0)?.snr_sa(link, noise, model))
}

pub fn mutual_interference(h: &ChannelMatrix, g: &GainVector, from: &BssLink, to: &BssLink) -> Result<f64> {
    if from.ap_ea_index == to.ap_ea_index {
        return Err(OweError::SameBss(from.ap_ea_index, to.ap_ea_index));
    }
    Ok(SolvedNetwork::new(h, g, 0.0)?.interference(from, to))
}

pub fn sinr_multi(
    h: &ChannelMatrix,
    g: &GainVector,
    links: &[BssLink],
    noise: &NoiseVectors,
    model: NoiseModel,
    gamma_star: &[f64],
) -> Result<MultiSinr> {
    SolvedNetwork::new(h, g, 0.0)?.sinr_multi(links, noise, model, gamma_star)
}

pub fn to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

/// Optics shared by every EA in a deployment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EaOptics {
    pub emitter: EmitterParams,
    pub receiver: ReceiverParams,
    pub floor: FloorModel,
}

/// Channel matrix from EA poses; diagonal entries use the co-located geometry.
pub fn build_channel_matrix(poses: &[Pose], optics: &EaOptics, circuit: &EaCircuitParams) -> Result<ChannelMatrix> {
    use rayon::prelude::*;

    let n = poses.len();
    if n == 0 {
        return Err(OweError::domain("layout", "at least one EA is required"));
    }
    let k = circuit.current_to_current();
    let entries: Vec<f64> = (0..n * n)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            diffuse_power_gain(&poses[i], &optics.emitter, &poses[j], &optics.receiver, &optics.floor).map(|g| g * k)
        })
        .collect::<Result<_>>()?;
    ChannelMatrix::new(DMatrix::from_row_slice(n, n, &entries))
}
