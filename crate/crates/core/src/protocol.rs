//! Tone-based channel probing and blockage handling.
//!
//! The AP only observes the photocurrent of the EA it is attached to. Every
//! quantity here is recovered from such readings while the protocol decides
//! which EA emits a tone and which gains are switched on.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{OweError, Result};
use crate::ether::{spectral_radius, BssLink, ChannelMatrix, GainVector, NoiseModel, NoiseVectors, SolvedNetwork};
use crate::optimizer::{link_snr, optimize_single_bss, AnnealSchedule, GainBounds, OptResult, SingleBssProblem};

/// Hop distance of every EA from the AP-attached EA.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EaLayerMap {
    pub layer_of: Vec<usize>,
    pub ap_ea: usize,
}

impl EaLayerMap {
    pub fn depth(&self) -> usize {
        self.layer_of.iter().copied().max().unwrap_or(0)
    }

    pub fn members(&self, layer: usize) -> Vec<usize> {
        (0..self.layer_of.len()).filter(|&i| self.layer_of[i] == layer).collect()
    }
}

/// Absolute edge threshold: `ratio` times the largest off-diagonal channel.
pub fn significant_threshold(h: &ChannelMatrix, ratio: f64) -> f64 {
    ratio * h.max_off_diagonal()
}

fn edge(h: &ChannelMatrix, i: usize, j: usize, threshold: f64) -> bool {
    i != j && (h.get(i, j) > threshold || h.get(j, i) > threshold)
}

/// Breadth-first layers over channels above `threshold` in either direction.
pub fn layer_partition(h: &ChannelMatrix, ap_ea: usize, threshold: f64) -> Result<EaLayerMap> {
    let n = h.n();
    if ap_ea >= n {
        return Err(OweError::domain("AP EA index", format!("{ap_ea} not below {n}")));
    }
    let mut layer = vec![usize::MAX; n];
    layer[ap_ea] = 0;
    let mut queue = VecDeque::from([ap_ea]);
    while let Some(i) = queue.pop_front() {
        for j in 0..n {
            if layer[j] == usize::MAX && edge(h, i, j, threshold) {
                layer[j] = layer[i] + 1;
                queue.push_back(j);
            }
        }
    }
    let unreachable: Vec<usize> = (0..n).filter(|&i| layer[i] == usize::MAX).collect();
    if !unreachable.is_empty() {
        return Err(OweError::Disconnected { unreachable });
    }
    Ok(EaLayerMap { layer_of: layer, ap_ea })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeObservation {
    pub emitting_ea: usize,
    pub tone_amplitude: f64,
    pub received_at_ap: f64,
    pub active_gains: GainVector,
    pub decision: String,
}

impl ProbeObservation {
    /// Short fingerprint of the gain snapshot for logs.
    pub fn gains_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for g in self.active_gains.as_slice() {
            hasher.update(g.to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..8])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryStatus {
    Measured,
    Inferred,
    Unknown,
}

impl EntryStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Measured => "measured",
            Self::Inferred => "inferred",
            Self::Unknown => "unknown",
        }
    }
}

/// Partially known channel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEstimate {
    pub h_est: DMatrix<f64>,
    pub status: DMatrix<EntryStatus>,
}

impl ChannelEstimate {
    fn unknown(n: usize) -> Self {
        Self { h_est: DMatrix::zeros(n, n), status: DMatrix::from_element(n, n, EntryStatus::Unknown) }
    }

    fn set(&mut self, i: usize, j: usize, v: f64, s: EntryStatus) {
        self.h_est[(i, j)] = v;
        self.status[(i, j)] = s;
    }

    pub fn known(&self, i: usize, j: usize) -> Option<f64> {
        (self.status[(i, j)] != EntryStatus::Unknown).then(|| self.h_est[(i, j)])
    }
}

/// Simulated AP receiver over a fixed world.
pub struct ProbeWorld<'a> {
    pub world: &'a ChannelMatrix,
    pub ap_ea: usize,
    /// Readings are scaled by a factor in `[1/(1+ε), 1+ε]`, log-uniform.
    pub relative_noise: f64,
    rng: ChaCha8Rng,
}

impl<'a> ProbeWorld<'a> {
    pub fn new(world: &'a ChannelMatrix, ap_ea: usize, relative_noise: f64, seed: u64) -> Self {
        Self { world, ap_ea, relative_noise, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// AP reading while `emitter` adds `tone` to its LED current under `gains`.
    pub fn read(&mut self, emitter: usize, tone: f64, gains: &GainVector) -> Result<f64> {
        let rho = spectral_radius(self.world, gains)?;
        if !(rho < 1.0) {
            return Err(OweError::ProbeUnstable { emitter, spectral_radius: rho });
        }
        let net = SolvedNetwork::new(self.world, gains, 0.0)?;
        let inject = DVector::from_fn(self.world.n(), |i, _| self.world.get(emitter, i) * tone);
        let mut r = net.signal(&inject)[self.ap_ea];
        if self.relative_noise > 0.0 {
            let span = (1.0 + self.relative_noise).ln();
            r *= (span * self.rng.random_range(-1.0..=1.0)).exp();
        }
        Ok(r)
    }
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub estimate: ChannelEstimate,
    pub layers: EaLayerMap,
    pub observations: Vec<ProbeObservation>,
}

/// Relays from layer 1 out to `target`'s inner neighbour, strongest prior link at each hop.
fn relay_chain(prior: &ChannelMatrix, layers: &EaLayerMap, target: usize) -> Vec<usize> {
    let n = prior.n();
    let mut chain = Vec::new();
    let mut cur = target;
    while layers.layer_of[cur] > 1 {
        let want = layers.layer_of[cur] - 1;
        let next = (0..n)
            .filter(|&j| layers.layer_of[j] == want)
            .max_by(|&a, &b| {
                let wa = prior.get(cur, a).max(prior.get(a, cur));
                let wb = prior.get(cur, b).max(prior.get(b, cur));
                wa.total_cmp(&wb).then(b.cmp(&a))
            })
            .expect("BFS layers are contiguous");
        chain.push(next);
        cur = next;
    }
    chain.reverse();
    chain
}

/// Learn the channels needed to reach the AP using only tone readings.
///
/// Layers come from `prior`, the deployment-time channel map. Each EA's
/// channel to the AP's EA is read with everything muted. Self channels of the
/// first layer and of the AP's EA follow from one reading at `known_gain`.
/// An outer EA is then heard through its relay chain, one nested sub-chain at
/// a time, which yields its channel into every relay of the chain.
pub fn probe_from_scratch(
    world: &mut ProbeWorld<'_>,
    prior: &ChannelMatrix,
    threshold: f64,
    known_gain: f64,
    tone: f64,
) -> Result<ProbeReport> {
    if !(tone > 0.0) || !(known_gain > 0.0) {
        return Err(OweError::domain("probe", "tone and known gain must be positive"));
    }
    let n = world.world.n();
    if prior.n() != n {
        return Err(OweError::DimensionMismatch { expected: n, found: prior.n() });
    }
    let ap = world.ap_ea;
    let layers = layer_partition(prior, ap, threshold)?;
    let mut est = ChannelEstimate::unknown(n);
    let mut obs = Vec::new();
    let mut observe =
        |world: &mut ProbeWorld<'_>, emitter: usize, gains: GainVector, decision: String| -> Result<f64> {
            let r = world.read(emitter, tone, &gains)?;
            obs.push(ProbeObservation {
                emitting_ea: emitter,
                tone_amplitude: tone,
                received_at_ap: r,
                active_gains: gains,
                decision,
            });
            Ok(r)
        };

    let muted = GainVector::zeros(n);
    for c in 0..n {
        let r = observe(world, c, muted.clone(), format!("direct h[{c},{ap}]"))?;
        est.set(c, ap, r / tone, EntryStatus::Measured);
    }

    let mut first: Vec<usize> = layers.members(1);
    first.push(ap);
    for &r in &first {
        let g = muted.with(r, known_gain);
        let reading = observe(world, r, g, format!("self h[{r},{r}]"))?;
        let direct = est.h_est[(r, ap)];
        if reading > 0.0 && direct > 0.0 {
            let v = ((1.0 - tone * direct / reading) / known_gain).max(0.0);
            est.set(r, r, v, EntryStatus::Measured);
        }
    }

    // AP reading per unit photocurrent at each chain member, one entry per nested sub-chain
    let mut phi_cache: std::collections::HashMap<Vec<usize>, Vec<f64>> = Default::default();
    for layer in 2..=layers.depth() {
        for t in layers.members(layer) {
            let chain = relay_chain(prior, &layers, t);
            let mut inferred: Vec<f64> = Vec::with_capacity(chain.len());
            for j in 0..chain.len() {
                let sub = &chain[..=j];
                if !phi_cache.contains_key(sub) {
                    let mut gains = muted.clone();
                    for &c in sub {
                        gains = gains.with(c, known_gain);
                    }
                    let mut phi = Vec::with_capacity(sub.len());
                    for &c in sub {
                        let psi = observe(world, c, gains.clone(), format!("relay response of {c} in chain {sub:?}"))?;
                        phi.push(known_gain * psi / tone);
                    }
                    phi_cache.insert(sub.to_vec(), phi);
                }
                let phi = &phi_cache[sub];
                let mut gains = muted.clone();
                for &c in sub {
                    gains = gains.with(c, known_gain);
                }
                let cj = chain[j];
                let reading = observe(world, t, gains, format!("h[{t},{cj}] via {sub:?}"))?;
                let mut rest = reading / tone - est.h_est[(t, ap)];
                for i in 0..j {
                    rest -= phi[i] * inferred[i];
                }
                let v = if phi[j] > 0.0 { (rest / phi[j]).max(0.0) } else { 0.0 };
                inferred.push(v);
                if est.status[(t, cj)] == EntryStatus::Unknown {
                    est.set(t, cj, v, EntryStatus::Inferred);
                }
            }
        }
    }
    Ok(ProbeReport { estimate: est, layers, observations: obs })
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockageStatus {
    Clear,
    /// Channel from the first EA to the second is blocked.
    Localized(usize, usize),
    /// Expected tone at this EA is buried in AP noise.
    Inconclusive(usize),
}

#[derive(Debug, Clone)]
pub struct BlockageOutcome {
    pub status: BlockageStatus,
    pub observations: Vec<ProbeObservation>,
}

#[derive(Debug, Clone, Copy)]
pub struct DetectionSettings {
    pub tone: f64,
    /// Fraction of the expected reading that counts as received.
    pub detect_fraction: f64,
    /// AP noise RMS; an expected tone below ten times this is inconclusive.
    pub ap_noise_rms: f64,
}

impl Default for DetectionSettings {
    fn default() -> Self {
        Self { tone: 1.0, detect_fraction: 0.5, ap_noise_rms: 0.0 }
    }
}

/// Walk `path` (entry first, AP's EA last) from the AP outwards, one tone per hop.
pub fn detect_blockage(
    path: &[usize],
    world: &mut ProbeWorld<'_>,
    last_known: &ChannelMatrix,
    gains: &GainVector,
    settings: &DetectionSettings,
) -> Result<BlockageOutcome> {
    if path.len() < 2 || *path.last().unwrap() != world.ap_ea {
        return Err(OweError::domain("path", "needs at least two EAs and must end at the AP's EA"));
    }
    let mut observations = Vec::new();
    for k in (0..path.len() - 1).rev() {
        let ea = path[k];
        let g = gains.with(ea, 0.0);
        let expected = ProbeWorld::new(last_known, world.ap_ea, 0.0, 0).read(ea, settings.tone, &g)?;
        if expected < 10.0 * settings.ap_noise_rms || expected <= 0.0 {
            return Ok(BlockageOutcome { status: BlockageStatus::Inconclusive(ea), observations });
        }
        let got = world.read(ea, settings.tone, &g)?;
        let pass = got >= settings.detect_fraction * expected;
        observations.push(ProbeObservation {
            emitting_ea: ea,
            tone_amplitude: settings.tone,
            received_at_ap: got,
            active_gains: g,
            decision: format!("{} (expected {expected:e})", if pass { "received" } else { "missing" }),
        });
        if !pass {
            return Ok(BlockageOutcome { status: BlockageStatus::Localized(ea, path[k + 1]), observations });
        }
    }
    Ok(BlockageOutcome { status: BlockageStatus::Clear, observations })
}

#[derive(Debug, Clone)]
pub enum RerouteOutcome {
    Rerouted { result: OptResult, snr: f64 },
    CoverageLoss,
}

/// Re-optimize on the estimate with the blocked channel removed.
#[allow(clippy::too_many_arguments)]
pub fn reroute_after_blockage(
    last_known: &ChannelMatrix,
    blocked: (usize, usize),
    link: &BssLink,
    noise: &NoiseVectors,
    model: NoiseModel,
    bounds: GainBounds,
    schedule: AnnealSchedule,
) -> Result<(ChannelMatrix, RerouteOutcome)> {
    let updated = last_known.with_entry(blocked.0, blocked.1, 0.0)?;
    let result =
        optimize_single_bss(&SingleBssProblem { h: &updated, link, noise, model, bounds, schedule, g0: None })?;
    let snr = link_snr(&updated, &result.best_gains, link, noise, model);
    let outcome = if snr > 0.0 && snr.is_finite() || snr == f64::INFINITY {
        RerouteOutcome::Rerouted { result, snr }
    } else {
        RerouteOutcome::CoverageLoss
    };
    Ok((updated, outcome))
}
