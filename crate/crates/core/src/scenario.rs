//! Versioned TOML scenario files.
//!
//! EAs are numbered from 1 in files and reports (row by row for grids) and
//! from 0 in the library API.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::circuit::{EaCircuitParams, NoiseBudget};
use crate::error::{OweError, Result};
use crate::ether::{BssLink, NoiseCombination, NoiseModel, NoiseVectors};
use crate::layout::{OpticsParams, RoomLayout};
use crate::optimizer::{AnnealSchedule, GainBounds, Projection};
use crate::radiometry::Pose;

pub const SCHEMA_VERSION: u32 = 1;
const REQUIRED: [&str; 2] = ["version", "layout"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    pub layout: LayoutSpec,
    #[serde(default)]
    pub optics: OpticsSpec,
    #[serde(default)]
    pub circuit: EaCircuitParams,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub numerics: NumericsSpec,
    #[serde(default)]
    pub experiment: ExperimentSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSpec {
    /// Floor footprint `[x, y]` in meters; omit for an open floor.
    pub room_m: Option<[f64; 2]>,
    #[serde(default = "default_ceiling")]
    pub ceiling_height_m: f64,
    pub grid: Option<GridSpec>,
    pub eas: Option<Vec<EaSpec>>,
}

fn default_ceiling() -> f64 {
    2.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    #[serde(default = "default_spacing")]
    pub spacing_m: f64,
    /// Position of EA1; centred in the room when omitted.
    pub origin_m: Option<[f64; 2]>,
}

fn default_spacing() -> f64 {
    1.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EaSpec {
    pub position_m: [f64; 3],
    /// Optical axis; straight down when omitted.
    pub axis: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpticsSpec {
    pub half_power_angle_deg: f64,
    pub acceptance_angle_deg: f64,
    pub pd_area_m2: f64,
    pub concentrator_index: f64,
    pub floor_reflectivity: f64,
}

impl Default for OpticsSpec {
    fn default() -> Self {
        Self {
            half_power_angle_deg: 19.65,
            acceptance_angle_deg: 34.21,
            pd_area_m2: 1e-4,
            concentrator_index: 1.5,
            floor_reflectivity: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub entries: Vec<EntrySpec>,
    pub ap_ea: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntrySpec {
    pub ea: usize,
    #[serde(default = "default_photocurrent")]
    pub photocurrent_a: f64,
}

fn default_photocurrent() -> f64 {
    26e-6
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub t0: f64,
    pub alpha: f64,
    pub t_min: f64,
    pub max_iter: usize,
    pub step_scale: f64,
    pub seed: u64,
    pub restarts: usize,
    pub perturb_count: usize,
    pub projection: Projection,
    pub g_max: f64,
    pub record_trace: bool,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        let s = AnnealSchedule::default();
        Self {
            t0: s.t0,
            alpha: s.alpha,
            t_min: s.t_min,
            max_iter: s.max_iter,
            step_scale: s.step_scale,
            seed: s.rng_seed,
            restarts: s.restarts,
            perturb_count: s.perturb_count,
            projection: s.projection,
            g_max: GainBounds::default().g_max,
            record_trace: s.record_trace,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericsSpec {
    pub integration_cell_m: f64,
    pub integration_extent_m: f64,
    pub clip_floor_to_room: bool,
    pub margin: f64,
    pub noise_combination: NoiseCombination,
    /// Received power at which the per-EA noise budget is evaluated.
    pub noise_reference_power_w: f64,
    /// Constant AP receiver noise; 0 leaves it out.
    pub ap_noise_a: f64,
}

impl Default for NumericsSpec {
    fn default() -> Self {
        Self {
            integration_cell_m: 0.02,
            integration_extent_m: 5.0,
            clip_floor_to_room: true,
            margin: 0.05,
            noise_combination: NoiseCombination::Coherent,
            noise_reference_power_w: 52e-6,
            ap_noise_a: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Coverage,
    SingleBss,
    MultiBss,
    Sweep,
    Blockage,
    Probe,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Coverage => "coverage",
            Self::SingleBss => "single-bss",
            Self::MultiBss => "multi-bss",
            Self::Sweep => "sweep",
            Self::Blockage => "blockage",
            Self::Probe => "probe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: Option<ExperimentKind>,
    pub coverage: CoverageSpec,
    pub single_bss: SingleBssSpec,
    pub sweep: SweepSpec,
    pub blockage: BlockageSpec,
    pub probe: ProbeSpec,
}

/// Which inter-EA links the coverage line keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LineCoupling {
    /// Self channels and links towards later hops only.
    #[default]
    Forward,
    /// Every channel in both directions.
    Bidirectional,
    /// Self channels and the link to the next hop only.
    Adjacent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageSpec {
    /// Optical power of the first EA in the line, which acts as the source.
    pub source_power_w: f64,
    pub pa_gains: Vec<f64>,
    pub coupling: LineCoupling,
    /// Set false to drop self channels, which leaves the loop weak enough to compare with the chain recursion.
    pub self_channels: bool,
    /// Let the source's diffuse light reach every hop, not just the first.
    pub source_reaches_all_hops: bool,
}

impl Default for CoverageSpec {
    fn default() -> Self {
        Self {
            source_power_w: 8.1,
            pa_gains: vec![10.0, 40.0, 70.0],
            coupling: LineCoupling::Forward,
            self_channels: true,
            source_reaches_all_hops: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SingleBssSpec {
    /// Entry EAs to run one after another with the first link's AP and photocurrent.
    pub entries: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub points: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self { ratio_min: 0.01, ratio_max: 10.0, points: 13 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockageSpec {
    /// EAs from the entry to the AP's EA.
    pub path: Vec<usize>,
    /// Channel `[from, to]` to block in the true world.
    pub blocked_edge: Option<[usize; 2]>,
    /// Fraction of the expected tone that counts as received.
    pub detect_fraction: f64,
    pub tone_a: f64,
}

impl Default for BlockageSpec {
    fn default() -> Self {
        Self { path: Vec::new(), blocked_edge: None, detect_fraction: 0.5, tone_a: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSpec {
    /// Relay gain during probing as a fraction of the equal-gain stability limit.
    pub known_gain_fraction: f64,
    pub tone_a: f64,
    /// Graph edge threshold relative to the largest off-diagonal channel.
    pub threshold_ratio: f64,
    /// Relative measurement noise; 0 for an ideal receiver.
    pub relative_noise: f64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self { known_gain_fraction: 0.5, tone_a: 1.0, threshold_ratio: 1e-3, relative_noise: 0.0 }
    }
}

pub fn parse_scenario(text: &str) -> Result<Scenario> {
    parse_named(text, "<scenario>")
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| OweError::io(path, e))?;
    parse_named(&text, &path.display().to_string())
}

fn parse_named(text: &str, origin: &str) -> Result<Scenario> {
    let parse_err = |message: String| OweError::Parse { path: origin.to_string(), message };
    let table: toml::Table = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    let missing: Vec<&str> = REQUIRED.iter().copied().filter(|k| !table.contains_key(*k)).collect();
    if !missing.is_empty() {
        return Err(parse_err(format!("missing required fields: {}", missing.join(", "))));
    }
    let scenario: Scenario = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    scenario.validate()?;
    Ok(scenario)
}

impl Scenario {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(OweError::Scenario(format!("version {} unsupported, expected {SCHEMA_VERSION}", self.version)));
        }
        let layout = self.room_layout()?;
        layout.validate()?;
        let n = layout.n();
        let check = |what: &str, ea: usize| {
            if ea == 0 || ea > n {
                Err(OweError::Scenario(format!("{what} EA{ea} out of range 1..={n}")))
            } else {
                Ok(())
            }
        };
        for (k, link) in self.links.iter().enumerate() {
            check(&format!("links[{k}].ap_ea:"), link.ap_ea)?;
            if link.entries.is_empty() {
                return Err(OweError::Scenario(format!("links[{k}] has no entries")));
            }
            for e in &link.entries {
                check(&format!("links[{k}].entries.ea:"), e.ea)?;
                if !(e.photocurrent_a >= 0.0) {
                    return Err(OweError::Scenario(format!(
                        "links[{k}] photocurrent {} must be >= 0",
                        e.photocurrent_a
                    )));
                }
            }
        }
        for &e in &self.experiment.single_bss.entries {
            check("experiment.single_bss.entries:", e)?;
        }
        for &e in &self.experiment.blockage.path {
            check("experiment.blockage.path:", e)?;
        }
        if let Some([a, b]) = self.experiment.blockage.blocked_edge {
            check("experiment.blockage.blocked_edge:", a)?;
            check("experiment.blockage.blocked_edge:", b)?;
        }
        let sw = &self.experiment.sweep;
        if !(sw.ratio_min > 0.0 && sw.ratio_max >= sw.ratio_min && sw.points >= 1) {
            return Err(OweError::Scenario("sweep needs 0 < ratio_min <= ratio_max and points >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.numerics.margin) {
            return Err(OweError::Scenario(format!("margin {} not in [0, 1)", self.numerics.margin)));
        }
        if !(self.numerics.ap_noise_a >= 0.0 && self.numerics.noise_reference_power_w >= 0.0) {
            return Err(OweError::Scenario("noise settings must be >= 0".into()));
        }
        if !(self.optimizer.g_max > 0.0) {
            return Err(OweError::Scenario(format!("g_max {} must be positive", self.optimizer.g_max)));
        }
        self.circuit.validate()?;
        self.schedule().validate()?;
        self.optics_params().ea_optics(&layout)?;
        Ok(())
    }

    pub fn room_layout(&self) -> Result<RoomLayout> {
        let l = &self.layout;
        match (&l.grid, &l.eas) {
            (Some(g), None) => {
                if g.nx == 0 || g.ny == 0 || !(g.spacing_m > 0.0) {
                    return Err(OweError::Scenario("grid needs nx, ny >= 1 and positive spacing".into()));
                }
                let origin = match (g.origin_m, l.room_m) {
                    (Some(o), _) => o,
                    (None, Some([x, y])) => {
                        [0.5 * (x - (g.nx - 1) as f64 * g.spacing_m), 0.5 * (y - (g.ny - 1) as f64 * g.spacing_m)]
                    }
                    (None, None) => [0.0, 0.0],
                };
                Ok(RoomLayout::grid(g.nx, g.ny, g.spacing_m, origin, l.ceiling_height_m, l.room_m))
            }
            (None, Some(eas)) => {
                let poses = eas
                    .iter()
                    .map(|e| Pose::new(e.position_m, e.axis.unwrap_or([0.0, 0.0, -1.0])))
                    .collect::<Result<Vec<_>>>()?;
                Ok(RoomLayout { room: l.room_m, ceiling_height_m: l.ceiling_height_m, eas: poses })
            }
            _ => Err(OweError::Scenario("layout needs exactly one of `grid` or `eas`".into())),
        }
    }

    pub fn optics_params(&self) -> OpticsParams {
        let o = &self.optics;
        OpticsParams {
            half_power_angle_rad: o.half_power_angle_deg.to_radians(),
            acceptance_angle_rad: o.acceptance_angle_deg.to_radians(),
            pd_area_m2: o.pd_area_m2,
            concentrator_index: o.concentrator_index,
            floor_reflectivity: o.floor_reflectivity,
            integration_cell_m: self.numerics.integration_cell_m,
            integration_extent_m: self.numerics.integration_extent_m,
            clip_to_room: self.numerics.clip_floor_to_room,
        }
    }

    pub fn schedule(&self) -> AnnealSchedule {
        let o = &self.optimizer;
        AnnealSchedule {
            t0: o.t0,
            alpha: o.alpha,
            t_min: o.t_min,
            max_iter: o.max_iter,
            step_scale: o.step_scale,
            rng_seed: o.seed,
            restarts: o.restarts,
            perturb_count: o.perturb_count,
            projection: o.projection,
            record_trace: o.record_trace,
        }
    }

    pub fn bounds(&self) -> GainBounds {
        GainBounds { g_max: self.optimizer.g_max, margin: self.numerics.margin }
    }

    pub fn noise_model(&self) -> NoiseModel {
        NoiseModel { combination: self.numerics.noise_combination, ap_noise_a: self.numerics.ap_noise_a }
    }

    pub fn noise_budget(&self) -> Result<NoiseBudget> {
        NoiseBudget::evaluate(self.numerics.noise_reference_power_w, &self.circuit)
    }

    pub fn noise_vectors(&self, n: usize) -> Result<NoiseVectors> {
        Ok(NoiseVectors::uniform(n, &self.noise_budget()?))
    }

    /// Links as library objects over `n` EAs.
    pub fn bss_links(&self, n: usize) -> Result<Vec<BssLink>> {
        self.links
            .iter()
            .map(|l| {
                let mut w = vec![0.0; n];
                for e in &l.entries {
                    w[e.ea - 1] += e.photocurrent_a;
                }
                BssLink::new(w, l.ap_ea - 1)
            })
            .collect()
    }

    /// SHA-256 of the canonical, fully defaulted form.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "version = 1\n[layout]\nroom_m = [5.0, 5.0]\n[layout.grid]\nnx = 3\nny = 3\n";

    #[test]
    fn empty_lists_required_fields() {
        let err = parse_scenario("").unwrap_err().to_string();
        assert!(err.contains("version") && err.contains("layout"), "{err}");
    }

    #[test]
    fn defaults_fill_in() {
        let s = parse_scenario(MINIMAL).unwrap();
        assert_eq!(s.circuit, EaCircuitParams::default());
        let l = s.room_layout().unwrap();
        assert_eq!(l.n(), 9);
        assert_eq!((l.eas[0].position.x, l.eas[8].position.y), (1.25, 3.75));
    }

    #[test]
    fn unknown_key_rejected_with_location() {
        let err = parse_scenario(&format!("{MINIMAL}[numerics]\nmargn = 0.1\n")).unwrap_err().to_string();
        assert!(err.contains("margn") && err.contains("line"), "{err}");
    }

    #[test]
    fn ap_index_out_of_range() {
        let text = format!("{MINIMAL}[[links]]\nap_ea = 12\nentries = [{{ ea = 1 }}]\n");
        let err = parse_scenario(&text).unwrap_err().to_string();
        assert!(err.contains("EA12"), "{err}");
    }

    #[test]
    fn round_trip_is_identity() {
        let text = format!(
            "{MINIMAL}[[links]]\nap_ea = 9\nentries = [{{ ea = 1, photocurrent_a = 2.6e-5 }}]\n[experiment]\nkind = \"single-bss\"\n"
        );
        let s = parse_scenario(&text).unwrap();
        let again = parse_scenario(&s.to_toml()).unwrap();
        assert_eq!(s, again);
        assert_eq!(s.digest(), again.digest());
    }

    #[test]
    fn grid_and_explicit_are_exclusive() {
        let text = "version = 1\n[layout]\neas = [{ position_m = [1.0, 1.0, 2.5] }]\n[layout.grid]\nnx = 1\nny = 1\n";
        let err = parse_scenario(text).unwrap_err().to_string();
        assert!(err.contains("exactly one"), "{err}");
    }
}
