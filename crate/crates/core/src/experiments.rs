//! Experiment drivers behind the CLI subcommands.
//!
//! Each driver takes a parsed scenario and returns typed results plus a
//! [`RunReport`] ready to be written out.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::circuit::{EaCircuitParams, NoiseBudget};
use crate::error::{OweError, Result};
use crate::ether::{to_db, BssLink, ChannelMatrix, GainVector, NoiseCombination, NoiseVectors, SolvedNetwork};
use crate::layout::RoomLayout;
use crate::optimizer::{
    equal_gain_baseline, link_snr, max_equal_gain, max_scale, optimize_multi_bss, optimize_single_bss, MultiBssProblem,
    MultiBssResult, OptResult, SingleBssProblem,
};
use crate::protocol::{
    detect_blockage, probe_from_scratch, reroute_after_blockage, significant_threshold, BlockageStatus,
    DetectionSettings, ProbeObservation, ProbeReport, ProbeWorld, RerouteOutcome,
};
use crate::report::{Cell, RunReport, RunStatus, Table};
use crate::scenario::{CoverageSpec, ExperimentKind, LineCoupling, Scenario};

/// Scenario channel matrix and layout.
pub fn scenario_channels(s: &Scenario) -> Result<(RoomLayout, ChannelMatrix)> {
    let layout = s.room_layout()?;
    let h = s.optics_params().channel_matrix(&layout, &s.circuit)?;
    Ok((layout, h))
}

fn db_cells(linear: f64) -> [Cell; 2] {
    [Cell::Db(to_db(linear)), Cell::Raw(linear)]
}

fn gains_table(
    name: &str,
    layout: &RoomLayout,
    circuit: &EaCircuitParams,
    g_max: f64,
    sets: &[(String, &GainVector)],
) -> Table {
    let mut t = Table::new(name, &["run", "ea", "x_m", "y_m", "gain", "pa_gain", "gain_fraction"]);
    for (label, g) in sets {
        for (i, gi) in g.as_slice().iter().enumerate() {
            let p = layout.eas[i].position;
            t.push(vec![
                label.clone().into(),
                (i + 1).into(),
                Cell::Raw(p.x),
                Cell::Raw(p.y),
                Cell::Raw(*gi),
                Cell::Raw(circuit.pa_gain_for_ea_gain(*gi)),
                Cell::Raw(gi / g_max),
            ]);
        }
    }
    t
}

// ---------------------------------------------------------------- coverage

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRow {
    pub pa_gain: f64,
    pub hop: usize,
    pub snr_full: f64,
    pub snr_chain: f64,
}

impl CoverageRow {
    pub fn divergence_db(&self) -> f64 {
        to_db(self.snr_full) - to_db(self.snr_chain)
    }
}

#[derive(Debug, Clone)]
pub struct CoverageResult {
    pub rows: Vec<CoverageRow>,
    pub spectral_radius: Vec<f64>,
}

/// Channels among the relays of a line whose first EA is the source.
pub fn line_relay_matrix(h: &ChannelMatrix, coupling: LineCoupling, self_channels: bool) -> Result<ChannelMatrix> {
    let n = h.n() - 1;
    ChannelMatrix::new(DMatrix::from_fn(n, n, |i, j| {
        let keep = match coupling {
            LineCoupling::Forward => j >= i,
            LineCoupling::Bidirectional => true,
            LineCoupling::Adjacent => j == i || j == i + 1,
        } && (self_channels || i != j);
        if keep {
            h.get(i + 1, j + 1)
        } else {
            0.0
        }
    }))
}

fn snr_from(signal: f64, noise: f64) -> f64 {
    if signal == 0.0 {
        0.0
    } else if noise == 0.0 {
        f64::INFINITY
    } else {
        (signal / noise).powi(2)
    }
}

/// Per-hop SNR along a line at one common PA gain.
///
/// With a nonzero gain this is the LED drive-current SNR. A muted relay has
/// no drive signal, so its front-end SNR is reported instead.
pub fn coverage_at_gain(
    h_full: &ChannelMatrix,
    circuit: &EaCircuitParams,
    spec: &CoverageSpec,
    budget_power_w: f64,
    pa_gain: f64,
    combination: NoiseCombination,
) -> Result<(Vec<CoverageRow>, f64)> {
    let hops = h_full.n() - 1;
    let hr = line_relay_matrix(h_full, spec.coupling, spec.self_channels)?;
    let g_ea = circuit.ea_gain_for_pa_gain(pa_gain);
    let gains = GainVector::uniform(hops, g_ea);
    let budget = if pa_gain > 0.0 {
        NoiseBudget::evaluate(budget_power_w, &circuit.with_pa_gain(pa_gain))?
    } else {
        NoiseBudget::evaluate(budget_power_w, circuit)?
    };
    let noise = NoiseVectors::uniform(hops, &budget);
    let net = match SolvedNetwork::new(&hr, &gains, 0.0) {
        Ok(net) => net,
        Err(OweError::Unstable { .. }) => {
            return Err(OweError::GainInfeasible { requested: g_ea, max_feasible: max_equal_gain(&hr, 0.0)? })
        }
        Err(e) => return Err(e),
    };
    let source_current = spec.source_power_w / circuit.led_w_per_a();
    let x = DVector::from_fn(hops, |i, _| {
        if i == 0 || spec.source_reaches_all_hops {
            h_full.get(0, i + 1) * source_current
        } else {
            0.0
        }
    });
    let y = net.signal(&x);
    let n_dep = budget.gain_dependent();
    let n_add = budget.n_dcdc_a;

    let mut rows = Vec::with_capacity(hops);
    let (mut s_in, mut n_in) = (x[0], 0.0);
    for i in 0..hops {
        let full = if g_ea > 0.0 {
            snr_from(g_ea * y[i], net.led_noise_at(i, &noise, combination))
        } else {
            let front = match combination {
                NoiseCombination::Coherent => net.noise_at(i, &noise, combination) + n_dep,
                NoiseCombination::Quadrature => net.noise_at(i, &noise, combination).hypot(n_dep),
            };
            snr_from(y[i], front)
        };
        // chain recursion: direct source light plus the previous hop, no feedback
        let out_noise = match combination {
            NoiseCombination::Coherent => g_ea * (n_in + n_dep) + n_add,
            NoiseCombination::Quadrature => (g_ea * n_in).hypot(g_ea * n_dep + n_add),
        };
        let chain = if g_ea > 0.0 {
            snr_from(g_ea * s_in, out_noise)
        } else {
            let front = match combination {
                NoiseCombination::Coherent => n_in + n_dep,
                NoiseCombination::Quadrature => n_in.hypot(n_dep),
            };
            snr_from(s_in, front)
        };
        rows.push(CoverageRow { pa_gain, hop: i + 1, snr_full: full, snr_chain: chain });
        if i + 1 < hops {
            let adj = h_full.get(i + 1, i + 2);
            s_in = x[i + 1] + adj * g_ea * s_in;
            n_in = adj * out_noise;
        }
    }
    Ok((rows, net.spectral_radius))
}

pub fn run_coverage(s: &Scenario) -> Result<(CoverageResult, RunReport)> {
    let (_, h) = scenario_channels(s)?;
    if h.n() < 2 {
        return Err(OweError::Scenario("coverage needs a source EA and at least one relay".into()));
    }
    if let Some(g) = &s.layout.grid {
        if g.nx > 1 && g.ny > 1 {
            return Err(OweError::Scenario(format!("coverage needs a line of EAs, got a {}x{} grid", g.nx, g.ny)));
        }
    }
    let spec = &s.experiment.coverage;
    let mut rows = Vec::new();
    let mut radii = Vec::new();
    for &pa in &spec.pa_gains {
        let (r, rho) = coverage_at_gain(
            &h,
            &s.circuit,
            spec,
            s.numerics.noise_reference_power_w,
            pa,
            s.numerics.noise_combination,
        )?;
        rows.extend(r);
        radii.push(rho);
    }
    let mut report = RunReport::new(ExperimentKind::Coverage, s);
    report.note("coupling", format!("{:?}", spec.coupling).to_lowercase());
    report.note("self_channels", spec.self_channels);
    report.note("source_reaches_all_hops", spec.source_reaches_all_hops);
    let mut t = Table::new(
        "coverage",
        &["pa_gain", "hop", "snr_db", "snr", "chain_snr_db", "chain_snr", "divergence_db", "divergence_flag"],
    );
    for r in &rows {
        let [a, b] = db_cells(r.snr_full);
        let [c, d] = db_cells(r.snr_chain);
        let div = if r.snr_full == r.snr_chain { 0.0 } else { r.divergence_db() };
        let flag = if div.is_finite() && div.abs() <= 1.0 { "" } else { "diverges" };
        t.push(vec![Cell::Raw(r.pa_gain), r.hop.into(), a, b, c, d, Cell::Db(div), flag.into()]);
    }
    report.tables.push(t);
    let mut st = Table::new("stability", &["pa_gain", "spectral_radius"]);
    for (pa, rho) in spec.pa_gains.iter().zip(&radii) {
        st.push(vec![Cell::Raw(*pa), Cell::Raw(*rho)]);
    }
    report.tables.push(st);
    Ok((CoverageResult { rows, spectral_radius: radii }, report))
}

// ---------------------------------------------------------------- single BSS

#[derive(Debug, Clone)]
pub struct SingleBssRow {
    pub entry_ea: usize,
    pub ap_ea: usize,
    pub snr: f64,
    pub baseline_snr: f64,
    pub result: OptResult,
}

impl SingleBssRow {
    pub fn improvement_db(&self) -> f64 {
        to_db(self.snr) - to_db(self.baseline_snr)
    }
}

#[derive(Debug, Clone)]
pub struct SingleBssResult {
    pub h: ChannelMatrix,
    pub baseline: GainVector,
    pub rows: Vec<SingleBssRow>,
}

fn single_link(s: &Scenario, n: usize) -> Result<BssLink> {
    let links = s.bss_links(n)?;
    if links.len() != 1 {
        return Err(OweError::Scenario(format!("this experiment needs exactly one link, found {}", links.len())));
    }
    Ok(links.into_iter().next().unwrap())
}

pub fn run_single_bss(s: &Scenario) -> Result<(SingleBssResult, RunReport)> {
    let (layout, h) = scenario_channels(s)?;
    let n = h.n();
    let link = single_link(s, n)?;
    let v = s.links[0].entries[0].photocurrent_a;
    let entries: Vec<usize> = if s.experiment.single_bss.entries.is_empty() {
        link.entries()
    } else {
        s.experiment.single_bss.entries.iter().map(|e| e - 1).collect()
    };
    let noise = s.noise_vectors(n)?;
    let model = s.noise_model();
    let bounds = s.bounds();
    let baseline = equal_gain_baseline(&h, &bounds)?;
    let mut rows = Vec::new();
    for &e in &entries {
        let l = if s.experiment.single_bss.entries.is_empty() && entries.len() == link.entries().len() {
            link.clone()
        } else {
            BssLink::single(n, e, v, link.ap_ea_index)?
        };
        let result = optimize_single_bss(&SingleBssProblem {
            h: &h,
            link: &l,
            noise: &noise,
            model,
            bounds,
            schedule: s.schedule(),
            g0: None,
        })?;
        let snr = link_snr(&h, &result.best_gains, &l, &noise, model);
        let baseline_snr = link_snr(&h, &baseline, &l, &noise, model);
        rows.push(SingleBssRow { entry_ea: e, ap_ea: link.ap_ea_index, snr, baseline_snr, result });
        if s.experiment.single_bss.entries.is_empty() {
            break;
        }
    }

    let mut report = RunReport::new(ExperimentKind::SingleBss, s);
    report.note("margin", bounds.margin);
    report.note("baseline_gain", format!("{:e}", baseline.max()));
    let mut t = Table::new("snr", &["entry_ea", "snr_db", "improvement_db"]);
    let mut d = Table::new(
        "snr_detail",
        &[
            "entry_ea",
            "ap_ea",
            "snr",
            "baseline_snr_db",
            "baseline_snr",
            "objective",
            "accepted",
            "rejected",
            "restart",
        ],
    );
    for r in &rows {
        t.push(vec![(r.entry_ea + 1).into(), Cell::Db(to_db(r.snr)), Cell::Db(r.improvement_db())]);
        let [bd, bl] = db_cells(r.baseline_snr);
        d.push(vec![
            (r.entry_ea + 1).into(),
            (r.ap_ea + 1).into(),
            Cell::Raw(r.snr),
            bd,
            bl,
            Cell::Raw(r.result.best_objective),
            r.result.accepted_moves.into(),
            r.result.rejected_moves.into(),
            r.result.restart.into(),
        ]);
    }
    report.tables.push(t);
    report.tables.push(d);
    let mut sets: Vec<(String, &GainVector)> =
        rows.iter().map(|r| (format!("entry{}", r.entry_ea + 1), &r.result.best_gains)).collect();
    sets.push(("baseline".into(), &baseline));
    report.tables.push(gains_table("gains", &layout, &s.circuit, bounds.g_max, &sets));
    if let Some(trace) = rows.first().and_then(|r| r.result.trace.as_ref()) {
        report.tables.push(trace_table(trace));
    }
    Ok((SingleBssResult { h, baseline, rows }, report))
}

fn trace_table(trace: &[crate::optimizer::TraceRow]) -> Table {
    let mut t = Table::new("trace", &["iteration", "temperature", "objective", "accepted"]);
    for r in trace {
        t.push(vec![
            r.iteration.into(),
            Cell::Raw(r.temperature),
            Cell::Raw(r.objective),
            Cell::Int(r.accepted as i64),
        ]);
    }
    t
}

// ---------------------------------------------------------------- multi BSS

#[derive(Debug, Clone)]
pub struct MultiBssRow {
    pub link: usize,
    pub entry_eas: Vec<usize>,
    pub ap_ea: usize,
    pub gamma_star: f64,
    pub sinr: f64,
    /// Interference power over received signal power at this link's AP.
    pub interference_ratio: f64,
}

impl MultiBssRow {
    pub fn degradation_db(&self) -> f64 {
        to_db(self.sinr) - to_db(self.gamma_star)
    }
}

#[derive(Debug, Clone)]
pub struct MultiBssOutcome {
    pub rows: Vec<MultiBssRow>,
    pub result: MultiBssResult,
}

pub fn multi_bss_on(
    h: &ChannelMatrix,
    links: &[BssLink],
    noise: &NoiseVectors,
    s: &Scenario,
) -> Result<MultiBssOutcome> {
    let model = s.noise_model();
    let result = optimize_multi_bss(&MultiBssProblem {
        h,
        links,
        noise,
        model,
        bounds: s.bounds(),
        schedule: s.schedule(),
        g0: None,
    })?;
    let net = SolvedNetwork::new(h, &result.joint.best_gains, 0.0)?;
    let rows = links
        .iter()
        .enumerate()
        .map(|(i, li)| {
            let sig = net.link_signal(li);
            let interf: f64 =
                links.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, lj)| net.interference(lj, li).powi(2)).sum();
            MultiBssRow {
                link: i,
                entry_eas: li.entries(),
                ap_ea: li.ap_ea_index,
                gamma_star: result.gamma_star[i],
                sinr: result.sinr[i],
                interference_ratio: if sig == 0.0 { f64::INFINITY } else { interf / (sig * sig) },
            }
        })
        .collect();
    Ok(MultiBssOutcome { rows, result })
}

pub fn run_multi_bss(s: &Scenario) -> Result<(MultiBssOutcome, RunReport)> {
    let (layout, h) = scenario_channels(s)?;
    let links = s.bss_links(h.n())?;
    let noise = s.noise_vectors(h.n())?;
    let out = multi_bss_on(&h, &links, &noise, s)?;
    let mut report = RunReport::new(ExperimentKind::MultiBss, s);
    report.note("margin", s.numerics.margin);
    let mut t = Table::new(
        "multi_bss",
        &[
            "link",
            "entry_eas",
            "ap_ea",
            "single_snr_db",
            "sinr_db",
            "degradation_db",
            "interference_ratio",
            "single_snr",
            "sinr",
        ],
    );
    for r in &out.rows {
        let entries = r.entry_eas.iter().map(|e| (e + 1).to_string()).collect::<Vec<_>>().join(" ");
        t.push(vec![
            (r.link + 1).into(),
            entries.into(),
            (r.ap_ea + 1).into(),
            Cell::Db(to_db(r.gamma_star)),
            Cell::Db(to_db(r.sinr)),
            Cell::Db(r.degradation_db()),
            Cell::Raw(r.interference_ratio),
            Cell::Raw(r.gamma_star),
            Cell::Raw(r.sinr),
        ]);
    }
    report.tables.push(t);
    let mut sets: Vec<(String, &GainVector)> = vec![("joint".into(), &out.result.joint.best_gains)];
    for (i, r) in out.result.single.iter().enumerate() {
        sets.push((format!("single{}", i + 1), &r.best_gains));
    }
    report.tables.push(gains_table("gains", &layout, &s.circuit, s.optimizer.g_max, &sets));
    Ok((out, report))
}

// ---------------------------------------------------------------- power sweep

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub ratio: f64,
    pub rows: Vec<MultiBssRow>,
}

pub fn sweep_ratios(s: &Scenario) -> Vec<f64> {
    let sw = &s.experiment.sweep;
    if sw.points == 1 {
        return vec![sw.ratio_min];
    }
    let (a, b) = (sw.ratio_min.ln(), sw.ratio_max.ln());
    (0..sw.points).map(|k| (a + (b - a) * k as f64 / (sw.points - 1) as f64).exp()).collect()
}

pub fn run_power_sweep(s: &Scenario) -> Result<(Vec<SweepPoint>, RunReport)> {
    let (_, h) = scenario_channels(s)?;
    let links = s.bss_links(h.n())?;
    if links.len() != 2 {
        return Err(OweError::Scenario(format!("the power sweep needs exactly two links, found {}", links.len())));
    }
    let noise = s.noise_vectors(h.n())?;
    let v1 = links[0].entry_weights.max();
    let v2 = links[1].entry_weights.max();
    if !(v1 > 0.0 && v2 > 0.0) {
        return Err(OweError::Scenario("both links need a positive photocurrent".into()));
    }
    let points: Vec<SweepPoint> = sweep_ratios(s)
        .into_par_iter()
        .map(|ratio| {
            let scaled = [links[0].clone(), links[1].scaled(ratio * v1 / v2)];
            multi_bss_on(&h, &scaled, &noise, s).map(|o| SweepPoint { ratio, rows: o.rows })
        })
        .collect::<Result<_>>()?;
    let mut report = RunReport::new(ExperimentKind::Sweep, s);
    report.note("photocurrent_link1_a", format!("{v1:e}"));
    let mut t = Table::new(
        "sweep",
        &[
            "ratio",
            "power_ratio_db",
            "degradation1_db",
            "degradation2_db",
            "interference_ratio1",
            "interference_ratio2",
            "sinr1_db",
            "sinr2_db",
        ],
    );
    for p in &points {
        t.push(vec![
            Cell::Raw(p.ratio),
            Cell::Db(20.0 * p.ratio.log10()),
            Cell::Db(p.rows[0].degradation_db()),
            Cell::Db(p.rows[1].degradation_db()),
            Cell::Raw(p.rows[0].interference_ratio),
            Cell::Raw(p.rows[1].interference_ratio),
            Cell::Db(to_db(p.rows[0].sinr)),
            Cell::Db(to_db(p.rows[1].sinr)),
        ]);
    }
    report.tables.push(t);
    Ok((points, report))
}

// ---------------------------------------------------------------- blockage

#[derive(Debug, Clone)]
pub struct BlockageRun {
    pub status: BlockageStatus,
    pub observations: Vec<ProbeObservation>,
    pub path_gains: GainVector,
    pub snr_before: f64,
    pub snr_blocked: f64,
    /// SNR on the blocked world after rerouting; `None` when nothing was rerouted.
    pub snr_after: Option<f64>,
    pub rerouted_gains: Option<GainVector>,
    /// Fresh optimum on the unblocked world, for the recovery gap.
    pub snr_unblocked_opt: Option<f64>,
    pub coverage_loss: bool,
}

/// Equal gain on every path EA except the AP's, as large as the margin allows.
pub fn path_gains(h: &ChannelMatrix, path: &[usize], s: &Scenario) -> Result<GainVector> {
    let mut dir = GainVector::zeros(h.n());
    for &p in &path[..path.len() - 1] {
        dir = dir.with(p, 1.0);
    }
    let scale = max_scale(h, &dir, s.numerics.margin)?.min(s.optimizer.g_max);
    GainVector::new(dir.as_slice().iter().map(|v| v * scale).collect())
}

pub fn run_blockage(s: &Scenario) -> Result<(BlockageRun, RunReport)> {
    let (layout, h) = scenario_channels(s)?;
    let n = h.n();
    let link = single_link(s, n)?;
    let spec = &s.experiment.blockage;
    let path: Vec<usize> = spec.path.iter().map(|e| e - 1).collect();
    if path.len() < 2 || *path.last().unwrap() != link.ap_ea_index {
        return Err(OweError::Scenario("blockage path needs two or more EAs and must end at the AP's EA".into()));
    }
    let noise = s.noise_vectors(n)?;
    let model = s.noise_model();
    let gains = path_gains(&h, &path, s)?;
    let world = match spec.blocked_edge {
        Some([a, b]) => h.with_entry(a - 1, b - 1, 0.0)?,
        None => h.clone(),
    };
    let snr_before = link_snr(&h, &gains, &link, &noise, model);
    let snr_blocked = link_snr(&world, &gains, &link, &noise, model);
    let settings = DetectionSettings {
        tone: spec.tone_a,
        detect_fraction: spec.detect_fraction,
        ap_noise_rms: s.numerics.ap_noise_a,
    };
    let mut probe_world = ProbeWorld::new(&world, link.ap_ea_index, 0.0, s.optimizer.seed);
    let detection = detect_blockage(&path, &mut probe_world, &h, &gains, &settings)?;

    let mut run = BlockageRun {
        status: detection.status.clone(),
        observations: detection.observations,
        path_gains: gains,
        snr_before,
        snr_blocked,
        snr_after: None,
        rerouted_gains: None,
        snr_unblocked_opt: None,
        coverage_loss: false,
    };
    if let BlockageStatus::Localized(a, b) = detection.status {
        let (_, outcome) = reroute_after_blockage(&h, (a, b), &link, &noise, model, s.bounds(), s.schedule())?;
        match outcome {
            RerouteOutcome::Rerouted { result, .. } => {
                run.snr_after = Some(link_snr(&world, &result.best_gains, &link, &noise, model));
                run.rerouted_gains = Some(result.best_gains);
                let fresh = optimize_single_bss(&SingleBssProblem {
                    h: &h,
                    link: &link,
                    noise: &noise,
                    model,
                    bounds: s.bounds(),
                    schedule: s.schedule(),
                    g0: None,
                })?;
                run.snr_unblocked_opt = Some(link_snr(&h, &fresh.best_gains, &link, &noise, model));
            }
            RerouteOutcome::CoverageLoss => run.coverage_loss = true,
        }
    }

    let mut report = RunReport::new(ExperimentKind::Blockage, s);
    report.status = if run.coverage_loss { RunStatus::CoverageLoss } else { RunStatus::Ok };
    report.note(
        "detection",
        match &run.status {
            BlockageStatus::Clear => "clear".to_string(),
            BlockageStatus::Localized(a, b) => format!("blocked EA{} -> EA{}", a + 1, b + 1),
            BlockageStatus::Inconclusive(e) => format!("inconclusive at EA{}", e + 1),
        },
    );
    report.tables.push(probe_log_table(&run.observations));
    let mut t = Table::new("snr", &["state", "snr_db", "snr"]);
    let mut add = |state: &str, v: f64| {
        let [a, b] = db_cells(v);
        t.push(vec![state.into(), a, b]);
    };
    add("before", run.snr_before);
    add("blocked", run.snr_blocked);
    if let Some(v) = run.snr_after {
        add("rerouted", v);
    }
    if let Some(v) = run.snr_unblocked_opt {
        add("unblocked_optimum", v);
    }
    report.tables.push(t);
    let mut sets: Vec<(String, &GainVector)> = vec![("before".into(), &run.path_gains)];
    if let Some(g) = &run.rerouted_gains {
        sets.push(("rerouted".into(), g));
    }
    report.tables.push(gains_table("gains", &layout, &s.circuit, s.optimizer.g_max, &sets));
    Ok((run, report))
}

fn probe_log_table(obs: &[ProbeObservation]) -> Table {
    let mut t = Table::new("probe_log", &["step", "emitting_ea", "gains_hash", "ap_reading_a", "decision"]);
    for (k, o) in obs.iter().enumerate() {
        t.push(vec![
            (k + 1).into(),
            (o.emitting_ea + 1).into(),
            o.gains_hash().into(),
            Cell::Raw(o.received_at_ap),
            o.decision.clone().into(),
        ]);
    }
    t
}

// ---------------------------------------------------------------- probe

pub fn run_probe(s: &Scenario) -> Result<(ProbeReport, RunReport)> {
    let (_, h) = scenario_channels(s)?;
    let link = single_link(s, h.n())?;
    let spec = &s.experiment.probe;
    let known_gain = spec.known_gain_fraction * max_equal_gain(&h, 0.0)?;
    let threshold = significant_threshold(&h, spec.threshold_ratio);
    let mut world = ProbeWorld::new(&h, link.ap_ea_index, spec.relative_noise, s.optimizer.seed);
    let rep = probe_from_scratch(&mut world, &h, threshold, known_gain, spec.tone_a)?;

    let mut report = RunReport::new(ExperimentKind::Probe, s);
    report.note("known_gain", format!("{known_gain:e}"));
    report.note("measurements", rep.observations.len());
    report.tables.push(probe_log_table(&rep.observations));
    let mut layers = Table::new("layers", &["ea", "layer"]);
    for (i, l) in rep.layers.layer_of.iter().enumerate() {
        layers.push(vec![(i + 1).into(), (*l).into()]);
    }
    report.tables.push(layers);
    let mut est = Table::new("estimate", &["from_ea", "to_ea", "status", "estimate", "true", "relative_error"]);
    for i in 0..h.n() {
        for j in 0..h.n() {
            if let Some(v) = rep.estimate.known(i, j) {
                let truth = h.get(i, j);
                let err = if truth == 0.0 { v.abs() } else { (v / truth - 1.0).abs() };
                est.push(vec![
                    (i + 1).into(),
                    (j + 1).into(),
                    rep.estimate.status[(i, j)].as_str().into(),
                    Cell::Raw(v),
                    Cell::Raw(truth),
                    Cell::Raw(err),
                ]);
            }
        }
    }
    report.tables.push(est);
    Ok((rep, report))
}

/// Dispatch on the experiment kind.
pub fn run(kind: ExperimentKind, s: &Scenario) -> Result<RunReport> {
    Ok(match kind {
        ExperimentKind::Coverage => run_coverage(s)?.1,
        ExperimentKind::SingleBss => run_single_bss(s)?.1,
        ExperimentKind::MultiBss => run_multi_bss(s)?.1,
        ExperimentKind::Sweep => run_power_sweep(s)?.1,
        ExperimentKind::Blockage => run_blockage(s)?.1,
        ExperimentKind::Probe => run_probe(s)?.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::parse_scenario;

    fn full(n: usize) -> ChannelMatrix {
        ChannelMatrix::new(DMatrix::from_fn(n, n, |i, j| 1.0 + (i * n + j) as f64)).unwrap()
    }

    #[test]
    fn relay_masks() {
        let h = full(4);
        let fwd = line_relay_matrix(&h, LineCoupling::Forward, true).unwrap();
        assert_eq!((fwd.get(0, 2), fwd.get(2, 0), fwd.get(1, 1)), (h.get(1, 3), 0.0, h.get(2, 2)));
        let adj = line_relay_matrix(&h, LineCoupling::Adjacent, false).unwrap();
        assert_eq!((adj.get(0, 1), adj.get(0, 2), adj.get(1, 1)), (h.get(1, 2), 0.0, 0.0));
        let both = line_relay_matrix(&h, LineCoupling::Bidirectional, true).unwrap();
        assert_eq!(both.get(2, 0), h.get(3, 1));
    }

    #[test]
    fn sweep_grid_is_logarithmic() {
        let mut s = parse_scenario("version = 1\n[layout.grid]\nnx = 2\nny = 1\n").unwrap();
        s.experiment.sweep.points = 4;
        s.experiment.sweep.ratio_max = 10.0;
        s.experiment.sweep.ratio_min = 0.01;
        let r = sweep_ratios(&s);
        assert_eq!(r.len(), 4);
        for (k, v) in r.iter().enumerate() {
            assert!((v.log10() - (k as f64 - 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn path_gains_leave_ap_muted() {
        let s = parse_scenario("version = 1\n[layout.grid]\nnx = 2\nny = 1\n").unwrap();
        let h =
            ChannelMatrix::from_rows(&[vec![2e-5, 1e-5, 0.0], vec![1e-5, 2e-5, 1e-5], vec![0.0, 1e-5, 2e-5]]).unwrap();
        let g = path_gains(&h, &[0, 1, 2], &s).unwrap();
        assert_eq!(g.as_slice()[2], 0.0);
        assert_eq!(g.as_slice()[0], g.as_slice()[1]);
        let rho = crate::ether::spectral_radius(&h, &g).unwrap();
        assert!(rho < 1.0 - s.numerics.margin && rho > (1.0 - s.numerics.margin) * (1.0 - 1e-6));
    }
}
