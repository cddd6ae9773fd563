//! EA analog chain: photodiode, TIA, PA, DC-DC converter and LED drive.
//!
//! Gain-dependent noise terms are all referred to the TIA input. The DC-DC
//! converter noise is added at the LED after the bias tee.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{OweError, Result};

/// Elementary charge, C.
pub const Q: f64 = 1.602176634e-19;
/// Boltzmann constant, J/K.
pub const K_B: f64 = 1.380649e-23;
/// Switching harmonics that carry a spectral peak.
pub const DCDC_HARMONICS: u32 = 3;
/// Peak standard deviation as a fraction of the switching frequency.
pub const DCDC_PEAK_WIDTH: f64 = 0.1;

/// Electrical parameters of one EA. Defaults are the reference design values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EaCircuitParams {
    pub responsivity_a_per_w: f64,
    pub dark_current_a: f64,
    pub shunt_resistance_ohm: f64,
    pub background_power_w: f64,
    pub bandwidth_hz: f64,
    pub temperature_k: f64,
    pub tia_feedback_ohm: f64,
    pub tia_voltage_noise_v_rthz: f64,
    pub tia_current_noise_a_rthz: f64,
    pub pa_input_ohm: f64,
    pub pa_feedback_ohm: f64,
    pub pa_voltage_noise_v_rthz: f64,
    pub pa_current_noise_a_rthz: f64,
    pub bias_tee_resistor_ohm: f64,
    pub bias_tee_inductor_h: f64,
    pub dcdc_peak_psd_v2_hz: f64,
    pub dcdc_floor_psd_v2_hz: f64,
    /// Calibrated so that the DC-DC noise comes out at 0.42 mA.
    pub dcdc_switching_freq_hz: f64,
    pub led_radiant_efficiency: f64,
    pub led_forward_voltage_v: f64,
}

impl Default for EaCircuitParams {
    fn default() -> Self {
        Self {
            responsivity_a_per_w: 0.5,
            dark_current_a: 2e-9,
            shunt_resistance_ohm: 100e6,
            background_power_w: 1e-6,
            bandwidth_hz: 20e6,
            temperature_k: 300.0,
            tia_feedback_ohm: 10e3,
            tia_voltage_noise_v_rthz: 1e-9,
            tia_current_noise_a_rthz: 2.5e-12,
            pa_input_ohm: 50.0,
            pa_feedback_ohm: 2e3,
            pa_voltage_noise_v_rthz: 3e-9,
            pa_current_noise_a_rthz: 10e-12,
            bias_tee_resistor_ohm: 5.0,
            bias_tee_inductor_h: 10e-6,
            dcdc_peak_psd_v2_hz: 1e-9,
            dcdc_floor_psd_v2_hz: 1e-12,
            dcdc_switching_freq_hz: 2.92e6,
            led_radiant_efficiency: 0.45,
            led_forward_voltage_v: 3.0,
        }
    }
}

impl EaCircuitParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("responsivity", self.responsivity_a_per_w),
            ("shunt resistance", self.shunt_resistance_ohm),
            ("bandwidth", self.bandwidth_hz),
            ("temperature", self.temperature_k),
            ("TIA feedback resistance", self.tia_feedback_ohm),
            ("PA input resistance", self.pa_input_ohm),
            ("bias tee resistance", self.bias_tee_resistor_ohm),
            ("bias tee inductance", self.bias_tee_inductor_h),
            ("switching frequency", self.dcdc_switching_freq_hz),
            ("LED forward voltage", self.led_forward_voltage_v),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(OweError::domain(name, format!("{v} must be positive")));
            }
        }
        let non_negative = [
            ("dark current", self.dark_current_a),
            ("background power", self.background_power_w),
            ("TIA voltage noise", self.tia_voltage_noise_v_rthz),
            ("TIA current noise", self.tia_current_noise_a_rthz),
            ("PA feedback resistance", self.pa_feedback_ohm),
            ("PA voltage noise", self.pa_voltage_noise_v_rthz),
            ("PA current noise", self.pa_current_noise_a_rthz),
            ("DC-DC peak PSD", self.dcdc_peak_psd_v2_hz),
            ("DC-DC floor PSD", self.dcdc_floor_psd_v2_hz),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(OweError::domain(name, format!("{v} must be non-negative")));
            }
        }
        if !(self.led_radiant_efficiency > 0.0 && self.led_radiant_efficiency <= 1.0) {
            return Err(OweError::domain(
                "LED radiant efficiency",
                format!("{} not in (0, 1]", self.led_radiant_efficiency),
            ));
        }
        Ok(())
    }

    /// Voltage gain of the PA stage, R_f/R_i.
    pub fn pa_gain(&self) -> f64 {
        self.pa_feedback_ohm / self.pa_input_ohm
    }

    pub fn with_pa_gain(self, pa_gain: f64) -> Self {
        Self { pa_feedback_ohm: pa_gain * self.pa_input_ohm, ..self }
    }

    /// EA current gain for a given PA gain with the other stages unchanged.
    pub fn ea_gain_for_pa_gain(&self, pa_gain: f64) -> f64 {
        pa_gain * self.tia_feedback_ohm / self.bias_tee_resistor_ohm
    }

    /// PA gain that realizes a given EA current gain.
    pub fn pa_gain_for_ea_gain(&self, ea_gain: f64) -> f64 {
        ea_gain * self.bias_tee_resistor_ohm / self.tia_feedback_ohm
    }

    /// Optical power emitted per ampere of LED current.
    pub fn led_w_per_a(&self) -> f64 {
        self.led_radiant_efficiency * self.led_forward_voltage_v
    }

    /// Photocurrent per ampere of transmitter LED current per unit optical power gain.
    pub fn current_to_current(&self) -> f64 {
        self.responsivity_a_per_w * self.led_w_per_a()
    }

    pub fn bias_tee_cutoff_hz(&self) -> f64 {
        self.bias_tee_resistor_ohm / (2.0 * PI * self.bias_tee_inductor_h)
    }

    fn four_ktb(&self) -> f64 {
        4.0 * K_B * self.temperature_k * self.bandwidth_hz
    }

    fn shot_variance(&self, received_power_w: f64) -> f64 {
        let i = self.responsivity_a_per_w * (received_power_w + self.background_power_w) + self.dark_current_a;
        2.0 * Q * i * self.bandwidth_hz
    }
}

/// Shot noise of the photodiode alone, A RMS.
pub fn pd_shot_noise(received_power_w: f64, p: &EaCircuitParams) -> f64 {
    p.shot_variance(received_power_w).sqrt()
}

pub fn pd_noise(received_power_w: f64, p: &EaCircuitParams) -> f64 {
    (p.shot_variance(received_power_w) + p.four_ktb() / p.shunt_resistance_ohm).sqrt()
}

/// Thermal noise of the TIA feedback resistor, A RMS.
pub fn tia_feedback_thermal_noise(p: &EaCircuitParams) -> f64 {
    (p.four_ktb() / p.tia_feedback_ohm).sqrt()
}

pub fn tia_input_noise(received_power_w: f64, p: &EaCircuitParams) -> f64 {
    let rf = p.tia_feedback_ohm;
    let en = p.tia_voltage_noise_v_rthz;
    let amp = (en * en / (rf * rf) + p.tia_current_noise_a_rthz.powi(2)) * p.bandwidth_hz;
    (p.shot_variance(received_power_w) + p.four_ktb() / rf + amp).sqrt()
}

/// Variances of the three PA noise contributions at the TIA input, A².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaNoiseTerms {
    pub resistor_thermal: f64,
    pub voltage: f64,
    pub current: f64,
}

impl PaNoiseTerms {
    pub fn total_rms(&self) -> f64 {
        (self.resistor_thermal + self.voltage + self.current).sqrt()
    }
}

pub fn pa_noise_terms(p: &EaCircuitParams) -> Result<PaNoiseTerms> {
    let g = p.pa_gain();
    if !(g > 0.0) {
        return Err(OweError::domain("PA gain", "noise referral needs a nonzero PA gain"));
    }
    let (rf, ri) = (p.pa_feedback_ohm, p.pa_input_ohm);
    let z2 = p.tia_feedback_ohm * p.tia_feedback_ohm;
    let noise_gain2 = ((1.0 + g) / g).powi(2);
    let par = rf * ri / (rf + ri);
    let b = p.bandwidth_hz;
    Ok(PaNoiseTerms {
        resistor_thermal: p.four_ktb() * rf / (g * g * z2) + p.four_ktb() * ri / z2,
        voltage: p.pa_voltage_noise_v_rthz.powi(2) / z2 * noise_gain2 * b,
        current: p.pa_current_noise_a_rthz.powi(2) * par * par / z2 * noise_gain2 * b,
    })
}

pub fn pa_noise_tia_referred(p: &EaCircuitParams) -> Result<f64> {
    Ok(pa_noise_terms(p)?.total_rms())
}

/// Converter current noise through the LED, A RMS.
///
/// Composite Simpson rule with a step no larger than a tenth of both the
/// peak width and the bias-tee cutoff.
pub fn dcdc_noise(p: &EaCircuitParams) -> f64 {
    let fsw = p.dcdc_switching_freq_hz;
    let sigma = DCDC_PEAK_WIDTH * fsw;
    let fc = p.bias_tee_cutoff_hz();
    let b = p.bandwidth_hz;
    let r = p.bias_tee_resistor_ohm;
    let psd = |f: f64| {
        let peaks: f64 = (1..=DCDC_HARMONICS)
            .map(|k| {
                let d = f - k as f64 * fsw;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .sum();
        let h2 = 1.0 / (1.0 + (f / fc).powi(2));
        (p.dcdc_peak_psd_v2_hz * peaks + p.dcdc_floor_psd_v2_hz) * h2 / r
    };
    let step = (sigma / 10.0).min(fc / 10.0);
    let mut n = (b / step).ceil() as usize;
    n += n % 2;
    let h = b / n as f64;
    let mut acc = psd(0.0) + psd(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * psd(i as f64 * h);
    }
    (acc * h / 3.0).max(0.0).sqrt()
}

/// Switching frequency in `[lo_hz, hi_hz]` at which the converter noise equals `target_a`.
///
/// The noise must be monotone across the bracket; bisection in log frequency.
pub fn calibrate_switching_frequency(p: &EaCircuitParams, target_a: f64, lo_hz: f64, hi_hz: f64) -> Result<f64> {
    let eval = |f: f64| dcdc_noise(&EaCircuitParams { dcdc_switching_freq_hz: f, ..*p }) - target_a;
    let (mut lo, mut hi) = (lo_hz.ln(), hi_hz.ln());
    let (flo, fhi) = (eval(lo_hz), eval(hi_hz));
    if flo.signum() == fhi.signum() {
        return Err(OweError::Calibration(format!("target {target_a} A not bracketed by [{lo_hz}, {hi_hz}] Hz")));
    }
    let rising = flo < 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (eval(mid.exp()) < 0.0) == rising {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

pub fn ea_gain(p: &EaCircuitParams) -> f64 {
    p.pa_gain() * p.tia_feedback_ohm / p.bias_tee_resistor_ohm
}

/// RMS noise of every block for one operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseBudget {
    pub n_pd_a: f64,
    pub n_tia_a: f64,
    pub n_pa_tia_a: f64,
    pub n_dcdc_a: f64,
}

impl NoiseBudget {
    pub fn evaluate(received_power_w: f64, p: &EaCircuitParams) -> Result<Self> {
        if !(received_power_w >= 0.0) {
            return Err(OweError::domain("received power", format!("{received_power_w} W")));
        }
        Ok(Self {
            n_pd_a: pd_noise(received_power_w, p),
            n_tia_a: tia_input_noise(received_power_w, p),
            n_pa_tia_a: pa_noise_tia_referred(p)?,
            n_dcdc_a: dcdc_noise(p),
        })
    }

    /// Noise that the EA gain multiplies, summed as amplitudes.
    pub fn gain_dependent(&self) -> f64 {
        self.n_pd_a + self.n_tia_a + self.n_pa_tia_a
    }

    /// LED current noise at EA current gain `g`.
    pub fn led_noise(&self, g: f64) -> f64 {
        g * self.gain_dependent() + self.n_dcdc_a
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedOutput {
    pub signal_a: f64,
    pub noise_a: f64,
    pub snr: f64,
}

/// LED drive current for a photocurrent, using the noise budget at the matching received power.
pub fn led_current_and_snr(signal_photocurrent_a: f64, p: &EaCircuitParams) -> Result<LedOutput> {
    if !(signal_photocurrent_a >= 0.0) {
        return Err(OweError::domain("photocurrent", format!("{signal_photocurrent_a} A")));
    }
    let budget = NoiseBudget::evaluate(signal_photocurrent_a / p.responsivity_a_per_w, p)?;
    Ok(led_output(signal_photocurrent_a, &budget, ea_gain(p)))
}

pub fn led_output(signal_photocurrent_a: f64, budget: &NoiseBudget, g: f64) -> LedOutput {
    let signal_a = signal_photocurrent_a * g;
    let noise_a = budget.led_noise(g);
    let snr = if signal_a == 0.0 {
        0.0
    } else if noise_a == 0.0 {
        f64::INFINITY
    } else {
        (signal_a / noise_a).powi(2)
    };
    LedOutput { signal_a, noise_a, snr }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const PR: f64 = 52e-6;

    #[test]
    fn reference_noise_levels() {
        let p = EaCircuitParams::default();
        assert!((pd_noise(PR, &p) / 13e-9 - 1.0).abs() < 0.03);
        assert!((tia_input_noise(PR, &p) / 18.1e-9 - 1.0).abs() < 0.03);
        assert!((pa_noise_tia_referred(&p).unwrap() / 1.47e-9 - 1.0).abs() < 0.05);
        assert!((dcdc_noise(&p) / 0.42e-3 - 1.0).abs() < 0.10);
    }

    #[test]
    fn hand_evaluated_terms() {
        let p = EaCircuitParams::default();
        assert!((pd_shot_noise(PR, &p) / 1.303e-8 - 1.0).abs() < 1e-3);
        assert!((tia_feedback_thermal_noise(&p) / 5.76e-9 - 1.0).abs() < 1e-3);
        let t = pa_noise_terms(&p).unwrap();
        assert!((t.voltage.sqrt() / 1.37e-9 - 1.0).abs() < 5e-3);
        assert_relative_eq!(p.bias_tee_cutoff_hz(), 79_577.47, max_relative = 1e-6);
    }

    #[test]
    fn zero_limits() {
        let p = EaCircuitParams {
            dark_current_a: 0.0,
            background_power_w: 0.0,
            shunt_resistance_ohm: f64::INFINITY,
            ..Default::default()
        };
        assert_eq!(pd_noise(0.0, &p), 0.0);
        let quiet = EaCircuitParams {
            temperature_k: 0.0,
            tia_voltage_noise_v_rthz: 0.0,
            tia_current_noise_a_rthz: 0.0,
            pa_voltage_noise_v_rthz: 0.0,
            pa_current_noise_a_rthz: 0.0,
            ..p
        };
        assert_eq!(tia_input_noise(0.0, &quiet), 0.0);
        assert_eq!(pa_noise_tia_referred(&quiet).unwrap(), 0.0);
        let silent = EaCircuitParams { dcdc_peak_psd_v2_hz: 0.0, dcdc_floor_psd_v2_hz: 0.0, ..p };
        assert_eq!(dcdc_noise(&silent), 0.0);
        assert!(pa_noise_tia_referred(&p.with_pa_gain(0.0)).is_err());
    }

    #[test]
    fn gains() {
        let p = EaCircuitParams::default();
        assert_relative_eq!(ea_gain(&p), 80_000.0, max_relative = 1e-12);
        assert_eq!(ea_gain(&p.with_pa_gain(0.0)), 0.0);
        assert_relative_eq!(ea_gain(&p.with_pa_gain(70.0)), 140_000.0, max_relative = 1e-12);
        assert_relative_eq!(p.pa_gain_for_ea_gain(p.ea_gain_for_pa_gain(33.0)), 33.0, max_relative = 1e-12);
    }

    #[test]
    fn calibration_recovers_default() {
        let p = EaCircuitParams::default();
        let f = calibrate_switching_frequency(&p, 0.42e-3, 1e6, 1e7).unwrap();
        assert!((f / 2.922e6 - 1.0).abs() < 1e-3, "{f}");
        assert!(calibrate_switching_frequency(&p, 1.0, 1e6, 1e7).is_err());
    }

    // Independent scalar evaluation of the LED chain at 26 µA photocurrent, PA gain 70.
    #[test]
    fn led_snr_reference() {
        let p = EaCircuitParams::default().with_pa_gain(70.0);
        let out = led_current_and_snr(26e-6, &p).unwrap();
        assert_relative_eq!(out.signal_a, 26e-6 * 140_000.0, max_relative = 1e-12);
        let n = pd_noise(PR, &p) + tia_input_noise(PR, &p) + pa_noise_tia_referred(&p).unwrap();
        let expect = (26e-6 * 140_000.0 / (140_000.0 * n + dcdc_noise(&p))).powi(2);
        assert_relative_eq!(out.snr, expect, max_relative = 1e-12);
        assert!((10.0 * out.snr.log10() - 57.5).abs() < 0.5);
        assert_eq!(led_current_and_snr(0.0, &p).unwrap().snr, 0.0);
    }

    #[test]
    fn high_gain_limit() {
        let budget = NoiseBudget::evaluate(PR, &EaCircuitParams::default()).unwrap();
        let limit = (26e-6 / budget.gain_dependent()).powi(2);
        let snr = led_output(26e-6, &budget, 1e15).snr;
        assert_relative_eq!(snr, limit, max_relative = 1e-6);
    }

    #[test]
    fn white_noise_scales_with_sqrt_bandwidth() {
        let p = EaCircuitParams { dcdc_peak_psd_v2_hz: 0.0, ..Default::default() };
        let q = EaCircuitParams { bandwidth_hz: 4.0 * p.bandwidth_hz, ..p };
        assert_relative_eq!(pd_noise(PR, &q), 2.0 * pd_noise(PR, &p), max_relative = 1e-12);
        assert_relative_eq!(tia_input_noise(PR, &q), 2.0 * tia_input_noise(PR, &p), max_relative = 1e-12);
        assert_relative_eq!(
            pa_noise_tia_referred(&q).unwrap(),
            2.0 * pa_noise_tia_referred(&p).unwrap(),
            max_relative = 1e-12
        );
        // only the flat floor remains, so the integral is exact up to the Lorentzian tail
        let floor_only = |b: f64| {
            let fc = p.bias_tee_cutoff_hz();
            (p.dcdc_floor_psd_v2_hz / p.bias_tee_resistor_ohm * fc * (b / fc).atan()).sqrt()
        };
        assert_relative_eq!(dcdc_noise(&p), floor_only(p.bandwidth_hz), max_relative = 1e-6);
    }

    #[test]
    fn led_power_linear_in_current() {
        let p = EaCircuitParams::default();
        assert_relative_eq!(p.led_w_per_a() * 2.0, 2.0 * 1.35, max_relative = 1e-12);
        assert_relative_eq!(p.current_to_current(), 0.675, max_relative = 1e-12);
    }

    #[test]
    fn defaults_validate() {
        EaCircuitParams::default().validate().unwrap();
        let bad = EaCircuitParams { led_radiant_efficiency: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn noise_monotone_in_power(a in 0.0f64..1e-3, b in 0.0f64..1e-3) {
            let p = EaCircuitParams::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(pd_noise(lo, &p) <= pd_noise(hi, &p));
            prop_assert!(tia_input_noise(lo, &p) <= tia_input_noise(hi, &p));
        }

        #[test]
        fn led_noise_affine_in_gain(pr in 0.0f64..1e-3, g1 in 0.0f64..2e5, g2 in 0.0f64..2e5, g in 0.0f64..2e5) {
            prop_assume!((g1 - g2).abs() > 1e4);
            let budget = NoiseBudget::evaluate(pr, &EaCircuitParams::default()).unwrap();
            let (n1, n2) = (budget.led_noise(g1), budget.led_noise(g2));
            let c1 = (n2 - n1) / (g2 - g1);
            let c2 = n1 - c1 * g1;
            prop_assert!(c1 >= 0.0 && c2 >= 0.0);
            let fit = c1 * g + c2;
            prop_assert!((fit - budget.led_noise(g)).abs() <= 1e-12 * budget.led_noise(g));
        }

        #[test]
        fn snr_monotone_in_gain(s in 1e-9f64..1e-3, a in 0.0f64..2e5, b in 0.0f64..2e5) {
            let budget = NoiseBudget::evaluate(s / 0.5, &EaCircuitParams::default()).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(led_output(s, &budget, lo).snr <= led_output(s, &budget, hi).snr * (1.0 + 1e-12));
        }
    }
}
