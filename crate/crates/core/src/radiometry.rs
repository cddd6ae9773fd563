//! Optical power transfer between ceiling emitters and receivers.
//!
//! Sources are generalized Lambertian. Receivers are photodiodes behind a
//! non-imaging concentrator. The diffuse path is a single bounce off the
//! floor plane, integrated with the midpoint rule.

use std::f64::consts::{FRAC_PI_2, LN_2, PI};

use nalgebra::Vector3;

use crate::error::{OweError, Result};

/// Half-power angles below this are rejected; the order diverges as the angle goes to zero.
pub const MIN_HALF_POWER_ANGLE_RAD: f64 = 1e-3;

const UNIT_TOLERANCE: f64 = 1e-9;

/// Position and optical axis of a transmitter or receiver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: Vector3<f64>,
}

impl Pose {
    pub fn new(position: [f64; 3], orientation: [f64; 3]) -> Result<Self> {
        let orientation = Vector3::from(orientation);
        let norm = orientation.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(OweError::domain("orientation", format!("axis must have unit norm, got {norm}")));
        }
        let position = Vector3::from(position);
        if position.iter().any(|c| !c.is_finite()) {
            return Err(OweError::domain("position", "non-finite coordinate"));
        }
        Ok(Self { position, orientation })
    }

    /// Device at `(x, y, z)` looking straight down.
    pub fn facing_down(x: f64, y: f64, z: f64) -> Self {
        Self { position: Vector3::new(x, y, z), orientation: -Vector3::z() }
    }

    /// Device at `(x, y, z)` looking straight up.
    pub fn facing_up(x: f64, y: f64, z: f64) -> Self {
        Self { position: Vector3::new(x, y, z), orientation: Vector3::z() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmitterParams {
    pub optical_power_w: f64,
    pub half_power_angle_rad: f64,
    pub lambertian_order: f64,
}

impl EmitterParams {
    pub fn new(optical_power_w: f64, half_power_angle_rad: f64) -> Result<Self> {
        if !(optical_power_w >= 0.0) || !optical_power_w.is_finite() {
            return Err(OweError::domain("optical power", format!("{optical_power_w} W")));
        }
        Ok(Self { optical_power_w, half_power_angle_rad, lambertian_order: lambertian_order(half_power_angle_rad)? })
    }

    /// Same lobe, different emitted power.
    pub fn with_power(self, optical_power_w: f64) -> Self {
        Self { optical_power_w, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceiverParams {
    pub area_m2: f64,
    pub acceptance_angle_rad: f64,
    pub refractive_index: f64,
    /// Optical filter transmission, held at 1.
    pub filter_gain: f64,
}

impl ReceiverParams {
    pub fn new(area_m2: f64, acceptance_angle_rad: f64, refractive_index: f64) -> Result<Self> {
        if !(area_m2 > 0.0) {
            return Err(OweError::domain("detector area", format!("{area_m2} m^2")));
        }
        if !(acceptance_angle_rad > 0.0 && acceptance_angle_rad <= FRAC_PI_2) {
            return Err(OweError::domain("acceptance angle", format!("{acceptance_angle_rad} rad not in (0, pi/2]")));
        }
        if !(refractive_index >= 1.0) {
            return Err(OweError::domain("refractive index", format!("{refractive_index} < 1")));
        }
        Ok(Self { area_m2, acceptance_angle_rad, refractive_index, filter_gain: 1.0 })
    }
}

/// Axis-aligned rectangle on the floor outside of which nothing reflects.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FloorBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FloorModel {
    pub reflectivity: f64,
    pub z_plane: f64,
    pub integration_cell_m: f64,
    /// Half-width of the square window centred between transmitter and receiver.
    pub integration_extent_m: f64,
    /// Room footprint; `None` means an unbounded floor.
    pub bounds: Option<FloorBounds>,
}

impl FloorModel {
    pub fn new(reflectivity: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&reflectivity) {
            return Err(OweError::domain("reflectivity", format!("{reflectivity} not in [0, 1]")));
        }
        Ok(Self { reflectivity, z_plane: 0.0, integration_cell_m: 0.02, integration_extent_m: 5.0, bounds: None })
    }

    pub fn with_bounds(self, bounds: Option<FloorBounds>) -> Self {
        Self { bounds, ..self }
    }

    pub fn with_cell(self, integration_cell_m: f64) -> Self {
        Self { integration_cell_m, ..self }
    }
}

pub fn lambertian_order(half_power_angle_rad: f64) -> Result<f64> {
    if !(MIN_HALF_POWER_ANGLE_RAD..FRAC_PI_2).contains(&half_power_angle_rad) {
        return Err(OweError::domain(
            "half-power angle",
            format!("{half_power_angle_rad} rad not in [{MIN_HALF_POWER_ANGLE_RAD}, pi/2)"),
        ));
    }
    Ok(-LN_2 / half_power_angle_rad.cos().ln())
}

/// Radiant intensity in W/sr at angle `phi` off the emitter axis.
pub fn radiant_intensity(emitter: &EmitterParams, phi: f64) -> f64 {
    emitter.optical_power_w * lobe(emitter.lambertian_order, phi.cos())
}

/// Normalized lobe (m+1)/(2π)·cos^m, zero behind the emitter.
fn lobe(m: f64, cos_phi: f64) -> f64 {
    if cos_phi <= 0.0 {
        return 0.0;
    }
    (m + 1.0) / (2.0 * PI) * cos_phi.powf(m)
}

pub fn concentrator_gain(psi: f64, rx: &ReceiverParams) -> f64 {
    if psi <= rx.acceptance_angle_rad {
        let s = rx.acceptance_angle_rad.sin();
        rx.refractive_index * rx.refractive_index / (s * s)
    } else {
        0.0
    }
}

/// Effective collecting area A_r·cosψ·T_s·g_C(ψ) for light arriving at cosψ.
fn collection(rx: &ReceiverParams, cos_psi: f64) -> f64 {
    if cos_psi <= 0.0 {
        return 0.0;
    }
    let psi = cos_psi.min(1.0).acos();
    rx.area_m2 * cos_psi * rx.filter_gain * concentrator_gain(psi, rx)
}

/// Received over transmitted power for a direct path.
pub fn los_power_gain(tx: &Pose, emitter: &EmitterParams, rx: &Pose, receiver: &ReceiverParams) -> Result<f64> {
    let v = rx.position - tx.position;
    let d = v.norm();
    if d == 0.0 {
        return Err(OweError::CoincidentPositions);
    }
    let u = v / d;
    let cos_phi = tx.orientation.dot(&u);
    let cos_psi = -rx.orientation.dot(&u);
    Ok(lobe(emitter.lambertian_order, cos_phi) * collection(receiver, cos_psi) / (d * d))
}

/// Received over transmitted power via one reflection off the floor.
pub fn diffuse_power_gain(
    tx: &Pose,
    emitter: &EmitterParams,
    rx: &Pose,
    receiver: &ReceiverParams,
    floor: &FloorModel,
) -> Result<f64> {
    let cell = floor.integration_cell_m;
    let extent = floor.integration_extent_m;
    if !(cell > 0.0) || !(cell < extent) {
        return Err(OweError::IntegrationGrid { cell_m: cell, extent_m: extent });
    }
    if tx.position.z <= floor.z_plane || rx.position.z <= floor.z_plane {
        return Err(OweError::domain("device height", "transmitter and receiver must be above the floor"));
    }
    if floor.reflectivity == 0.0 {
        return Ok(0.0);
    }

    let cx = 0.5 * (tx.position.x + rx.position.x);
    let cy = 0.5 * (tx.position.y + rx.position.y);
    let (mut x0, mut x1) = (cx - extent, cx + extent);
    let (mut y0, mut y1) = (cy - extent, cy + extent);
    if let Some(b) = floor.bounds {
        x0 = x0.max(b.x_min);
        x1 = x1.min(b.x_max);
        y0 = y0.max(b.y_min);
        y1 = y1.min(b.y_max);
    }
    if x1 <= x0 || y1 <= y0 {
        return Ok(0.0);
    }
    let nx = ((x1 - x0) / cell).round().max(1.0) as usize;
    let ny = ((y1 - y0) / cell).round().max(1.0) as usize;
    let dx = (x1 - x0) / nx as f64;
    let dy = (y1 - y0) / ny as f64;

    let m = emitter.lambertian_order;
    let ht = tx.position.z - floor.z_plane;
    let hr = rx.position.z - floor.z_plane;
    let mut sum = 0.0;
    for iy in 0..ny {
        let y = y0 + (iy as f64 + 0.5) * dy;
        let mut row = 0.0;
        for ix in 0..nx {
            let x = x0 + (ix as f64 + 0.5) * dx;
            let v1 = Vector3::new(x - tx.position.x, y - tx.position.y, -ht);
            let d1sq = v1.norm_squared();
            let d1 = d1sq.sqrt();
            let cos_phi = tx.orientation.dot(&v1) / d1;
            if cos_phi <= 0.0 {
                continue;
            }
            let v2 = Vector3::new(rx.position.x - x, rx.position.y - y, hr);
            let d2sq = v2.norm_squared();
            let d2 = d2sq.sqrt();
            let cos_psi = -rx.orientation.dot(&v2) / d2;
            let c = collection(receiver, cos_psi);
            if c == 0.0 {
                continue;
            }
            let cos_in = ht / d1;
            let cos_out = hr / d2;
            row += lobe(m, cos_phi) * cos_in * cos_out / (d1sq * d2sq) * c;
        }
        sum += row;
    }
    Ok(sum * floor.reflectivity / PI * dx * dy)
}

/// Half-power angle that puts the half-power contour midway between grid neighbours.
pub fn half_power_angle_for_grid(spacing_m: f64, height_above_workplane_m: f64) -> f64 {
    (0.5 * spacing_m / height_above_workplane_m).atan()
}

/// Acceptance angle that covers a disc of `radius_m` at the given vertical distance.
pub fn acceptance_angle_for_coverage(radius_m: f64, height_above_device_m: f64) -> f64 {
    (radius_m / height_above_device_m).atan()
}
