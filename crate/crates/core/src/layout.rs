//! EA placement in a room and the optics they share.

use crate::circuit::EaCircuitParams;
use crate::error::{OweError, Result};
use crate::ether::{build_channel_matrix, ChannelMatrix, EaOptics};
use crate::radiometry::{EmitterParams, FloorBounds, FloorModel, Pose, ReceiverParams};

#[derive(Debug, Clone, PartialEq)]
pub struct RoomLayout {
    /// Floor footprint `[x, y]` in meters with a corner at the origin; `None` for an open floor.
    pub room: Option<[f64; 2]>,
    pub ceiling_height_m: f64,
    pub eas: Vec<Pose>,
}

impl RoomLayout {
    /// `nx × ny` grid numbered row by row from `origin`, all facing down.
    pub fn grid(
        nx: usize,
        ny: usize,
        spacing_m: f64,
        origin: [f64; 2],
        ceiling_height_m: f64,
        room: Option<[f64; 2]>,
    ) -> Self {
        let eas = (0..nx * ny)
            .map(|k| {
                let (ix, iy) = (k % nx, k / nx);
                Pose::facing_down(
                    origin[0] + ix as f64 * spacing_m,
                    origin[1] + iy as f64 * spacing_m,
                    ceiling_height_m,
                )
            })
            .collect();
        Self { room, ceiling_height_m, eas }
    }

    pub fn n(&self) -> usize {
        self.eas.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.eas.is_empty() {
            return Err(OweError::Scenario("layout has no EAs".into()));
        }
        if !(self.ceiling_height_m > 0.0) {
            return Err(OweError::Scenario(format!("ceiling height {} must be positive", self.ceiling_height_m)));
        }
        for (i, p) in self.eas.iter().enumerate() {
            let z = p.position.z;
            if !(z > 0.0 && z <= self.ceiling_height_m) {
                return Err(OweError::Scenario(format!(
                    "EA{} height {z} m outside (0, {}]",
                    i + 1,
                    self.ceiling_height_m
                )));
            }
        }
        if let Some([x, y]) = self.room {
            if !(x > 0.0 && y > 0.0) {
                return Err(OweError::Scenario(format!("room size [{x}, {y}] must be positive")));
            }
        }
        Ok(())
    }

    pub fn floor_bounds(&self) -> Option<FloorBounds> {
        self.room.map(|[x, y]| FloorBounds { x_min: 0.0, x_max: x, y_min: 0.0, y_max: y })
    }
}

/// Optical constants of the reference design.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpticsParams {
    pub half_power_angle_rad: f64,
    pub acceptance_angle_rad: f64,
    pub pd_area_m2: f64,
    pub concentrator_index: f64,
    pub floor_reflectivity: f64,
    pub integration_cell_m: f64,
    pub integration_extent_m: f64,
    /// Restrict the reflecting floor to the room footprint when the room size is known.
    pub clip_to_room: bool,
}

impl Default for OpticsParams {
    fn default() -> Self {
        Self {
            half_power_angle_rad: 19.65_f64.to_radians(),
            acceptance_angle_rad: 34.21_f64.to_radians(),
            pd_area_m2: 1e-4,
            concentrator_index: 1.5,
            floor_reflectivity: 0.4,
            integration_cell_m: 0.02,
            integration_extent_m: 5.0,
            clip_to_room: true,
        }
    }
}

impl OpticsParams {
    pub fn ea_optics(&self, layout: &RoomLayout) -> Result<EaOptics> {
        let floor = FloorModel {
            integration_cell_m: self.integration_cell_m,
            integration_extent_m: self.integration_extent_m,
            ..FloorModel::new(self.floor_reflectivity)?
        };
        let bounds = if self.clip_to_room { layout.floor_bounds() } else { None };
        Ok(EaOptics {
            emitter: EmitterParams::new(1.0, self.half_power_angle_rad)?,
            receiver: ReceiverParams::new(self.pd_area_m2, self.acceptance_angle_rad, self.concentrator_index)?,
            floor: floor.with_bounds(bounds),
        })
    }

    pub fn channel_matrix(&self, layout: &RoomLayout, circuit: &EaCircuitParams) -> Result<ChannelMatrix> {
        layout.validate()?;
        build_channel_matrix(&layout.eas, &self.ea_optics(layout)?, circuit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_numbering_is_row_major() {
        let l = RoomLayout::grid(3, 3, 1.25, [1.25, 1.25], 2.5, Some([5.0, 5.0]));
        assert_eq!(l.n(), 9);
        assert_eq!((l.eas[1].position.x, l.eas[1].position.y), (2.5, 1.25));
        assert_eq!((l.eas[3].position.x, l.eas[3].position.y), (1.25, 2.5));
        l.validate().unwrap();
    }

    #[test]
    fn single_ea_matrix() {
        let l = RoomLayout::grid(1, 1, 1.25, [2.5, 2.5], 2.5, None);
        let h = OpticsParams::default().channel_matrix(&l, &EaCircuitParams::default()).unwrap();
        assert_eq!(h.n(), 1);
        assert!((h.get(0, 0) / (0.675 * 1.0523e-5) - 1.0).abs() < 3e-3);
    }

    #[test]
    fn symmetric_pair() {
        let l = RoomLayout::grid(2, 1, 1.25, [0.0, 0.0], 2.5, None);
        let h = OpticsParams::default().channel_matrix(&l, &EaCircuitParams::default()).unwrap();
        assert!((h.get(0, 1) - h.get(1, 0)).abs() <= 1e-12 * h.get(0, 1));
    }

    #[test]
    fn rejects_ea_above_ceiling() {
        let mut l = RoomLayout::grid(1, 1, 1.0, [0.0, 0.0], 2.5, None);
        l.eas[0] = Pose::facing_down(0.0, 0.0, 3.0);
        assert!(l.validate().is_err());
    }
}
