//! JSON snapshots of a simulation state.

use crate::error::Result;
use crate::forces::Link;
use crate::geom::Vec2;
use crate::mesh::{Field, FluidState, GridSpec, Layout};
use crate::stepper::{Method, Simulation};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub step: u64,
    pub time: f64,
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub method: Option<Method>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateletSnapshot {
    pub id: u64,
    pub activated: bool,
    /// IB points (PL) or data sites (RBF).
    pub tracked: Vec<[f64; 2]>,
    pub samples: Vec<[f64; 2]>,
}

/// Fields are flattened row-major (`j * nx + i`); `v` carries its `ny + 1` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotFile {
    pub header: SnapshotHeader,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub p: Vec<f64>,
    pub platelets: Vec<PlateletSnapshot>,
    pub links: Vec<Link>,
}

fn pairs(p: &[Vec2]) -> Vec<[f64; 2]> {
    p.iter().map(|q| [q.x, q.y]).collect()
}

impl SnapshotFile {
    pub fn capture(sim: &Simulation) -> Result<Self> {
        let g = sim.grid;
        let mut platelets = Vec::with_capacity(sim.platelets.len());
        for p in &sim.platelets {
            platelets.push(PlateletSnapshot {
                id: p.id(),
                activated: p.activated(),
                tracked: pairs(p.tracked()),
                samples: pairs(&p.sample_sites()?),
            });
        }
        Ok(SnapshotFile {
            header: SnapshotHeader {
                step: sim.step,
                time: sim.time,
                nx: g.nx,
                ny: g.ny,
                lx: g.lx,
                ly: g.ly,
                method: sim.method(),
            },
            u: sim.fluid.u.data.clone(),
            v: sim.fluid.v.data.clone(),
            p: sim.fluid.p.data.clone(),
            platelets,
            links: sim.links.clone(),
        })
    }

    /// Grid and velocity/pressure state stored in the snapshot.
    pub fn fluid_state(&self) -> Result<(GridSpec, FluidState)> {
        let h = &self.header;
        let grid = GridSpec::new(h.nx, h.ny, h.lx, h.ly)?;
        let field = |layout: Layout, data: &[f64]| Field { layout, nx: grid.nx, rows: grid.rows(layout), data: data.to_vec() };
        let state = FluidState {
            u: field(Layout::UFace, &self.u),
            v: field(Layout::VFace, &self.v),
            p: field(Layout::Center, &self.p),
        };
        state.check(&grid)?;
        Ok((grid, state))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("snapshot serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| crate::IbError::Io(e.to_string()))
    }
}
