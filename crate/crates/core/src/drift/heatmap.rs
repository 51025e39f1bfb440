use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::verify::linspace;
use super::{DriftEvaluator, DriftSpec};
use crate::error::{Error, Result};

/// Advantages at which fixed-`A` slices are taken.
pub const SLICE_ADVANTAGES: [f64; 4] = [-3.0, -1.0, 1.0, 3.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRequest {
    pub r_min: f64,
    pub r_max: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub resolution: usize,
}

impl Default for HeatmapRequest {
    fn default() -> Self {
        Self {
            r_min: 0.1,
            r_max: 3.0,
            a_min: -3.0,
            a_max: 3.0,
            resolution: 300,
        }
    }
}

/// `d/dr [r A - f(r, A)] = A - df/dr` sampled on a grid, rows indexed by `A`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub r_values: Vec<f64>,
    pub a_values: Vec<f64>,
    /// `cells[i][j]` at `(a_values[i], r_values[j])`.
    pub cells: Vec<Vec<f64>>,
    /// One row per entry of [`SLICE_ADVANTAGES`], over `r_values`.
    pub slices: Vec<Vec<f64>>,
}

fn objective_dr_row(spec: &DriftSpec, a: f64, rs: &[f64]) -> Vec<f64> {
    let mut ev = DriftEvaluator::new(spec);
    rs.iter().map(|&r| a - ev.eval(r, a).dr).collect()
}

pub fn export_heatmap(spec: &DriftSpec, req: &HeatmapRequest) -> Result<Heatmap> {
    spec.validate()?;
    if req.resolution < 16 {
        return Err(Error::Config(format!(
            "heatmap resolution must be >= 16, got {}",
            req.resolution
        )));
    }
    if !(req.r_min > 0.0 && req.r_max > req.r_min && req.a_max > req.a_min) {
        return Err(Error::Config(format!("bad heatmap ranges {req:?}")));
    }
    let r_values = linspace(req.r_min, req.r_max, req.resolution);
    let a_values = linspace(req.a_min, req.a_max, req.resolution);
    let cells = a_values
        .par_iter()
        .map(|&a| objective_dr_row(spec, a, &r_values))
        .collect();
    let slices = SLICE_ADVANTAGES
        .iter()
        .map(|&a| objective_dr_row(spec, a, &r_values))
        .collect();
    Ok(Heatmap {
        r_values,
        a_values,
        cells,
        slices,
    })
}

fn sci(v: f64) -> String {
    format!("{v:.8e}")
}

impl Heatmap {
    /// Header row `A\r, r_0, r_1, ...`; each following row starts with its
    /// `A` value. Numbers use 9 significant digits in scientific notation.
    pub fn write_grid_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["A\\r".to_string()];
        header.extend(self.r_values.iter().map(|&r| sci(r)));
        w.write_record(&header)?;
        for (a, row) in self.a_values.iter().zip(&self.cells) {
            let mut rec = vec![sci(*a)];
            rec.extend(row.iter().map(|&v| sci(v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Columns `r, A=-3, A=-1, A=1, A=3`.
    pub fn write_slices_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["r".to_string()];
        header.extend(SLICE_ADVANTAGES.iter().map(|a| format!("A={a}")));
        w.write_record(&header)?;
        for (j, r) in self.r_values.iter().enumerate() {
            let mut rec = vec![sci(*r)];
            rec.extend(self.slices.iter().map(|s| sci(s[j])));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
