//! Region feature grids: projection into the model's feature space and
//! the post-hoc edge filter on attention distributions.
//!
//! The convolutional backbone is out of scope; raw region features come
//! from the synthetic corpus or a feature file.
//!
//! ```
//! use h2rat::numerics::Tensor;
//! use h2rat::vision::{apply_edge_filter, EdgeFilterSpec};
//!
//! let p = Tensor::new(16, 1, vec![1.0 / 16.0; 16]).unwrap();
//! let f = apply_edge_filter(&p, 4, 4, &EdgeFilterSpec::default()).unwrap();
//! assert_eq!(f.get(0, 0), 0.0);            // rim mass removed
//! assert_eq!(f.get(5, 0), 0.25);           // interior renormalized
//! assert!((f.sum() - 1.0).abs() < 1e-9);
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{self, Reader};
use crate::numerics::{RngStream, Tape, Tensor, Var};

pub const FEATURE_MAGIC: &str = "H2RF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSource {
    Synthetic,
    File,
}

/// The d-region visual feature matrix plus its grid geometry.
///
/// `raw_features` is `f x d`: column `j` holds the raw feature vector of
/// region `j`, with region index `row * cols + col`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub rows: usize,
    pub cols: usize,
    pub raw_features: Tensor,
    pub source: FeatureSource,
}

impl RegionGrid {
    pub fn new(rows: usize, cols: usize, raw_features: Tensor, source: FeatureSource) -> Result<RegionGrid> {
        if raw_features.cols() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "RegionGrid::new",
                lhs: format!("{rows}x{cols} grid ({} regions)", rows * cols),
                rhs: format!("{} feature columns", raw_features.cols()),
            });
        }
        Ok(RegionGrid {
            rows,
            cols,
            raw_features,
            source,
        })
    }

    /// Number of regions.
    pub fn region_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Raw feature dimension.
    pub fn feature_dim(&self) -> usize {
        self.raw_features.rows()
    }

    /// Write the H2RF feature file: magic, version, rows, cols, f, then
    /// region-major little-endian f32 values.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(FEATURE_MAGIC.as_bytes());
        io_util::put_u32(&mut out, FEATURE_VERSION);
        io_util::put_u32(&mut out, self.rows as u32);
        io_util::put_u32(&mut out, self.cols as u32);
        io_util::put_u32(&mut out, self.feature_dim() as u32);
        for j in 0..self.region_count() {
            for i in 0..self.feature_dim() {
                io_util::put_f32(&mut out, self.raw_features.get(i, j));
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RegionGrid> {
        let bytes = std::fs::read(path)?;
        let mut r = Reader::new(&bytes);
        r.magic(FEATURE_MAGIC)?;
        let version = r.u32("feature file version")?;
        if version != FEATURE_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: FEATURE_VERSION,
            });
        }
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let f = r.u32("feature dim")? as usize;
        let d = rows * cols;
        let mut features = Tensor::zeros(f, d);
        for j in 0..d {
            let col = r.f32_vec(f, "region features")?;
            for (i, v) in col.into_iter().enumerate() {
                features.set(i, j, v);
            }
        }
        features.check_finite("RegionGrid::load")?;
        RegionGrid::new(rows, cols, features, FeatureSource::File)
    }
}

/// Affine-plus-tanh projection of raw region features into model space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectionVars {
    pub w: Var,
    pub b: Var,
}

impl ProjectionParams {
    pub fn init(m: usize, f: usize, rng: &mut RngStream) -> ProjectionParams {
        let s = (6.0 / (m + f) as f64).sqrt();
        ProjectionParams {
            w: Tensor::uniform_init(m, f, s, rng),
            b: Tensor::zeros(m, 1),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> ProjectionVars {
        ProjectionVars {
            w: tape.param(self.w.clone()),
            b: tape.param(self.b.clone()),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("proj.w", &self.w), ("proj.b", &self.b)]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("proj.w", &mut self.w), ("proj.b", &mut self.b)]
    }
}

impl ProjectionVars {
    pub fn vars(&self) -> Vec<(&'static str, Var)> {
        vec![("proj.w", self.w), ("proj.b", self.b)]
    }
}

/// `V_I = tanh(W . F + b)`, column j is the projected feature of region j.
pub fn project_regions(tape: &mut Tape, grid: &RegionGrid, p: &ProjectionVars) -> Result<Var> {
    let f = tape.constant(grid.raw_features.clone());
    let wf = tape.matmul(p.w, f)?;
    let aff = tape.broadcast_add_cols(wf, p.b)?;
    tape.tanh(aff)
}

/// Rim rings to zero out when filtering attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeFilterSpec {
    pub border_width: usize,
}

impl Default for EdgeFilterSpec {
    fn default() -> Self {
        EdgeFilterSpec { border_width: 1 }
    }
}

impl EdgeFilterSpec {
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if 2 * self.border_width >= rows.min(cols) {
            return Err(Error::Config(format!(
                "border_width {} leaves no interior region on a {rows}x{cols} grid",
                self.border_width
            )));
        }
        Ok(())
    }
}

/// True when region `idx` lies strictly inside the rim.
pub fn is_interior(rows: usize, cols: usize, idx: usize, border: usize) -> bool {
    let r = idx / cols;
    let c = idx % cols;
    r >= border && r < rows - border && c >= border && c < cols - border
}

/// Coarse quadrant (0 = upper-left, 1 = upper-right, 2 = lower-left,
/// 3 = lower-right) of a region; used as the zone key of the correction
/// table.
pub fn zone_of_region(rows: usize, cols: usize, idx: usize) -> usize {
    let r = idx / cols;
    let c = idx % cols;
    let lower = r >= rows.div_ceil(2);
    let right = c >= cols.div_ceil(2);
    (lower as usize) * 2 + right as usize
}

/// Zero rim-region attention mass and renormalize over the interior.
/// If all interior mass is zero, returns the uniform interior
/// distribution so evaluation never aborts mid-sweep.
pub fn apply_edge_filter(
    attn: &Tensor,
    rows: usize,
    cols: usize,
    spec: &EdgeFilterSpec,
) -> Result<Tensor> {
    spec.validate(rows, cols)?;
    let d = rows * cols;
    if attn.shape() != (d, 1) {
        return Err(Error::DimensionMismatch {
            op: "apply_edge_filter",
            lhs: format!("{rows}x{cols} grid ({d} regions)"),
            rhs: format!("{}x{}", attn.rows(), attn.cols()),
        });
    }
    let mut out = Tensor::zeros(d, 1);
    let mut interior_mass = 0.0;
    for idx in 0..d {
        if is_interior(rows, cols, idx, spec.border_width) {
            let v = attn.get(idx, 0);
            out.set(idx, 0, v);
            interior_mass += v;
        }
    }
    if interior_mass > 0.0 {
        for idx in 0..d {
            out.set(idx, 0, out.get(idx, 0) / interior_mass);
        }
    } else {
        let interior: Vec<usize> = (0..d)
            .filter(|&i| is_interior(rows, cols, i, spec.border_width))
            .collect();
        let u = 1.0 / interior.len() as f64;
        for idx in interior {
            out.set(idx, 0, u);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vision::FeatureSource::Synthetic;

    fn grid(rows: usize, cols: usize, f: usize, seed: u64) -> RegionGrid {
        let mut rng = RngStream::new(seed);
        let feats = Tensor::uniform_init(f, rows * cols, 1.0, &mut rng);
        RegionGrid::new(rows, cols, feats, Synthetic).unwrap()
    }

    #[test]
    fn projection_zero_params_gives_zeros() {
        let g = grid(2, 2, 3, 1);
        let p = ProjectionParams {
            w: Tensor::zeros(4, 3),
            b: Tensor::zeros(4, 1),
        };
        let mut tape = Tape::new();
        let pv = p.bind(&mut tape);
        let v = project_regions(&mut tape, &g, &pv).unwrap();
        assert_eq!(tape.value(v).unwrap(), &Tensor::zeros(4, 4));
    }

    #[test]
    fn projection_identity_is_elementwise_tanh() {
        let g = grid(2, 2, 3, 2);
        let p = ProjectionParams {
            w: Tensor::identity(3),
            b: Tensor::zeros(3, 1),
        };
        let mut tape = Tape::new();
        let pv = p.bind(&mut tape);
        let v = project_regions(&mut tape, &g, &pv).unwrap();
        let expected = g.raw_features.tanh_elem().unwrap();
        assert!(tape.value(v).unwrap().approx_eq(&expected, 1e-15));
    }

    #[test]
    fn projection_matches_primitive_composition_oracle() {
        let g = grid(3, 3, 5, 3);
        let mut rng = RngStream::new(4);
        let p = ProjectionParams::init(6, 5, &mut rng);
        let mut tape = Tape::new();
        let pv = p.bind(&mut tape);
        let v = project_regions(&mut tape, &g, &pv).unwrap();
        let expected = p
            .w
            .matmul(&g.raw_features)
            .unwrap()
            .broadcast_add_cols(&p.b)
            .unwrap()
            .tanh_elem()
            .unwrap();
        assert!(tape.value(v).unwrap().approx_eq(&expected, 1e-15));
    }

    #[test]
    fn projection_preserves_column_identity_under_permutation() {
        let g = grid(2, 2, 3, 5);
        let mut rng = RngStream::new(6);
        let p = ProjectionParams::init(4, 3, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let mut permuted = g.raw_features.clone();
        for (to, &from) in perm.iter().enumerate() {
            permuted
                .set_column(to, &g.raw_features.column(from).unwrap())
                .unwrap();
        }
        let gp = RegionGrid::new(2, 2, permuted, Synthetic).unwrap();

        let run = |grid: &RegionGrid| {
            let mut tape = Tape::new();
            let pv = p.bind(&mut tape);
            let v = project_regions(&mut tape, grid, &pv).unwrap();
            tape.value(v).unwrap().clone()
        };
        let base = run(&g);
        let out = run(&gp);
        for (to, &from) in perm.iter().enumerate() {
            assert_eq!(out.column(to).unwrap(), base.column(from).unwrap());
        }
    }

    #[test]
    fn edge_filter_region_counts_on_4x4() {
        let rows = 4;
        let cols = 4;
        let interior: Vec<usize> = (0..16).filter(|&i| is_interior(rows, cols, i, 1)).collect();
        assert_eq!(interior, vec![5, 6, 9, 10]);
    }

    #[test]
    fn edge_filter_uniform_becomes_uniform_interior() {
        let attn = Tensor::new(16, 1, vec![1.0 / 16.0; 16]).unwrap();
        let got = apply_edge_filter(&attn, 4, 4, &EdgeFilterSpec::default()).unwrap();
        for idx in 0..16 {
            let expected = if is_interior(4, 4, idx, 1) { 0.25 } else { 0.0 };
            assert!((got.get(idx, 0) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn edge_filter_fully_interior_unchanged() {
        let mut attn = Tensor::zeros(16, 1);
        attn.set(5, 0, 0.5);
        attn.set(10, 0, 0.5);
        let got = apply_edge_filter(&attn, 4, 4, &EdgeFilterSpec::default()).unwrap();
        assert!(got.approx_eq(&attn, 1e-12));
    }

    #[test]
    fn edge_filter_degenerate_all_rim_gives_uniform_interior() {
        let mut attn = Tensor::zeros(16, 1);
        attn.set(0, 0, 1.0);
        let got = apply_edge_filter(&attn, 4, 4, &EdgeFilterSpec::default()).unwrap();
        assert!((got.sum() - 1.0).abs() < 1e-12);
        assert_eq!(got.get(5, 0), 0.25);
        assert_eq!(got.get(0, 0), 0.0);
    }

    #[test]
    fn edge_filter_geometry_mismatch_errors() {
        let attn = Tensor::zeros(9, 1);
        assert!(apply_edge_filter(&attn, 4, 4, &EdgeFilterSpec::default()).is_err());
    }

    #[test]
    fn edge_filter_spec_must_leave_interior() {
        assert!(EdgeFilterSpec { border_width: 2 }.validate(4, 4).is_err());
        assert!(EdgeFilterSpec { border_width: 1 }.validate(3, 3).is_ok());
    }

    #[test]
    fn zones_are_quadrants() {
        // 4x4: region 5 is row 1, col 1 -> upper-left
        assert_eq!(zone_of_region(4, 4, 5), 0);
        assert_eq!(zone_of_region(4, 4, 6), 1);
        assert_eq!(zone_of_region(4, 4, 9), 2);
        assert_eq!(zone_of_region(4, 4, 10), 3);
    }

    #[test]
    fn feature_file_roundtrip() {
        let g = grid(3, 2, 4, 8);
        // quantize to f32 so the round trip is exact
        let g = RegionGrid::new(3, 2, g.raw_features.quantize_f32(), Synthetic).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feat.h2rf");
        g.save(&path).unwrap();
        let loaded = RegionGrid::load(&path).unwrap();
        assert_eq!(loaded.raw_features, g.raw_features);
        assert_eq!(loaded.rows, 3);
        assert_eq!(loaded.cols, 2);
        assert_eq!(loaded.source, FeatureSource::File);
    }

    #[test]
    fn feature_file_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.h2rf");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(RegionGrid::load(&path), Err(Error::BadMagic { .. })));

        std::fs::write(&path, b"H2RF\x01\x00\x00\x00\x02").unwrap();
        assert!(matches!(RegionGrid::load(&path), Err(Error::Truncated { .. })));
    }
}
