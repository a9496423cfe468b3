//! Uniform cell-centred grids and the fields that live on them.
//!
//! A [`GridSpec`] covers the box `[-L, L]^d` with `n` cells per axis. Nodes sit
//! at cell centres, so for even `n` there is no node at the origin. Every field
//! is implicitly zero outside its box. An optional extension factor describes
//! a concentric, node-aligned evaluation box `[-c L, c L]^d` used for fields
//! (stopped mass, target measures) that leak out of the active region.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible number of cells per axis.
pub const MIN_POINTS_PER_AXIS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    dim: usize,
    half_width: f64,
    n: usize,
    ext_factor: f64,
}

impl GridSpec {
    pub fn new(dim: usize, half_width: f64, n: usize, ext_factor: f64) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidGrid(format!("dimension must be 1 or 2, got {dim}")));
        }
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(Error::InvalidGrid(format!("half width must be positive, got {half_width}")));
        }
        if n < MIN_POINTS_PER_AXIS {
            return Err(Error::InvalidGrid(format!(
                "need at least {MIN_POINTS_PER_AXIS} points per axis, got {n}"
            )));
        }
        if !(ext_factor.is_finite() && ext_factor >= 1.0) {
            return Err(Error::InvalidGrid(format!("extension factor must be >= 1, got {ext_factor}")));
        }
        let scaled = ext_factor * n as f64;
        let n_ext = scaled.round();
        if (scaled - n_ext).abs() > 1e-9 || !(n_ext as usize - n).is_multiple_of(2) {
            return Err(Error::InvalidGrid(format!(
                "extension factor {ext_factor} does not align the extended box with the {n}-cell grid"
            )));
        }
        Ok(Self { dim, half_width, n, ext_factor })
    }

    /// One-dimensional grid on `[-half_width, half_width]` without extension.
    pub fn line(half_width: f64, n: usize) -> Result<Self> {
        Self::new(1, half_width, n, 1.0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn points_per_axis(&self) -> usize {
        self.n
    }

    pub fn ext_factor(&self) -> f64 {
        self.ext_factor
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / self.n as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    pub fn node_count(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    /// Coordinate of the `i`-th cell centre along any axis.
    pub fn axis_coord(&self, i: usize) -> f64 {
        -self.half_width + (i as f64 + 0.5) * self.spacing()
    }

    /// Axis indices of a flat node index (row-major, first axis slowest).
    pub fn multi_index(&self, idx: usize) -> [usize; 2] {
        match self.dim {
            1 => [idx, 0],
            _ => [idx / self.n, idx % self.n],
        }
    }

    pub fn flat_index(&self, mi: [usize; 2]) -> usize {
        match self.dim {
            1 => mi[0],
            _ => mi[0] * self.n + mi[1],
        }
    }

    /// Coordinates of node `idx`; the second entry is 0 when `d = 1`.
    pub fn node(&self, idx: usize) -> [f64; 2] {
        let mi = self.multi_index(idx);
        match self.dim {
            1 => [self.axis_coord(mi[0]), 0.0],
            _ => [self.axis_coord(mi[0]), self.axis_coord(mi[1])],
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.node_count()).map(move |i| self.node(i))
    }

    /// Euclidean norm of node `idx`.
    pub fn node_radius(&self, idx: usize) -> f64 {
        let p = self.node(idx);
        (p[0] * p[0] + p[1] * p[1]).sqrt()
    }

    /// Whether `point` lies in the closed box.
    pub fn contains(&self, point: &[f64]) -> bool {
        point[..self.dim].iter().all(|x| x.abs() <= self.half_width)
    }

    /// Index of the cell containing `point`, if inside the box.
    pub fn cell_of(&self, point: &[f64]) -> Option<usize> {
        let h = self.spacing();
        let mut mi = [0usize; 2];
        for a in 0..self.dim {
            let k = ((point[a] + self.half_width) / h).floor();
            if !(k >= 0.0 && k < self.n as f64) {
                return None;
            }
            mi[a] = k as usize;
        }
        Some(self.flat_index(mi))
    }

    /// The concentric evaluation box `[-c L, c L]^d` with the same spacing.
    pub fn extended(&self) -> GridSpec {
        let n_ext = (self.ext_factor * self.n as f64).round() as usize;
        GridSpec {
            dim: self.dim,
            half_width: self.ext_factor * self.half_width,
            n: n_ext,
            ext_factor: 1.0,
        }
    }

    /// Same grid with a different extension factor.
    pub fn with_ext_factor(&self, ext_factor: f64) -> Result<GridSpec> {
        GridSpec::new(self.dim, self.half_width, self.n, ext_factor)
    }

    /// Number of extended cells on each side of the base box, per axis.
    pub fn ext_margin(&self) -> usize {
        (self.extended().n - self.n) / 2
    }

    /// Flat index in the extended grid of base node `idx`.
    pub fn base_to_ext(&self, idx: usize) -> usize {
        let ext = self.extended();
        let m = self.ext_margin();
        let mi = self.multi_index(idx);
        ext.flat_index([mi[0] + m, if self.dim == 2 { mi[1] + m } else { 0 }])
    }

    /// Base index of extended node `idx`, if it lies inside the base box.
    pub fn ext_to_base(&self, idx: usize) -> Option<usize> {
        let ext = self.extended();
        let m = self.ext_margin();
        let mi = ext.multi_index(idx);
        let mut out = [0usize; 2];
        for a in 0..self.dim {
            if mi[a] < m || mi[a] >= m + self.n {
                return None;
            }
            out[a] = mi[a] - m;
        }
        Some(self.flat_index(out))
    }

    pub(crate) fn check_same(&self, other: &GridSpec) -> Result<()> {
        if self.dim != other.dim || self.n != other.n || self.half_width != other.half_width {
            return Err(Error::GridMismatch(format!(
                "(d={}, L={}, n={}) vs (d={}, L={}, n={})",
                self.dim, self.half_width, self.n, other.dim, other.half_width, other.n
            )));
        }
        Ok(())
    }
}

/// Boolean node set on a grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeMask(pub Vec<bool>);

impl NodeMask {
    pub fn empty(len: usize) -> Self {
        NodeMask(vec![false; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn is_subset_of(&self, other: &NodeMask) -> bool {
        self.0.iter().zip(&other.0).all(|(&a, &b)| !a || b)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
}

/// Real values over the nodes of a grid, zero outside the box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl SpaceField {
    pub fn zeros(grid: &GridSpec) -> Self {
        SpaceField { grid: grid.clone(), values: vec![0.0; grid.node_count()] }
    }

    pub fn from_values(grid: &GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} nodes",
                values.len(),
                grid.node_count()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite field value {v}")));
        }
        Ok(SpaceField { grid: grid.clone(), values })
    }

    /// Samples `f` at every node.
    pub fn from_fn(grid: &GridSpec, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = grid.nodes().map(|p| f(&p[..grid.dim()])).collect();
        SpaceField { grid: grid.clone(), values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Riemann sum `sum(values) * h^d`.
    pub fn integrate(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Default positivity threshold: `1e-8 * max(max value, 1)`.
    pub fn default_tol(&self) -> f64 {
        1e-8 * self.max().max(1.0)
    }

    pub fn positive_set(&self, tol: f64) -> NodeMask {
        NodeMask(self.values.iter().map(|&v| v > tol).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> SpaceField {
        SpaceField { grid: self.grid.clone(), values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &SpaceField, f: impl Fn(f64, f64) -> f64) -> Result<SpaceField> {
        self.grid.check_same(&other.grid)?;
        Ok(SpaceField {
            grid: self.grid.clone(),
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn masked(&self, mask: &NodeMask) -> SpaceField {
        SpaceField {
            grid: self.grid.clone(),
            values: self.values.iter().zip(&mask.0).map(|(&v, &m)| if m { v } else { 0.0 }).collect(),
        }
    }

    /// Embeds a base-box field into the extended box of its grid, padding with zeros.
    pub fn to_extended(&self) -> SpaceField {
        let ext = self.grid.extended();
        let mut out = SpaceField::zeros(&ext);
        for (i, &v) in self.values.iter().enumerate() {
            out.values[self.grid.base_to_ext(i)] = v;
        }
        out
    }

    /// Restricts an extended-box field to the base box `base`.
    pub fn restrict_to(&self, base: &GridSpec) -> Result<SpaceField> {
        base.extended().check_same(&self.grid)?;
        let values = (0..base.node_count()).map(|i| self.values[base.base_to_ext(i)]).collect();
        Ok(SpaceField { grid: base.clone(), values })
    }

    /// Inner product `sum(a * b) * h^d`.
    pub fn dot(&self, other: &SpaceField) -> Result<f64> {
        self.grid.check_same(&other.grid)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum::<f64>() * self.grid.cell_volume())
    }
}

/// Returns `sum(values) * h^d`.
pub fn integrate(field: &SpaceField) -> f64 {
    field.integrate()
}

/// L1 distance between two fields on the same grid.
pub fn l1_distance(a: &SpaceField, b: &SpaceField) -> Result<f64> {
    a.grid.check_same(&b.grid)?;
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).sum::<f64>() * a.grid.cell_volume())
}

/// Mask of nodes where the field exceeds `tol`.
pub fn positive_set(field: &SpaceField, tol: f64) -> NodeMask {
    field.positive_set(tol)
}

/// A nonnegative field with finite mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityField(SpaceField);

impl DensityField {
    pub fn new(field: SpaceField) -> Result<Self> {
        if let Some(v) = field.values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("density values must be finite and >= 0, found {v}")));
        }
        Ok(DensityField(field))
    }

    pub fn zeros(grid: &GridSpec) -> Self {
        DensityField(SpaceField::zeros(grid))
    }

    pub fn mass(&self) -> f64 {
        self.0.integrate()
    }

    pub fn field(&self) -> &SpaceField {
        &self.0
    }

    pub fn into_field(self) -> SpaceField {
        self.0
    }
}

impl std::ops::Deref for DensityField {
    type Target = SpaceField;
    fn deref(&self) -> &SpaceField {
        &self.0
    }
}

/// Time-indexed stack of fields on the uniform times `t_k = k * dt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeField {
    pub grid: GridSpec,
    pub dt: f64,
    pub slices: Vec<SpaceField>,
}

impl SpaceTimeField {
    pub fn new(grid: &GridSpec, dt: f64, slices: Vec<SpaceField>) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        if slices.is_empty() {
            return Err(Error::InvalidArgument("a space-time field needs at least one slice".into()));
        }
        for s in &slices {
            grid.check_same(&s.grid)?;
        }
        Ok(SpaceTimeField { grid: grid.clone(), dt, slices })
    }

    pub fn zeros(grid: &GridSpec, dt: f64, count: usize) -> Self {
        SpaceTimeField { grid: grid.clone(), dt, slices: vec![SpaceField::zeros(grid); count] }
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.time(self.slices.len() - 1)
    }

    pub fn slice(&self, k: usize) -> &SpaceField {
        &self.slices[k]
    }

    pub fn last(&self) -> &SpaceField {
        self.slices.last().expect("nonempty")
    }

    /// Index of the slice closest to time `t`.
    pub fn index_of(&self, t: f64) -> usize {
        ((t / self.dt).round().max(0.0) as usize).min(self.slices.len() - 1)
    }

    pub fn masses(&self) -> Vec<f64> {
        self.slices.iter().map(|s| s.integrate()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(h_inv: usize, l: f64) -> GridSpec {
        GridSpec::line(l, (2.0 * l) as usize * h_inv).unwrap()
    }

    #[test]
    fn zero_field_integrates_to_zero() {
        let g = line(64, 4.0);
        assert_eq!(SpaceField::zeros(&g).integrate(), 0.0);
    }

    #[test]
    fn indicator_mass_is_cell_count() {
        let g = line(64, 4.0);
        let h = g.spacing();
        let chi = SpaceField::from_fn(&g, |x| if x[0].abs() < 1.0 { 1.0 } else { 0.0 });
        assert!((chi.integrate() - 2.0).abs() <= h);
        let mu = chi.map(|v| 2.0 * v);
        assert!((mu.integrate() - 4.0).abs() <= 2.0 * h);
    }

    #[test]
    fn l1_distance_cases() {
        let g = line(64, 4.0);
        let f = SpaceField::from_fn(&g, |x| (x[0] * 3.0).sin());
        assert_eq!(l1_distance(&f, &f).unwrap(), 0.0);
        let chi = SpaceField::from_fn(&g, |x| if (0.0..1.0).contains(&x[0]) { 1.0 } else { 0.0 });
        let d = l1_distance(&chi, &SpaceField::zeros(&g)).unwrap();
        assert!((d - 1.0).abs() <= g.spacing());
        let other = GridSpec::line(4.0, 256).unwrap();
        assert!(matches!(
            l1_distance(&f, &SpaceField::zeros(&other)),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn positive_sets() {
        let g = line(64, 4.0);
        assert!(SpaceField::zeros(&g).positive_set(1e-10).is_empty());
        let chi = SpaceField::from_fn(&g, |x| if x[0].abs() < 1.0 { 1.0 } else { 0.0 });
        let m = chi.positive_set(0.5);
        for (i, p) in g.nodes().enumerate() {
            assert_eq!(m.get(i), p[0].abs() < 1.0);
        }
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::new(3, 1.0, 32, 1.0).is_err());
        assert!(GridSpec::new(1, 1.0, 8, 1.0).is_err());
        assert!(GridSpec::new(1, 1.0, 32, 0.5).is_err());
        assert!(GridSpec::new(1, 1.0, 32, 1.1).is_err());
        let g = GridSpec::new(1, 4.0, 512, 3.0).unwrap();
        assert_eq!(g.extended().points_per_axis(), 1536);
        assert_eq!(g.ext_margin(), 512);
    }

    #[test]
    fn grid_is_symmetric_and_cell_centred() {
        for g in [GridSpec::new(1, 4.0, 64, 1.0).unwrap(), GridSpec::new(2, 1.0, 16, 3.0).unwrap()] {
            let nodes: Vec<_> = g.nodes().collect();
            for p in &nodes {
                assert!(p[0] != 0.0 && (g.dim() == 1 || p[1] != 0.0));
                let mirrored = [-p[0], -p[1]];
                assert!(nodes.iter().any(|q| (q[0] - mirrored[0]).abs() < 1e-12 && (q[1] - mirrored[1]).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn extension_round_trip() {
        let g = GridSpec::new(2, 1.0, 16, 3.0).unwrap();
        let f = SpaceField::from_fn(&g, |x| x[0] + 2.0 * x[1]);
        let e = f.to_extended();
        for i in 0..g.node_count() {
            let j = g.base_to_ext(i);
            assert_eq!(g.ext_to_base(j), Some(i));
            let p = g.node(i);
            let q = e.grid.node(j);
            assert!((p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12);
        }
        assert!((e.integrate() - f.integrate()).abs() < 1e-12);
        assert_eq!(e.restrict_to(&g).unwrap(), f);
    }

    proptest! {
        #[test]
        fn integrate_is_linear_and_monotone(a in prop::collection::vec(-5.0f64..5.0, 32), b in prop::collection::vec(0.0f64..5.0, 32), c in -3.0f64..3.0) {
            let g = GridSpec::line(1.0, 32).unwrap();
            let fa = SpaceField::from_values(&g, a).unwrap();
            let fb = SpaceField::from_values(&g, b).unwrap();
            let sum = fa.zip_map(&fb, |x, y| x + c * y).unwrap();
            prop_assert!((sum.integrate() - fa.integrate() - c * fb.integrate()).abs() < 1e-9);
            let upper = fa.zip_map(&fb, |x, y| x + y).unwrap();
            prop_assert!(fa.integrate() <= upper.integrate() + 1e-12);
            prop_assert!((l1_distance(&fa, &fb).unwrap() - l1_distance(&fb, &fa).unwrap()).abs() < 1e-15);
        }

        #[test]
        fn positive_set_shrinks_with_tolerance(a in prop::collection::vec(-1.0f64..1.0, 32), t1 in 0.0f64..0.5, t2 in 0.0f64..0.5) {
            let g = GridSpec::line(1.0, 32).unwrap();
            let f = SpaceField::from_values(&g, a).unwrap();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(f.positive_set(hi).is_subset_of(&f.positive_set(lo)));
        }
    }
}
