//! Voxel grid, electrode belt, and measurement protocol.
//!
//! Physical axes: columns run along `x`, rows along `y`, planes along `z`.
//! The lateral boundary of the body is the ellipse inscribed in the `(x, y)`
//! extent; electrodes sit on that ellipse.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::volume::{Dims3, VOXEL_ORDERING};

/// Axis-aligned physical bounding box in meters, `[x, y, z]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Extent {
    pub const fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub const fn unit() -> Self {
        Self::new([0.0; 3], [1.0; 3])
    }

    /// Adult-thorax sized box: 30 cm wide, 20 cm deep, 20 cm tall.
    pub const fn thorax() -> Self {
        Self::new([-0.15, -0.10, 0.0], [0.15, 0.10, 0.20])
    }

    pub fn span(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn center(&self) -> [f64; 3] {
        [
            0.5 * (self.max[0] + self.min[0]),
            0.5 * (self.max[1] + self.min[1]),
            0.5 * (self.max[2] + self.min[2]),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    dims: Dims3,
    extent: Extent,
}

/// Validated grid constructor. Every dimension must be at least 2.
pub fn build_grid(rows: usize, cols: usize, planes: usize, extent: Extent) -> Result<GridGeometry> {
    for (name, n) in [("rows", rows), ("cols", cols), ("planes", planes)] {
        if n < 2 {
            return Err(Error::invalid(format!("grid {name} must be >= 2, got {n}")));
        }
    }
    let span = extent.span();
    if span.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::invalid(format!(
            "extent spans must be finite and positive, got {span:?}"
        )));
    }
    Ok(GridGeometry {
        dims: Dims3::new(rows, cols, planes),
        extent,
    })
}

impl GridGeometry {
    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn rows(&self) -> usize {
        self.dims.rows
    }

    pub fn cols(&self) -> usize {
        self.dims.cols
    }

    pub fn planes(&self) -> usize {
        self.dims.planes
    }

    /// Voxel count `Q = R * C * P`.
    pub fn voxel_count(&self) -> usize {
        self.dims.len()
    }

    pub fn extent(&self) -> Extent {
        self.extent
    }

    /// Voxel pitch `[dx, dy, dz]`.
    pub fn pitch(&self) -> [f64; 3] {
        let span = self.extent.span();
        [
            span[0] / self.dims.cols as f64,
            span[1] / self.dims.rows as f64,
            span[2] / self.dims.planes as f64,
        ]
    }

    pub fn voxel_volume(&self) -> f64 {
        let [dx, dy, dz] = self.pitch();
        dx * dy * dz
    }

    pub fn voxel_center(&self, r: usize, c: usize, p: usize) -> [f64; 3] {
        let [dx, dy, dz] = self.pitch();
        [
            self.extent.min[0] + (c as f64 + 0.5) * dx,
            self.extent.min[1] + (r as f64 + 0.5) * dy,
            self.extent.min[2] + (p as f64 + 0.5) * dz,
        ]
    }

    /// All voxel centers in canonical order.
    pub fn voxel_centers(&self) -> Vec<[f64; 3]> {
        (0..self.voxel_count())
            .map(|q| {
                let (r, c, p) = self.dims.coords(q);
                self.voxel_center(r, c, p)
            })
            .collect()
    }

    /// Stable identifier derived from shape and extent.
    pub fn id(&self) -> String {
        let text = serde_json::to_string(self).expect("grid serializes");
        format!("grid-{}", io::fingerprint(text.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeArray {
    pub positions: Vec<[f64; 3]>,
    pub layer_assignment: Vec<usize>,
    pub per_layer: usize,
    pub layers: usize,
}

impl ElectrodeArray {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Default belt heights: one third and two thirds of the vertical extent.
pub fn default_layer_heights(grid: &GridGeometry) -> Vec<f64> {
    let e = grid.extent();
    let span = e.span()[2];
    vec![e.min[2] + span / 3.0, e.min[2] + 2.0 * span / 3.0]
}

/// Places `n_per_layer` electrodes per layer at equal angular spacing on the
/// lateral ellipse, starting on the +x axis and running counterclockwise.
/// Electrode `k` of layer `l` gets index `l * n_per_layer + k`.
pub fn place_electrodes(
    grid: &GridGeometry,
    n_per_layer: usize,
    layers: usize,
    layer_heights: &[f64],
) -> Result<ElectrodeArray> {
    if n_per_layer < 4 {
        return Err(Error::invalid(format!(
            "need at least 4 electrodes per layer, got {n_per_layer}"
        )));
    }
    if layers == 0 {
        return Err(Error::invalid("need at least one electrode layer"));
    }
    if layer_heights.len() != layers {
        return Err(Error::invalid(format!(
            "{layers} layers requested but {} heights given",
            layer_heights.len()
        )));
    }
    let extent = grid.extent();
    for &z in layer_heights {
        if !(z >= extent.min[2] && z <= extent.max[2]) {
            return Err(Error::invalid(format!(
                "layer height {z} outside vertical extent [{}, {}]",
                extent.min[2], extent.max[2]
            )));
        }
    }
    let [cx, cy, _] = extent.center();
    let span = extent.span();
    let (a, b) = (0.5 * span[0], 0.5 * span[1]);
    let mut positions = Vec::with_capacity(n_per_layer * layers);
    let mut layer_assignment = Vec::with_capacity(n_per_layer * layers);
    for (layer, &z) in layer_heights.iter().enumerate() {
        for k in 0..n_per_layer {
            let theta = 2.0 * PI * k as f64 / n_per_layer as f64;
            positions.push([cx + a * theta.cos(), cy + b * theta.sin(), z]);
            layer_assignment.push(layer);
        }
    }
    Ok(ElectrodeArray {
        positions,
        layer_assignment,
        per_layer: n_per_layer,
        layers,
    })
}

/// 32 electrodes in two rings of 16 at the default heights.
pub fn default_electrodes(grid: &GridGeometry) -> Result<ElectrodeArray> {
    place_electrodes(grid, 16, 2, &default_layer_heights(grid))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolScheme {
    /// Adjacent drive and adjacent measurement pairs, each within one ring.
    AdjacentInLayer,
    /// Adjacent drive pairs within a ring, measured on adjacent pairs of
    /// every ring.
    CrossLayer,
}

impl std::str::FromStr for ProtocolScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adjacent_in_layer" | "adjacent" => Ok(Self::AdjacentInLayer),
            "cross_layer" | "cross" => Ok(Self::CrossLayer),
            other => Err(Error::invalid(format!("unknown protocol scheme {other:?}"))),
        }
    }
}

/// One measurement: `[drive_source, drive_sink, measure_plus, measure_minus]`.
pub type Quad = [usize; 4];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementProtocol {
    pub scheme: ProtocolScheme,
    pub pairs: Vec<Quad>,
}

impl MeasurementProtocol {
    /// Number of measurements per frame, `M`.
    pub fn count(&self) -> usize {
        self.pairs.len()
    }

    pub fn id(&self) -> String {
        let text = serde_json::to_string(&self.pairs).expect("pairs serialize");
        format!("protocol-{}", io::fingerprint(text.as_bytes()))
    }
}

fn ring_pair(layer: usize, n: usize, k: usize) -> (usize, usize) {
    (layer * n + k, layer * n + (k + 1) % n)
}

/// Enumerates the measurement list. For every drive pair (layer-major, then
/// electrode order) the admissible measure pairs are listed in electrode-index
/// order, skipping any pair that touches a drive electrode.
pub fn generate_protocol(array: &ElectrodeArray, scheme: ProtocolScheme) -> Result<MeasurementProtocol> {
    let n = array.per_layer;
    if n < 4 || array.layers == 0 || array.len() != n * array.layers {
        return Err(Error::invalid("electrode array is not a set of full rings"));
    }
    if scheme == ProtocolScheme::CrossLayer && array.layers < 2 {
        return Err(Error::invalid("cross_layer protocol needs at least two layers"));
    }
    let mut pairs = Vec::new();
    for drive_layer in 0..array.layers {
        for k in 0..n {
            let (ds, dk) = ring_pair(drive_layer, n, k);
            let measure_layers: Vec<usize> = match scheme {
                ProtocolScheme::AdjacentInLayer => vec![drive_layer],
                ProtocolScheme::CrossLayer => (0..array.layers).collect(),
            };
            for ml in measure_layers {
                for j in 0..n {
                    let (mp, mm) = ring_pair(ml, n, j);
                    if [mp, mm].iter().any(|e| *e == ds || *e == dk) {
                        continue;
                    }
                    pairs.push([ds, dk, mp, mm]);
                }
            }
        }
    }
    Ok(MeasurementProtocol { scheme, pairs })
}

/// Structured-text geometry description written next to every run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometrySidecar {
    #[serde(rename = "R")]
    pub rows: usize,
    #[serde(rename = "C")]
    pub cols: usize,
    #[serde(rename = "P")]
    pub planes: usize,
    pub extent: Extent,
    pub ordering: String,
    pub grid_ref: String,
    pub protocol_ref: String,
    pub scheme: ProtocolScheme,
    pub per_layer: usize,
    pub layers: usize,
    pub electrodes: Vec<[f64; 3]>,
    pub protocol: Vec<Quad>,
}

/// The full measurement setup: grid, belt, protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct Setup {
    pub grid: GridGeometry,
    pub electrodes: ElectrodeArray,
    pub protocol: MeasurementProtocol,
}

impl Setup {
    pub fn new(grid: GridGeometry, electrodes: ElectrodeArray, scheme: ProtocolScheme) -> Result<Self> {
        let protocol = generate_protocol(&electrodes, scheme)?;
        Ok(Self {
            grid,
            electrodes,
            protocol,
        })
    }

    /// Thorax box at the requested resolution, 2 x 16 electrodes, in-ring protocol.
    pub fn thorax(rows: usize, cols: usize, planes: usize) -> Result<Self> {
        let grid = build_grid(rows, cols, planes, Extent::thorax())?;
        let electrodes = default_electrodes(&grid)?;
        Self::new(grid, electrodes, ProtocolScheme::AdjacentInLayer)
    }

    pub fn sidecar(&self) -> GeometrySidecar {
        let d = self.grid.dims();
        GeometrySidecar {
            rows: d.rows,
            cols: d.cols,
            planes: d.planes,
            extent: self.grid.extent(),
            ordering: VOXEL_ORDERING.to_string(),
            grid_ref: self.grid.id(),
            protocol_ref: self.protocol.id(),
            scheme: self.protocol.scheme,
            per_layer: self.electrodes.per_layer,
            layers: self.electrodes.layers,
            electrodes: self.electrodes.positions.clone(),
            protocol: self.protocol.pairs.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, &self.sidecar())
    }

    /// Reloads a setup and checks the stored electrodes and protocol against
    /// a fresh regeneration.
    pub fn load(path: &Path) -> Result<Self> {
        let side: GeometrySidecar = io::read_json(path)?;
        if side.ordering != VOXEL_ORDERING {
            return Err(Error::format(path, format!("unsupported ordering {:?}", side.ordering)));
        }
        let grid = build_grid(side.rows, side.cols, side.planes, side.extent)?;
        let heights: Vec<f64> = (0..side.layers)
            .map(|l| side.electrodes.get(l * side.per_layer).map_or(f64::NAN, |e| e[2]))
            .collect();
        let electrodes = place_electrodes(&grid, side.per_layer, side.layers, &heights)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let setup = Self::new(grid, electrodes, side.scheme)?;
        if setup.protocol.pairs != side.protocol {
            return Err(Error::format(path, "protocol does not match its scheme"));
        }
        if setup.grid.id() != side.grid_ref {
            return Err(Error::format(path, "grid_ref does not match the stored grid"));
        }
        Ok(setup)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_count(n: usize) -> usize {
        let mut count = 0;
        for d in 0..n {
            let drive = [d, (d + 1) % n];
            for m in 0..n {
                let meas = [m, (m + 1) % n];
                if meas.iter().all(|e| !drive.contains(e)) {
                    count += 1;
                }
            }
        }
        count
    }

    #[test]
    fn grid_voxel_counts() {
        assert_eq!(build_grid(2, 2, 2, Extent::unit()).unwrap().voxel_count(), 8);
        assert_eq!(
            build_grid(32, 32, 32, Extent::thorax()).unwrap().voxel_count(),
            32768
        );
    }

    #[test]
    fn corner_voxel_center_is_half_pitch_in() {
        let g = build_grid(16, 16, 8, Extent::unit()).unwrap();
        let c = g.voxel_center(0, 0, 0);
        assert_eq!(c, [1.0 / 32.0, 1.0 / 32.0, 1.0 / 16.0]);
        let far = g.voxel_center(15, 15, 7);
        assert!((far[0] - (1.0 - 1.0 / 32.0)).abs() < 1e-15);
        assert!((far[2] - (1.0 - 1.0 / 16.0)).abs() < 1e-15);
    }

    #[test]
    fn bad_grids_are_rejected() {
        assert!(build_grid(0, 4, 4, Extent::unit()).is_err());
        assert!(build_grid(4, 1, 4, Extent::unit()).is_err());
        let flat = Extent::new([0.0; 3], [1.0, 0.0, 1.0]);
        assert!(build_grid(4, 4, 4, flat).is_err());
    }

    #[test]
    fn default_belt_has_32_electrodes() {
        let g = build_grid(16, 16, 8, Extent::thorax()).unwrap();
        let a = default_electrodes(&g).unwrap();
        assert_eq!(a.len(), 32);
        assert_eq!(a.layer_assignment.iter().filter(|&&l| l == 0).count(), 16);
        assert_eq!(a.layer_assignment.iter().filter(|&&l| l == 1).count(), 16);
    }

    #[test]
    fn four_electrodes_at_right_angles() {
        let g = build_grid(4, 4, 4, Extent::new([-1.0, -1.0, 0.0], [1.0, 1.0, 1.0])).unwrap();
        let a = place_electrodes(&g, 4, 1, &[0.5]).unwrap();
        let expected = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
        for (pos, exp) in a.positions.iter().zip(expected) {
            assert!((pos[0] - exp[0]).abs() < 1e-12 && (pos[1] - exp[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn adjacent_electrodes_are_22_5_degrees_apart() {
        let g = build_grid(8, 8, 8, Extent::new([-1.0, -1.0, 0.0], [1.0, 1.0, 1.0])).unwrap();
        let a = place_electrodes(&g, 16, 2, &[0.25, 0.75]).unwrap();
        for layer in 0..2 {
            for k in 0..16 {
                let p = a.positions[layer * 16 + k];
                let q = a.positions[layer * 16 + (k + 1) % 16];
                let mut d = q[1].atan2(q[0]) - p[1].atan2(p[0]);
                if d < 0.0 {
                    d += 2.0 * PI;
                }
                assert!((d.to_degrees() - 22.5).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn electrodes_lie_on_lateral_ellipse() {
        let g = build_grid(16, 16, 8, Extent::thorax()).unwrap();
        let a = default_electrodes(&g).unwrap();
        let [cx, cy, _] = g.extent().center();
        let span = g.extent().span();
        for p in &a.positions {
            let rho = ((p[0] - cx) / (0.5 * span[0])).powi(2) + ((p[1] - cy) / (0.5 * span[1])).powi(2);
            assert!((rho - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn electrode_positions_ignore_resolution() {
        let coarse = build_grid(8, 8, 4, Extent::thorax()).unwrap();
        let fine = build_grid(32, 32, 16, Extent::thorax()).unwrap();
        assert_eq!(
            default_electrodes(&coarse).unwrap().positions,
            default_electrodes(&fine).unwrap().positions
        );
    }

    #[test]
    fn layer_height_outside_extent_is_rejected() {
        let g = build_grid(8, 8, 4, Extent::thorax()).unwrap();
        assert!(matches!(
            place_electrodes(&g, 16, 1, &[0.5]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn ring_protocol_counts_match_enumeration() {
        let g = build_grid(8, 8, 4, Extent::thorax()).unwrap();
        let ring16 = place_electrodes(&g, 16, 1, &[0.1]).unwrap();
        let p16 = generate_protocol(&ring16, ProtocolScheme::AdjacentInLayer).unwrap();
        assert_eq!(p16.count(), brute_force_count(16));
        assert_eq!(p16.count(), 208);
        let ring4 = place_electrodes(&g, 4, 1, &[0.1]).unwrap();
        let p4 = generate_protocol(&ring4, ProtocolScheme::AdjacentInLayer).unwrap();
        assert_eq!(p4.count(), brute_force_count(4));
        assert_eq!(p4.count(), 4);
    }

    #[test]
    fn default_two_ring_protocol_size() {
        let setup = Setup::thorax(16, 16, 8).unwrap();
        assert_eq!(setup.protocol.count(), 2 * 208);
        let cross = generate_protocol(&setup.electrodes, ProtocolScheme::CrossLayer).unwrap();
        assert_eq!(cross.count(), 32 * (13 + 16));
    }

    #[test]
    fn protocol_never_reuses_drive_electrodes() {
        let setup = Setup::thorax(8, 8, 4).unwrap();
        let cross = generate_protocol(&setup.electrodes, ProtocolScheme::CrossLayer).unwrap();
        for q in setup.protocol.pairs.iter().chain(cross.pairs.iter()) {
            assert!(q[2] != q[0] && q[2] != q[1] && q[3] != q[0] && q[3] != q[1]);
        }
    }

    #[test]
    fn cross_layer_needs_two_rings() {
        let g = build_grid(8, 8, 4, Extent::thorax()).unwrap();
        let ring = place_electrodes(&g, 16, 1, &[0.1]).unwrap();
        assert!(generate_protocol(&ring, ProtocolScheme::CrossLayer).is_err());
    }

    #[test]
    fn protocol_is_deterministic() {
        let setup = Setup::thorax(8, 8, 4).unwrap();
        let again = generate_protocol(&setup.electrodes, ProtocolScheme::AdjacentInLayer).unwrap();
        assert_eq!(
            serde_json::to_vec(&setup.protocol).unwrap(),
            serde_json::to_vec(&again).unwrap()
        );
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("geometry.json");
        let setup = Setup::thorax(8, 8, 4).unwrap();
        setup.save(&path).unwrap();
        assert_eq!(Setup::load(&path).unwrap(), setup);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("p-slowest,c-fastest"));
    }
}
