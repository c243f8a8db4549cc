//! Multi-layer 2.5D grid maps.
//!
//! Conventions: z-up, heights in meters, `row` follows +y and `col` follows +x.
//! The origin is the map-frame position of the center of cell `(0, 0)`.
//! Unknown cells hold NaN in every layer.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use thiserror::Error;

use crate::scalar::{round_half_down, same_values, GridScalar};

pub const ELEVATION: &str = "elevation";
pub const VARIANCE: &str = "variance";
pub const SUPPORT_COUNT: &str = "support_count";
pub const TRAVERSABILITY: &str = "traversability";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid grid geometry: {0}")]
    InvalidGeometry(String),
    #[error("point ({x}, {y}) lies outside the grid")]
    PointOutOfBounds { x: f64, y: f64 },
    #[error("cell ({row}, {col}) lies outside a {rows}x{cols} grid")]
    CellOutOfBounds { row: usize, col: usize, rows: usize, cols: usize },
    #[error("crop window does not intersect the grid")]
    EmptyIntersection,
    #[error("crop corners are not ordered")]
    UnorderedCorners,
    #[error("layer `{0}` not found")]
    MissingLayer(String),
    #[error("layer `{0}` already exists")]
    DuplicateLayer(String),
    #[error("layer `{name}` has {got} values, expected {expected}")]
    LayerSize { name: String, got: usize, expected: usize },
    #[error("the elevation layer cannot be removed")]
    ElevationRequired,
}

#[derive(Debug, Error)]
pub enum GridFileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic, not a grid-map file")]
    BadMagic,
    #[error("unsupported grid-map version {0}")]
    Version(u16),
    #[error("malformed grid-map file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellIndex {
    pub row: usize,
    pub col: usize,
}

impl CellIndex {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// Placement and size of a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry<T = f64> {
    resolution: T,
    origin: [T; 2],
    rows: usize,
    cols: usize,
}

impl<T: GridScalar> GridGeometry<T> {
    pub fn new(resolution: T, origin: [T; 2], rows: usize, cols: usize) -> Result<Self, GridError> {
        if !(resolution.is_finite() && resolution > T::zero()) {
            return Err(GridError::InvalidGeometry(format!(
                "resolution must be positive, got {:?}",
                resolution
            )));
        }
        if rows == 0 || cols == 0 {
            return Err(GridError::InvalidGeometry(format!("empty {rows}x{cols} grid")));
        }
        if !(origin[0].is_finite() && origin[1].is_finite()) {
            return Err(GridError::InvalidGeometry("non-finite origin".into()));
        }
        Ok(Self { resolution, origin, rows, cols })
    }

    pub fn resolution(&self) -> T {
        self.resolution
    }

    pub fn origin(&self) -> [T; 2] {
        self.origin
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, c: CellIndex) -> bool {
        c.row < self.rows && c.col < self.cols
    }

    /// Row-major offset of `c`; `c` must be in bounds.
    #[inline]
    pub fn linear(&self, c: CellIndex) -> usize {
        c.row * self.cols + c.col
    }

    #[inline]
    pub fn cell_of_linear(&self, i: usize) -> CellIndex {
        CellIndex::new(i / self.cols, i % self.cols)
    }

    fn check(&self, c: CellIndex) -> Result<(), GridError> {
        if self.contains(c) {
            Ok(())
        } else {
            Err(GridError::CellOutOfBounds { row: c.row, col: c.col, rows: self.rows, cols: self.cols })
        }
    }

    /// Continuous (col, row) coordinates of `p` in cell units.
    fn cell_coords(&self, p: [T; 2]) -> (T, T) {
        ((p[0] - self.origin[0]) / self.resolution, (p[1] - self.origin[1]) / self.resolution)
    }

    fn axis_index(v: T, n: usize) -> Option<usize> {
        let half = T::of(0.5);
        if !(v >= -half && v <= T::of(n as f64) - half) {
            return None;
        }
        let i = round_half_down(v).max(T::zero());
        i.to_usize().map(|i| i.min(n - 1))
    }

    /// Index of the cell whose center is nearest to `p`; exact halves go to the lower index.
    pub fn world_to_cell(&self, p: [T; 2]) -> Result<CellIndex, GridError> {
        let (cx, cy) = self.cell_coords(p);
        match (Self::axis_index(cy, self.rows), Self::axis_index(cx, self.cols)) {
            (Some(row), Some(col)) => Ok(CellIndex::new(row, col)),
            _ => Err(GridError::PointOutOfBounds { x: p[0].f64(), y: p[1].f64() }),
        }
    }

    pub fn cell_to_world(&self, c: CellIndex) -> Result<[T; 2], GridError> {
        self.check(c)?;
        Ok(self.center_unchecked(c))
    }

    #[inline]
    pub(crate) fn center_unchecked(&self, c: CellIndex) -> [T; 2] {
        [
            self.origin[0] + T::of(c.col as f64) * self.resolution,
            self.origin[1] + T::of(c.row as f64) * self.resolution,
        ]
    }

    /// Cells whose centers lie within `radius` of the center of `center`, row-major.
    pub fn cells_within_radius(&self, center: CellIndex, radius: T) -> Result<CellNeighborhood<T>, GridError> {
        self.check(center)?;
        let mut members = Vec::new();
        for (dr, dc) in disk_offsets(self.resolution, radius) {
            let r = center.row as isize + dr;
            let c = center.col as isize + dc;
            if r >= 0 && c >= 0 && (r as usize) < self.rows && (c as usize) < self.cols {
                members.push(CellIndex::new(r as usize, c as usize));
            }
        }
        Ok(CellNeighborhood { center, radius, members })
    }
}

/// Integer `(d_row, d_col)` offsets within `radius` of a cell center, row-major.
///
/// The comparison is made in cell units with a 1e-9 relative slack so that radii
/// that are whole multiples of the resolution include their boundary cells.
pub fn disk_offsets<T: GridScalar>(resolution: T, radius: T) -> Vec<(isize, isize)> {
    let rc = (radius / resolution).f64().max(0.0);
    let limit = rc * rc * (1.0 + 1e-9);
    let n = (rc * (1.0 + 1e-9)).floor() as isize;
    let mut out = Vec::with_capacity(((2 * n + 1) * (2 * n + 1)) as usize);
    for dr in -n..=n {
        for dc in -n..=n {
            if ((dr * dr + dc * dc) as f64) <= limit {
                out.push((dr, dc));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellNeighborhood<T = f64> {
    pub center: CellIndex,
    pub radius: T,
    pub members: Vec<CellIndex>,
}

/// Coordinate frame a grid is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Frame {
    #[default]
    Odom,
    Map,
    RoomLocal,
}

impl Frame {
    pub fn as_str(&self) -> &'static str {
        match self {
            Frame::Odom => "odom",
            Frame::Map => "map",
            Frame::RoomLocal => "room-local",
        }
    }
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Frame {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "odom" => Ok(Frame::Odom),
            "map" => Ok(Frame::Map),
            "room-local" => Ok(Frame::RoomLocal),
            other => Err(format!("unknown frame `{other}`")),
        }
    }
}

/// Named layers sharing one geometry. An `elevation` layer always exists.
#[derive(Debug, Clone)]
pub struct MultiLayerGrid<T = f64> {
    geometry: GridGeometry<T>,
    layers: BTreeMap<String, Vec<T>>,
    frame: Frame,
}

/// Unknown (NaN) cells compare equal to each other.
impl<T: GridScalar> PartialEq for MultiLayerGrid<T> {
    fn eq(&self, o: &Self) -> bool {
        self.geometry == o.geometry
            && self.frame == o.frame
            && self.layers.len() == o.layers.len()
            && self.layers.iter().zip(&o.layers).all(|((ka, a), (kb, b))| ka == kb && same_values(a, b))
    }
}

impl<T: GridScalar> MultiLayerGrid<T> {
    /// A grid with a single all-unknown elevation layer.
    pub fn new(geometry: GridGeometry<T>, frame: Frame) -> Self {
        let mut layers = BTreeMap::new();
        layers.insert(ELEVATION.to_string(), vec![T::nan(); geometry.len()]);
        Self { geometry, layers, frame }
    }

    pub fn from_layers(
        geometry: GridGeometry<T>,
        frame: Frame,
        layers: BTreeMap<String, Vec<T>>,
    ) -> Result<Self, GridError> {
        if !layers.contains_key(ELEVATION) {
            return Err(GridError::MissingLayer(ELEVATION.into()));
        }
        for (name, values) in &layers {
            if values.len() != geometry.len() {
                return Err(GridError::LayerSize {
                    name: name.clone(),
                    got: values.len(),
                    expected: geometry.len(),
                });
            }
        }
        Ok(Self { geometry, layers, frame })
    }

    pub fn geometry(&self) -> &GridGeometry<T> {
        &self.geometry
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn set_frame(&mut self, frame: Frame) {
        self.frame = frame;
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn has_layer(&self, name: &str) -> bool {
        self.layers.contains_key(name)
    }

    pub fn layer(&self, name: &str) -> Result<&[T], GridError> {
        self.layers.get(name).map(Vec::as_slice).ok_or_else(|| GridError::MissingLayer(name.into()))
    }

    pub fn layer_mut(&mut self, name: &str) -> Result<&mut [T], GridError> {
        self.layers
            .get_mut(name)
            .map(Vec::as_mut_slice)
            .ok_or_else(|| GridError::MissingLayer(name.into()))
    }

    pub fn elevation(&self) -> &[T] {
        &self.layers[ELEVATION]
    }

    pub fn elevation_mut(&mut self) -> &mut [T] {
        self.layers.get_mut(ELEVATION).expect("elevation layer always present")
    }

    /// Adds a layer filled with `fill`.
    pub fn add_layer(&mut self, name: &str, fill: T) -> Result<(), GridError> {
        if self.layers.contains_key(name) {
            return Err(GridError::DuplicateLayer(name.into()));
        }
        self.layers.insert(name.to_string(), vec![fill; self.geometry.len()]);
        Ok(())
    }

    /// Inserts or replaces a layer.
    pub fn insert_layer(&mut self, name: &str, values: Vec<T>) -> Result<(), GridError> {
        if values.len() != self.geometry.len() {
            return Err(GridError::LayerSize {
                name: name.into(),
                got: values.len(),
                expected: self.geometry.len(),
            });
        }
        self.layers.insert(name.to_string(), values);
        Ok(())
    }

    pub fn remove_layer(&mut self, name: &str) -> Result<Vec<T>, GridError> {
        if name == ELEVATION {
            return Err(GridError::ElevationRequired);
        }
        self.layers.remove(name).ok_or_else(|| GridError::MissingLayer(name.into()))
    }

    pub fn get(&self, name: &str, c: CellIndex) -> Result<T, GridError> {
        self.geometry.check(c)?;
        Ok(self.layer(name)?[self.geometry.linear(c)])
    }

    pub fn set(&mut self, name: &str, c: CellIndex, v: T) -> Result<(), GridError> {
        self.geometry.check(c)?;
        let i = self.geometry.linear(c);
        self.layer_mut(name)?[i] = v;
        Ok(())
    }

    /// Number of cells with a known elevation.
    pub fn known_count(&self) -> usize {
        self.elevation().iter().filter(|v| !v.is_nan()).count()
    }

    /// Sub-grid covering the cells nearest to the two corners and everything between.
    ///
    /// Corners are clamped to the grid's coverage; values are copied verbatim.
    pub fn crop(&self, min_corner: [T; 2], max_corner: [T; 2]) -> Result<Self, GridError> {
        if min_corner[0] > max_corner[0] || min_corner[1] > max_corner[1] {
            return Err(GridError::UnorderedCorners);
        }
        let g = &self.geometry;
        let (min_c, min_r) = g.cell_coords(min_corner);
        let (max_c, max_r) = g.cell_coords(max_corner);
        let half = T::of(0.5);
        let hi_c = T::of(g.cols as f64) - half;
        let hi_r = T::of(g.rows as f64) - half;
        if max_c < -half || max_r < -half || min_c > hi_c || min_r > hi_r {
            return Err(GridError::EmptyIntersection);
        }
        let clamp = |v: T, hi: T, n: usize| {
            GridGeometry::<T>::axis_index(v.max(-half).min(hi), n).expect("clamped into coverage")
        };
        let c0 = clamp(min_c, hi_c, g.cols);
        let c1 = clamp(max_c, hi_c, g.cols);
        let r0 = clamp(min_r, hi_r, g.rows);
        let r1 = clamp(max_r, hi_r, g.rows);
        self.sub_grid(r0, c0, r1 - r0 + 1, c1 - c0 + 1)
    }

    /// Copies the `rows x cols` block starting at `(row0, col0)`.
    pub fn sub_grid(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> Result<Self, GridError> {
        let g = &self.geometry;
        if row0 + rows > g.rows || col0 + cols > g.cols {
            return Err(GridError::CellOutOfBounds { row: row0 + rows, col: col0 + cols, rows: g.rows, cols: g.cols });
        }
        let origin = g.center_unchecked(CellIndex::new(row0, col0));
        let geometry = GridGeometry::new(g.resolution, origin, rows, cols)?;
        let layers = self
            .layers
            .iter()
            .map(|(name, src)| {
                let mut out = Vec::with_capacity(rows * cols);
                for r in row0..row0 + rows {
                    let start = r * g.cols + col0;
                    out.extend_from_slice(&src[start..start + cols]);
                }
                (name.clone(), out)
            })
            .collect();
        Ok(Self { geometry, layers, frame: self.frame })
    }

    /// Casts every layer to another scalar type.
    pub fn cast<U: GridScalar>(&self) -> MultiLayerGrid<U> {
        let g = &self.geometry;
        MultiLayerGrid {
            geometry: GridGeometry {
                resolution: U::of(g.resolution.f64()),
                origin: [U::of(g.origin[0].f64()), U::of(g.origin[1].f64())],
                rows: g.rows,
                cols: g.cols,
            },
            layers: self
                .layers
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|x| U::of(x.f64())).collect()))
                .collect(),
            frame: self.frame,
        }
    }
}

const MAGIC: &[u8; 4] = b"EXGM";
const VERSION: u16 = 1;

/// Serializes a grid in the binary grid-map format (little-endian, f32 cells).
pub fn write_grid<T: GridScalar, W: Write>(grid: &MultiLayerGrid<T>, mut w: W) -> Result<(), GridFileError> {
    let g = grid.geometry();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&g.resolution.f64().to_le_bytes())?;
    w.write_all(&g.origin[0].f64().to_le_bytes())?;
    w.write_all(&g.origin[1].f64().to_le_bytes())?;
    w.write_all(&(g.rows as u32).to_le_bytes())?;
    w.write_all(&(g.cols as u32).to_le_bytes())?;
    w.write_all(&(grid.layers.len() as u16).to_le_bytes())?;
    let mut buf = Vec::with_capacity(g.len() * 4);
    for (name, values) in &grid.layers {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(GridFileError::Malformed(format!("layer name too long: {name}")));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        buf.clear();
        for v in values {
            let f = v.to_f32().unwrap_or(f32::NAN);
            let f = if f.is_nan() { f32::NAN } else { f };
            buf.extend_from_slice(&f.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn encode_grid<T: GridScalar>(grid: &MultiLayerGrid<T>) -> Vec<u8> {
    let mut out = Vec::new();
    write_grid(grid, &mut out).expect("writing to a Vec cannot fail");
    out
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], GridFileError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => GridFileError::Malformed("truncated file".into()),
        _ => GridFileError::Io(e),
    })?;
    Ok(b)
}

/// Reads a grid in the binary grid-map format. The format does not carry a
/// frame, so the caller supplies it.
pub fn read_grid<T: GridScalar, R: Read>(mut r: R, frame: Frame) -> Result<MultiLayerGrid<T>, GridFileError> {
    if &read_array::<4, _>(&mut r)? != MAGIC {
        return Err(GridFileError::BadMagic);
    }
    let version = u16::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(GridFileError::Version(version));
    }
    let res = f64::from_le_bytes(read_array(&mut r)?);
    let ox = f64::from_le_bytes(read_array(&mut r)?);
    let oy = f64::from_le_bytes(read_array(&mut r)?);
    let rows = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let cols = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let count = u16::from_le_bytes(read_array(&mut r)?) as usize;
    let geometry = GridGeometry::new(T::of(res), [T::of(ox), T::of(oy)], rows, cols)?;
    let mut layers = BTreeMap::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| GridFileError::Malformed("layer name is not UTF-8".into()))?;
        let mut raw = vec![0u8; rows * cols * 4];
        r.read_exact(&mut raw).map_err(|_| GridFileError::Malformed(format!("truncated layer `{name}`")))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        if layers.insert(name.clone(), values).is_some() {
            return Err(GridError::DuplicateLayer(name).into());
        }
    }
    Ok(MultiLayerGrid::from_layers(geometry, frame, layers)?)
}
