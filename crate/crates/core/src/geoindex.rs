//! Cube-face quadtree cells on the sphere, great-circle lengths, and
//! length-proportional allocation of polylines across cells.
//!
//! A point is projected onto the face of the circumscribed cube that its
//! direction vector hits first, mapped through the quadratic area-equalizing
//! transform into `[0, 1)²` face coordinates, and quantized to a `2^30` grid.
//! A cell at level `L` is the top `L` bits of each grid coordinate, stored as
//! an interleaved quadtree path. Parent/child relations therefore hold by
//! construction. Cell ordering is plain `(face, level, position)` and does not
//! follow a space-filling curve.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Mean earth radius used for all lengths and areas.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
pub const METERS_PER_MILE: f64 = 1_609.344;
pub const MAX_LEVEL: u8 = 30;
/// Default densification step for polyline allocation.
pub const DEFAULT_STEP_M: f64 = 10.0;

const MAX_SIZE: u64 = 1 << MAX_LEVEL;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("coordinate is not finite (lat={lat}, lng={lng})")]
    NonFinite { lat: f64, lng: f64 },
    #[error("latitude {0} outside [-90, 90]")]
    LatitudeRange(f64),
    #[error("longitude {0} outside [-180, 180]")]
    LongitudeRange(f64),
    #[error("cell level {0} outside 0..=30")]
    InvalidLevel(i64),
    #[error("polyline needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("invalid cell token {token:?}: {reason}")]
    BadToken { token: String, reason: String },
    #[error("step_m must be positive and finite, got {0}")]
    InvalidStep(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    lat: f64,
    lng: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lng: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !lng.is_finite() {
            return Err(GeoError::NonFinite { lat, lng });
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::LatitudeRange(lat));
        }
        if !(-180.0..=180.0).contains(&lng) {
            return Err(GeoError::LongitudeRange(lng));
        }
        Ok(Self { lat, lng })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lng(&self) -> f64 {
        self.lng
    }

    fn to_unit(self) -> [f64; 3] {
        let (lat, lng) = (self.lat.to_radians(), self.lng.to_radians());
        [lat.cos() * lng.cos(), lat.cos() * lng.sin(), lat.sin()]
    }

    fn from_unit(v: [f64; 3]) -> Self {
        let lat = v[2].atan2((v[0] * v[0] + v[1] * v[1]).sqrt()).to_degrees();
        let lng = v[1].atan2(v[0]).to_degrees();
        Self {
            lat: lat.clamp(-90.0, 90.0),
            lng: lng.clamp(-180.0, 180.0),
        }
    }
}

/// Hierarchical cell identifier: a cube face plus a quadtree path of `level`
/// two-bit steps (`i` bit high, `j` bit low).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId {
    face: u8,
    level: u8,
    pos: u64,
}

fn check_level(level: u8) -> Result<(), GeoError> {
    if level > MAX_LEVEL {
        Err(GeoError::InvalidLevel(level as i64))
    } else {
        Ok(())
    }
}

fn interleave(i: u64, j: u64, level: u8) -> u64 {
    let mut pos = 0u64;
    for b in (0..level).rev() {
        pos = (pos << 2) | (((i >> b) & 1) << 1) | ((j >> b) & 1);
    }
    pos
}

fn deinterleave(pos: u64, level: u8) -> (u64, u64) {
    let (mut i, mut j) = (0u64, 0u64);
    for b in (0..level).rev() {
        let step = (pos >> (2 * b as u32)) & 3;
        i = (i << 1) | (step >> 1);
        j = (j << 1) | (step & 1);
    }
    (i, j)
}

impl CellId {
    /// Builds a cell from face-local grid coordinates at `level`.
    pub fn from_face_ij(face: u8, level: u8, i: u64, j: u64) -> Result<Self, GeoError> {
        check_level(level)?;
        let side = 1u64 << level;
        if face > 5 || i >= side || j >= side {
            return Err(GeoError::BadToken {
                token: format!("face={face} i={i} j={j}"),
                reason: format!("outside face grid of side {side}"),
            });
        }
        Ok(Self {
            face,
            level,
            pos: interleave(i, j, level),
        })
    }

    pub fn face(&self) -> u8 {
        self.face
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    pub fn position(&self) -> u64 {
        self.pos
    }

    /// Face-local grid coordinates at this cell's level.
    pub fn face_ij(&self) -> (u64, u64) {
        deinterleave(self.pos, self.level)
    }

    /// `None` for a face cell (level 0).
    pub fn parent(&self) -> Option<CellId> {
        (self.level > 0).then(|| CellId {
            face: self.face,
            level: self.level - 1,
            pos: self.pos >> 2,
        })
    }

    /// Ancestor at `level`, or `None` if `level` is finer than this cell.
    pub fn ancestor(&self, level: u8) -> Option<CellId> {
        (level <= self.level).then(|| CellId {
            face: self.face,
            level,
            pos: self.pos >> (2 * (self.level - level) as u32),
        })
    }

    pub fn children(&self) -> Option<[CellId; 4]> {
        (self.level < MAX_LEVEL).then(|| {
            [0u64, 1, 2, 3].map(|k| CellId {
                face: self.face,
                level: self.level + 1,
                pos: (self.pos << 2) | k,
            })
        })
    }

    pub fn contains(&self, other: &CellId) -> bool {
        other.ancestor(self.level).is_some_and(|a| a == *self)
    }

    /// Serialized form, e.g. `f2-l13-0a3f1c9`.
    pub fn token(&self) -> String {
        let width = (self.level as usize).div_ceil(2).max(1);
        format!("f{}-l{}-{:0width$x}", self.face, self.level, self.pos)
    }

    /// Point at fractional position `(fi, fj)` inside the cell, each in `[0, 1]`.
    pub fn point_at(&self, fi: f64, fj: f64) -> GeoPoint {
        let (i, j) = self.face_ij();
        let side = (1u64 << self.level) as f64;
        let s = (i as f64 + fi) / side;
        let t = (j as f64 + fj) / side;
        GeoPoint::from_unit(normalize(face_uv_to_xyz(
            self.face,
            uv_from_st(s),
            uv_from_st(t),
        )))
    }

    pub fn center(&self) -> GeoPoint {
        self.point_at(0.5, 0.5)
    }

    /// Corners in counter-clockwise `(i, j)` order.
    pub fn corners(&self) -> [GeoPoint; 4] {
        [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)].map(|(a, b)| self.point_at(a, b))
    }

    /// Exact spherical area of the cell, in km².
    pub fn area_km2(&self) -> f64 {
        let c = self.corners().map(GeoPoint::to_unit);
        let sr = triangle_area(c[0], c[1], c[2]) + triangle_area(c[0], c[2], c[3]);
        let r_km = EARTH_RADIUS_M / 1000.0;
        sr * r_km * r_km
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.token())
    }
}

impl FromStr for CellId {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |reason: &str| GeoError::BadToken {
            token: s.to_string(),
            reason: reason.to_string(),
        };
        let mut parts = s.trim().split('-');
        let (Some(f), Some(l), Some(p), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad("expected f<face>-l<level>-<hex>"));
        };
        let face: u8 = f
            .strip_prefix('f')
            .and_then(|x| x.parse().ok())
            .ok_or_else(|| bad("bad face"))?;
        let level: u8 = l
            .strip_prefix('l')
            .and_then(|x| x.parse().ok())
            .ok_or_else(|| bad("bad level"))?;
        let pos = u64::from_str_radix(p, 16).map_err(|_| bad("bad hex position"))?;
        if face > 5 {
            return Err(bad("face must be 0..=5"));
        }
        if level > MAX_LEVEL {
            return Err(bad("level must be 0..=30"));
        }
        if pos >> (2 * level as u32) != 0 {
            return Err(bad("position has more bits than level allows"));
        }
        Ok(CellId { face, level, pos })
    }
}

impl Serialize for CellId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.token())
    }
}

impl<'de> Deserialize<'de> for CellId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Solid angle of the spherical triangle `abc` (unit vectors).
fn triangle_area(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let num = dot(a, cross(b, c)).abs();
    let den = 1.0 + dot(a, b) + dot(b, c) + dot(c, a);
    2.0 * num.atan2(den)
}

fn face_of(v: [f64; 3]) -> u8 {
    let abs = v.map(f64::abs);
    // ties resolve to the lowest axis
    let axis = if abs[0] >= abs[1] && abs[0] >= abs[2] {
        0
    } else if abs[1] >= abs[2] {
        1
    } else {
        2
    };
    if v[axis] < 0.0 {
        axis as u8 + 3
    } else {
        axis as u8
    }
}

fn xyz_to_face_uv(face: u8, v: [f64; 3]) -> (f64, f64) {
    let [x, y, z] = v;
    match face {
        0 => (y / x, z / x),
        1 => (-x / y, z / y),
        2 => (-x / z, -y / z),
        3 => (z / x, y / x),
        4 => (z / y, -x / y),
        _ => (-y / z, -x / z),
    }
}

fn face_uv_to_xyz(face: u8, u: f64, v: f64) -> [f64; 3] {
    match face {
        0 => [1.0, u, v],
        1 => [-u, 1.0, v],
        2 => [-u, -v, 1.0],
        3 => [-1.0, -v, -u],
        4 => [v, -1.0, -u],
        _ => [v, u, -1.0],
    }
}

fn st_from_uv(u: f64) -> f64 {
    if u >= 0.0 {
        0.5 * (1.0 + 3.0 * u).sqrt()
    } else {
        1.0 - 0.5 * (1.0 - 3.0 * u).sqrt()
    }
}

fn uv_from_st(s: f64) -> f64 {
    if s >= 0.5 {
        (4.0 * s * s - 1.0) / 3.0
    } else {
        (1.0 - 4.0 * (1.0 - s) * (1.0 - s)) / 3.0
    }
}

fn st_to_grid(s: f64) -> u64 {
    // floor gives half-open [k, k+1) intervals in projected space
    let g = (s * MAX_SIZE as f64).floor();
    g.clamp(0.0, (MAX_SIZE - 1) as f64) as u64
}

/// Cell containing `p` at `level`.
pub fn cell_from_point(p: GeoPoint, level: u8) -> Result<CellId, GeoError> {
    check_level(level)?;
    if !p.lat.is_finite() || !p.lng.is_finite() {
        return Err(GeoError::NonFinite {
            lat: p.lat,
            lng: p.lng,
        });
    }
    let v = p.to_unit();
    let face = face_of(v);
    let (u, w) = xyz_to_face_uv(face, v);
    let i = st_to_grid(st_from_uv(u)) >> (MAX_LEVEL - level);
    let j = st_to_grid(st_from_uv(w)) >> (MAX_LEVEL - level);
    Ok(CellId {
        face,
        level,
        pos: interleave(i, j, level),
    })
}

/// Mean cell area at `level` in km²: sphere area divided by `6·4^level`.
pub fn mean_cell_area_km2(level: u8) -> f64 {
    let r_km = EARTH_RADIUS_M / 1000.0;
    4.0 * std::f64::consts::PI * r_km * r_km / (6.0 * 4f64.powi(level as i32))
}

fn central_angle(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lng - a.lng).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * h.sqrt().min(1.0).asin()
}

/// Great-circle distance in meters on a sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    EARTH_RADIUS_M * central_angle(a, b)
}

/// Point at fraction `f` of the great-circle arc from `a` to `b`.
pub fn interpolate(a: GeoPoint, b: GeoPoint, f: f64) -> GeoPoint {
    let theta = central_angle(a, b);
    let (va, vb) = (a.to_unit(), b.to_unit());
    let (wa, wb) = if theta < 1e-9 {
        (1.0 - f, f)
    } else {
        let s = theta.sin();
        (((1.0 - f) * theta).sin() / s, (f * theta).sin() / s)
    };
    GeoPoint::from_unit(normalize([
        wa * va[0] + wb * vb[0],
        wa * va[1] + wb * vb[1],
        wa * va[2] + wb * vb[2],
    ]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<GeoPoint>,
}

impl Polyline {
    pub fn new(points: Vec<GeoPoint>) -> Result<Self, GeoError> {
        if points.len() < 2 {
            return Err(GeoError::TooFewPoints(points.len()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[GeoPoint] {
        &self.points
    }

    pub fn length_m(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| haversine_m(w[0], w[1]))
            .sum()
    }
}

/// Fraction of a polyline's length falling in each cell.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellAllocation {
    entries: BTreeMap<CellId, f64>,
}

impl CellAllocation {
    pub fn entries(&self) -> &BTreeMap<CellId, f64> {
        &self.entries
    }

    pub fn get(&self, cell: &CellId) -> f64 {
        self.entries.get(cell).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CellId, &f64)> {
        self.entries.iter()
    }

    pub fn total(&self) -> f64 {
        self.entries.values().sum()
    }
}

/// Splits each edge into `ceil(len / step_m)` equal great-circle sub-steps and
/// credits each sub-step's length to the cell holding its midpoint.
pub fn allocate_polyline(
    line: &Polyline,
    level: u8,
    step_m: f64,
) -> Result<CellAllocation, GeoError> {
    check_level(level)?;
    if !(step_m > 0.0 && step_m.is_finite()) {
        return Err(GeoError::InvalidStep(step_m));
    }
    let mut lengths: BTreeMap<CellId, f64> = BTreeMap::new();
    let mut total = 0.0;
    for w in line.points.windows(2) {
        let d = haversine_m(w[0], w[1]);
        if d <= 0.0 {
            continue;
        }
        let n = (d / step_m).ceil().max(1.0) as u64;
        let piece = d / n as f64;
        for k in 0..n {
            let mid = interpolate(w[0], w[1], (k as f64 + 0.5) / n as f64);
            *lengths.entry(cell_from_point(mid, level)?).or_insert(0.0) += piece;
            total += piece;
        }
    }
    if total <= 0.0 {
        return Ok(CellAllocation::default());
    }
    let entries = lengths.into_iter().map(|(c, l)| (c, l / total)).collect();
    Ok(CellAllocation { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(lat: f64, lng: f64) -> GeoPoint {
        GeoPoint::new(lat, lng).unwrap()
    }

    #[test]
    fn rejects_bad_points() {
        assert!(matches!(
            GeoPoint::new(91.0, 0.0),
            Err(GeoError::LatitudeRange(_))
        ));
        assert!(matches!(
            GeoPoint::new(0.0, -180.5),
            Err(GeoError::LongitudeRange(_))
        ));
        assert!(matches!(
            GeoPoint::new(f64::NAN, 0.0),
            Err(GeoError::NonFinite { .. })
        ));
    }

    #[test]
    fn invalid_level() {
        assert_eq!(
            cell_from_point(pt(0.0, 0.0), 31),
            Err(GeoError::InvalidLevel(31))
        );
    }

    #[test]
    fn haversine_examples() {
        let o = pt(0.0, 0.0);
        assert_eq!(haversine_m(o, o), 0.0);
        let expected = 2.0 * std::f64::consts::PI * EARTH_RADIUS_M / 360.0;
        assert!((haversine_m(o, pt(0.0, 1.0)) - expected).abs() < 1e-6);
        assert!((expected - 111_195.0).abs() < 1.0);
        let half = std::f64::consts::PI * EARTH_RADIUS_M;
        assert!((haversine_m(o, pt(0.0, 180.0)) - half).abs() < 1e-6);
        assert!((half - 20_015_087.0).abs() < 1.0);
    }

    #[test]
    fn faces_cover_axes() {
        let cases = [
            (pt(0.0, 0.0), 0),
            (pt(0.0, 90.0), 1),
            (pt(90.0, 0.0), 2),
            (pt(0.0, 180.0), 3),
            (pt(0.0, -90.0), 4),
            (pt(-90.0, 0.0), 5),
        ];
        for (p, face) in cases {
            assert_eq!(cell_from_point(p, 0).unwrap().face(), face);
        }
    }

    #[test]
    fn level_zero_has_empty_path() {
        let c = cell_from_point(pt(10.0, 10.0), 0).unwrap();
        assert_eq!(c.position(), 0);
        assert_eq!(c.parent(), None);
        assert_eq!(c.token(), "f0-l0-0");
    }

    #[test]
    fn token_round_trip_and_errors() {
        let c = cell_from_point(pt(37.7749, -122.4194), 13).unwrap();
        let tok = c.token();
        assert_eq!(tok.parse::<CellId>().unwrap(), c);
        assert!("f6-l1-0".parse::<CellId>().is_err());
        assert!("f0-l1-4".parse::<CellId>().is_err());
        assert!("f0-l31-0".parse::<CellId>().is_err());
        assert!("garbage".parse::<CellId>().is_err());
    }

    #[test]
    fn face_ij_round_trip() {
        let c = CellId::from_face_ij(4, 13, 1234, 8000).unwrap();
        assert_eq!(c.face_ij(), (1234, 8000));
        assert!(CellId::from_face_ij(4, 13, 8192, 0).is_err());
    }

    #[test]
    fn center_maps_back_to_cell() {
        let c = cell_from_point(pt(-33.9, 151.2), 13).unwrap();
        assert_eq!(cell_from_point(c.center(), 13).unwrap(), c);
        assert!(c.contains(&cell_from_point(c.center(), 20).unwrap()));
    }

    #[test]
    fn level3_areas_sum_to_sphere() {
        let mut total = 0.0;
        for face in 0..6 {
            for i in 0..8 {
                for j in 0..8 {
                    total += CellId::from_face_ij(face, 3, i, j).unwrap().area_km2();
                }
            }
        }
        let sphere = mean_cell_area_km2(0) * 6.0;
        assert!((total - sphere).abs() / sphere < 1e-9);
    }

    #[test]
    fn zero_length_polyline_is_empty() {
        let p = pt(37.0, -122.0);
        let line = Polyline::new(vec![p, p, p]).unwrap();
        assert!(allocate_polyline(&line, 13, 10.0).unwrap().is_empty());
        assert!(Polyline::new(vec![p]).is_err());
        assert!(allocate_polyline(&line, 13, 0.0).is_err());
    }

    #[test]
    fn short_segment_inside_one_cell() {
        let cell = cell_from_point(pt(37.76, -122.44), 13).unwrap();
        let line = Polyline::new(vec![cell.point_at(0.4, 0.5), cell.point_at(0.6, 0.5)]).unwrap();
        let alloc = allocate_polyline(&line, 13, 10.0).unwrap();
        assert_eq!(alloc.len(), 1);
        assert_eq!(alloc.get(&cell), 1.0);
    }
}
