//! Balanced hierarchical partitioning of the sphere into classes.
//!
//! The sphere is projected onto the six faces of a cube (gnomonic, linear
//! (u,v)); each face carries a quadtree. Cells holding more than `t_max`
//! training points split recursively, cells holding fewer than `t_min` are
//! dropped, and the surviving leaves become classification targets. Several
//! partitions of the same point set with decreasing `t_max` form a stack of
//! nested hierarchies, coarse to fine, linked by parent maps.

mod file;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use file::{partition_file_hash, read_partition, write_partition};

/// Quadtree recursion stops here; a cell at MAX_DEPTH is retained even above
/// t_max, otherwise coincident points would split forever.
pub const MAX_DEPTH: u8 = 30;

/// Default occupancy ceilings for the seven hierarchies, coarse to fine.
pub const DEFAULT_T_MAX: [usize; 7] = [25000, 10000, 5000, 2000, 1000, 750, 500];

/// Default occupancy floor shared by every hierarchy.
pub const DEFAULT_T_MIN: usize = 50;

/// A latitude/longitude pair in degrees: lat in [-90, 90], lon in
/// [-180, 180) with +180 folded to -180 on construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    #[serde(rename = "lat")]
    lat_deg: f64,
    #[serde(rename = "lon")]
    lon_deg: f64,
}

impl GeoPoint {
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<GeoPoint> {
        if !lat_deg.is_finite() || !(-90.0..=90.0).contains(&lat_deg) {
            return Err(Error::data(format!("invalid latitude {lat_deg}")));
        }
        if !lon_deg.is_finite() || !(-180.0..=180.0).contains(&lon_deg) {
            return Err(Error::data(format!("invalid longitude {lon_deg}")));
        }
        let lon_deg = if lon_deg == 180.0 { -180.0 } else { lon_deg };
        Ok(GeoPoint { lat_deg, lon_deg })
    }

    pub fn lat(&self) -> f64 {
        self.lat_deg
    }

    pub fn lon(&self) -> f64 {
        self.lon_deg
    }

    pub fn to_unit_vec(&self) -> [f64; 3] {
        let lat = self.lat_deg.to_radians();
        let lon = self.lon_deg.to_radians();
        [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
    }

    /// Back-projection of any nonzero vector onto the sphere.
    pub fn from_unit_vec(v: [f64; 3]) -> GeoPoint {
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let z = (v[2] / norm).clamp(-1.0, 1.0);
        let lat = z.asin().to_degrees();
        let mut lon = v[1].atan2(v[0]).to_degrees();
        if lon == 180.0 {
            lon = -180.0;
        }
        GeoPoint {
            lat_deg: lat.clamp(-90.0, 90.0),
            lon_deg: lon,
        }
    }
}

/// A quadtree node: cube face, subdivision depth, and (i, j) cell indices
/// within the face grid of side 2^depth. Ordering is the canonical class
/// order (face, depth, i, j).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId {
    pub face: u8,
    pub depth: u8,
    pub i: u64,
    pub j: u64,
}

impl CellId {
    pub fn parent(&self) -> Option<CellId> {
        if self.depth == 0 {
            return None;
        }
        Some(CellId {
            face: self.face,
            depth: self.depth - 1,
            i: self.i >> 1,
            j: self.j >> 1,
        })
    }

    /// Ancestor at the given shallower-or-equal depth.
    pub fn ancestor_at(&self, depth: u8) -> Option<CellId> {
        if depth > self.depth {
            return None;
        }
        let shift = self.depth - depth;
        Some(CellId {
            face: self.face,
            depth,
            i: self.i >> shift,
            j: self.j >> shift,
        })
    }

    pub fn is_ancestor_or_equal_of(&self, other: &CellId) -> bool {
        other.ancestor_at(self.depth) == Some(*self)
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}/{}", self.face, self.depth, self.i, self.j)
    }
}

impl std::str::FromStr for CellId {
    type Err = Error;

    fn from_str(s: &str) -> Result<CellId> {
        let parts: Vec<&str> = s.split('/').collect();
        if parts.len() != 4 {
            return Err(Error::data(format!("malformed cell id {s:?}")));
        }
        let face: u8 = parts[0]
            .parse()
            .map_err(|_| Error::data(format!("malformed cell id {s:?}")))?;
        let depth: u8 = parts[1]
            .parse()
            .map_err(|_| Error::data(format!("malformed cell id {s:?}")))?;
        let i: u64 = parts[2]
            .parse()
            .map_err(|_| Error::data(format!("malformed cell id {s:?}")))?;
        let j: u64 = parts[3]
            .parse()
            .map_err(|_| Error::data(format!("malformed cell id {s:?}")))?;
        if face >= 6 || depth > MAX_DEPTH || i >= 1 << depth.max(1) || j >= 1 << depth.max(1) {
            return Err(Error::data(format!("cell id out of range {s:?}")));
        }
        if depth == 0 && (i != 0 || j != 0) {
            return Err(Error::data(format!("cell id out of range {s:?}")));
        }
        Ok(CellId { face, depth, i, j })
    }
}

/// Face index and the point's (i, j) at MAX_DEPTH. Cells at shallower depths
/// are prefixes: i_d = i >> (MAX_DEPTH - d).
fn face_coords(p: &GeoPoint) -> (u8, u64, u64) {
    let v = p.to_unit_vec();
    let abs = [v[0].abs(), v[1].abs(), v[2].abs()];
    // Dominant axis; the first of x, y, z wins exact ties (fixed priority).
    let axis = if abs[0] >= abs[1] && abs[0] >= abs[2] {
        0
    } else if abs[1] >= abs[2] {
        1
    } else {
        2
    };
    let face = if v[axis] >= 0.0 { axis as u8 } else { axis as u8 + 3 };
    // Remaining axes in cyclic order: x->(y,z), y->(z,x), z->(x,y). Dividing
    // by the signed dominant component keeps each face's map bijective.
    let (b, c) = match axis {
        0 => (v[1], v[2]),
        1 => (v[2], v[0]),
        _ => (v[0], v[1]),
    };
    let u = b / v[axis];
    let w = c / v[axis];
    let scale = (1u64 << MAX_DEPTH) as f64;
    let max_idx = (1u64 << MAX_DEPTH) - 1;
    // Half-open cells: s in [0,1) indexes directly, the u=1 edge folds into
    // the last cell.
    let i = (((u + 1.0) / 2.0 * scale) as u64).min(max_idx);
    let j = (((w + 1.0) / 2.0 * scale) as u64).min(max_idx);
    (face, i, j)
}

/// Deterministic cell of a point at the given depth.
pub fn point_to_cell(p: &GeoPoint, depth: u8) -> Result<CellId> {
    if depth > MAX_DEPTH {
        return Err(Error::usage(format!(
            "depth {depth} exceeds MAX_DEPTH {MAX_DEPTH}"
        )));
    }
    let (face, i, j) = face_coords(p);
    let shift = MAX_DEPTH - depth;
    Ok(CellId {
        face,
        depth,
        i: i >> shift,
        j: j >> shift,
    })
}

/// One balanced partition: the retained quadtree leaves of a single
/// (t_min, t_max) build, in canonical (face, depth, i, j) order.
#[derive(Clone, Debug)]
pub struct HierarchyPartition {
    level: usize,
    t_max: usize,
    t_min: usize,
    cells: Vec<CellId>,
    class_of_cell: HashMap<CellId, usize>,
    centroids: Vec<GeoPoint>,
    counts: Vec<usize>,
    depths: Vec<u8>,
}

impl HierarchyPartition {
    /// 1-based position in the stack (1 = coarsest).
    pub fn level(&self) -> usize {
        self.level
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn t_min(&self) -> usize {
        self.t_min
    }

    pub fn num_classes(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[CellId] {
        &self.cells
    }

    pub fn cell(&self, class: usize) -> CellId {
        self.cells[class]
    }

    pub fn count(&self, class: usize) -> usize {
        self.counts[class]
    }

    pub fn class_of_cell(&self, cell: &CellId) -> Option<usize> {
        self.class_of_cell.get(cell).copied()
    }

    /// Spherical-mean centroid of the class's training points.
    pub fn class_centroid(&self, class: usize) -> Result<GeoPoint> {
        self.centroids
            .get(class)
            .copied()
            .ok_or_else(|| Error::usage(format!("class {class} out of range")))
    }

    /// Class containing the point, if its leaf was retained.
    pub fn class_of_point(&self, p: &GeoPoint) -> Option<usize> {
        let (face, i, j) = face_coords(p);
        for &d in &self.depths {
            let shift = MAX_DEPTH - d;
            let cell = CellId {
                face,
                depth: d,
                i: i >> shift,
                j: j >> shift,
            };
            if let Some(&class) = self.class_of_cell.get(&cell) {
                return Some(class);
            }
        }
        None
    }

    /// Assembles a partition from explicit parts (file loading, synthetic
    /// test stacks). Cells must be unique; they are sorted canonically.
    pub fn from_parts(
        level: usize,
        t_min: usize,
        t_max: usize,
        mut entries: Vec<(CellId, usize, GeoPoint)>,
    ) -> Result<HierarchyPartition> {
        entries.sort_by_key(|e| e.0);
        let mut cells = Vec::with_capacity(entries.len());
        let mut counts = Vec::with_capacity(entries.len());
        let mut centroids = Vec::with_capacity(entries.len());
        let mut class_of_cell = HashMap::with_capacity(entries.len());
        for (idx, (cell, count, centroid)) in entries.into_iter().enumerate() {
            if class_of_cell.insert(cell, idx).is_some() {
                return Err(Error::data(format!("duplicate cell {cell}")));
            }
            cells.push(cell);
            counts.push(count);
            centroids.push(centroid);
        }
        let mut depths: Vec<u8> = cells.iter().map(|c| c.depth).collect();
        depths.sort_unstable();
        depths.dedup();
        Ok(HierarchyPartition {
            level,
            t_max,
            t_min,
            cells,
            class_of_cell,
            centroids,
            counts,
            depths,
        })
    }
}

/// Interleaves i (odd bits) and j (even bits) so that quadtree descendants
/// of a cell occupy one contiguous key range.
fn morton(i: u64, j: u64) -> u64 {
    let mut key = 0u64;
    for b in 0..MAX_DEPTH as u64 {
        key |= ((i >> b) & 1) << (2 * b + 1);
        key |= ((j >> b) & 1) << (2 * b);
    }
    key
}

struct BuildPoint {
    morton: u64,
    unit: [f64; 3],
    // Tie-break for coincident cells so the build is independent of input
    // order: float bit patterns give a total order over valid coordinates.
    lat_bits: u64,
    lon_bits: u64,
}

fn build_leaves(
    face_points: &mut [BuildPoint],
    t_min: usize,
    t_max: usize,
) -> Vec<(CellId, (usize, usize))> {
    // Returns (cell, range) pairs where range indexes into face_points.
    fn recurse(
        pts: &[BuildPoint],
        offset: usize,
        face: u8,
        depth: u8,
        i: u64,
        j: u64,
        t_min: usize,
        t_max: usize,
        out: &mut Vec<(CellId, (usize, usize))>,
    ) {
        let count = pts.len();
        if count > t_max && depth < MAX_DEPTH {
            // Quadrant = next two Morton bits below this depth.
            let shift = 2 * (MAX_DEPTH - depth - 1) as u64;
            let mut start = 0;
            for quadrant in 0..4u64 {
                let end = start
                    + pts[start..]
                        .iter()
                        .take_while(|p| (p.morton >> shift) & 3 == quadrant)
                        .count();
                if end > start {
                    let di = quadrant >> 1;
                    let dj = quadrant & 1;
                    recurse(
                        &pts[start..end],
                        offset + start,
                        face,
                        depth + 1,
                        i * 2 + di,
                        j * 2 + dj,
                        t_min,
                        t_max,
                        out,
                    );
                }
                start = end;
            }
            return;
        }
        if count >= t_min && count > 0 {
            out.push((
                CellId { face, depth, i, j },
                (offset, offset + count),
            ));
        }
    }

    face_points.sort_by(|a, b| {
        (a.morton, a.lat_bits, a.lon_bits).cmp(&(b.morton, b.lat_bits, b.lon_bits))
    });
    let mut out = Vec::new();
    recurse(face_points, 0, 0, 0, 0, 0, t_min, t_max, &mut out);
    out
}

fn build_level(
    points: &[GeoPoint],
    t_min: usize,
    t_max: usize,
    level: usize,
) -> Result<HierarchyPartition> {
    if t_min < 1 {
        return Err(Error::usage("t_min must be at least 1".to_string()));
    }
    if t_max < t_min {
        return Err(Error::usage(format!("t_max {t_max} below t_min {t_min}")));
    }
    let mut by_face: Vec<Vec<BuildPoint>> = (0..6).map(|_| Vec::new()).collect();
    for p in points {
        let (face, i, j) = face_coords(p);
        by_face[face as usize].push(BuildPoint {
            morton: morton(i, j),
            unit: p.to_unit_vec(),
            lat_bits: p.lat().to_bits(),
            lon_bits: p.lon().to_bits(),
        });
    }
    let mut entries = Vec::new();
    for (face, pts) in by_face.iter_mut().enumerate() {
        if pts.is_empty() {
            continue;
        }
        for (mut cell, (start, end)) in build_leaves(pts, t_min, t_max) {
            cell.face = face as u8;
            let members = &pts[start..end];
            let mut sum = [0.0f64; 3];
            for m in members {
                sum[0] += m.unit[0];
                sum[1] += m.unit[1];
                sum[2] += m.unit[2];
            }
            let norm = (sum[0] * sum[0] + sum[1] * sum[1] + sum[2] * sum[2]).sqrt();
            if norm < 1e-9 {
                return Err(Error::data(format!(
                    "undefined spherical mean for cell {cell}: member vectors cancel"
                )));
            }
            entries.push((cell, members.len(), GeoPoint::from_unit_vec(sum)));
        }
    }
    HierarchyPartition::from_parts(level, t_min, t_max, entries)
}

/// Builds one balanced partition from training points. Empty input yields an
/// empty partition.
pub fn build_hierarchy(
    points: &[GeoPoint],
    t_min: usize,
    t_max: usize,
) -> Result<HierarchyPartition> {
    build_level(points, t_min, t_max, 1)
}

/// A stack of nested hierarchies over one point set, with per-adjacent-pair
/// parent maps (fine class index -> coarse class index).
#[derive(Clone, Debug)]
pub struct PartitionStack {
    t_min: usize,
    hierarchies: Vec<HierarchyPartition>,
    parent_maps: Vec<Vec<usize>>,
}

impl PartitionStack {
    pub fn len(&self) -> usize {
        self.hierarchies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hierarchies.is_empty()
    }

    pub fn t_min(&self) -> usize {
        self.t_min
    }

    pub fn hierarchy(&self, k: usize) -> &HierarchyPartition {
        &self.hierarchies[k]
    }

    pub fn hierarchies(&self) -> &[HierarchyPartition] {
        &self.hierarchies
    }

    pub fn finest(&self) -> &HierarchyPartition {
        self.hierarchies.last().expect("stack is never empty")
    }

    /// parent_maps()[k][j] is the hierarchy-k class whose cell contains
    /// hierarchy-(k+1) class j.
    pub fn parent_maps(&self) -> &[Vec<usize>] {
        &self.parent_maps
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.hierarchies.iter().map(|h| h.num_classes()).collect()
    }

    /// Per-hierarchy class of a point; None where the point's leaf was
    /// dropped.
    pub fn assign_labels(&self, p: &GeoPoint) -> Vec<Option<usize>> {
        self.hierarchies
            .iter()
            .map(|h| h.class_of_point(p))
            .collect()
    }

    /// Assembles a stack from explicit parts, validating parent-map shape.
    pub fn from_parts(
        t_min: usize,
        hierarchies: Vec<HierarchyPartition>,
        parent_maps: Vec<Vec<usize>>,
    ) -> Result<PartitionStack> {
        if hierarchies.is_empty() {
            return Err(Error::data("a stack needs at least one hierarchy".to_string()));
        }
        if parent_maps.len() + 1 != hierarchies.len() {
            return Err(Error::data(format!(
                "{} hierarchies need {} parent maps, got {}",
                hierarchies.len(),
                hierarchies.len() - 1,
                parent_maps.len()
            )));
        }
        for (k, map) in parent_maps.iter().enumerate() {
            if map.len() != hierarchies[k + 1].num_classes() {
                return Err(Error::data(format!(
                    "parent map {k} covers {} classes, hierarchy has {}",
                    map.len(),
                    hierarchies[k + 1].num_classes()
                )));
            }
            if let Some(&bad) = map.iter().find(|&&p| p >= hierarchies[k].num_classes()) {
                return Err(Error::data(format!(
                    "parent map {k} points at missing class {bad}"
                )));
            }
        }
        Ok(PartitionStack {
            t_min,
            hierarchies,
            parent_maps,
        })
    }
}

/// Builds H nested hierarchies from one point set. `t_max_list` is ordered
/// coarse to fine and must be strictly decreasing.
pub fn build_stack(
    points: &[GeoPoint],
    t_max_list: &[usize],
    t_min: usize,
) -> Result<PartitionStack> {
    if t_max_list.is_empty() {
        return Err(Error::usage("t_max list is empty".to_string()));
    }
    if t_max_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::usage(format!(
            "t_max list must be strictly decreasing, got {t_max_list:?}"
        )));
    }
    let mut hierarchies = Vec::with_capacity(t_max_list.len());
    for (k, &t_max) in t_max_list.iter().enumerate() {
        hierarchies.push(build_level(points, t_min, t_max, k + 1)?);
    }
    let mut parent_maps = Vec::with_capacity(hierarchies.len().saturating_sub(1));
    for k in 0..hierarchies.len().saturating_sub(1) {
        let (coarse, fine) = (&hierarchies[k], &hierarchies[k + 1]);
        let mut map = Vec::with_capacity(fine.num_classes());
        for cell in fine.cells() {
            let parent = (0..=cell.depth)
                .rev()
                .filter_map(|d| cell.ancestor_at(d))
                .find_map(|anc| coarse.class_of_cell(&anc));
            match parent {
                Some(idx) => map.push(idx),
                None => {
                    // Monotone splitting with a shared t_min guarantees an
                    // ancestor leaf survives in every coarser hierarchy.
                    return Err(Error::internal(format!(
                        "no coarse ancestor for fine cell {cell} (level {})",
                        k + 2
                    )));
                }
            }
        }
        parent_maps.push(map);
    }
    PartitionStack::from_parts(t_min, hierarchies, parent_maps)
}
