//! Plain-text partition files.
//!
//! The format is line oriented so diffs stay readable and parse errors can
//! carry line numbers:
//!
//! ```text
//! geoloc-partition v1
//! config_hash <hex or ->
//! t_min 50
//! hierarchies 2
//! hierarchy 1 t_max 100 classes 2
//! class 0 0/0/0/0 count 60 centroid 0.123456789 -0.987654321 parent -
//! ...
//! end
//! ```
//!
//! Centroids are stored with nine decimals (sub-millimeter on the ground),
//! so a read-back stack matches the built one to that precision.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{CellId, GeoPoint, HierarchyPartition, PartitionStack};
use crate::error::{Error, Result};

const MAGIC: &str = "geoloc-partition v1";

/// Serializes a stack. `config_hash` ties the file to the run configuration
/// that produced it; pass None for standalone builds.
pub fn write_partition(
    path: &Path,
    stack: &PartitionStack,
    config_hash: Option<&str>,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    let _ = writeln!(out, "config_hash {}", config_hash.unwrap_or("-"));
    let _ = writeln!(out, "t_min {}", stack.t_min());
    let _ = writeln!(out, "hierarchies {}", stack.len());
    for (k, h) in stack.hierarchies().iter().enumerate() {
        let _ = writeln!(
            out,
            "hierarchy {} t_max {} classes {}",
            h.level(),
            h.t_max(),
            h.num_classes()
        );
        for class in 0..h.num_classes() {
            let centroid = h.class_centroid(class)?;
            let parent = if k == 0 {
                "-".to_string()
            } else {
                stack.parent_maps()[k - 1][class].to_string()
            };
            let _ = writeln!(
                out,
                "class {} {} count {} centroid {:.9} {:.9} parent {}",
                class,
                h.cell(class),
                h.count(class),
                centroid.lat(),
                centroid.lon(),
                parent
            );
        }
    }
    out.push_str("end\n");
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    path: &'a Path,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<(usize, &'a str)> {
        match self.iter.next() {
            Some((idx, line)) => Ok((idx + 1, line)),
            None => Err(Error::record(self.path, 0, "unexpected end of file")),
        }
    }
}

fn field<'a>(
    parts: &mut impl Iterator<Item = &'a str>,
    path: &Path,
    line_no: usize,
    what: &str,
) -> Result<&'a str> {
    parts
        .next()
        .ok_or_else(|| Error::record(path, line_no, format!("missing {what}")))
}

fn expect_keyword(got: &str, want: &str, path: &Path, line_no: usize) -> Result<()> {
    if got != want {
        return Err(Error::record(
            path,
            line_no,
            format!("expected {want:?}, found {got:?}"),
        ));
    }
    Ok(())
}

fn parse_num<T: std::str::FromStr>(s: &str, path: &Path, line_no: usize, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::record(path, line_no, format!("invalid {what}: {s:?}")))
}

/// Reads a stack back. Every malformed line is reported with its number.
pub fn read_partition(path: &Path) -> Result<PartitionStack> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Lines {
        iter: text.lines().enumerate(),
        path,
    };

    let (no, magic) = lines.next()?;
    expect_keyword(magic, MAGIC, path, no)?;

    let (no, line) = lines.next()?;
    let mut parts = line.split_whitespace();
    expect_keyword(field(&mut parts, path, no, "keyword")?, "config_hash", path, no)?;
    field(&mut parts, path, no, "config hash value")?;

    let (no, line) = lines.next()?;
    let mut parts = line.split_whitespace();
    expect_keyword(field(&mut parts, path, no, "keyword")?, "t_min", path, no)?;
    let t_min: usize = parse_num(field(&mut parts, path, no, "t_min value")?, path, no, "t_min")?;

    let (no, line) = lines.next()?;
    let mut parts = line.split_whitespace();
    expect_keyword(field(&mut parts, path, no, "keyword")?, "hierarchies", path, no)?;
    let n_hier: usize = parse_num(
        field(&mut parts, path, no, "hierarchy count")?,
        path,
        no,
        "hierarchy count",
    )?;
    if n_hier == 0 {
        return Err(Error::record(path, no, "hierarchy count must be positive"));
    }

    let mut hierarchies = Vec::with_capacity(n_hier);
    let mut parent_maps: Vec<Vec<usize>> = Vec::new();
    for k in 0..n_hier {
        let (no, line) = lines.next()?;
        let mut parts = line.split_whitespace();
        expect_keyword(field(&mut parts, path, no, "keyword")?, "hierarchy", path, no)?;
        let level: usize =
            parse_num(field(&mut parts, path, no, "level")?, path, no, "level")?;
        if level != k + 1 {
            return Err(Error::record(
                path,
                no,
                format!("hierarchy levels out of order: expected {}, found {level}", k + 1),
            ));
        }
        expect_keyword(field(&mut parts, path, no, "keyword")?, "t_max", path, no)?;
        let t_max: usize =
            parse_num(field(&mut parts, path, no, "t_max")?, path, no, "t_max")?;
        expect_keyword(field(&mut parts, path, no, "keyword")?, "classes", path, no)?;
        let n_classes: usize = parse_num(
            field(&mut parts, path, no, "class count")?,
            path,
            no,
            "class count",
        )?;

        let mut entries = Vec::with_capacity(n_classes);
        let mut parents = Vec::with_capacity(n_classes);
        for c in 0..n_classes {
            let (no, line) = lines.next()?;
            let mut parts = line.split_whitespace();
            expect_keyword(field(&mut parts, path, no, "keyword")?, "class", path, no)?;
            let idx: usize =
                parse_num(field(&mut parts, path, no, "class index")?, path, no, "class index")?;
            if idx != c {
                return Err(Error::record(
                    path,
                    no,
                    format!("class indices out of order: expected {c}, found {idx}"),
                ));
            }
            let cell: CellId = field(&mut parts, path, no, "cell id")?
                .parse()
                .map_err(|e: Error| Error::record(path, no, e.to_string()))?;
            expect_keyword(field(&mut parts, path, no, "keyword")?, "count", path, no)?;
            let count: usize =
                parse_num(field(&mut parts, path, no, "count")?, path, no, "count")?;
            expect_keyword(field(&mut parts, path, no, "keyword")?, "centroid", path, no)?;
            let lat: f64 =
                parse_num(field(&mut parts, path, no, "latitude")?, path, no, "latitude")?;
            let lon: f64 =
                parse_num(field(&mut parts, path, no, "longitude")?, path, no, "longitude")?;
            let centroid = GeoPoint::new(lat, lon)
                .map_err(|e| Error::record(path, no, e.to_string()))?;
            expect_keyword(field(&mut parts, path, no, "keyword")?, "parent", path, no)?;
            let parent = field(&mut parts, path, no, "parent")?;
            if k == 0 {
                if parent != "-" {
                    return Err(Error::record(
                        path,
                        no,
                        "first hierarchy classes take parent '-'",
                    ));
                }
            } else {
                parents.push(parse_num::<usize>(parent, path, no, "parent index")?);
            }
            if let Some(extra) = parts.next() {
                return Err(Error::record(
                    path,
                    no,
                    format!("trailing field {extra:?}"),
                ));
            }
            entries.push((cell, count, centroid));
        }
        // from_parts re-sorts; files written by this module are already in
        // canonical order, so class indices survive the round trip.
        let hierarchy = HierarchyPartition::from_parts(level, t_min, t_max, entries)
            .map_err(|e| Error::record(path, no, e.to_string()))?;
        if k > 0 {
            parent_maps.push(parents);
        }
        hierarchies.push(hierarchy);
    }

    let (no, line) = lines.next()?;
    expect_keyword(line.trim(), "end", path, no)?;

    PartitionStack::from_parts(t_min, hierarchies, parent_maps)
        .map_err(|e| Error::record(path, 0, e.to_string()))
}

/// SHA-256 of the file bytes, hex encoded. Checkpoints and reports embed it
/// so stale partitions are rejected instead of silently mismatched.
pub fn partition_file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}
