//! Dataset plumbing: image metadata, area-weighted location sampling,
//! inequality statistics, photographer-disjoint splits, and heatmap grids.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geocell::GeoPoint;
use crate::inference::destination;

/// One image's metadata, as stored in line-delimited JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub photographer: String,
    pub scene_id: usize,
}

impl ImageRecord {
    pub fn point(&self) -> Result<GeoPoint> {
        GeoPoint::new(self.lat, self.lon)
    }
}

/// Reads JSONL metadata; every record's coordinates are validated and every
/// malformed line is reported with its number.
pub fn read_image_records(path: &Path) -> Result<Vec<ImageRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImageRecord = serde_json::from_str(line)
            .map_err(|e| Error::record(path, idx + 1, e.to_string()))?;
        GeoPoint::new(rec.lat, rec.lon)
            .map_err(|e| Error::record(path, idx + 1, e.to_string()))?;
        records.push(rec);
    }
    Ok(records)
}

pub fn write_image_records(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::internal(format!("record serialization: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A country with its surface area and candidate cities.
#[derive(Clone, Debug)]
pub struct CountryRecord {
    pub name: String,
    pub surface_area_km2: f64,
    pub cities: Vec<(String, GeoPoint)>,
}

#[derive(Deserialize)]
struct CityRow {
    country: String,
    area_km2: f64,
    city: String,
    lat: f64,
    lng: f64,
}

/// Reads a simplemaps-style city CSV (country, area_km2, city, lat, lng; one
/// row per city) and groups rows into countries in first-seen order. The
/// area must repeat identically on every row of a country.
pub fn read_countries(path: &Path) -> Result<Vec<CountryRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut countries: Vec<CountryRecord> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (idx, row) in rdr.deserialize::<CityRow>().enumerate() {
        let line = idx + 2;
        let row = row.map_err(|e| Error::record(path, line, e.to_string()))?;
        if !row.area_km2.is_finite() || row.area_km2 <= 0.0 {
            return Err(Error::record(
                path,
                line,
                format!("non-positive area {} for {}", row.area_km2, row.country),
            ));
        }
        let point = GeoPoint::new(row.lat, row.lng)
            .map_err(|e| Error::record(path, line, e.to_string()))?;
        match index.get(&row.country) {
            Some(&i) => {
                if countries[i].surface_area_km2 != row.area_km2 {
                    return Err(Error::record(
                        path,
                        line,
                        format!(
                            "{} listed with area {} after {}",
                            row.country, row.area_km2, countries[i].surface_area_km2
                        ),
                    ));
                }
                countries[i].cities.push((row.city, point));
            }
            None => {
                index.insert(row.country.clone(), countries.len());
                countries.push(CountryRecord {
                    name: row.country,
                    surface_area_km2: row.area_km2,
                    cities: vec![(row.city, point)],
                });
            }
        }
    }
    Ok(countries)
}

/// One sampled location: a point within 5 km of a city center.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleManifestEntry {
    pub country: String,
    pub city: String,
    #[serde(flatten)]
    pub point: GeoPoint,
    pub radius_km: f64,
}

pub const SAMPLE_RADIUS_KM: f64 = 5.0;

/// Draws n locations: country by surface area, city uniformly within the
/// country, point area-uniformly over the 5 km disk around the city center.
///
/// Entry i consumes its own counter-derived random stream, so the manifest
/// is identical for a given seed no matter how or where entries are
/// generated.
pub fn sample_locations(
    countries: &[CountryRecord],
    n: usize,
    seed: u64,
) -> Result<Vec<SampleManifestEntry>> {
    if countries.is_empty() {
        return Err(Error::usage("no countries to sample from"));
    }
    if n == 0 {
        return Err(Error::usage("sample count must be at least 1"));
    }
    let mut cumulative = Vec::with_capacity(countries.len());
    let mut total = 0.0;
    for c in countries {
        if !c.surface_area_km2.is_finite() || c.surface_area_km2 <= 0.0 {
            return Err(Error::data(format!(
                "country {} has non-positive area",
                c.name
            )));
        }
        if c.cities.is_empty() {
            return Err(Error::data(format!("country {} has no cities", c.name)));
        }
        total += c.surface_area_km2;
        cumulative.push(total);
    }
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let pick = rng.random::<f64>() * total;
        let country_idx = cumulative.partition_point(|&c| c <= pick).min(countries.len() - 1);
        let country = &countries[country_idx];
        let city_idx = rng.random_range(0..country.cities.len());
        let (city_name, center) = &country.cities[city_idx];
        // Area-uniform over the disk: radius scales with sqrt(u). The tiny
        // shrink keeps the invariant distance <= 5 km under roundoff.
        let r = SAMPLE_RADIUS_KM * (1.0 - 1e-9) * rng.random::<f64>().sqrt();
        let bearing = rng.random::<f64>() * std::f64::consts::TAU;
        let point = destination(center, bearing, r);
        entries.push(SampleManifestEntry {
            country: country.name.clone(),
            city: city_name.clone(),
            point,
            radius_km: SAMPLE_RADIUS_KM,
        });
    }
    Ok(entries)
}

/// Gini coefficient: sum_ij |x_i - x_j| / (2 n^2 mean), via the sorted
/// equivalent sum_k (2k+1-n) x_(k) / (n^2 mean).
pub fn gini(counts: &[f64]) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::usage("gini of an empty list"));
    }
    if counts.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::data("gini requires nonnegative finite values"));
    }
    let mut sorted = counts.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    if sorted[sorted.len() - 1] == 0.0 {
        return Err(Error::data("gini is undefined for all-zero counts"));
    }
    // All-equal inputs are exactly 0 by the formula's antisymmetry.
    if sorted[0] == sorted[sorted.len() - 1] {
        return Ok(0.0);
    }
    let n = sorted.len() as f64;
    let total: f64 = sorted.iter().sum();
    let mut acc = 0.0;
    for (k, &x) in sorted.iter().enumerate() {
        acc += (2.0 * k as f64 + 1.0 - n) * x;
    }
    Ok(acc / (n * total))
}

/// Lorenz curve points: (k/n, cumulative share of the smallest k values) for
/// k = 0..=n. All-zero counts degenerate to the equality line y = x.
pub fn lorenz(counts: &[f64]) -> Result<Vec<(f64, f64)>> {
    if counts.is_empty() {
        return Err(Error::usage("lorenz of an empty list"));
    }
    if counts.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::data("lorenz requires nonnegative finite values"));
    }
    let mut sorted = counts.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    let total: f64 = sorted.iter().sum();
    let mut points = Vec::with_capacity(n + 1);
    points.push((0.0, 0.0));
    if total == 0.0 {
        for k in 1..=n {
            let x = k as f64 / n as f64;
            points.push((x, x));
        }
        return Ok(points);
    }
    let mut cum = 0.0;
    for (k, &x) in sorted.iter().enumerate() {
        cum += x;
        let share = if k + 1 == n { 1.0 } else { cum / total };
        points.push(((k + 1) as f64 / n as f64, share));
    }
    Ok(points)
}

/// Per-city counts with their Lorenz curve and Gini coefficient.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistributionStats {
    pub counts: Vec<u64>,
    pub lorenz: Vec<(f64, f64)>,
    pub gini: f64,
}

impl DistributionStats {
    pub fn from_counts(counts: Vec<u64>) -> Result<DistributionStats> {
        let floats: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        Ok(DistributionStats {
            gini: gini(&floats)?,
            lorenz: lorenz(&floats)?,
            counts,
        })
    }
}

/// FNV-1a over UTF-8 bytes; stable across platforms and runs, used to derive
/// per-name random streams.
pub fn fnv1a64(s: &str) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for b in s.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Splits records so no photographer appears on both sides. Each
/// photographer flips one seeded coin weighted by `test_fraction`, derived
/// from their name, so membership is independent of record order.
pub fn split_by_photographer(
    records: &[ImageRecord],
    test_fraction: f64,
    seed: u64,
) -> (Vec<ImageRecord>, Vec<ImageRecord>) {
    let mut assignment: HashMap<&str, bool> = HashMap::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for rec in records {
        let is_test = *assignment.entry(&rec.photographer).or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(fnv1a64(&rec.photographer));
            rng.random::<f64>() < test_fraction
        });
        if is_test {
            test.push(rec.clone());
        } else {
            train.push(rec.clone());
        }
    }
    (train, test)
}

/// Equirectangular occupancy counts; rows start at lat -90, columns at
/// lon -180, upper edges fold into the last bin.
pub fn heatmap_grid(points: &[GeoPoint], lat_bins: usize, lon_bins: usize) -> Result<Vec<Vec<u64>>> {
    if lat_bins == 0 || lon_bins == 0 {
        return Err(Error::usage("heatmap needs at least one bin per axis"));
    }
    let mut grid = vec![vec![0u64; lon_bins]; lat_bins];
    for p in points {
        let row = (((p.lat() + 90.0) / 180.0 * lat_bins as f64) as usize).min(lat_bins - 1);
        let col = (((p.lon() + 180.0) / 360.0 * lon_bins as f64) as usize).min(lon_bins - 1);
        grid[row][col] += 1;
    }
    Ok(grid)
}
