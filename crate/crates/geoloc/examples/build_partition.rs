//! Builds a three-level nested geocell partition from synthetic photo
//! clusters, prints per-level statistics, and round-trips it through a file.

use geoloc::geocell::{build_stack, read_partition, write_partition, GeoPoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> geoloc::Result<()> {
    // Six "cities" with very different densities plus scattered noise.
    let cities = [
        (48.86, 2.35, 400),   // dense
        (40.71, -74.0, 300),  // dense
        (35.68, 139.69, 150), // medium
        (-33.87, 151.21, 80),
        (-1.29, 36.82, 40),
        (64.13, -21.9, 15), // sparse, will not split far
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut points = Vec::new();
    for &(lat, lon, n) in &cities {
        for _ in 0..n {
            points.push(GeoPoint::new(
                (lat + rng.random_range(-0.8..0.8f64)).clamp(-90.0, 90.0),
                lon + rng.random_range(-0.8..0.8f64),
            )?);
        }
    }
    for _ in 0..200 {
        let z: f64 = rng.random_range(-1.0..1.0);
        points.push(GeoPoint::new(
            z.asin().to_degrees(),
            rng.random_range(-180.0..180.0),
        )?);
    }
    println!("{} images total", points.len());

    let stack = build_stack(&points, &[300, 120, 60], 25)?;
    for h in stack.hierarchies() {
        let mut depths: Vec<u8> = (0..h.num_classes()).map(|c| h.cell(c).depth).collect();
        depths.sort_unstable();
        let covered: usize = (0..h.num_classes()).map(|c| h.count(c)).sum();
        println!(
            "level {} (t_max {:>3}): {:>2} classes, depths {}..{}, {} of {} images covered",
            h.level(),
            h.t_max(),
            h.num_classes(),
            depths.first().unwrap_or(&0),
            depths.last().unwrap_or(&0),
            covered,
            points.len(),
        );
    }

    // Every finer class nests inside exactly one coarser class.
    for (k, map) in stack.parent_maps().iter().enumerate() {
        let mut children = vec![0usize; stack.hierarchy(k).num_classes()];
        for &parent in map {
            children[parent] += 1;
        }
        println!(
            "level {} -> {}: children per parent min {} max {}",
            k + 2,
            k + 1,
            children.iter().min().unwrap(),
            children.iter().max().unwrap(),
        );
    }

    let dir = tempfile::tempdir().map_err(|e| geoloc::Error::io("tempdir", e))?;
    let path = dir.path().join("demo.partition");
    write_partition(&path, &stack, None)?;
    let loaded = read_partition(&path)?;
    assert_eq!(loaded.class_counts(), stack.class_counts());
    println!(
        "round-trip through {} ok: classes {:?}",
        path.display(),
        loaded.class_counts()
    );

    // Where would a new photo land?
    let query = GeoPoint::new(48.9, 2.3)?;
    let labels = stack.assign_labels(&query);
    println!("query (48.9, 2.3) label chain: {labels:?}");
    Ok(())
}
