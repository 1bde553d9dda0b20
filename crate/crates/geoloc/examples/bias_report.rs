//! Measures geographic bias in a synthetic photo collection: Gini
//! coefficient over per-city counts, the Lorenz curve behind it, and a
//! coarse latitude/longitude heatmap.

use geoloc::datatools::{gini, heatmap_grid, lorenz, DistributionStats};
use geoloc::geocell::GeoPoint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> geoloc::Result<()> {
    // A heavily skewed collection: a few cities dominate.
    let city_counts = [
        ("Paris", 4800.0),
        ("New York", 3900.0),
        ("Tokyo", 2100.0),
        ("Sydney", 600.0),
        ("Nairobi", 180.0),
        ("Reykjavik", 90.0),
        ("Ushuaia", 25.0),
        ("Tiksi", 5.0),
    ];
    let counts: Vec<f64> = city_counts.iter().map(|(_, c)| *c).collect();

    let g = gini(&counts)?;
    println!("gini over {} cities: {g:.4}", counts.len());

    println!("\nLorenz curve (population share -> image share):");
    for (x, y) in lorenz(&counts)? {
        let bar = "*".repeat((y * 40.0).round() as usize);
        println!("  {:>5.1}% {:>6.2}% {bar}", x * 100.0, y * 100.0);
    }

    // The uniform reference: every city equally covered.
    let uniform = vec![1000.0; counts.len()];
    println!("\nuniform reference gini: {:.4}", gini(&uniform)?);

    // Stats bundle as produced for reports.
    let stats = DistributionStats::from_counts(counts.iter().map(|&c| c as u64).collect())?;
    println!("stats gini matches: {}", (stats.gini - g).abs() < 1e-12);

    // Heatmap over a jittered cloud around three of the cities.
    let centers = [(48.86, 2.35), (40.71, -74.0), (-33.87, 151.21)];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut points = Vec::new();
    for (i, &(lat, lon)) in centers.iter().enumerate() {
        for _ in 0..(300 >> i) {
            points.push(GeoPoint::new(
                (lat + rng.random_range(-6.0..6.0f64)).clamp(-90.0, 90.0),
                lon + rng.random_range(-6.0..6.0f64),
            )?);
        }
    }
    let grid = heatmap_grid(&points, 9, 18)?;
    println!("\nheatmap (9 x 18, north on top):");
    for row in grid.iter().rev() {
        let line: String = row
            .iter()
            .map(|&c| match c {
                0 => ' ',
                1..=9 => '.',
                10..=49 => ':',
                _ => '#',
            })
            .collect();
        println!("  |{line}|");
    }
    Ok(())
}
