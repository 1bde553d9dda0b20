//! Great-circle distance and the forward geodesic on a spherical Earth.

use crate::geocell::GeoPoint;

/// Mean Earth radius used by every distance in this crate. The geodesy here
/// is spherical, so more decimals would suggest accuracy that isn't there.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Haversine great-circle distance in kilometers.
pub fn haversine_km(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let la = a.lat().to_radians();
    let lb = b.lat().to_radians();
    let dlat = lb - la;
    let dlon = (b.lon() - a.lon()).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + la.cos() * lb.cos() * (dlon / 2.0).sin().powi(2);
    // Roundoff can push h a hair above 1 for near-antipodal pairs.
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Point reached from `start` after `distance_km` along `bearing_rad`
/// (clockwise from north).
pub fn destination(start: &GeoPoint, bearing_rad: f64, distance_km: f64) -> GeoPoint {
    let delta = distance_km / EARTH_RADIUS_KM;
    let phi1 = start.lat().to_radians();
    let lam1 = start.lon().to_radians();
    let sin_phi2 =
        (phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * bearing_rad.cos()).clamp(-1.0, 1.0);
    let phi2 = sin_phi2.asin();
    let lam2 = lam1
        + (bearing_rad.sin() * delta.sin() * phi1.cos())
            .atan2(delta.cos() - phi1.sin() * sin_phi2);
    let lon = (lam2.to_degrees() + 540.0).rem_euclid(360.0) - 180.0;
    GeoPoint::new(phi2.to_degrees().clamp(-90.0, 90.0), lon)
        .expect("forward geodesic stays on the sphere")
}
