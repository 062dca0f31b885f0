use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::geometry::{distance, RoomSpec, Vec3};
use crate::error::{Error, Result};

/// Smallest candidate pool drawn before farthest-point sampling.
pub const MIN_CANDIDATES: usize = 4096;

/// `count` points uniformly distributed over the room's six walls
/// (area-weighted).
pub fn surface_candidates(room: &RoomSpec, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let [lx, ly, lz] = room.dimensions;
    let areas = [ly * lz, ly * lz, lx * lz, lx * lz, lx * ly, lx * ly];
    let total: f64 = areas.iter().sum();
    (0..count)
        .map(|_| {
            let mut pick = rng.random::<f64>() * total;
            let mut wall = 0;
            while wall < 5 && pick >= areas[wall] {
                pick -= areas[wall];
                wall += 1;
            }
            let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
            let fixed = if wall % 2 == 0 { 0.0 } else { room.dimensions[wall / 2] };
            match wall / 2 {
                0 => [fixed, a * ly, b * lz],
                1 => [a * lx, fixed, b * lz],
                _ => [a * lx, b * ly, fixed],
            }
        })
        .collect()
}

/// Greedy farthest-point sampling: starts from `candidates[start]` and
/// repeatedly adds the candidate farthest from the chosen set. Returns
/// indices in selection order.
pub fn farthest_point_indices(candidates: &[Vec3], n: usize, start: usize) -> Result<Vec<usize>> {
    if n == 0 || n > candidates.len() || start >= candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot pick {n} points from {} candidates starting at {start}",
            candidates.len()
        )));
    }
    let mut chosen = Vec::with_capacity(n);
    let mut nearest = vec![f64::INFINITY; candidates.len()];
    let mut next = start;
    for _ in 0..n {
        chosen.push(next);
        let c = candidates[next];
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, p) in candidates.iter().enumerate() {
            let d = distance(*p, c);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if nearest[i] > best.0 {
                best = (nearest[i], i);
            }
        }
        next = best.1;
    }
    Ok(chosen)
}

/// `n` surface points by farthest-point sampling over a seeded candidate
/// pool of `max(MIN_CANDIDATES, 4n)` points.
pub fn sample_points(room: &RoomSpec, n: usize, seed: u64) -> Result<Vec<Vec3>> {
    room.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = surface_candidates(room, MIN_CANDIDATES.max(4 * n), &mut rng);
    let start = rng.random_range(0..pool.len());
    let idx = farthest_point_indices(&pool, n, start)?;
    Ok(idx.into_iter().map(|i| pool[i]).collect())
}

pub fn min_pairwise_distance(points: &[Vec3]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            best = best.min(distance(points[i], points[j]));
        }
    }
    best
}

/// Whether `p` lies on one of the room's walls within `tol`.
pub fn on_surface(room: &RoomSpec, p: Vec3, tol: f64) -> bool {
    let inside = (0..3).all(|i| p[i] >= -tol && p[i] <= room.dimensions[i] + tol);
    inside && (0..3).any(|i| p[i].abs() <= tol || (p[i] - room.dimensions[i]).abs() <= tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_is_on_surface() {
        let room = RoomSpec::default();
        let p = sample_points(&room, 1, 3).unwrap();
        assert_eq!(p.len(), 1);
        assert!(on_surface(&room, p[0], 1e-12));
        assert!(sample_points(&room, 0, 3).is_err());
    }

    #[test]
    fn candidates_cover_every_wall() {
        let room = RoomSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = surface_candidates(&room, 2000, &mut rng);
        for wall in 0..6 {
            let axis = wall / 2;
            let v = if wall % 2 == 0 { 0.0 } else { room.dimensions[axis] };
            assert!(pts.iter().any(|p| p[axis] == v), "wall {wall}");
        }
    }
}
