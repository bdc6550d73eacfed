//! Epsilon-filtered geometric predicates.
//!
//! Plain double-precision evaluation of the orientation and in-sphere
//! determinants, with a static error filter: when the computed value is
//! smaller than `FILTER_EPS` times the permanent of the determinant (the same
//! expression with every term replaced by its absolute value), the sign is
//! unreliable and the predicate reports an exact tie (`0.0`).  Callers treat
//! ties conservatively: a tie is never "in conflict", never "strictly
//! inside", and a tie on a tetrahedron volume marks it degenerate.
//!
//! The filter band is deliberately much wider than the ~8e-16 worst-case
//! rounding bound of the straight-line evaluation: scene coordinates are
//! normalized to a few units, and configurations flatter than one part in
//! 1e12 are treated as degenerate rather than resolved, matching the
//! documented predicate tolerance of the grid.

use crate::Vec3;

/// Relative width of the tie band, applied to the determinant permanent.
pub const FILTER_EPS: f64 = 1e-12;

/// Unfiltered orientation determinant; for internal ordering decisions where
/// the configuration is already known to be non-degenerate and only the raw
/// floating-point sign is needed.
pub(crate) fn orient3d_raw(a: &Vec3, b: &Vec3, c: &Vec3, d: &Vec3) -> f64 {
    (b - a).cross(&(c - a)).dot(&(d - a))
}

/// Signed triple product `(b-a) . ((c-a) x (d-a))`, i.e. six times the signed
/// volume of tetrahedron `(a, b, c, d)`.
///
/// Positive when `d` lies on the side of plane `(a, b, c)` that the
/// right-handed normal of triangle `a->b->c` points to; a positively oriented
/// tetrahedron has `orient3d(v0, v1, v2, v3) > 0`.  Returns exactly `0.0`
/// when the value falls inside the error filter.
pub fn orient3d(a: &Vec3, b: &Vec3, c: &Vec3, d: &Vec3) -> f64 {
    let bx = b.x - a.x;
    let by = b.y - a.y;
    let bz = b.z - a.z;
    let cx = c.x - a.x;
    let cy = c.y - a.y;
    let cz = c.z - a.z;
    let dx = d.x - a.x;
    let dy = d.y - a.y;
    let dz = d.z - a.z;

    let cydz = cy * dz;
    let czdy = cz * dy;
    let czdx = cz * dx;
    let cxdz = cx * dz;
    let cxdy = cx * dy;
    let cydx = cy * dx;

    let det = bx * (cydz - czdy) + by * (czdx - cxdz) + bz * (cxdy - cydx);
    let permanent = bx.abs() * (cydz.abs() + czdy.abs())
        + by.abs() * (czdx.abs() + cxdz.abs())
        + bz.abs() * (cxdy.abs() + cydx.abs());

    if det.abs() <= FILTER_EPS * permanent {
        0.0
    } else {
        det
    }
}

/// In-sphere test for point `e` against the circumsphere of the tetrahedron
/// `(a, b, c, d)`, which must be positively oriented (`orient3d > 0`).
///
/// Positive when `e` is strictly inside the circumsphere, negative when
/// strictly outside, `0.0` on (filtered) ties.
pub fn insphere(a: &Vec3, b: &Vec3, c: &Vec3, d: &Vec3, e: &Vec3) -> f64 {
    let aex = a.x - e.x;
    let aey = a.y - e.y;
    let aez = a.z - e.z;
    let bex = b.x - e.x;
    let bey = b.y - e.y;
    let bez = b.z - e.z;
    let cex = c.x - e.x;
    let cey = c.y - e.y;
    let cez = c.z - e.z;
    let dex = d.x - e.x;
    let dey = d.y - e.y;
    let dez = d.z - e.z;

    // 2x2 minors of the xy columns.
    let aexbey = aex * bey;
    let bexaey = bex * aey;
    let ab = aexbey - bexaey;
    let bexcey = bex * cey;
    let cexbey = cex * bey;
    let bc = bexcey - cexbey;
    let cexdey = cex * dey;
    let dexcey = dex * cey;
    let cd = cexdey - dexcey;
    let dexaey = dex * aey;
    let aexdey = aex * dey;
    let da = dexaey - aexdey;
    let aexcey = aex * cey;
    let cexaey = cex * aey;
    let ac = aexcey - cexaey;
    let bexdey = bex * dey;
    let dexbey = dex * bey;
    let bd = bexdey - dexbey;

    // 3x3 minors of the xyz columns (rows in the order of the name).
    let abc = aez * bc - bez * ac + cez * ab;
    let bcd = bez * cd - cez * bd + dez * bc;
    let cda = cez * da + dez * ac + aez * cd;
    let dab = dez * ab + aez * bd + bez * da;

    let alift = aex * aex + aey * aey + aez * aez;
    let blift = bex * bex + bey * bey + bez * bez;
    let clift = cex * cex + cey * cey + cez * cez;
    let dlift = dex * dex + dey * dey + dez * dez;

    // Laplace expansion of the 4x4 lifted determinant along the lift column.
    // That determinant is positive for an *inside* point when the rows
    // (a,b,c,d) have negative orient3d in this module's convention, so the
    // sign is flipped before returning.
    let det = (dlift * abc - clift * dab) + (blift * cda - alift * bcd);

    let aezplus = aez.abs();
    let bezplus = bez.abs();
    let cezplus = cez.abs();
    let dezplus = dez.abs();
    let permanent = ((cexdey.abs() + dexcey.abs()) * bezplus
        + (dexbey.abs() + bexdey.abs()) * cezplus
        + (bexcey.abs() + cexbey.abs()) * dezplus)
        * alift
        + ((dexaey.abs() + aexdey.abs()) * cezplus
            + (aexcey.abs() + cexaey.abs()) * dezplus
            + (cexdey.abs() + dexcey.abs()) * aezplus)
            * blift
        + ((aexbey.abs() + bexaey.abs()) * dezplus
            + (bexdey.abs() + dexbey.abs()) * aezplus
            + (dexaey.abs() + aexdey.abs()) * bezplus)
            * clift
        + ((bexcey.abs() + cexbey.abs()) * aezplus
            + (cexaey.abs() + aexcey.abs()) * bezplus
            + (aexbey.abs() + bexaey.abs()) * cezplus)
            * dlift;

    if det.abs() <= FILTER_EPS * permanent {
        0.0
    } else {
        -det
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    #[test]
    fn orient3d_signs_on_unit_tet() {
        let a = v(0.0, 0.0, 0.0);
        let b = v(1.0, 0.0, 0.0);
        let c = v(0.0, 1.0, 0.0);
        // Above the xy-plane: positive (right-hand rule around a->b->c).
        assert!(orient3d(&a, &b, &c, &v(0.3, 0.3, 1.0)) > 0.0);
        assert!(orient3d(&a, &b, &c, &v(0.3, 0.3, -1.0)) < 0.0);
        assert_eq!(orient3d(&a, &b, &c, &v(0.7, 0.9, 0.0)), 0.0);
        // The value is six times the signed volume.
        let vol6 = orient3d(&a, &b, &c, &v(0.0, 0.0, 1.0));
        assert!((vol6 - 1.0).abs() < 1e-15, "6V of unit corner tet, got {vol6}");
    }

    #[test]
    fn orient3d_filters_cancellation_noise() {
        // A generic (axis-unaligned) plane so the determinant suffers real
        // cancellation; displacements below the filter band read as ties.
        let a = v(0.1, 0.2, 0.3);
        let b = v(1.1, 0.15, 0.22);
        let c = v(0.3, 0.9, 0.41);
        let n = (b - a).cross(&(c - a)).normalize();
        let in_plane = a + 0.3 * (b - a) + 0.4 * (c - a);
        assert_eq!(orient3d(&a, &b, &c, &in_plane), 0.0);
        assert_eq!(orient3d(&a, &b, &c, &(in_plane + 1e-14 * n)), 0.0);
        assert!(orient3d(&a, &b, &c, &(in_plane + 1e-9 * n)) > 0.0);
        assert!(orient3d(&a, &b, &c, &(in_plane - 1e-9 * n)) < 0.0);
    }

    /// Regular tetrahedron inscribed in the sphere of radius sqrt(3),
    /// ordered positively under this module's convention.
    fn regular_tet() -> [Vec3; 4] {
        let t = [
            v(1.0, 1.0, 1.0),
            v(-1.0, -1.0, 1.0),
            v(-1.0, 1.0, -1.0),
            v(1.0, -1.0, -1.0),
        ];
        assert!(orient3d(&t[0], &t[1], &t[2], &t[3]) > 0.0);
        t
    }

    #[test]
    fn insphere_signs_on_regular_tet() {
        let [a, b, c, d] = regular_tet();
        // Circumsphere is centered at the origin with radius sqrt(3).
        assert!(insphere(&a, &b, &c, &d, &v(0.0, 0.0, 0.0)) > 0.0);
        assert!(insphere(&a, &b, &c, &d, &v(3.0, 0.0, 0.0)) < 0.0);
        // A point exactly on the sphere ties.
        let r = 3.0_f64.sqrt();
        assert_eq!(insphere(&a, &b, &c, &d, &v(r, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn insphere_sign_flips_with_orientation() {
        let [a, b, c, d] = regular_tet();
        let inside = v(0.1, 0.2, 0.0);
        assert!(insphere(&a, &b, &c, &d, &inside) > 0.0);
        assert!(insphere(&b, &a, &c, &d, &inside) < 0.0);
    }

    #[test]
    fn insphere_matches_circumsphere_distance_on_random_configs() {
        // Independent oracle: solve for the circumcenter, compare distances.
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0;
        for _ in 0..500 {
            let p: Vec<Vec3> = (0..5)
                .map(|_| {
                    v(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect();
            let (mut a, mut b) = (p[0], p[1]);
            let (c, d, e) = (p[2], p[3], p[4]);
            if orient3d(&a, &b, &c, &d) == 0.0 {
                continue; // skip degenerate draws
            }
            if orient3d(&a, &b, &c, &d) < 0.0 {
                std::mem::swap(&mut a, &mut b);
            }
            let m = crate::Mat3::from_rows(&[
                (2.0 * (b - a)).transpose(),
                (2.0 * (c - a)).transpose(),
                (2.0 * (d - a)).transpose(),
            ]);
            let rhs = Vec3::new(
                b.norm_squared() - a.norm_squared(),
                c.norm_squared() - a.norm_squared(),
                d.norm_squared() - a.norm_squared(),
            );
            let center = match m.lu().solve(&rhs) {
                Some(x) => x,
                None => continue,
            };
            let r2 = (a - center).norm_squared();
            let d2 = (e - center).norm_squared();
            if (d2 - r2).abs() < 1e-9 * r2 {
                continue; // too close to the sphere for the oracle to call
            }
            let pred = insphere(&a, &b, &c, &d, &e);
            assert!(
                (pred > 0.0) == (d2 < r2) && pred != 0.0,
                "insphere disagrees with circumcenter oracle: pred={pred}, d2={d2}, r2={r2}"
            );
            checked += 1;
        }
        assert!(checked > 400, "oracle skipped too many cases: {checked}");
    }
}
