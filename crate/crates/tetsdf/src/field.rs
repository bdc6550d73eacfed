//! The optimizable fields living on the tetrahedral grid.
//!
//! Three parameter blocks drive rendering: per-vertex signed distances
//! ([`SdfField`], interpolated linearly inside each tet), a per-tet
//! view-dependent appearance model ([`AppearanceField`]), and a single global
//! [`Sharpness`] controlling how quickly density falls off away from the
//! surface.  Fields are stamped with the grid generation they were built
//! for; consumers compare stamps to catch stale references after topology
//! edits.

use crate::geometry::{Location, TetComplex, TetId};
use crate::Vec3;

/// Per-vertex signed distances; index parallel to `complex.vertices`.
#[derive(Debug, Clone)]
pub struct SdfField {
    pub values: Vec<f64>,
    pub generation: u64,
}

impl SdfField {
    pub fn new(values: Vec<f64>, generation: u64) -> Self {
        SdfField { values, generation }
    }

    /// Linear interpolation of the SDF at `p`: the barycentric weights of
    /// the containing tet applied to its vertex values.  `None` outside the
    /// hull.  Returns the containing tet for hint chaining.
    pub fn eval(
        &self,
        complex: &TetComplex,
        p: &Vec3,
        hint: Option<TetId>,
    ) -> Option<(f64, TetId)> {
        match complex.locate(p, hint).ok()? {
            Location::Outside => None,
            Location::Inside(t) => {
                let l = complex.barycentric(t, p);
                let tet = &complex.tets[t as usize];
                let f = (0..4).map(|i| l[i] * self.values[tet.v[i] as usize]).sum();
                Some((f, t))
            }
        }
    }

    /// The constant SDF gradient of tet `t`: `sum_j f_j grad(lambda_j)`.
    /// Zero for degenerate tets (which a valid grid never contains).
    pub fn tet_gradient(&self, complex: &TetComplex, t: TetId) -> Vec3 {
        match complex.lambda_gradients(t) {
            None => Vec3::zeros(),
            Some(gl) => {
                let tet = &complex.tets[t as usize];
                (0..4).map(|i| self.values[tet.v[i] as usize] * gl[i]).sum()
            }
        }
    }
}

/// Real spherical-harmonics basis values for unit direction `d`, lowest
/// `(degree+1)^2` entries filled, order: (l=0), (l=1: y,z,x), (l=2: xy, yz,
/// 3z^2-1, xz, x^2-y^2).
pub fn sh_basis(d: &Vec3, degree: u32) -> [f64; 9] {
    const C0: f64 = 0.282_094_791_773_878_1;
    const C1: f64 = 0.488_602_511_902_919_9;
    const C2: [f64; 3] = [1.092_548_430_592_079_2, 0.315_391_565_252_520_05, 0.546_274_215_296_039_6];
    let mut b = [0.0; 9];
    b[0] = C0;
    if degree >= 1 {
        b[1] = C1 * d.y;
        b[2] = C1 * d.z;
        b[3] = C1 * d.x;
    }
    if degree >= 2 {
        b[4] = C2[0] * d.x * d.y;
        b[5] = C2[0] * d.y * d.z;
        b[6] = C2[1] * (3.0 * d.z * d.z - 1.0);
        b[7] = C2[0] * d.x * d.z;
        b[8] = C2[2] * (d.x * d.x - d.y * d.y);
    }
    b
}

/// `ln(1 + e^x)`, stable across the whole f64 range.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`]: the logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] on positive inputs.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

/// Per-tet first-order appearance: a view-dependent base color from
/// spherical harmonics plus a constant spatial color gradient anchored at
/// the tet's build-time centroid,
/// `c(p, d) = max(0, softplus(SH(d) . coeffs) + G (p - anchor))` per channel.
#[derive(Debug, Clone)]
pub struct AppearanceField {
    pub sh_degree: u32,
    /// Per tet: `3 * n_coeffs` SH coefficients (channel-major), then 9
    /// gradient entries (3 channels x xyz).
    pub data: Vec<f64>,
    /// Spatial anchor of each tet's linear term (centroid at build time).
    pub anchors: Vec<Vec3>,
    pub generation: u64,
}

impl AppearanceField {
    pub fn n_coeffs(sh_degree: u32) -> usize {
        ((sh_degree + 1) * (sh_degree + 1)) as usize
    }

    pub fn stride(&self) -> usize {
        3 * Self::n_coeffs(self.sh_degree) + 9
    }

    /// Mid-gray, direction-independent, spatially constant initialization.
    pub fn neutral(complex: &TetComplex, sh_degree: u32, gray: f64) -> Self {
        let nc = Self::n_coeffs(sh_degree);
        let stride = 3 * nc + 9;
        let dc = softplus_inv(gray) / sh_basis(&Vec3::zeros(), 0)[0];
        let mut data = vec![0.0; stride * complex.n_tets()];
        for t in 0..complex.n_tets() {
            for ch in 0..3 {
                data[t * stride + ch * nc] = dc;
            }
        }
        let anchors = (0..complex.n_tets()).map(|t| complex.centroid(t as TetId)).collect();
        AppearanceField { sh_degree, data, anchors, generation: complex.generation }
    }

    pub fn coeff(&self, t: TetId, ch: usize, m: usize) -> f64 {
        let nc = Self::n_coeffs(self.sh_degree);
        self.data[t as usize * self.stride() + ch * nc + m]
    }

    pub fn gradient(&self, t: TetId, ch: usize) -> Vec3 {
        let nc = Self::n_coeffs(self.sh_degree);
        let base = t as usize * self.stride() + 3 * nc + 3 * ch;
        Vec3::new(self.data[base], self.data[base + 1], self.data[base + 2])
    }

    /// Color of tet `t` at point `p` seen from direction `d` (unit).
    pub fn eval(&self, t: TetId, p: &Vec3, d: &Vec3) -> [f64; 3] {
        let nc = Self::n_coeffs(self.sh_degree);
        let basis = sh_basis(d, self.sh_degree);
        let rel = p - self.anchors[t as usize];
        let mut c = [0.0; 3];
        for ch in 0..3 {
            let mut s = 0.0;
            for m in 0..nc {
                s += basis[m] * self.coeff(t, ch, m);
            }
            c[ch] = (softplus(s) + self.gradient(t, ch).dot(&rel)).max(0.0);
        }
        c
    }

    /// Like [`eval`](Self::eval) but also accumulates `dL/d(params of t)`
    /// into `grad_out` (same layout as `data`, one tet's stride), given
    /// `dL/dc`.  The clamp at zero stops gradients on clamped channels.
    pub fn eval_backward(
        &self,
        t: TetId,
        p: &Vec3,
        d: &Vec3,
        dl_dc: &[f64; 3],
        grad_out: &mut [f64],
    ) -> [f64; 3] {
        let nc = Self::n_coeffs(self.sh_degree);
        let basis = sh_basis(d, self.sh_degree);
        let rel = p - self.anchors[t as usize];
        let mut c = [0.0; 3];
        for ch in 0..3 {
            let mut s = 0.0;
            for m in 0..nc {
                s += basis[m] * self.coeff(t, ch, m);
            }
            let raw = softplus(s) + self.gradient(t, ch).dot(&rel);
            c[ch] = raw.max(0.0);
            if raw > 0.0 {
                let dsp = sigmoid(s) * dl_dc[ch];
                for m in 0..nc {
                    grad_out[ch * nc + m] += dsp * basis[m];
                }
                let gbase = 3 * nc + 3 * ch;
                grad_out[gbase] += dl_dc[ch] * rel.x;
                grad_out[gbase + 1] += dl_dc[ch] * rel.y;
                grad_out[gbase + 2] += dl_dc[ch] * rel.z;
            }
        }
        c
    }
}

/// Global density sharpness `s`, optimized in log space for positivity.
#[derive(Debug, Clone, Copy)]
pub struct Sharpness {
    pub log_s: f64,
}

impl Sharpness {
    pub fn s(&self) -> f64 {
        self.log_s.exp()
    }

    /// Initialize so the active shell around the zero level set spans a
    /// quarter of the scene diagonal (`band_width(s0) = 0.25 * diagonal`).
    pub fn init_for_diagonal(diagonal: f64) -> Sharpness {
        let s0 = 2.0 * 199.0_f64.ln() / (0.25 * diagonal);
        Sharpness { log_s: s0.ln() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TetComplex;

    #[test]
    fn sh_basis_constants_and_axes() {
        let b0 = sh_basis(&Vec3::new(0.0, 0.0, 1.0), 0);
        assert!((b0[0] - 0.28209479177387814).abs() < 1e-15);
        assert_eq!(b0[1], 0.0, "degree 0 leaves higher bands empty");
        let b2 = sh_basis(&Vec3::new(0.0, 0.0, 1.0), 2);
        assert!((b2[2] - 0.4886025119029199).abs() < 1e-15, "Y1z at +z");
        assert_eq!(b2[1], 0.0);
        assert!((b2[6] - 2.0 * 0.31539156525252005).abs() < 1e-15, "Y20 at +z");
        let bx = sh_basis(&Vec3::new(1.0, 0.0, 0.0), 2);
        assert!((bx[3] - 0.4886025119029199).abs() < 1e-15, "Y1x at +x");
        assert!((bx[8] - 0.5462742152960396).abs() < 1e-15, "Y22 at +x");
    }

    #[test]
    fn softplus_and_sigmoid_stable_and_consistent() {
        assert!((softplus(0.0) - 2.0_f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        // Finite-difference agreement away from saturation.
        for x in [-3.0, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (softplus(x + h) - softplus(x - h)) / (2.0 * h);
            assert!((fd - sigmoid(x)).abs() < 1e-9, "softplus' = sigmoid at {x}");
        }
        for y in [0.1, 0.5, 2.0, 50.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_field_reproduced_exactly() {
        // f(p) = a . p + b is in the span of the piecewise-linear basis, so
        // interpolation and per-tet gradients must reproduce it exactly.
        let c = TetComplex::structured(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0), 2);
        let a = Vec3::new(0.3, -1.2, 0.7);
        let b = 0.25;
        let values: Vec<f64> = c.vertices.iter().map(|p| a.dot(p) + b).collect();
        let f = SdfField::new(values, c.generation);
        let mut hint = None;
        for p in [
            Vec3::new(0.1, 0.2, 0.3),
            Vec3::new(-0.9, 0.9, -0.4),
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(0.999, -0.999, 0.999),
        ] {
            let (val, t) = f.eval(&c, &p, hint).expect("inside hull");
            assert!((val - (a.dot(&p) + b)).abs() < 1e-12, "at {p:?}");
            hint = Some(t);
        }
        for t in 0..c.n_tets() {
            let g = f.tet_gradient(&c, t as u32);
            assert!((g - a).norm() < 1e-12, "gradient of tet {t}");
        }
        assert!(f.eval(&c, &Vec3::new(2.0, 0.0, 0.0), None).is_none(), "outside");
    }

    #[test]
    fn appearance_neutral_and_linear_term() {
        let c = TetComplex::structured(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0), 1);
        let mut app = AppearanceField::neutral(&c, 0, 0.5);
        let d = Vec3::new(0.0, 0.0, 1.0);
        let anchor = app.anchors[0];
        let col = app.eval(0, &anchor, &d);
        for ch in 0..3 {
            assert!((col[ch] - 0.5).abs() < 1e-12, "neutral gray at the anchor");
        }
        // Install a gradient on channel 0 and check the linear response and
        // the clamp.
        let nc = AppearanceField::n_coeffs(0);
        let stride = app.stride();
        app.data[stride * 0 + 3 * nc] = 2.0; // d(channel 0)/dx
        let p = anchor + Vec3::new(0.1, 0.0, 0.0);
        assert!((app.eval(0, &p, &d)[0] - 0.7).abs() < 1e-12);
        let far = anchor - Vec3::new(1.0, 0.0, 0.0);
        assert_eq!(app.eval(0, &far, &d)[0], 0.0, "clamped at zero");
    }

    #[test]
    fn appearance_backward_matches_finite_differences() {
        let c = TetComplex::structured(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0), 1);
        let mut app = AppearanceField::neutral(&c, 2, 0.4);
        // Perturb all parameters of tet 0 deterministically.
        let stride = app.stride();
        for (i, x) in app.data[..stride].iter_mut().enumerate() {
            *x += 0.05 * ((i as f64 * 0.7).sin());
        }
        let d = Vec3::new(0.6, -0.64, 0.48).normalize();
        let p = app.anchors[0] + Vec3::new(0.07, -0.02, 0.05);
        let dl_dc = [0.3, -1.1, 0.7];
        let mut grad = vec![0.0; stride];
        app.eval_backward(0, &p, &d, &dl_dc, &mut grad);
        let h = 1e-6;
        for i in 0..stride {
            let mut plus = app.clone();
            plus.data[i] += h;
            let mut minus = app.clone();
            minus.data[i] -= h;
            let cp = plus.eval(0, &p, &d);
            let cm = minus.eval(0, &p, &d);
            let fd: f64 = (0..3).map(|ch| dl_dc[ch] * (cp[ch] - cm[ch])).sum::<f64>() / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() < 1e-6 * fd.abs().max(1.0),
                "param {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn sharpness_initialization_matches_band_rule() {
        let diag = 2.0 * 3.0_f64.sqrt();
        let s = Sharpness::init_for_diagonal(diag);
        let band = 2.0 * 199.0_f64.ln() / s.s();
        assert!((band - 0.25 * diag).abs() < 1e-12);
        // The often-quoted value for a diagonal of one.
        let unit = Sharpness::init_for_diagonal(1.0);
        assert!((unit.s() - 42.35).abs() < 0.1);
    }
}
