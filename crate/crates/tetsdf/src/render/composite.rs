//! SDF-to-opacity conversion and front-to-back compositing.
//!
//! A segment through one cell turns its endpoint signed distances into an
//! opacity via the logistic CDF `Phi_s(f) = sigmoid(s f)`:
//!
//! ```text
//! alpha = max(0, (Phi_s(f_in) - Phi_s(f_out)) / Phi_s(f_in))
//! ```
//!
//! which is positive exactly where the ray descends the field (approaching
//! the surface from outside or pushing deeper inside).  Segments composite
//! front to back with transmittance `T`; color uses the mean of the cell's
//! appearance at the two endpoints, depth the interval midpoint, and the
//! normal the cell's unit SDF gradient.

use super::trace::Segment;
use super::{Model, RenderCache, EARLY_STOP_TRANSMITTANCE};
use crate::field::sigmoid;
use crate::geometry::TetId;
use crate::Vec3;

/// Opacity of a segment entering at SDF `f_in` and leaving at `f_out`.
///
/// Evaluated as `1 - exp(softplus(-s f_in) - softplus(-s f_out))`, which is
/// stable for `|s f|` far beyond the saturation of `sigmoid` itself.
pub fn segment_alpha(f_in: f64, f_out: f64, s: f64) -> f64 {
    // log Phi_s(f) = -softplus(-s f); the ratio is exp of the difference.
    let log_ratio = crate::field::softplus(-s * f_in) - crate::field::softplus(-s * f_out);
    if log_ratio >= 0.0 {
        // Ratio >= 1 means the field is non-decreasing along the segment.
        return 0.0;
    }
    (1.0 - log_ratio.exp()).max(0.0)
}

/// Partial derivatives `(d alpha/d f_in, d alpha/d f_out, d alpha/d s)`.
/// Zero everywhere the forward value is clamped to zero.
pub fn segment_alpha_backward(f_in: f64, f_out: f64, s: f64) -> (f64, f64, f64) {
    let log_ratio = crate::field::softplus(-s * f_in) - crate::field::softplus(-s * f_out);
    if log_ratio >= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let r = log_ratio.exp(); // Phi(f_out)/Phi(f_in), in (0, 1)
    let sig_in = sigmoid(-s * f_in); // 1 - sigmoid(s f_in)
    let sig_out = sigmoid(-s * f_out);
    (
        s * r * sig_in,
        -s * r * sig_out,
        r * (f_in * sig_in - f_out * sig_out),
    )
}

/// One composited segment, recorded for the backward replay.
#[derive(Debug, Clone, Copy)]
pub struct CompositedSegment {
    pub tet: TetId,
    pub t_in: f64,
    pub t_out: f64,
    pub f_in: f64,
    pub f_out: f64,
    pub alpha: f64,
    /// Transmittance *before* this segment.
    pub transmittance: f64,
    /// `transmittance * alpha`.
    pub weight: f64,
    /// Mean of the cell appearance at the two endpoints.
    pub cbar: [f64; 3],
}

/// Forward result for one pixel, before background compositing.
#[derive(Debug, Clone, Copy)]
pub struct PixelForward {
    pub color: [f64; 3],
    pub depth: f64,
    pub normal_raw: Vec3,
    pub t_final: f64,
}

/// Composite the traced `segments` front to back.  With `record`, every
/// segment that actually composited (positive alpha path, not culled) is
/// appended for use by the backward pass.  Culled cells are traversed but
/// contribute nothing.
pub fn composite_pixel(
    model: &Model,
    cache: &RenderCache,
    segments: &[Segment],
    o: &Vec3,
    d: &Vec3,
    cull: Option<&[bool]>,
    mut record: Option<&mut Vec<CompositedSegment>>,
) -> PixelForward {
    let s = model.sharpness.s();
    let mut t_trans = 1.0;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut normal_raw = Vec3::zeros();
    for seg in segments {
        if t_trans < EARLY_STOP_TRANSMITTANCE {
            break;
        }
        if cull.is_some_and(|c| c[seg.tet as usize]) {
            continue;
        }
        let x_in = o + d * seg.t_in;
        let x_out = o + d * seg.t_out;
        let f_in = cache.field_at(seg.tet, &x_in);
        let f_out = cache.field_at(seg.tet, &x_out);
        let alpha = segment_alpha(f_in, f_out, s);
        if alpha <= 0.0 {
            continue;
        }
        let c_in = model.appearance.eval(seg.tet, &x_in, d);
        let c_out = model.appearance.eval(seg.tet, &x_out, d);
        let cbar = [
            0.5 * (c_in[0] + c_out[0]),
            0.5 * (c_in[1] + c_out[1]),
            0.5 * (c_in[2] + c_out[2]),
        ];
        let weight = t_trans * alpha;
        for ch in 0..3 {
            color[ch] += weight * cbar[ch];
        }
        depth += weight * 0.5 * (seg.t_in + seg.t_out);
        normal_raw += weight * cache.normal[seg.tet as usize];
        if let Some(rec) = record.as_deref_mut() {
            rec.push(CompositedSegment {
                tet: seg.tet,
                t_in: seg.t_in,
                t_out: seg.t_out,
                f_in,
                f_out,
                alpha,
                transmittance: t_trans,
                weight,
                cbar,
            });
        }
        t_trans *= 1.0 - alpha;
    }
    PixelForward { color, depth, normal_raw, t_final: t_trans }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_alpha_reference_value() {
        // Worked example: f 0.1 -> -0.1 at s = 10 crosses the surface;
        // alpha = (sig(1) - sig(-1)) / sig(1).
        let a = segment_alpha(0.1, -0.1, 10.0);
        assert!((a - 0.632120558828558).abs() < 1e-12, "got {a}");
    }

    #[test]
    fn segment_alpha_zero_when_field_increases() {
        assert_eq!(segment_alpha(-0.1, 0.1, 10.0), 0.0);
        assert_eq!(segment_alpha(0.2, 0.2, 10.0), 0.0);
        // Descending but fully outside still gives some opacity.
        assert!(segment_alpha(0.5, 0.4, 10.0) > 0.0);
    }

    #[test]
    fn segment_alpha_extreme_sharpness_is_finite_and_saturates() {
        // A surface crossing at huge sharpness is a step: alpha -> 1.
        let a = segment_alpha(0.5, -0.5, 5000.0);
        assert!(a > 1.0 - 1e-12 && a <= 1.0, "got {a}");
        // Deep outside at huge sharpness: alpha ~ 0 but finite.
        let b = segment_alpha(3.0, 2.9, 5000.0);
        assert!((0.0..=1.0).contains(&b) && b.is_finite());
        // All-inside segments saturate alpha -> 1 as well (the ratio
        // sig(-s)/sig(-0.9 s) underflows toward 0).
        let c = segment_alpha(-2.9, -3.0, 5000.0);
        assert!(c > 0.0 && c <= 1.0);
    }

    #[test]
    fn segment_alpha_backward_matches_finite_differences() {
        let h = 1e-7;
        for &(fi, fo, s) in &[
            (0.1, -0.1, 10.0),
            (0.4, 0.2, 25.0),
            (-0.05, -0.3, 42.0),
            (0.02, -0.01, 120.0),
            (1.5, 1.2, 3.0),
        ] {
            let (dfi, dfo, ds) = segment_alpha_backward(fi, fo, s);
            let fd_fi = (segment_alpha(fi + h, fo, s) - segment_alpha(fi - h, fo, s)) / (2.0 * h);
            let fd_fo = (segment_alpha(fi, fo + h, s) - segment_alpha(fi, fo - h, s)) / (2.0 * h);
            let fd_s = (segment_alpha(fi, fo, s + h) - segment_alpha(fi, fo, s - h)) / (2.0 * h);
            assert!((dfi - fd_fi).abs() < 1e-5 * fd_fi.abs().max(1.0), "df_in at ({fi},{fo},{s})");
            assert!((dfo - fd_fo).abs() < 1e-5 * fd_fo.abs().max(1.0), "df_out at ({fi},{fo},{s})");
            assert!((ds - fd_s).abs() < 1e-5 * fd_s.abs().max(1.0), "ds at ({fi},{fo},{s})");
        }
        // Clamped region: exactly zero.
        assert_eq!(segment_alpha_backward(-0.1, 0.1, 10.0), (0.0, 0.0, 0.0));
    }

    #[test]
    fn transmittance_telescopes() {
        // 1 - sum(T_k alpha_k) == prod(1 - alpha_k) for any alphas; checked
        // here on the arithmetic the compositor uses.
        let alphas = [0.1, 0.7, 0.3, 0.05];
        let mut t = 1.0;
        let mut wsum = 0.0;
        for a in alphas {
            wsum += t * a;
            t *= 1.0 - a;
        }
        let prod: f64 = alphas.iter().map(|a| 1.0 - a).product();
        assert!((t - prod).abs() < 1e-15);
        assert!((1.0 - wsum - prod).abs() < 1e-15);
    }
}
