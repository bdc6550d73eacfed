use tetsdf::losses::{LossReport, LossWeights};
use tetsdf::optim::{evaluate_view, random_check_scene, GradSet};
use tetsdf::render::RenderCache;

fn terms_at(
    model: &tetsdf::render::Model,
    cam: &tetsdf::render::Camera,
    reference: &[[f64; 3]],
    w: &LossWeights,
) -> tetsdf::losses::LossTerms {
    let cache = RenderCache::build(model);
    evaluate_view(model, &cache, cam, reference, w, None, false, None)
        .unwrap()
        .terms
}

fn main() {
    let w = LossWeights::default();
    let (mut model, cam, reference) = random_check_scene(4);
    let cache = RenderCache::build(&model);
    let mut grads = GradSet::zeros(&model);
    evaluate_view(&model, &cache, &cam, &reference, &w, None, false, Some(&mut grads)).unwrap();

    for &idx in &[422usize, 429, 433, 436] {
        let a = grads.appearance[idx];
        let theta = model.appearance.data[idx];
        print!("idx {idx}: analytic {a:+.6e}");
        for h in [1e-4f64, 1e-5, 1e-6] {
            model.appearance.data[idx] = theta + h;
            let hi = terms_at(&model, &cam, &reference, &w);
            model.appearance.data[idx] = theta - h;
            let lo = terms_at(&model, &cam, &reference, &w);
            model.appearance.data[idx] = theta;
            let dl1 = (hi.rgb_l1 - lo.rgb_l1) / (2.0 * h);
            let dss = w.ssim * (hi.rgb_ssim - lo.rgb_ssim) / (2.0 * h);
            let fd = dl1 + dss;
            print!("  | h={h:.0e}: fd {fd:+.6e} (l1 {dl1:+.3e}, ssim {dss:+.3e}) rel {:+.2e}",
                (a - fd).abs() / a.abs().max(fd.abs()));
        }
        println!();
    }
}
