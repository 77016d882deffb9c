//! Autodiff gradient of the training loss against central finite
//! differences, in f64 on the tiny configuration.

mod common;

use common::{gradcheck_setup, gradients, rel_err, worst_err};
use recycled_diffusion::train::{step_loss, TrainConfig};

#[test]
fn training_gradient_matches_finite_differences() {
    let (model, p, cfg) = gradcheck_setup(1.0);
    let n = model.num_params();
    assert!(n <= 1000, "{n} parameters");
    let (analytic, numeric) = gradients(&model, &p, &cfg);
    let err = rel_err(&analytic, &numeric);
    println!("parameters {n}, relative error {err:.3e}");
    assert!(err < 1e-3, "relative error {err}");
    let worst = worst_err(&analytic, &numeric);
    assert!(worst < 1e-3, "worst element error {worst}");
}

#[test]
fn extraction_status_contributes_to_the_gradient() {
    // With full delivery the cache depends on the shared weights, so the
    // gradient differs from the one of the generation status alone.
    let (model, p, cfg) = gradcheck_setup(1.0);
    let grads_full = step_loss(&model, &p, &cfg, 0).unwrap().backward().unwrap();
    let cfg_none = TrainConfig { lambda: 0.0, ..cfg.clone() };
    let grads_gen = step_loss(&model, &p, &cfg_none, 0).unwrap().backward().unwrap();
    let mut differs = 0;
    for (_, var) in model.named_vars() {
        let (a, b) = (grads_full.get(var.as_tensor()), grads_gen.get(var.as_tensor()));
        if let (Some(a), Some(b)) = (a, b) {
            let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            if d > 1e-9 {
                differs += 1;
            }
        }
    }
    assert!(differs > 0);
}
