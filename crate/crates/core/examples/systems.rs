//! Builds the four systems from one seed and shows how each delivers the
//! subject: recycled self-attention signatures, control residuals, a
//! reference network, or nothing.
//!
//! cargo run --release --example systems

use candle_core::{DType, Device};
use recycled_diffusion::baselines::{Model, SystemKind};
use recycled_diffusion::codec::Codec;
use recycled_diffusion::data::{Batch, Dataset, SynthSpec};
use recycled_diffusion::denoiser::DenoiserConfig;
use recycled_diffusion::recycling::{gemini_step, GeminiInputs, GeminiOptions};
use recycled_diffusion::schedule::{forward_diffuse, make_schedule};

fn main() -> recycled_diffusion::error::Result<()> {
    let cfg = DenoiserConfig::desk();
    let data = Dataset::generate(&SynthSpec::desk(1), 0..2, "train")?;
    let refs: Vec<_> = data.pairs.iter().collect();
    let sched = make_schedule(1000, 1e-4, 0.02, 50)?;
    for kind in SystemKind::ALL {
        let model = Model::new(kind, &cfg, 0, DType::F32, &Device::Cpu)?;
        // Wake the zero-initialized output layer so outputs differ.
        model.base_params.perturb(1, 0.02)?;
        let batch = Batch::from_pairs(&refs, None, model.dtype(), model.device())?;
        let codec = cfg.codec();
        let scene = codec.encode(&batch.scene)?;
        let subject = codec.encode(&batch.subject)?;
        let mask = codec.encode_mask(&batch.mask)?.for_channels(3)?;
        let masked = scene.with_tensor((scene.tensor() * &mask.blend)?)?;
        let tokens = model.base.encode_semantic(&subject, &masked)?;
        let t = 500;
        let z_t = forward_diffuse(&scene, t, &scene.with_tensor(scene.tensor().randn_like(0.0, 1.0)?)?, &sched)?;
        let x = GeminiInputs {
            z_t: &z_t,
            scene: &scene,
            mask: &mask,
            subject: &subject,
            noisy_subject: &subject,
            tokens: Some(&tokens),
            ts: &[t, t],
        };
        let out = gemini_step(&model, &x, &GeminiOptions { trace: true, ..GeminiOptions::full() })?;
        println!(
            "{kind:>12}: {:>8} parameters, {} sites delivered, eps std {:.4}",
            model.num_params(),
            out.delivered,
            out.eps.tensor().flatten_all()?.var(0)?.sqrt()?.to_scalar::<f32>()?
        );
    }
    Ok(())
}
