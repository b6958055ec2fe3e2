//! Memorizes the latent of one procedural scene with the diffusion model and
//! decodes a generated sample.
//!
//! cargo run --release --example ddpm_memorize -- [vae.ckpt] [steps]

use std::time::Instant;

use voxdiff::diffusion::{generate, train_ddpm, DiffusionConfig, LatentSample};
use voxdiff::toy::procedural_scene;
use voxdiff::vae::{refine_decoder, train_vae, Vae, VaeConfig};

fn main() -> voxdiff::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let scene = procedural_scene(0, [64, 64, 16])?;
    let vae = match args.first().filter(|p| std::path::Path::new(p).exists()) {
        Some(path) => Vae::load(path)?,
        None => {
            let cfg = VaeConfig { epochs: 300, lr_decay_every: 100, refine_epochs: 60, ..VaeConfig::toy() };
            let start = Instant::now();
            let (mut vae, _) = train_vae(std::slice::from_ref(&scene), &cfg, 1)?;
            refine_decoder(&mut vae, std::slice::from_ref(&scene), cfg.refine_noise, 1)?;
            println!("vae trained in {:.1}s", start.elapsed().as_secs_f64());
            if let Some(path) = args.first() {
                vae.save(path, cfg.epochs as u64)?;
            }
            vae
        }
    };
    let recon = vae.reconstruct(&scene)?;
    println!("reconstruction iou {:.4}", recon.scene.voxel_iou(&scene));
    let latent = vae.dense_mean(&scene)?;
    let mut cfg = DiffusionConfig::toy();
    if let Some(steps) = args.get(1) {
        cfg.epochs = steps.parse().expect("numeric step count");
    }
    let sample = LatentSample { id: "scene0".into(), latent, cloud: None };
    let start = Instant::now();
    let (model, log) = train_ddpm(&[sample], &cfg, scene.grid(), vae.config().levels, "toy", 5)?;
    for e in log.epochs.iter().step_by(250) {
        println!("step {:5} loss {:.5}", e.epoch, e.loss);
    }
    println!("ddpm trained {} steps in {:.1}s (scale {:.3})", log.steps, start.elapsed().as_secs_f64(), log.latent_scale);
    for seed in 0..3 {
        let start = Instant::now();
        let g = generate(&model, &vae, seed, None, 0.0)?;
        println!(
            "seed {seed}: iou {:.4}, {} voxels, sampled in {:.1}s",
            g.scene.voxel_iou(&scene),
            g.scene.len(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
