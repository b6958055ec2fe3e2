//! Overfits the autoencoder on procedural scenes, refines the decoder on
//! noisy latents and reports reconstruction quality.
//!
//! cargo run --release --example vae_toy_overfit -- [scenes] [epochs]

use std::time::Instant;

use voxdiff::toy::procedural_scene;
use voxdiff::vae::{refine_decoder, train_vae, VaeConfig};

fn main() -> voxdiff::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("numeric argument"));
    let n = args.next().unwrap_or(8);
    let epochs = args.next();
    let scenes: Vec<_> = (0..n as u64).map(|s| procedural_scene(s, [64, 64, 16])).collect::<Result<_, _>>()?;
    for s in &scenes {
        println!("scene with {} voxels", s.len());
    }
    let mut cfg = VaeConfig::toy();
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let start = Instant::now();
    let (mut vae, log) = train_vae(&scenes, &cfg, 7)?;
    for e in log.epochs.iter().step_by(10) {
        println!("epoch {:3} total {:.4} prune {:.4} sem {:.4} kl {:.4}", e.epoch, e.total, e.prune, e.semantic, e.latent);
    }
    println!("trained {} steps in {:.1}s", log.steps, start.elapsed().as_secs_f64());
    let report = |vae: &voxdiff::vae::Vae| -> voxdiff::Result<(f64, f64)> {
        let (mut iou, mut acc) = (0.0, 0.0);
        for s in &scenes {
            let out = vae.reconstruct(s)?;
            iou += out.scene.voxel_iou(s);
            acc += out.scene.label_accuracy(s).unwrap_or(0.0);
        }
        Ok((iou / n as f64, acc / n as f64))
    };
    let (iou, acc) = report(&vae)?;
    println!("reconstruction iou {iou:.4} label accuracy {acc:.4}");
    let start = Instant::now();
    let before = vae.encoder_checksum()?;
    let refine = refine_decoder(&mut vae, &scenes, cfg.refine_noise, 7)?;
    let (iou, acc) = report(&vae)?;
    println!(
        "refined {} steps in {:.1}s: iou {iou:.4} accuracy {acc:.4}, encoder unchanged: {}",
        refine.steps,
        start.elapsed().as_secs_f64(),
        before == vae.encoder_checksum()?
    );
    Ok(())
}
