use std::path::Path;
use std::process::Command;
use std::thread::sleep;
use std::time::{Duration, Instant};

use voxdiff::nn::cancel;
use voxdiff::scene::io::save_scene_as;
use voxdiff::toy::procedural_scene;
use voxdiff::vae::{train_vae, Vae, VaeConfig};

fn scenes(dir: &Path, n: u64) {
    for s in 0..n {
        save_scene_as(&procedural_scene(s, [32, 32, 8]).unwrap(), dir, &format!("s{s}")).unwrap();
    }
}

#[test]
fn interrupt_checkpoints_and_exits_130() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("scenes");
    scenes(&dir, 4);
    let data: Vec<_> = (0..2).map(|s| procedural_scene(s, [32, 32, 8]).unwrap()).collect();

    cancel::request();
    let (_, log) = train_vae(&data, &VaeConfig { epochs: 50, ..VaeConfig::toy() }, 0).unwrap();
    cancel::reset();
    assert!(log.cancelled);
    assert_eq!(log.steps, 1);

    let out = tmp.path().join("vae.ckpt");
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.cfg");
    let mut child = Command::new(env!("CARGO_BIN_EXE_voxdiff"))
        .args(["--config", cfg.to_str().unwrap(), "--set", "vae.epochs=100000", "train-vae"])
        .args(["--scenes", dir.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .env("RUST_LOG", "warn")
        .spawn()
        .unwrap();
    sleep(Duration::from_millis(1500));
    assert!(child.try_wait().unwrap().is_none(), "training ended before the interrupt");
    let kill = Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    assert!(kill.success());
    let start = Instant::now();
    let status = child.wait().unwrap();
    assert!(start.elapsed() < Duration::from_secs(30));
    assert_eq!(status.code(), Some(voxdiff::pipeline::EXIT_CANCELLED));
    let vae = Vae::load(&out).unwrap();
    assert_eq!(vae.config().epochs, 100000);
    assert!(tmp.path().join("vae.ckpt.manifest.json").is_file());
}
