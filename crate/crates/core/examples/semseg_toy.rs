//! Trains the segmentation network on procedural scenes and reports the
//! training-set IoU per class.
//!
//! Usage: semseg_toy [scenes] [epochs]

use std::time::Instant;

use voxdiff::eval::iou;
use voxdiff::semseg::{train_segmenter, SegConfig};
use voxdiff::toy::procedural_scene;

fn main() -> voxdiff::Result<()> {
    env_logger::init();
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let n = args.first().copied().unwrap_or(20);
    let cfg = SegConfig { epochs: args.get(1).copied().unwrap_or(15), ..SegConfig::toy() };
    let scenes = (0..n as u64).map(|s| procedural_scene(s, [64, 64, 16])).collect::<voxdiff::Result<Vec<_>>>()?;
    let start = Instant::now();
    let (_, log) = train_segmenter(&scenes, &[], &cfg, 0)?;
    for e in &log.epochs {
        println!("epoch {:2}  lr {:.4}  loss {:.4}  running mIoU {:.3}", e.epoch, e.lr, e.loss, iou(&e.train_confusion).miou.unwrap_or(0.0));
    }
    print!("{}", iou(&log.final_confusion).to_csv());
    println!("{} steps in {:.1}s", log.steps, start.elapsed().as_secs_f64());
    Ok(())
}
