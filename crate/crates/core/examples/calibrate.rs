//! Fits a synthetic dataset and prints per-sample keypoint error, the pass
//! rate at 3%, the overall metric and timing.
//!
//! RAYON_NUM_THREADS=1 cargo run --release --example calibrate -- [n] [seed] [lr] [iters]
//!
//! Defaults reproduce the recovery criterion of the acceptance suite.

use std::time::Instant;

use gausspose::eval::{default_groups, score, Metric};
use gausspose::fit::{fit_pose, FitConfig};
use gausspose::synth::{generate_dataset, PoseRanges};
use gausspose::template::canonical_human_template;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let n: usize = arg(0, "100").parse().unwrap();
    let seed: u64 = arg(1, "2024").parse().unwrap();
    let lr: f64 = arg(2, "0.01").parse().unwrap();
    let iters: usize = arg(3, "300").parse().unwrap();

    let template = canonical_human_template();
    let config = FitConfig {
        learning_rate: lr,
        max_iters: iters,
        seed,
        ..FitConfig::synthetic()
    };
    let data = generate_dataset(&template, n, &PoseRanges::default(), config.resolution, seed)
        .expect("dataset");
    let groups = default_groups(&template);
    let start = Instant::now();
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut within = 0;
    for (i, (sample, target)) in data.iter().enumerate() {
        let r = fit_pose(&template, target, &config).expect("fit");
        let one = score(
            &[r.keypoints.clone()],
            &[sample.keypoints_gt.clone()],
            &groups,
            Metric::Distance,
        )
        .unwrap();
        if one.overall <= 3.0 {
            within += 1;
        }
        println!(
            "{i:04} err {:7.3}%  loss {:.5}  anchor {:.2e}  iters {}",
            one.overall, r.best.total, r.best.anchor, r.iterations_used
        );
        preds.push(r.keypoints);
        gts.push(sample.keypoints_gt.clone());
    }
    let report = score(&preds, &gts, &groups, Metric::Distance).unwrap();
    print!("{}", report.to_text());
    println!(
        "samples <= 3%: {within}/{n}  elapsed {:.1}s",
        start.elapsed().as_secs_f64()
    );
}
