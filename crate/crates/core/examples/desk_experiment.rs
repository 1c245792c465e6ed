//! Train the three-path ensemble on 200 synthetic 64x64 samples
//! (160 train / 40 validation) and report nucleus metrics per path and
//! for the vote.
//!
//! Usage: `desk_experiment [epochs]`

use std::time::Instant;

use dmem::data::{generate_synthetic, SynthSpec};
use dmem::ensemble::{train_bundle, BundlePath, BundlePlan, EnsembleBundle, TrainConfig};
use dmem::network::ArchConfig;

fn main() -> dmem::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(12);
    let samples = generate_synthetic(&SynthSpec::default())?;
    let (train, val) = samples.split_at(160);
    let hp = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let bundle = train_bundle::<f64>(
        &ArchConfig::default(),
        &BundlePlan::Ensemble,
        train,
        val,
        &hp,
        7,
        false,
        &|i, v, log| {
            println!(
                "[{:>7.1}s] path{i} {v:<16} epoch {:>3} loss {:.4} val ZSI {:.4}",
                start.elapsed().as_secs_f64(),
                log.epoch,
                log.loss,
                log.val_zsi.unwrap_or(f64::NAN)
            )
        },
    )?;
    for p in bundle.paths() {
        let single = EnsembleBundle::new(vec![BundlePath {
            model: p.model.clone(),
            manifest: p.manifest.clone(),
        }])?;
        let r = single.evaluate(val)?;
        println!("{:<8} ZSI {}", p.model.cfg.variant.label(), r.zsi().format());
    }
    let r = bundle.evaluate(val)?;
    println!("D-MEM    ZSI {}", r.zsi().format());
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
