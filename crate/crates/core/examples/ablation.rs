//! Runs the five-row ablation on the eight-sample overfit task.

use affseg_core::config::AugmentConfig;
use affseg_core::data::{generate_synthetic, SyntheticSpec};
use affseg_core::train::run_ablation;
use affseg_core::{ModelConfig, TrainConfig};

fn main() -> affseg_core::Result<()> {
    let epochs = std::env::args().nth(1).map_or(100, |a| a.parse().expect("epoch count"));
    let spec = SyntheticSpec {
        noise_std: 0.02,
        ..Default::default()
    };
    let data = generate_synthetic(&spec, 8)?;
    let tc = TrainConfig {
        epochs,
        augment: AugmentConfig {
            hflip_prob: 0.0,
            rotate_max_deg: 0.0,
        },
        ..TrainConfig::default()
    };
    let table = run_ablation::<f32>(&ModelConfig::desk(), &tc, &data, &data, &data, |t| {
        let r = t.rows.last().expect("row");
        println!("{} DSC {:.4} best epoch {}", r.label, r.mean_dsc, r.best_epoch);
        Ok(())
    })?;
    print!("{}", table.to_table());
    Ok(())
}
