//! Overfits the desk model on eight synthetic samples and reports the
//! training-set DSC after every epoch.

use std::time::Instant;

use affseg_core::config::AugmentConfig;
use affseg_core::data::{generate_synthetic, SyntheticSpec};
use affseg_core::train::Trainer;
use affseg_core::{ModelConfig, TrainConfig};

fn main() -> affseg_core::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let lr = args.first().copied().unwrap_or(1e-2);
    let momentum = args.get(1).copied().unwrap_or(0.98);
    let epochs = args.get(2).copied().unwrap_or(200.0) as usize;
    let spec = SyntheticSpec {
        noise_std: 0.02,
        ..Default::default()
    };
    let data = generate_synthetic(&spec, 8)?;
    let tc = TrainConfig {
        lr_init: lr,
        momentum,
        epochs,
        augment: AugmentConfig {
            hflip_prob: 0.0,
            rotate_max_deg: 0.0,
        },
        ..TrainConfig::default()
    };
    let mut t = Trainer::<f32>::new(&ModelConfig::desk(), &tc)?;
    let start = Instant::now();
    t.fit(&data, &data, |_, r| {
        println!(
            "{:4} loss {:.4} dice {:.4} bce {:.4} lr {:.2e} DSC {:.4} mIoU {:.4} {:.0?}",
            r.epoch,
            r.train_loss,
            r.train_dice,
            r.train_bce,
            r.lr,
            r.val_mean_dsc,
            r.val_mean_iou,
            start.elapsed()
        );
        Ok(r.val_mean_dsc < 0.95)
    })
}
