use std::path::{Path, PathBuf};

use affseg_core::checkpoint::Checkpoint;
use affseg_core::config::{load_config, save_config};
use affseg_core::data::{generate_synthetic, load_directory, resize, save_sample, split, SegmentationSample, SyntheticSpec, DEFAULT_SPLIT};
use affseg_core::train::{evaluate, predict_one, run_ablation, Trainer};
use affseg_core::{Error, ModelConfig, Result};
use serde::Serialize;

/// Training and evaluation run in 32-bit.
type Real = f32;

const FORMAT_VERSION: u32 = 1;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<PathBuf> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

#[derive(Serialize)]
struct Manifest<'a> {
    format_version: u32,
    spec: &'a SyntheticSpec,
    count: usize,
    ids: Vec<&'a str>,
}

pub fn gen_data(spec: Option<&Path>, out: &Path, n: usize) -> Result<Vec<PathBuf>> {
    let spec = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: p.to_path_buf(),
                msg: e.to_string(),
            })?
        }
        None => SyntheticSpec::default(),
    };
    let samples = generate_synthetic(&spec, n)?;
    create_dir(out)?;
    let mut artifacts = Vec::with_capacity(2 * n + 1);
    for s in &samples {
        save_sample(out, s)?;
        artifacts.push(out.join(format!("{}_img.png", s.id)));
        artifacts.push(out.join(format!("{}_mask.png", s.id)));
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        spec: &spec,
        count: n,
        ids: samples.iter().map(|s| s.id.as_str()).collect(),
    };
    artifacts.push(write_json(&out.join("manifest.json"), &manifest)?);
    Ok(artifacts)
}

/// Loads a directory and resizes every sample to the model input size.
fn load_for(cfg: &ModelConfig, dir: &Path) -> Result<Vec<SegmentationSample>> {
    if cfg.in_channels != 1 {
        return Err(Error::Config(format!(
            "PNG datasets are single-channel but the model expects in_channels = {}",
            cfg.in_channels
        )));
    }
    let samples = load_directory(dir, cfg.num_classes.max(2))?;
    Ok(samples.iter().map(|s| resize(s, cfg.img_size)).collect())
}

#[derive(Serialize)]
struct SplitRecord<'a> {
    format_version: u32,
    seed: u64,
    train: Vec<&'a str>,
    val: Vec<&'a str>,
    test: Vec<&'a str>,
}

#[derive(Serialize)]
struct History<'a> {
    format_version: u32,
    epochs: &'a [affseg_core::train::EpochRecord],
}

pub fn train(config: &Path, data: &Path, out: &Path, resume: Option<&Path>) -> Result<Vec<PathBuf>> {
    let (model_cfg, train_cfg) = load_config(config)?;
    let samples = load_for(&model_cfg, data)?;
    let (tr, va, te) = split(samples, DEFAULT_SPLIT, train_cfg.seed)?;
    create_dir(out)?;

    let mut trainer = match resume {
        Some(p) => {
            let t = Trainer::<Real>::from_checkpoint(Checkpoint::load(p)?)?;
            if t.model.config != model_cfg {
                return Err(Error::Config(format!("{} was trained with a different model configuration", p.display())));
            }
            log::info!("resuming after epoch {}", t.epoch);
            t
        }
        None => Trainer::<Real>::new(&model_cfg, &train_cfg)?,
    };
    // the run continues with the requested epoch budget
    trainer.train_config.epochs = train_cfg.epochs;

    let resolved = out.join("config.json");
    save_config(&resolved, &model_cfg, &trainer.train_config)?;
    let split_path = write_json(
        &out.join("split.json"),
        &SplitRecord {
            format_version: FORMAT_VERSION,
            seed: train_cfg.seed,
            train: tr.iter().map(|s| s.id.as_str()).collect(),
            val: va.iter().map(|s| s.id.as_str()).collect(),
            test: te.iter().map(|s| s.id.as_str()).collect(),
        },
    )?;
    let (best, last, hist) = (out.join("best.ckpt"), out.join("last.ckpt"), out.join("metrics_history.json"));
    let first_epoch = trainer.epoch;

    let result = trainer.fit(&tr, &va, |t, rec| {
        if t.best_score.is_some_and(|(_, e)| e == rec.epoch) {
            Checkpoint::best_of(t).save(&best)?;
        }
        Checkpoint::from_trainer(t).save(&last)?;
        write_json(
            &hist,
            &History {
                format_version: FORMAT_VERSION,
                epochs: &t.history,
            },
        )?;
        Ok(true)
    });
    if let Err(e) = result {
        if trainer.epoch > 0 {
            log::error!("training stopped; {} holds the state after epoch {}", last.display(), trainer.epoch);
        }
        return Err(e);
    }
    if trainer.epoch == first_epoch {
        log::warn!("nothing to do: {} epochs already completed", trainer.epoch);
        Checkpoint::from_trainer(&trainer).save(&last)?;
        write_json(
            &hist,
            &History {
                format_version: FORMAT_VERSION,
                epochs: &trainer.history,
            },
        )?;
    }
    if !best.exists() {
        Checkpoint::best_of(&trainer).save(&best)?;
    }
    Ok(vec![best, last, hist, resolved, split_path])
}

pub fn eval(ckpt: &Path, data: &Path, report: Option<&Path>) -> Result<Vec<PathBuf>> {
    let (model, store, meta, _) = Checkpoint::<Real>::load(ckpt)?.into_model()?;
    let samples = load_for(&meta.model_config, data)?;
    let r = evaluate(&model, &store, &samples, meta.train_config.batch_size, &[])?;
    print!("{}", r.to_table());
    let path = report.map_or_else(|| ckpt.with_extension("metrics.json"), Path::to_path_buf);
    Ok(vec![write_json(&path, &r)?])
}

/// Distinct colors for class ids 1, 2, ...
const PALETTE: [[u8; 3]; 6] = [[230, 25, 75], [60, 180, 75], [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240]];

pub fn predict(ckpt: &Path, image: &Path, out: &Path, overlay: Option<&Path>) -> Result<Vec<PathBuf>> {
    let (model, store, meta, _) = Checkpoint::<Real>::load(ckpt)?.into_model()?;
    let cfg = &meta.model_config;
    let img = image::open(image).map_err(|source| Error::Image {
        path: image.to_path_buf(),
        source,
    })?;
    let color = img.color();
    let channels = color.channel_count() as usize - color.has_alpha() as usize;
    if channels != cfg.in_channels {
        return Err(Error::Input(format!(
            "{} has {channels} channel(s), the model expects {}",
            image.display(),
            cfg.in_channels
        )));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    if (h, w) != cfg.img_size {
        return Err(Error::Input(format!(
            "{} is {h}x{w}, the model expects {}x{}",
            image.display(),
            cfg.img_size.0,
            cfg.img_size.1
        )));
    }
    let rgb = img.to_rgb8();
    let gray = img.to_luma8();
    let x = affseg_core::ndarray::Array3::from_shape_fn((channels, h, w), |(c, y, xx)| {
        let v = if channels == 1 {
            gray.get_pixel(xx as u32, y as u32).0[0]
        } else {
            rgb.get_pixel(xx as u32, y as u32).0[c]
        };
        v as f32 / 255.0
    });
    let mask = predict_one(&model, &store, &x)?;
    let mask_png = image::GrayImage::from_fn(w as u32, h as u32, |xx, y| image::Luma([mask[[y as usize, xx as usize]]]));
    mask_png.save(out).map_err(|source| Error::Image {
        path: out.to_path_buf(),
        source,
    })?;
    let mut artifacts = vec![out.to_path_buf()];
    if let Some(path) = overlay {
        let ov = image::RgbImage::from_fn(w as u32, h as u32, |xx, y| {
            let base = rgb.get_pixel(xx, y).0;
            match mask[[y as usize, xx as usize]] {
                0 => image::Rgb(base),
                k => {
                    let c = PALETTE[(k as usize - 1) % PALETTE.len()];
                    image::Rgb(std::array::from_fn(|i| ((base[i] as u16 + c[i] as u16) / 2) as u8))
                }
            }
        });
        ov.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        artifacts.push(path.to_path_buf());
    }
    Ok(artifacts)
}

pub fn ablate(config: &Path, data: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let (model_cfg, train_cfg) = load_config(config)?;
    let samples = load_for(&model_cfg, data)?;
    let (tr, va, te) = split(samples, DEFAULT_SPLIT, train_cfg.seed)?;
    create_dir(out)?;
    let (json, text) = (out.join("ablation.json"), out.join("ablation.txt"));
    let table = run_ablation::<Real>(&model_cfg, &train_cfg, &tr, &va, &te, |partial| {
        write_json(&json, partial)?;
        std::fs::write(&text, partial.to_table()).map_err(|e| Error::io(&text, e))?;
        let row = partial.rows.last().expect("a completed row");
        log::info!("ablation row {} done: DSC {:.2}%", row.label, 100.0 * row.mean_dsc);
        Ok(())
    })?;
    print!("{}", table.to_table());
    Ok(vec![json, text])
}
