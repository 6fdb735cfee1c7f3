use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::TrainConfig;
use super::loss::tile_loss;
use super::optim::{clip_global_norm, learning_rate, Adam, AdamConfig};
use crate::network::{Conv, Model, WeightStore};
use crate::pyramid::Image;
use crate::{Error, Result};

/// Mean bits per subpixel of `model` over `images`, weighting each image by
/// its size.
pub fn evaluate(model: &Model<f32>, images: &[Image], constraints: bool) -> f64 {
    let parts: Vec<(f64, usize)> = images
        .par_iter()
        .map(|img| {
            let l = tile_loss(model, img, constraints, false);
            (l.bits, l.subpixels)
        })
        .collect();
    let bits: f64 = parts.iter().map(|p| p.0).sum();
    let n: usize = parts.iter().map(|p| p.1).sum();
    bits / n as f64
}

fn random_crop(img: &Image, size: usize, flip: bool, rng: &mut ChaCha8Rng) -> Image {
    let (cw, ch) = (size.min(img.width()), size.min(img.height()));
    let col = rng.gen_range(0..=img.width() - cw);
    let row = rng.gen_range(0..=img.height() - ch);
    let tile = img.crop(row, col, cw, ch);
    if flip && rng.gen_bool(0.5) {
        tile.flip_horizontal()
    } else {
        tile
    }
}

fn with_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Trains from `init` (or a fresh seeded model) on random crops of
/// `corpus`. Progress goes to `log` as plain text.
pub fn train(
    corpus: &[Image],
    config: &TrainConfig,
    init: Option<Model<f32>>,
    log: &mut (dyn Write + Send),
) -> Result<Model<f32>> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Training("training corpus is empty".into()));
    }
    let model = match init {
        Some(m) => {
            if m.config() != &config.model {
                return Err(Error::Config(
                    "initial model does not match the configured architecture".into(),
                ));
            }
            m
        }
        None => Model::init(config.model, config.seed)?,
    };
    with_pool(config.threads, || run(corpus, config, model, log))?
}

fn run(
    corpus: &[Image],
    config: &TrainConfig,
    mut model: Model<f32>,
    log: &mut (dyn Write + Send),
) -> Result<Model<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_c0de);
    let mut opt = Adam::new(&model, AdamConfig::default());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let lr = learning_rate(config.lr, config.decay, config.decay_every, epoch);
        order.shuffle(&mut rng);
        let (mut epoch_bits, mut epoch_n) = (0.0, 0usize);
        for batch in order.chunks(config.batch) {
            let tiles: Vec<Image> = batch
                .iter()
                .map(|&i| random_crop(&corpus[i], config.crop, config.flip, &mut rng))
                .collect();
            let losses: Vec<_> = tiles
                .par_iter()
                .map(|t| tile_loss(&model, t, config.constraints, true))
                .collect();
            // ordered reduction keeps runs identical for any thread count
            let mut grads: Vec<Conv<f32>> = model.arch().convs().iter().map(Conv::zeros).collect();
            let mut loss = 0.0;
            let inv_b = 1.0 / losses.len() as f64;
            for l in &losses {
                let w = inv_b / l.subpixels as f64;
                loss += l.bits * w;
                epoch_bits += l.bits;
                epoch_n += l.subpixels;
                for (acc, g) in grads.iter_mut().zip(l.grads.as_ref().unwrap()) {
                    for (a, &v) in acc.weight.data_mut().iter_mut().zip(g.weight.data()) {
                        *a += (v as f64 * w) as f32;
                    }
                    for (a, &v) in acc.bias.data_mut().iter_mut().zip(g.bias.data()) {
                        *a += (v as f64 * w) as f32;
                    }
                }
            }
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at step {step} (epoch {epoch}, lr {lr:e})"
                )));
            }
            for (spec, g) in model.arch().convs().iter().zip(&grads) {
                if !g.weight.is_finite() || !g.bias.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite gradient for {} at step {step} (loss {loss:.4})",
                        spec.name
                    )));
                }
            }
            let norm = clip_global_norm(&mut grads, config.clip);
            opt.update(&mut model, &grads, lr);
            step += 1;
            if config.log_every > 0 && step.is_multiple_of(config.log_every) {
                writeln!(
                    log,
                    "step {step} loss {loss:.4} bpsp grad_norm {norm:.4} lr {lr:e}"
                )?;
            }
        }
        writeln!(
            log,
            "epoch {} bpsp {:.4} lr {lr:e} steps {step}",
            epoch + 1,
            epoch_bits / epoch_n as f64
        )?;
        if let Some(path) = &config.checkpoint {
            let last = epoch + 1 == config.epochs;
            if last || (config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0) {
                WeightStore::from_model(&model).save(path)?;
            }
        }
    }
    Ok(model)
}
