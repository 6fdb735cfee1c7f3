//! Reverse-mode gradients, the joint multi-level loss and the training loop.
//!
//! The loss of an image is the total code length, in bits, of every coded
//! subpixel of every level under teacher forcing, divided by `3·W·H`.

mod config;
mod loss;
mod optim;
mod tape;
mod train;

pub use config::TrainConfig;
pub use loss::{block_ranges, grad_check, step_nll, tile_loss, GradCheck, TileLoss};
pub use optim::{clip_global_norm, global_norm, learning_rate, Adam, AdamConfig};
pub use tape::{NodeId, Tape};
pub use train::{evaluate, train};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{nll, TruncRange};
    use crate::network::{Eval, Graph, Model, ModelConfig, ParamPlane, WeightStore};
    use crate::pyramid::{build_pyramid, Image};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(levels: usize) -> ModelConfig {
        ModelConfig {
            levels,
            hidden: 4,
            res_blocks: 1,
            mixtures: 2,
            factorized: true,
        }
    }

    fn noise(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(w, h, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap()
    }

    /// Smooth-ish content so the loss is not dominated by the tails.
    fn gradient_tile(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(w * h * 3);
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    let v = 40.0 + 10.0 * (r + c) as f64 + 30.0 * ch as f64 + rng.gen_range(-6.0..6.0);
                    data.push(v.clamp(0.0, 255.0) as u8);
                }
            }
        }
        Image::new(w, h, data).unwrap()
    }

    /// Random pixels whose 2×2 blocks all sum to 510, so every average of
    /// every level sits at mid-range.
    fn mid_sum_noise(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::filled(w, h, [0; 3]);
        for r in (0..h).step_by(2) {
            for c in (0..w).step_by(2) {
                for ch in 0..3 {
                    let a = rng.gen_range(0..=255u16);
                    let b = rng.gen_range(0..=255u16);
                    let d = rng.gen_range((510 - a - b).saturating_sub(255)..=(510 - a - b).min(255));
                    img.set(r, c, ch, a as u8);
                    img.set(r, c + 1, ch, b as u8);
                    img.set(r + 1, c, ch, d as u8);
                    img.set(r + 1, c + 1, ch, (510 - a - b - d) as u8);
                }
            }
        }
        img
    }

    #[test]
    fn uniform_limit_is_eight_bits() {
        // zero weights; head biases spread ten components evenly around the
        // mid-range averages with a scale of 9 pixels, flat to within a few
        // hundredths of a bit
        let cfg = ModelConfig {
            mixtures: 10,
            ..tiny(3)
        };
        let mut model = Model::<f64>::zeros(cfg).unwrap();
        for l in 0..3 {
            for t in 0..3 {
                let out = model.arch().level(l).steps[t].out;
                let b = model.convs_mut()[out].bias.data_mut();
                for k in 0..10 {
                    for ch in 0..3 {
                        b[(3 + ch) * 10 + k] = (12.75 + 25.5 * k as f64) / 127.5 - 1.0;
                        b[(6 + ch) * 10 + k] = (9.0f64 / 127.5).ln();
                    }
                }
            }
        }
        let img = mid_sum_noise(32, 32, 1);
        let loss = tile_loss(&model, &img, false, false);
        let coded = 3 * 3 * (16 * 16 + 8 * 8 + 4 * 4);
        let per = loss.bits / coded as f64;
        assert!((per - 8.0).abs() < 0.05, "{per}");
    }

    #[test]
    fn loss_is_sum_of_mixture_nll() {
        let model = Model::<f64>::init(tiny(2), 4).unwrap();
        let img = noise(6, 5, 2);
        let loss = tile_loss(&model, &img, false, false);
        let pyr = build_pyramid(&img, 2);
        let mut g = Eval::new(&model);
        let mut cross = None;
        let mut total = 0.0;
        for l in (0..2).rev() {
            let (avg, hi) = (&pyr.averages[l], &pyr.levels[l]);
            let (heads, up) = crate::network::level_forward(&mut g, l, avg, hi, cross.as_ref());
            for (t, head) in heads.iter().enumerate() {
                let plane = ParamPlane::from_step(g.value(head), avg);
                let pos = crate::network::STEP_POSITIONS[t];
                for row in 0..avg.height() {
                    for col in 0..avg.width() {
                        let geom = avg.geometry(row, col);
                        if geom.is_coded(pos) {
                            let (r, c) = geom.pixel(pos);
                            total += nll(
                                &plane.params(row, col),
                                hi.pixel(r, c),
                                Some([TruncRange::FULL; 3]),
                            );
                        }
                    }
                }
            }
            cross = up;
        }
        assert!((loss.bits - total).abs() < 1e-6 * total.max(1.0));
    }

    #[test]
    fn backward_matches_eval_values() {
        // the tape and the inference backend must agree on the forward pass
        let model = Model::<f64>::init(tiny(3), 5).unwrap();
        let img = gradient_tile(9, 7, 3);
        let a = tile_loss(&model, &img, false, false).bits;
        let b = tile_loss(&model, &img, false, true).bits;
        assert_eq!(a, b);
    }

    #[test]
    fn single_conv_gradient_on_2x2() {
        // one level, no residual blocks: the loss still runs through the
        // 1×1 input conv, the head and the NLL
        let cfg = ModelConfig {
            levels: 1,
            hidden: 3,
            res_blocks: 0,
            mixtures: 2,
            factorized: true,
        };
        let model = Model::<f64>::init(cfg, 8).unwrap();
        let img = gradient_tile(2, 2, 4);
        let gc = grad_check(&model, &img, false, 1e-4, 1e-3, None, 0);
        assert!(gc.nonsmooth * 50 <= gc.checked, "{gc:?}");
        assert!(gc.max_rel_err < 1e-6, "{gc:?}");
    }

    #[test]
    fn masked_branch_has_exactly_zero_gradient() {
        // a one pixel wide image has no top-right pixels: the step 2 head
        // never touches the loss
        let model = Model::<f32>::init(tiny(2), 6).unwrap();
        let img = noise(1, 16, 7);
        let grads = tile_loss(&model, &img, false, true).grads.unwrap();
        for l in 0..2 {
            let s2 = &model.arch().level(l).steps[1];
            for &c in s2.head.iter().chain([&s2.out]) {
                assert!(grads[c].weight.data().iter().all(|&v| v == 0.0));
                assert!(grads[c].bias.data().iter().all(|&v| v == 0.0));
            }
        }
        let s1 = &model.arch().level(0).steps[0];
        assert!(grads[s1.out].bias.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn constant_tile_overfits() {
        let cfg = ModelConfig {
            hidden: 16,
            mixtures: 10,
            ..tiny(3)
        };
        let corpus = vec![Image::filled(16, 16, [90, 140, 200])];
        let config = TrainConfig {
            model: cfg,
            crop: 16,
            batch: 1,
            epochs: 500,
            lr: 1e-2,
            decay_every: 25,
            flip: false,
            ..TrainConfig::default()
        };
        let mut log = Vec::new();
        let model = train(&corpus, &config, None, &mut log).unwrap();
        let bpsp = evaluate(&model, &corpus, false);
        assert!(bpsp < 1.0, "{bpsp}");
        assert!(String::from_utf8(log).unwrap().contains("epoch 500 bpsp"));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus: Vec<Image> = (0..16).map(|i| gradient_tile(12, 12, i)).collect();
        let config = TrainConfig {
            model: tiny(2),
            crop: 8,
            batch: 4,
            epochs: 2,
            lr: 1e-3,
            seed: 3,
            ..TrainConfig::default()
        };
        let run = |threads| {
            let cfg = TrainConfig {
                threads,
                ..config.clone()
            };
            WeightStore::from_model(&train(&corpus, &cfg, None, &mut std::io::sink()).unwrap()).to_bytes()
        };
        let a = run(1);
        assert_eq!(a, run(1));
        assert_eq!(a, run(2));
    }

    #[test]
    fn training_errors() {
        let config = TrainConfig {
            model: tiny(1),
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&[], &config, None, &mut std::io::sink()),
            Err(crate::Error::Training(_))
        ));
        let mut model = Model::<f32>::init(tiny(1), 0).unwrap();
        let out = model.arch().level(0).steps[0].out;
        model.convs_mut()[out].bias.data_mut()[0] = f32::NAN;
        let err = train(&[noise(8, 8, 1)], &config, Some(model), &mut std::io::sink()).unwrap_err();
        assert!(matches!(err, crate::Error::Training(_)), "{err}");
    }

    #[test]
    fn checkpoints_are_weight_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.w");
        let config = TrainConfig {
            model: tiny(1),
            crop: 8,
            batch: 2,
            epochs: 2,
            checkpoint: Some(path.clone()),
            ..TrainConfig::default()
        };
        let model = train(
            &[noise(8, 8, 1), noise(8, 8, 2)],
            &config,
            None,
            &mut std::io::sink(),
        )
        .unwrap();
        let back = WeightStore::load(&path).unwrap().to_model().unwrap();
        assert_eq!(back.convs(), model.convs());
    }

    #[test]
    fn three_level_gradient_on_8x8() {
        let model = Model::<f64>::init(tiny(3), 9).unwrap();
        let img = gradient_tile(8, 8, 5);
        for constraints in [false, true] {
            let gc = grad_check(&model, &img, constraints, 1e-4, 1e-3, Some(300), 1);
            assert!(gc.nonsmooth * 50 <= gc.checked, "{gc:?}");
            assert!(gc.max_rel_err < 1e-4, "{gc:?}");
        }
    }
}
