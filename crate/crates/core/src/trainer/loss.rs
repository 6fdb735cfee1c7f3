use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::Tape;
use crate::mixture::{channel_log_prob, valid_range, MixtureParams, TruncRange};
use crate::network::{level_forward, Conv, Eval, Graph, Model, ParamPlane, Real, STEPS, STEP_POSITIONS};
use crate::pyramid::{build_pyramid, AveragePlane, Image};

const LN2: f64 = std::f64::consts::LN_2;

/// Truncation ranges of a block position given the true block pixels.
pub fn block_ranges(avg: &AveragePlane, hi: &Image, row: usize, col: usize, step: usize) -> [TruncRange; 3] {
    let geom = avg.geometry(row, col);
    let pos = STEP_POSITIONS[step];
    let p = geom.count();
    std::array::from_fn(|ch| {
        let decoded: Vec<u8> = geom
            .before(pos)
            .map(|q| {
                let (r, c) = geom.pixel(q);
                hi.get(r, c, ch)
            })
            .collect();
        valid_range(avg.get(row, col, ch), p, &decoded).expect("true pixels satisfy the block sum")
    })
}

/// Bits needed for the pixels coded by `step` under `plane`, teacher forced
/// on the true image `hi`. With `grad`, `∂bits/∂params` is added to the
/// pixel-major buffer.
pub fn step_nll(
    plane: &ParamPlane,
    avg: &AveragePlane,
    hi: &Image,
    step: usize,
    constraints: bool,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let pos = STEP_POSITIONS[step];
    let mut nats = 0.0;
    for row in 0..avg.height() {
        for col in 0..avg.width() {
            let geom = avg.geometry(row, col);
            if !geom.is_coded(pos) {
                continue;
            }
            let (r, c) = geom.pixel(pos);
            let target = hi.pixel(r, c);
            let ranges = if constraints {
                block_ranges(avg, hi, row, col, step)
            } else {
                [TruncRange::FULL; 3]
            };
            let raw = plane.raw(row, col);
            let params = MixtureParams::new(raw);
            let n = raw.len();
            let mut g = grad
                .as_deref_mut()
                .map(|g| &mut g[(row * avg.width() + col) * n..][..n]);
            for ch in 0..3 {
                nats -= channel_log_prob(
                    &params,
                    ch,
                    target[ch],
                    &target[..ch],
                    ranges[ch],
                    g.as_deref_mut().map(|g| (g, -1.0 / LN2)),
                );
            }
        }
    }
    nats / LN2
}

/// Loss of one image and, optionally, its parameter gradient.
#[derive(Clone, Debug)]
pub struct TileLoss<T> {
    /// Total code length of all coded subpixels, in bits.
    pub bits: f64,
    /// `3·W·H` of the image.
    pub subpixels: usize,
    pub grads: Option<Vec<Conv<T>>>,
}

impl<T> TileLoss<T> {
    pub fn bpsp(&self) -> f64 {
        self.bits / self.subpixels as f64
    }
}

/// Joint NLL of all levels of `image`. Gradients are of the total bits.
pub fn tile_loss<T: Real>(
    model: &Model<T>,
    image: &Image,
    constraints: bool,
    want_grad: bool,
) -> TileLoss<T> {
    let levels = model.config().levels;
    let pyr = build_pyramid(image, levels);
    let subpixels = 3 * image.width() * image.height();
    if !want_grad {
        let mut g = Eval::new(model);
        let mut bits = 0.0;
        let mut cross = None;
        for l in (0..levels).rev() {
            let (heads, up) = level_forward(&mut g, l, &pyr.averages[l], &pyr.levels[l], cross.as_ref());
            for (t, head) in heads.iter().enumerate() {
                let plane = ParamPlane::from_step(head, &pyr.averages[l]);
                bits += step_nll(&plane, &pyr.averages[l], &pyr.levels[l], t, constraints, None);
            }
            cross = up;
        }
        return TileLoss {
            bits,
            subpixels,
            grads: None,
        };
    }
    let mut tape = Tape::new(model);
    let mut bits = 0.0;
    let mut seeds = Vec::with_capacity(levels * STEPS);
    let mut cross = None;
    for l in (0..levels).rev() {
        let (avg, hi) = (&pyr.averages[l], &pyr.levels[l]);
        let (heads, up) = level_forward(&mut tape, l, avg, hi, cross.as_ref());
        for (t, head) in heads.into_iter().enumerate() {
            let plane = ParamPlane::from_step(tape.value(&head), avg);
            let mut g = vec![0.0; plane.width() * plane.height() * model.config().head_channels()];
            bits += step_nll(&plane, avg, hi, t, constraints, Some(&mut g));
            seeds.push((head, plane.to_tensor(&g)));
        }
        cross = up;
    }
    TileLoss {
        bits,
        subpixels,
        grads: Some(tape.backward(&seeds)),
    }
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub checked: usize,
    /// Parameters whose loss is not smooth within the step (an activation
    /// kink or the scale floor); excluded from `max_rel_err`.
    pub nonsmooth: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Checks up to `max_params` parameters (all when `None`), chosen by
/// `seed`, against central differences with step `h` on the bits of
/// `image`. The relative error of a pair is `|a − n| / max(|a|, |n|, floor)`.
pub fn grad_check(
    model: &Model<f64>,
    image: &Image,
    constraints: bool,
    h: f64,
    floor: f64,
    max_params: Option<usize>,
    seed: u64,
) -> GradCheck {
    let analytic = tile_loss(model, image, constraints, true).grads.unwrap();
    let mut slots = Vec::new();
    for (ci, c) in analytic.iter().enumerate() {
        for i in 0..c.weight.len() {
            slots.push((ci, false, i));
        }
        for i in 0..c.bias.len() {
            slots.push((ci, true, i));
        }
    }
    if let Some(n) = max_params.filter(|&n| n < slots.len()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> = sample(&mut rng, slots.len(), n).into_vec();
        picked.sort_unstable();
        slots = picked.into_iter().map(|i| slots[i]).collect();
    }
    let mut probe = model.clone();
    let mut eval = |ci: usize, bias: bool, i: usize, delta: f64| {
        let conv = &mut probe.convs_mut()[ci];
        let t = if bias { &mut conv.bias } else { &mut conv.weight };
        let orig = t.data()[i];
        t.data_mut()[i] = orig + delta;
        let bits = tile_loss(&probe, image, constraints, false).bits;
        let conv = &mut probe.convs_mut()[ci];
        let t = if bias { &mut conv.bias } else { &mut conv.weight };
        t.data_mut()[i] = orig;
        bits
    };
    let mut out = GradCheck {
        checked: 0,
        nonsmooth: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for (ci, bias, i) in slots {
        let a = if bias {
            analytic[ci].bias.data()[i]
        } else {
            analytic[ci].weight.data()[i]
        };
        let n = (eval(ci, bias, i, h) - eval(ci, bias, i, -h)) / (2.0 * h);
        out.checked += 1;
        // half the step must reproduce the difference on a smooth loss
        let n2 = (eval(ci, bias, i, h / 2.0) - eval(ci, bias, i, -h / 2.0)) / h;
        let scale = a.abs().max(n.abs()).max(floor);
        if (n - n2).abs() > 1e-5 * scale {
            out.nonsmooth += 1;
            continue;
        }
        let err = (a - n).abs() / scale;
        if err > out.max_rel_err {
            out.max_rel_err = err;
            let name = &model.arch().conv(ci).name;
            out.worst = format!(
                "{name}.{}[{i}]: analytic {a:e}, numeric {n:e}",
                if bias { "b" } else { "w" }
            );
        }
    }
    out
}
