use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Eval, Graph};
use super::tensor::{Real, Tensor};
use crate::mixture::{to_domain, MixtureParams, DEFAULT_MIXTURES, PARAMS_PER_MIXTURE};
use crate::pyramid::{AveragePlane, BlockPos, Image, MAX_LEVELS};
use crate::{Error, Result};

/// Dilations of the 3×3 convolutions in every mixture head.
pub const HEAD_DILATIONS: [usize; 3] = [1, 2, 4];
/// Steps per level, each predicting one block position.
pub const STEPS: usize = 3;
/// Log-scale of the initial mixture components, about 13 pixel values.
const INIT_LOG_SCALE: f64 = -std::f64::consts::LN_10;
/// Block position predicted by each step.
pub const STEP_POSITIONS: [BlockPos; STEPS] = [BlockPos::TopLeft, BlockPos::TopRight, BlockPos::BottomLeft];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub levels: usize,
    pub hidden: usize,
    pub res_blocks: usize,
    pub mixtures: usize,
    /// Steps 2 and 3 see the pixels decoded by earlier steps of the block.
    /// Without it every step sees the low-resolution image only.
    pub factorized: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 3,
            hidden: 64,
            res_blocks: 3,
            mixtures: DEFAULT_MIXTURES,
            factorized: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_LEVELS).contains(&self.levels) {
            return Err(Error::Config(format!("levels must be in 1..={MAX_LEVELS}")));
        }
        if self.hidden == 0 || self.mixtures == 0 {
            return Err(Error::Config(
                "hidden width and mixture count must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Input channels of step `step` (0-based).
    pub fn step_channels(&self, step: usize) -> usize {
        if self.factorized {
            3 * (step + 1)
        } else {
            3
        }
    }

    pub fn head_channels(&self) -> usize {
        PARAMS_PER_MIXTURE * self.mixtures
    }
}

pub type ConvId = usize;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kernel, self.kernel]
    }
}

#[derive(Clone, Debug)]
pub struct StepLayout {
    pub input: ConvId,
    pub res: Vec<(ConvId, ConvId)>,
    pub head: Vec<ConvId>,
    pub out: ConvId,
}

#[derive(Clone, Debug)]
pub struct LevelLayout {
    pub steps: Vec<StepLayout>,
    /// Upsampling conv feeding the next finer level; absent at level 0.
    pub up: Option<ConvId>,
}

/// Every convolution of a model, in a fixed order, with its role.
#[derive(Clone, Debug)]
pub struct Architecture {
    config: ModelConfig,
    convs: Vec<ConvSpec>,
    levels: Vec<LevelLayout>,
}

impl Architecture {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let hd = config.hidden;
        let mut convs = Vec::new();
        let mut add = |name: String, c_in, c_out, kernel, dilation| {
            convs.push(ConvSpec {
                name,
                c_in,
                c_out,
                kernel,
                dilation,
            });
            convs.len() - 1
        };
        let mut levels = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            let mut steps = Vec::with_capacity(STEPS);
            for t in 0..STEPS {
                let p = format!("l{l}.s{}", t + 1);
                let input = add(format!("{p}.in"), config.step_channels(t), hd, 1, 1);
                let res = (0..config.res_blocks)
                    .map(|i| {
                        (
                            add(format!("{p}.res{i}.a"), hd, hd, 3, 1),
                            add(format!("{p}.res{i}.b"), hd, hd, 3, 1),
                        )
                    })
                    .collect();
                let head = HEAD_DILATIONS
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| add(format!("{p}.head{i}"), hd, hd, 3, d))
                    .collect();
                let out = add(format!("{p}.out"), hd, config.head_channels(), 1, 1);
                steps.push(StepLayout {
                    input,
                    res,
                    head,
                    out,
                });
            }
            let up = (l > 0).then(|| add(format!("l{l}.up"), hd, 4 * hd, 3, 1));
            levels.push(LevelLayout { steps, up });
        }
        Ok(Architecture {
            config,
            convs,
            levels,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn convs(&self) -> &[ConvSpec] {
        &self.convs
    }

    pub fn conv(&self, id: ConvId) -> &ConvSpec {
        &self.convs[id]
    }

    pub fn level(&self, l: usize) -> &LevelLayout {
        &self.levels[l]
    }
}

/// Weight and bias of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Conv<T> {
    pub fn zeros(spec: &ConvSpec) -> Self {
        Conv {
            weight: Tensor::zeros(&spec.weight_shape()),
            bias: Tensor::zeros(&[spec.c_out]),
        }
    }
}

/// Parameters of the super-resolution network, one tensor pair per conv.
#[derive(Clone, Debug)]
pub struct Model<T> {
    arch: Arc<Architecture>,
    convs: Vec<Conv<T>>,
}

impl<T: Real> Model<T> {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let arch = Architecture::new(config)?;
        let convs = arch.convs.iter().map(Conv::zeros).collect();
        Ok(Model {
            arch: Arc::new(arch),
            convs,
        })
    }

    /// Fan-in scaled uniform weights. Output biases start the mixture as a
    /// fan of components around the block average.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.mixtures;
        for (spec, conv) in model.arch.convs.iter().zip(model.convs.iter_mut()) {
            let fan_in = (spec.c_in * spec.kernel * spec.kernel) as f64;
            let mut bound = 1.0 / fan_in.sqrt();
            let is_out = spec.name.ends_with(".out");
            if is_out || spec.name.ends_with(".b") {
                bound *= 0.1;
            }
            for v in conv.weight.data_mut() {
                *v = T::of(rng.gen_range(-bound..bound));
            }
            if is_out {
                let b = conv.bias.data_mut();
                for i in 0..k {
                    let mu = 0.1 * (-1.0 + (2 * i + 1) as f64 / k as f64);
                    for ch in 0..3 {
                        b[(3 + ch) * k + i] = T::of(mu);
                        b[(6 + ch) * k + i] = T::of(INIT_LOG_SCALE);
                    }
                }
            }
        }
        Ok(model)
    }

    /// Builds a model around existing parameters; shapes must match.
    pub fn from_parts(config: ModelConfig, convs: Vec<Conv<T>>) -> Result<Self> {
        let arch = Architecture::new(config)?;
        if convs.len() != arch.convs.len() {
            return Err(Error::Format(format!(
                "expected {} convolutions, got {}",
                arch.convs.len(),
                convs.len()
            )));
        }
        for (spec, c) in arch.convs.iter().zip(&convs) {
            if c.weight.shape() != spec.weight_shape() || c.bias.shape() != [spec.c_out] {
                return Err(Error::Format(format!("tensor shape mismatch for {}", spec.name)));
            }
        }
        Ok(Model {
            arch: Arc::new(arch),
            convs,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn conv(&self, id: ConvId) -> &Conv<T> {
        &self.convs[id]
    }

    pub fn convs(&self) -> &[Conv<T>] {
        &self.convs
    }

    pub fn convs_mut(&mut self) -> &mut [Conv<T>] {
        &mut self.convs
    }

    pub fn parameter_count(&self) -> usize {
        self.convs.iter().map(|c| c.weight.len() + c.bias.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            convs: self
                .convs
                .iter()
                .map(|c| Conv {
                    weight: c.weight.cast(),
                    bias: c.bias.cast(),
                })
                .collect(),
        }
    }
}

/// Network input of one step: the low-resolution image, then (factorized
/// models only) the block pixels of the positions coded by earlier steps.
/// Values are mapped to `[-1, 1]`; positions outside the image read 0.
pub fn step_input<T: Real>(avg: &AveragePlane, hi: &Image, step: usize, factorized: bool) -> Tensor<T> {
    let (w, h) = (avg.width(), avg.height());
    let groups = if factorized { step + 1 } else { 1 };
    let mut out = Tensor::zeros(&[3 * groups, h, w]);
    let data = out.data_mut();
    let plane = w * h;
    for row in 0..h {
        for col in 0..w {
            let geom = avg.geometry(row, col);
            let i = row * w + col;
            for ch in 0..3 {
                let y = avg.get(row, col, ch) as f64 / 4.0;
                data[ch * plane + i] = T::of(y / 127.5 - 1.0);
            }
            for (g, &pos) in STEP_POSITIONS[..groups - 1].iter().enumerate() {
                if !geom.is_present(pos) {
                    continue;
                }
                let (r, c) = geom.pixel(pos);
                for ch in 0..3 {
                    let v = hi.get(r, c, ch) as f64;
                    data[(3 * (g + 1) + ch) * plane + i] = T::of(v / 127.5 - 1.0);
                }
            }
        }
    }
    out
}

/// One step of one level: input conv, feature merge, residual blocks and
/// the mixture head. Returns the head output and the step feature.
pub fn forward_step<T: Real, G: Graph<T>>(
    g: &mut G,
    level: usize,
    step: usize,
    input: &G::Var,
    feat_prev: Option<&G::Var>,
    feat_cross: Option<&G::Var>,
) -> (G::Var, G::Var) {
    let layout = g.model().arch().level(level).steps[step].clone();
    let mut h = g.conv(input, layout.input);
    if let Some(f) = feat_prev {
        h = g.add(&h, f);
    }
    if step == 0 {
        if let Some(c) = feat_cross {
            h = g.add(&h, c);
        }
    }
    for &(a, b) in &layout.res {
        let t = g.conv(&h, a);
        let t = g.leaky(&t);
        let t = g.conv(&t, b);
        h = g.add(&h, &t);
    }
    let mut z = h.clone();
    for &c in &layout.head {
        z = g.conv(&z, c);
        z = g.leaky(&z);
    }
    let out = g.conv(&z, layout.out);
    (out, h)
}

/// Lifts the last step feature of `level` to the grid of the next finer
/// level, `h × w`.
pub fn upsample<T: Real, G: Graph<T>>(g: &mut G, level: usize, feat: &G::Var, h: usize, w: usize) -> G::Var {
    let up = g
        .model()
        .arch()
        .level(level)
        .up
        .expect("level 0 has no upsampling conv");
    let t = g.conv(feat, up);
    let t = g.shuffle(&t);
    g.crop(&t, h, w)
}

/// All three steps of a level with teacher forcing on `hi`. Returns the
/// head outputs and, when the level has one, the upsampled feature.
pub fn level_forward<T: Real, G: Graph<T>>(
    g: &mut G,
    level: usize,
    avg: &AveragePlane,
    hi: &Image,
    feat_cross: Option<&G::Var>,
) -> (Vec<G::Var>, Option<G::Var>) {
    let factorized = g.model().config().factorized;
    let mut heads = Vec::with_capacity(STEPS);
    let mut feat: Option<G::Var> = None;
    for t in 0..STEPS {
        let x = g.input(step_input(avg, hi, t, factorized));
        let (head, h) = forward_step(g, level, t, &x, feat.as_ref(), feat_cross);
        heads.push(head);
        feat = Some(h);
    }
    let up = g.model().arch().level(level).up.map(|_| {
        upsample(
            g,
            level,
            feat.as_ref().unwrap(),
            avg.parent_height(),
            avg.parent_width(),
        )
    });
    (heads, up)
}

/// Mixture parameters of every block of a level, pixel-major in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamPlane {
    width: usize,
    height: usize,
    per_pixel: usize,
    data: Vec<f64>,
}

impl ParamPlane {
    pub fn from_head<T: Real>(head: &Tensor<T>) -> Self {
        let (c, h, w) = head.chw();
        let src = head.data();
        let mut data = vec![0.0; c * h * w];
        for ci in 0..c {
            for i in 0..h * w {
                data[i * c + ci] = src[ci * h * w + i].as_f64();
            }
        }
        ParamPlane {
            width: w,
            height: h,
            per_pixel: c,
            data,
        }
    }

    /// Mixture parameters of a step: the head output with the block
    /// average added to every component mean, so the network predicts
    /// offsets from the average.
    pub fn from_step<T: Real>(head: &Tensor<T>, avg: &AveragePlane) -> Self {
        let mut plane = Self::from_head(head);
        let k = plane.per_pixel / PARAMS_PER_MIXTURE;
        for row in 0..plane.height {
            for col in 0..plane.width {
                let raw = plane.raw_mut(row, col);
                for ch in 0..3 {
                    let y = to_domain(avg.get(row, col, ch) as f64 / 4.0);
                    for m in &mut raw[(3 + ch) * k..(4 + ch) * k] {
                        *m += y;
                    }
                }
            }
        }
        plane
    }

    /// Every pixel gets the same parameter vector.
    pub fn constant(width: usize, height: usize, raw: &[f64]) -> Self {
        ParamPlane {
            width,
            height,
            per_pixel: raw.len(),
            data: raw
                .iter()
                .copied()
                .cycle()
                .take(raw.len() * width * height)
                .collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn raw(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.width + col) * self.per_pixel;
        &self.data[o..o + self.per_pixel]
    }

    pub fn raw_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let o = (row * self.width + col) * self.per_pixel;
        &mut self.data[o..o + self.per_pixel]
    }

    pub fn params(&self, row: usize, col: usize) -> MixtureParams<'_> {
        MixtureParams::new(self.raw(row, col))
    }

    /// Channel-major tensor of a pixel-major buffer shaped like this plane,
    /// e.g. per-pixel gradients.
    pub fn to_tensor<T: Real>(&self, pixel_major: &[f64]) -> Tensor<T> {
        let (c, hw) = (self.per_pixel, self.width * self.height);
        assert_eq!(pixel_major.len(), c * hw);
        let mut out = Tensor::zeros(&[c, self.height, self.width]);
        let dst = out.data_mut();
        for i in 0..hw {
            for ci in 0..c {
                dst[ci * hw + i] = T::of(pixel_major[i * c + ci]);
            }
        }
        out
    }
}

/// Step-by-step evaluation of one level, as the decoder needs it: each step
/// runs after the pixels of the previous step are known.
pub struct LevelPass<'m, T: Real> {
    model: &'m Model<T>,
    level: usize,
    step: usize,
    feat: Option<Tensor<T>>,
    cross: Option<Tensor<T>>,
}

impl<'m, T: Real> LevelPass<'m, T> {
    pub fn new(model: &'m Model<T>, level: usize, cross: Option<Tensor<T>>) -> Self {
        assert!(level < model.config().levels);
        LevelPass {
            model,
            level,
            step: 0,
            feat: None,
            cross,
        }
    }

    /// Parameters of the next step given the pixels decoded so far.
    pub fn step(&mut self, avg: &AveragePlane, hi: &Image) -> ParamPlane {
        assert!(self.step < STEPS, "all steps of this level already ran");
        let mut g = Eval::new(self.model);
        let x = g.input(step_input(avg, hi, self.step, self.model.config().factorized));
        let prev = self.feat.take().map(|f| g.input(f));
        let cross = self.cross.clone().map(|c| g.input(c));
        let (head, feat) = forward_step(&mut g, self.level, self.step, &x, prev.as_ref(), cross.as_ref());
        self.step += 1;
        self.feat = Some((*feat).clone());
        ParamPlane::from_step(&head, avg)
    }

    /// Cross-level feature for the next finer level, of size `h × w`.
    pub fn finish(self, h: usize, w: usize) -> Option<Tensor<T>> {
        assert_eq!(self.step, STEPS, "level finished before all steps ran");
        self.model.arch().level(self.level).up?;
        let mut g = Eval::new(self.model);
        let f = g.input(self.feat.expect("steps ran"));
        Some((*upsample(&mut g, self.level, &f, h, w)).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::build_pyramid;

    fn small() -> ModelConfig {
        ModelConfig {
            levels: 3,
            hidden: 8,
            res_blocks: 1,
            mixtures: 2,
            factorized: true,
        }
    }

    fn noise_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(w, h, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn architecture_shapes() {
        let arch = Architecture::new(ModelConfig::default()).unwrap();
        let l0 = arch.level(0);
        assert!(l0.up.is_none());
        let s = &l0.steps;
        assert_eq!(arch.conv(s[0].input).c_in, 3);
        assert_eq!(arch.conv(s[1].input).c_in, 6);
        assert_eq!(arch.conv(s[2].input).c_in, 9);
        assert_eq!(arch.conv(s[0].out).c_out, 120);
        assert_eq!(s[0].res.len(), 3);
        let up = arch.conv(arch.level(1).up.unwrap());
        assert_eq!((up.c_in, up.c_out), (64, 256));
        let dil: Vec<_> = s[0].head.iter().map(|&c| arch.conv(c).dilation).collect();
        assert_eq!(dil, vec![1, 2, 4]);
    }

    #[test]
    fn zero_model_centres_on_the_average() {
        let model = Model::<f32>::zeros(small()).unwrap();
        let k = small().mixtures;
        let img = noise_image(8, 8, 1);
        let pyr = build_pyramid(&img, 3);
        let mut pass = LevelPass::new(&model, 0, None);
        let plane = pass.step(&pyr.averages[0], &pyr.levels[0]);
        assert_eq!((plane.width(), plane.height()), (4, 4));
        let raw = plane.raw(2, 3);
        for (j, chunk) in raw.chunks(k).enumerate() {
            let want = match j {
                3..=5 => to_domain(pyr.averages[0].get(2, 3, j - 3) as f64 / 4.0),
                _ => 0.0,
            };
            assert!(chunk.iter().all(|&v| v == want), "{j}");
        }
    }

    #[test]
    fn residual_block_with_zero_weights_is_identity() {
        let mut model = Model::<f64>::init(small(), 3).unwrap();
        let layout = model.arch().level(2).steps[0].clone();
        let (a, b) = layout.res[0];
        model.convs_mut()[a] = Conv::zeros(model.arch().conv(a));
        model.convs_mut()[b] = Conv::zeros(model.arch().conv(b));
        let mut g = Eval::new(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = g.input(Tensor::from_vec(
            &[3, 3, 3],
            (0..27).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ));
        let (_, feat) = forward_step(&mut g, 2, 0, &x, None, None);
        let direct = g.conv(&x, layout.input);
        assert_eq!(*feat, *direct);
    }

    #[test]
    fn deterministic_forward() {
        let model = Model::<f32>::init(small(), 7).unwrap();
        let img = noise_image(13, 9, 2);
        let pyr = build_pyramid(&img, 3);
        let run = || {
            let mut pass = LevelPass::new(&model, 1, None);
            (0..3)
                .map(|_| pass.step(&pyr.averages[1], &pyr.levels[1]))
                .collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            let bx: Vec<u64> = x.data.iter().map(|v| v.to_bits()).collect();
            let by: Vec<u64> = y.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bx, by);
        }
    }

    #[test]
    fn stepwise_equals_single_graph() {
        let model = Model::<f32>::init(small(), 11).unwrap();
        let img = noise_image(16, 16, 3);
        let pyr = build_pyramid(&img, 3);
        let mut cross_a = None;
        let mut cross_b: Option<Tensor<f32>> = None;
        for l in (0..3).rev() {
            let avg = &pyr.averages[l];
            let hi = &pyr.levels[l];
            let mut g = Eval::new(&model);
            let c = cross_a.clone().map(|t| g.input(t));
            let (heads, up) = level_forward(&mut g, l, avg, hi, c.as_ref());
            let mut pass = LevelPass::new(&model, l, cross_b.take());
            for head in &heads {
                let p = pass.step(avg, hi);
                let q = ParamPlane::from_step(head, avg);
                for (a, b) in p.data.iter().zip(&q.data) {
                    assert!((a - b).abs() < 1e-5);
                }
            }
            cross_b = pass.finish(avg.parent_height(), avg.parent_width());
            cross_a = up.map(|u| (*u).clone());
            assert_eq!(cross_a.is_some(), l > 0);
        }
    }

    #[test]
    fn receptive_field_locality() {
        // one residual block and head dilations 1, 2, 4: radius 2 + 7 = 9
        let model = Model::<f32>::init(small(), 5).unwrap();
        let run = |img: &Image| {
            let pyr = build_pyramid(img, 3);
            let mut pass = LevelPass::new(&model, 2, None);
            pass.step(&pyr.averages[2], &pyr.levels[2])
        };
        // the level 2 grid is 24×24 for a 192×192 input
        let img = noise_image(192, 192, 4);
        let base = run(&img);
        let bump = |col: usize| {
            let mut m = img.clone();
            for r in 0..8 {
                for c in 8 * col..8 * col + 8 {
                    m.set(r, c, 0, 0);
                }
            }
            run(&m)
        };
        assert_eq!(base.raw(0, 0), bump(10).raw(0, 0));
        assert_ne!(base.raw(0, 0), bump(9).raw(0, 0));
    }

    #[test]
    fn non_factorized_ignores_decoded_pixels() {
        let cfg = ModelConfig {
            factorized: false,
            ..small()
        };
        let model = Model::<f32>::init(cfg, 5).unwrap();
        let img = noise_image(8, 8, 6);
        let pyr = build_pyramid(&img, 1);
        let blank = Image::filled(8, 8, [0, 0, 0]);
        let mut a = LevelPass::new(&model, 0, None);
        let mut b = LevelPass::new(&model, 0, None);
        for _ in 0..3 {
            assert_eq!(a.step(&pyr.averages[0], &img), b.step(&pyr.averages[0], &blank));
        }
    }

    #[test]
    fn from_parts_rejects_bad_shapes() {
        let model = Model::<f32>::init(small(), 1).unwrap();
        let mut convs = model.convs().to_vec();
        assert!(Model::from_parts(small(), convs.clone()).is_ok());
        convs[0].bias = Tensor::zeros(&[3]);
        assert!(Model::from_parts(small(), convs).is_err());
    }
}
