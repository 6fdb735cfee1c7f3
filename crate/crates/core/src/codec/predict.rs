use std::path::Path;

use rand::Rng;

use super::container::PredictorKind;
use crate::coder::CdfTable;
use crate::mixture::{self, channel_log_prob, coding_table, MixtureParams, TruncRange, PARAMS_PER_MIXTURE};
use crate::network::{LevelPass, Model, ParamPlane, Tensor, WeightStore, STEP_POSITIONS};
use crate::pyramid::{AveragePlane, BlockPos, Image};
use crate::Result;

const LN2: f64 = std::f64::consts::LN_2;

/// Trained weights together with the identifier recorded in containers.
#[derive(Clone, Debug)]
pub struct CnnModel {
    model: Model<f32>,
    id: u64,
}

impl CnnModel {
    pub fn new(model: Model<f32>) -> Self {
        let id = WeightStore::from_model(&model).id();
        CnnModel { model, id }
    }

    pub fn from_store(store: &WeightStore) -> Result<Self> {
        Ok(CnnModel {
            model: store.to_model()?,
            id: store.id(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(&WeightStore::load(path)?)
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }
}

/// The distribution source used for coding.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    Uniform,
    Heuristic,
    Cnn(&'a CnnModel),
}

impl<'a> Predictor<'a> {
    pub fn kind(&self) -> PredictorKind {
        match self {
            Predictor::Uniform => PredictorKind::Uniform,
            Predictor::Heuristic => PredictorKind::Heuristic,
            Predictor::Cnn(_) => PredictorKind::Cnn,
        }
    }

    pub fn model_id(&self) -> u64 {
        match self {
            Predictor::Cnn(m) => m.id(),
            _ => 0,
        }
    }

    /// Whether range truncation is used unless asked otherwise. A
    /// factorized network already sees the block pixels it needs, so
    /// truncation buys it next to nothing.
    pub fn default_constraints(&self) -> bool {
        match self {
            Predictor::Uniform => false,
            Predictor::Heuristic => true,
            Predictor::Cnn(m) => !m.model().config().factorized,
        }
    }

    pub(crate) fn level(&self, level: usize, cross: Option<Tensor<f32>>) -> LevelState<'a> {
        match self {
            Predictor::Uniform => LevelState::Uniform,
            Predictor::Heuristic => LevelState::Heuristic,
            Predictor::Cnn(m) => LevelState::Cnn(LevelPass::new(m.model(), level, cross)),
        }
    }
}

pub(crate) enum LevelState<'a> {
    Uniform,
    Heuristic,
    Cnn(LevelPass<'a, f32>),
}

impl LevelState<'_> {
    /// Distributions of the next step, given the pixels known so far.
    pub(crate) fn step(&mut self, avg: &AveragePlane, hi: &Image) -> StepModel {
        match self {
            LevelState::Uniform => StepModel::Uniform,
            LevelState::Heuristic => StepModel::Heuristic,
            LevelState::Cnn(pass) => StepModel::Cnn(pass.step(avg, hi)),
        }
    }

    /// Cross-level feature for the next finer level.
    pub(crate) fn finish(self, h: usize, w: usize) -> Option<Tensor<f32>> {
        match self {
            LevelState::Cnn(pass) => pass.finish(h, w),
            _ => None,
        }
    }
}

pub(crate) enum StepModel {
    Uniform,
    Heuristic,
    Cnn(ParamPlane),
}

/// Distribution of one subpixel.
pub(crate) enum Dist<'p> {
    Uniform,
    Mixture(std::borrow::Cow<'p, [f64]>),
}

impl StepModel {
    pub(crate) fn dist(
        &self,
        avg: &AveragePlane,
        hi: &Image,
        row: usize,
        col: usize,
        step: usize,
        ch: usize,
    ) -> Dist<'_> {
        match self {
            StepModel::Uniform => Dist::Uniform,
            StepModel::Heuristic => Dist::Mixture(
                heuristic_params(avg, hi, row, col, STEP_POSITIONS[step], ch)
                    .to_vec()
                    .into(),
            ),
            StepModel::Cnn(plane) => Dist::Mixture(plane.raw(row, col).into()),
        }
    }
}

impl Dist<'_> {
    pub(crate) fn table(&self, ch: usize, prev: &[u8], range: TruncRange) -> CdfTable {
        match self {
            Dist::Uniform => CdfTable::uniform(range.len()),
            Dist::Mixture(raw) => coding_table(&MixtureParams::new(raw), ch, prev, range),
        }
    }

    /// Ideal code length of `x`, in bits.
    pub(crate) fn bits(&self, ch: usize, x: u8, prev: &[u8], range: TruncRange) -> f64 {
        match self {
            Dist::Uniform => (range.len() as f64).log2(),
            Dist::Mixture(raw) => -channel_log_prob(&MixtureParams::new(raw), ch, x, prev, range, None) / LN2,
        }
    }

    pub(crate) fn sample<R: Rng + ?Sized>(
        &self,
        ch: usize,
        prev: &[u8],
        range: TruncRange,
        rng: &mut R,
    ) -> u8 {
        match self {
            Dist::Uniform => range.lo + rng.gen_range(0..range.len()) as u8,
            Dist::Mixture(raw) => mixture::sample(&MixtureParams::new(raw), ch, prev, range, rng),
        }
    }
}

fn average(avg: &AveragePlane, row: isize, col: isize, ch: usize) -> f64 {
    let r = row.clamp(0, avg.height() as isize - 1) as usize;
    let c = col.clamp(0, avg.width() as isize - 1) as usize;
    avg.get(r, c, ch) as f64 / 4.0
}

/// Bilinear interpolation of the block averages at a high-resolution pixel
/// centre.
fn bilinear(avg: &AveragePlane, r: usize, c: usize, ch: usize) -> f64 {
    let v = (r as f64 - 0.5) / 2.0;
    let u = (c as f64 - 0.5) / 2.0;
    let (r0, c0) = (v.floor(), u.floor());
    let (fv, fu) = (v - r0, u - c0);
    let (r0, c0) = (r0 as isize, c0 as isize);
    let top = average(avg, r0, c0, ch) * (1.0 - fu) + average(avg, r0, c0 + 1, ch) * fu;
    let bottom = average(avg, r0 + 1, c0, ch) * (1.0 - fu) + average(avg, r0 + 1, c0 + 1, ch) * fu;
    top * (1.0 - fv) + bottom * fv
}

/// Single logistic: the bilinear guess shifted so the undecoded pixels of
/// the block add up to the remaining sum, with a spread that follows the
/// local contrast of the averages.
fn heuristic_params(
    avg: &AveragePlane,
    hi: &Image,
    row: usize,
    col: usize,
    pos: BlockPos,
    ch: usize,
) -> [f64; PARAMS_PER_MIXTURE] {
    let geom = avg.geometry(row, col);
    let p = geom.count() as f64;
    let mut rest = p * avg.get(row, col, ch) as f64 / 4.0;
    for q in geom.before(pos) {
        let (r, c) = geom.pixel(q);
        rest -= hi.get(r, c, ch) as f64;
    }
    let guesses: Vec<f64> = geom
        .positions()
        .filter(|&q| q >= pos)
        .map(|q| {
            let (r, c) = geom.pixel(q);
            bilinear(avg, r, c, ch)
        })
        .collect();
    let shift = (rest - guesses.iter().sum::<f64>()) / guesses.len() as f64;
    let mean = (guesses[0] + shift).clamp(0.0, 255.0);
    let (ri, ci) = (row as isize, col as isize);
    let centre = avg.get(row, col, ch) as f64 / 4.0;
    let contrast = [(-1, 0), (1, 0), (0, -1), (0, 1)]
        .iter()
        .map(|&(dr, dc)| (average(avg, ri + dr, ci + dc, ch) - centre).abs())
        .sum::<f64>()
        / 4.0;
    let scale = 0.3 + 0.3 * contrast;
    let mut raw = [0.0; PARAMS_PER_MIXTURE];
    for c in 0..3 {
        raw[3 + c] = mixture::to_domain(mean);
        raw[6 + c] = (scale / 127.5).ln();
    }
    raw
}
