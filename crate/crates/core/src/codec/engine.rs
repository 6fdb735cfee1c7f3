use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::container::{pack_codes, Container, PredictorKind, MAX_PIXELS};
use super::predict::{CnnModel, Predictor};
use crate::coder::{CdfTable, CoderError, Decoder, Encoder};
use crate::error::Position;
use crate::mixture::{valid_range, TruncRange};
use crate::network::{hash64, Tensor, STEPS, STEP_POSITIONS};
use crate::pyramid::{build_pyramid, free_pixel, AveragePlane, Image, MAX_LEVELS};
use crate::{Error, Result};

/// Blocks whose tables are prepared together before coding them in order.
const CHUNK: usize = 4096;

/// Range truncation setting; `Auto` picks the predictor's default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Constraints {
    On,
    Off,
    #[default]
    Auto,
}

impl Constraints {
    pub fn resolve(self, predictor: &Predictor) -> bool {
        match self {
            Constraints::On => true,
            Constraints::Off => false,
            Constraints::Auto => predictor.default_constraints(),
        }
    }
}

impl std::str::FromStr for Constraints {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" => Ok(Constraints::On),
            "off" => Ok(Constraints::Off),
            "auto" => Ok(Constraints::Auto),
            _ => Err(Error::Config(format!(
                "constraints must be on, off or auto, not {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Options {
    pub levels: usize,
    pub constraints: Constraints,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            levels: crate::pyramid::DEFAULT_LEVELS,
            constraints: Constraints::Auto,
        }
    }
}

/// Model cross-entropy next to the bytes actually produced, per level.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CodingReport {
    pub nll_bits: Vec<f64>,
    pub stream_bytes: Vec<usize>,
}

impl CodingReport {
    pub fn total_nll_bits(&self) -> f64 {
        self.nll_bits.iter().sum()
    }

    pub fn total_stream_bits(&self) -> usize {
        8 * self.stream_bytes.iter().sum::<usize>()
    }
}

/// Digest of an image stored in the container trailer.
pub fn image_digest(image: &Image) -> u64 {
    let mut bytes = Vec::with_capacity(8 + image.data().len());
    bytes.extend_from_slice(&(image.width() as u32).to_le_bytes());
    bytes.extend_from_slice(&(image.height() as u32).to_le_bytes());
    bytes.extend_from_slice(image.data());
    hash64(&bytes)
}

#[allow(clippy::large_enum_variant)]
enum Mode<'s> {
    Encode { enc: Encoder, bits: f64 },
    Decode { dec: Decoder<'s> },
    Sample { rng: ChaCha8Rng },
}

/// Blocks of `avg` whose pixel at `step` is entropy coded, raster order.
fn coded_blocks(avg: &AveragePlane, step: usize) -> Vec<(usize, usize)> {
    let pos = STEP_POSITIONS[step];
    (0..avg.height())
        .flat_map(|r| (0..avg.width()).map(move |c| (r, c)))
        .filter(|&(r, c)| avg.geometry(r, c).is_coded(pos))
        .collect()
}

/// Admissible range of the next value of a block; `Err` means the block is
/// inconsistent with its average.
fn block_range(
    avg: &AveragePlane,
    hi: &Image,
    row: usize,
    col: usize,
    step: usize,
    ch: usize,
) -> Result<TruncRange> {
    let geom = avg.geometry(row, col);
    let decoded: Vec<u8> = geom
        .before(STEP_POSITIONS[step])
        .map(|q| {
            let (r, c) = geom.pixel(q);
            hi.get(r, c, ch)
        })
        .collect();
    valid_range(avg.get(row, col, ch), geom.count(), &decoded)
}

/// Fills the free pixel of every block whose free position has index
/// `index`, once everything before it is known.
fn fill_free(avg: &AveragePlane, hi: &mut Image, index: usize, clamp: bool, level: usize) -> Result<()> {
    for row in 0..avg.height() {
        for col in 0..avg.width() {
            let geom = avg.geometry(row, col);
            let free = geom.free();
            if free.index() != index {
                continue;
            }
            let (fr, fc) = geom.pixel(free);
            for ch in 0..3 {
                let decoded: Vec<u8> = geom
                    .positions()
                    .filter(|&q| q != free)
                    .map(|q| {
                        let (r, c) = geom.pixel(q);
                        hi.get(r, c, ch)
                    })
                    .collect();
                let v = if clamp {
                    let sum = geom.count() as i32 * avg.get(row, col, ch) as i32 / 4;
                    (sum - decoded.iter().map(|&v| v as i32).sum::<i32>()).clamp(0, 255) as u8
                } else {
                    free_pixel(avg.get(row, col, ch), geom.count(), &decoded).map_err(|e| Error::Corrupt {
                        position: Position {
                            level,
                            step: index.clamp(1, STEPS),
                            channel: ch,
                        },
                        detail: format!("block ({row}, {col}): {e}"),
                    })?
                };
                hi.set(fr, fc, ch, v);
            }
        }
    }
    Ok(())
}

/// Runs the three steps of one level. When encoding, `hi` holds the true
/// pixels; otherwise it is filled in.
fn code_level(
    predictor: &Predictor,
    level: usize,
    avg: &AveragePlane,
    hi: &mut Image,
    cross: Option<Tensor<f32>>,
    constraints: bool,
    mode: &mut Mode,
) -> Result<Option<Tensor<f32>>> {
    let encoding = matches!(mode, Mode::Encode { .. });
    let clamp = matches!(mode, Mode::Sample { .. }) && !constraints;
    let mut state = predictor.level(level, cross);
    for t in 0..STEPS {
        if !encoding {
            fill_free(avg, hi, t, clamp, level)?;
        }
        let model = state.step(avg, hi);
        let blocks = coded_blocks(avg, t);
        for ch in 0..3 {
            let position = Position {
                level,
                step: t + 1,
                channel: ch,
            };
            let corrupt = |row: usize, col: usize, detail: String| Error::Corrupt {
                position,
                detail: format!("block ({row}, {col}): {detail}"),
            };
            let range_of = |hi: &Image, row: usize, col: usize| -> Result<TruncRange> {
                if constraints {
                    block_range(avg, hi, row, col, t, ch).map_err(|e| corrupt(row, col, e.to_string()))
                } else {
                    Ok(TruncRange::FULL)
                }
            };
            if let Mode::Sample { rng } = mode {
                for &(row, col) in &blocks {
                    let range = range_of(hi, row, col)?;
                    let (r, c) = avg.geometry(row, col).pixel(STEP_POSITIONS[t]);
                    let prev = hi.pixel(r, c);
                    let v = model
                        .dist(avg, hi, row, col, t, ch)
                        .sample(ch, &prev[..ch], range, rng);
                    hi.set(r, c, ch, v);
                }
                continue;
            }
            for chunk in blocks.chunks(CHUNK) {
                let view: &Image = hi;
                let prepared: Vec<Result<(TruncRange, CdfTable, f64)>> = chunk
                    .par_iter()
                    .map(|&(row, col)| {
                        let range = range_of(view, row, col)?;
                        let (r, c) = avg.geometry(row, col).pixel(STEP_POSITIONS[t]);
                        let px = view.pixel(r, c);
                        let dist = model.dist(avg, view, row, col, t, ch);
                        let table = dist.table(ch, &px[..ch], range);
                        let bits = if encoding {
                            dist.bits(ch, px[ch], &px[..ch], range)
                        } else {
                            0.0
                        };
                        Ok((range, table, bits))
                    })
                    .collect();
                for (&(row, col), prep) in chunk.iter().zip(prepared) {
                    let (range, table, b) = prep?;
                    let (r, c) = avg.geometry(row, col).pixel(STEP_POSITIONS[t]);
                    match mode {
                        Mode::Encode { enc, bits } => {
                            let x = hi.get(r, c, ch);
                            debug_assert!(range.contains(x));
                            enc.encode(&table, (x - range.lo) as usize);
                            *bits += b;
                        }
                        Mode::Decode { dec } => {
                            let s = dec.decode(&table).map_err(|e| corrupt(row, col, e.to_string()))?;
                            hi.set(r, c, ch, range.lo + s as u8);
                        }
                        Mode::Sample { .. } => unreachable!(),
                    }
                }
            }
        }
    }
    if !encoding {
        fill_free(avg, hi, STEPS, clamp, level)?;
    }
    Ok(state.finish(avg.parent_height(), avg.parent_width()))
}

fn check_levels(predictor: &Predictor, levels: usize) -> Result<()> {
    if levels > MAX_LEVELS {
        return Err(Error::Config(format!(
            "{levels} levels, at most {MAX_LEVELS} supported"
        )));
    }
    if let Predictor::Cnn(m) = predictor {
        let have = m.model().config().levels;
        if have != levels {
            return Err(Error::Config(format!(
                "the weights model {have} levels, {levels} requested"
            )));
        }
    }
    Ok(())
}

/// Encodes `image`. The report gives the model's ideal code length next to
/// the stream sizes.
pub fn compress(image: &Image, predictor: Predictor, options: &Options) -> Result<(Container, CodingReport)> {
    let levels = options.levels;
    check_levels(&predictor, levels)?;
    if (image.width() * image.height()) as u64 > MAX_PIXELS {
        return Err(Error::Config(format!(
            "{}×{} is too large",
            image.width(),
            image.height()
        )));
    }
    let constraints = options.constraints.resolve(&predictor);
    let pyr = build_pyramid(image, levels);
    let mut report = CodingReport {
        nll_bits: vec![0.0; levels],
        stream_bytes: vec![0; levels],
    };
    let mut streams = vec![Vec::new(); levels];
    let mut cross = None;
    for l in (0..levels).rev() {
        let mut mode = Mode::Encode {
            enc: Encoder::new(),
            bits: 0.0,
        };
        let mut hi = pyr.levels[l].clone();
        cross = code_level(
            &predictor,
            l,
            &pyr.averages[l],
            &mut hi,
            cross,
            constraints,
            &mut mode,
        )?;
        let Mode::Encode { enc, bits } = mode else {
            unreachable!()
        };
        streams[l] = enc.finish();
        report.nll_bits[l] = bits;
        report.stream_bytes[l] = streams[l].len();
    }
    let container = Container {
        width: image.width() as u32,
        height: image.height() as u32,
        levels: levels as u8,
        model_id: predictor.model_id(),
        predictor: predictor.kind(),
        constraints,
        base: pyr.base().data().to_vec(),
        residuals: pyr.residuals.iter().map(|r| pack_codes(r.codes())).collect(),
        streams,
        checksum: image_digest(image),
    };
    Ok((container, report))
}

/// Decodes a container. Network-coded files need the weights they were
/// written with.
pub fn decompress(container: &Container, model: Option<&CnnModel>) -> Result<Image> {
    let levels = container.levels as usize;
    let predictor = match container.predictor {
        PredictorKind::Uniform => Predictor::Uniform,
        PredictorKind::Heuristic => Predictor::Heuristic,
        PredictorKind::Cnn => {
            let m = model.ok_or_else(|| Error::Config("this file needs network weights".into()))?;
            if m.id() != container.model_id {
                return Err(Error::HashMismatch {
                    expected: container.model_id,
                    found: m.id(),
                });
            }
            if m.model().config().levels != levels {
                return Err(Error::Format(format!(
                    "file has {levels} levels, the weights model {}",
                    m.model().config().levels
                )));
            }
            Predictor::Cnn(m)
        }
    };
    let (bw, bh) = container.level_dims(levels);
    let mut current = Image::new(bw, bh, container.base.clone())?;
    let mut cross = None;
    for l in (0..levels).rev() {
        let (w, h) = container.level_dims(l);
        let avg = AveragePlane::from_parts(&current, &container.residual_plane(l)?, w, h)?;
        let mut hi = Image::filled(w, h, [0; 3]);
        let dec = Decoder::new(&container.streams[l]).map_err(|e| stream_error(l, e))?;
        let mut mode = Mode::Decode { dec };
        cross = code_level(
            &predictor,
            l,
            &avg,
            &mut hi,
            cross,
            container.constraints,
            &mut mode,
        )?;
        let Mode::Decode { dec } = mode else {
            unreachable!()
        };
        dec.finish().map_err(|e| stream_error(l, e))?;
        current = hi;
    }
    if image_digest(&current) != container.checksum {
        return Err(Error::Integrity(
            "decoded image does not match the stored checksum".into(),
        ));
    }
    Ok(current)
}

fn stream_error(level: usize, e: CoderError) -> Error {
    Error::Corrupt {
        position: Position {
            level,
            step: if matches!(e, CoderError::Trailing(_)) {
                STEPS
            } else {
                1
            },
            channel: if matches!(e, CoderError::Trailing(_)) {
                2
            } else {
                0
            },
        },
        detail: e.to_string(),
    }
}

/// Draws a `2^levels` times larger image whose pooling pyramid ends in
/// `low`. Without constraints the block sums are only approximately kept.
pub fn sample(
    low: &Image,
    predictor: Predictor,
    levels: usize,
    constraints: bool,
    seed: u64,
) -> Result<Image> {
    check_levels(&predictor, levels)?;
    let mut mode = Mode::Sample {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut current = low.clone();
    let mut cross = None;
    for l in (0..levels).rev() {
        let (w, h) = (2 * current.width(), 2 * current.height());
        let avg = AveragePlane::from_image(&current, w, h);
        let mut hi = Image::filled(w, h, [0; 3]);
        cross = code_level(&predictor, l, &avg, &mut hi, cross, constraints, &mut mode)?;
        current = hi;
    }
    Ok(current)
}
