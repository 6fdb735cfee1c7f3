use crate::pyramid::{ResidualPlane, MAX_LEVELS};
use crate::{Error, Result};

pub const MAGIC: &[u8; 5] = b"SREC1";
pub const VERSION: u8 = 1;
/// Bytes before the raw base image.
pub const HEADER_LEN: usize = MAGIC.len() + 1 + 4 + 4 + 1 + 8 + 1;
pub const CHECKSUM_LEN: usize = 8;
/// Largest accepted `width · height`.
pub const MAX_PIXELS: u64 = 1 << 28;

const FLAG_CONSTRAINTS: u8 = 1;
const PREDICTOR_SHIFT: u8 = 1;
const PREDICTOR_MASK: u8 = 0b110;

/// Source of the coding distributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PredictorKind {
    /// Every admissible value equally likely.
    Uniform,
    /// One logistic per subpixel around a bilinear upsampling of the block
    /// averages.
    Heuristic,
    /// The trained super-resolution network.
    Cnn,
}

impl PredictorKind {
    pub const ALL: [PredictorKind; 3] = [
        PredictorKind::Uniform,
        PredictorKind::Heuristic,
        PredictorKind::Cnn,
    ];

    fn code(self) -> u8 {
        match self {
            PredictorKind::Uniform => 0,
            PredictorKind::Heuristic => 1,
            PredictorKind::Cnn => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(PredictorKind::Uniform),
            1 => Some(PredictorKind::Heuristic),
            2 => Some(PredictorKind::Cnn),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PredictorKind::Uniform => "uniform",
            PredictorKind::Heuristic => "heuristic",
            PredictorKind::Cnn => "cnn",
        }
    }
}

impl std::fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PredictorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PredictorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown predictor {s:?}")))
    }
}

/// A parsed compressed file. Per-level vectors are indexed by level, 0
/// being the finest; on disk they run coarse to fine.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub width: u32,
    pub height: u32,
    pub levels: u8,
    /// Identifier of the weights the streams were coded with; 0 when no
    /// network is involved.
    pub model_id: u64,
    pub predictor: PredictorKind,
    pub constraints: bool,
    /// x^(levels), row-major RGB.
    pub base: Vec<u8>,
    /// Packed 2-bit rounding codes of each level.
    pub residuals: Vec<Vec<u8>>,
    /// Arithmetic-coded stream of each level.
    pub streams: Vec<Vec<u8>>,
    /// Digest of the original image; checked after decoding.
    pub checksum: u64,
}

/// Side of level `l` for an input side of `n`.
pub fn level_size(n: usize, l: usize) -> usize {
    let mut s = n;
    for _ in 0..l {
        s = s.div_ceil(2);
    }
    s
}

/// Bytes needed for `count` 2-bit codes.
pub fn packed_len(count: usize) -> usize {
    count.div_ceil(4)
}

/// Packs 2-bit codes four to a byte, first code in the high bits.
pub fn pack_codes(codes: &[u8]) -> Vec<u8> {
    codes
        .chunks(4)
        .map(|c| {
            c.iter()
                .enumerate()
                .fold(0u8, |b, (i, &v)| b | (v & 3) << (6 - 2 * i))
        })
        .collect()
}

pub fn unpack_codes(bytes: &[u8], count: usize) -> Result<Vec<u8>> {
    if bytes.len() != packed_len(count) {
        return Err(Error::Format(format!(
            "residual section has {} bytes, expected {}",
            bytes.len(),
            packed_len(count)
        )));
    }
    let mut out: Vec<u8> = bytes
        .iter()
        .flat_map(|&b| [b >> 6, b >> 4 & 3, b >> 2 & 3, b & 3])
        .collect();
    if out[count..].iter().any(|&v| v != 0) {
        return Err(Error::Format("nonzero padding in residual section".into()));
    }
    out.truncate(count);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("file truncated in {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl Container {
    /// Width and height of level `l`.
    pub fn level_dims(&self, l: usize) -> (usize, usize) {
        (
            level_size(self.width as usize, l),
            level_size(self.height as usize, l),
        )
    }

    pub fn subpixels(&self) -> usize {
        3 * self.width as usize * self.height as usize
    }

    fn flags(&self) -> u8 {
        (self.constraints as u8 * FLAG_CONSTRAINTS) | self.predictor.code() << PREDICTOR_SHIFT
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.levels);
        out.extend_from_slice(&self.model_id.to_le_bytes());
        out.push(self.flags());
        out.extend_from_slice(&self.base);
        for section in [&self.residuals, &self.streams] {
            for bytes in section.iter().rev() {
                out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
                out.extend_from_slice(bytes);
            }
        }
        out.extend_from_slice(&self.checksum.to_le_bytes());
        out
    }

    pub fn encoded_len(&self) -> usize {
        let sections: usize = self
            .residuals
            .iter()
            .chain(&self.streams)
            .map(|s| 4 + s.len())
            .sum();
        HEADER_LEN + self.base.len() + sections + CHECKSUM_LEN
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Format("not an SREC1 file".into()));
        }
        let version = r.u8("header")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let width = r.u32("header")?;
        let height = r.u32("header")?;
        let levels = r.u8("header")?;
        let model_id = r.u64("header")?;
        let flags = r.u8("header")?;
        if width == 0 || height == 0 || width as u64 * height as u64 > MAX_PIXELS {
            return Err(Error::Format(format!("unsupported dimensions {width}×{height}")));
        }
        if levels as usize > MAX_LEVELS {
            return Err(Error::Format(format!(
                "{levels} levels, at most {MAX_LEVELS} supported"
            )));
        }
        if flags & !(FLAG_CONSTRAINTS | PREDICTOR_MASK) != 0 {
            return Err(Error::Format(format!("unknown flags {flags:#04x}")));
        }
        let predictor = PredictorKind::from_code((flags & PREDICTOR_MASK) >> PREDICTOR_SHIFT)
            .ok_or_else(|| Error::Format("unknown predictor".into()))?;
        let mut c = Container {
            width,
            height,
            levels,
            model_id,
            predictor,
            constraints: flags & FLAG_CONSTRAINTS != 0,
            base: Vec::new(),
            residuals: vec![Vec::new(); levels as usize],
            streams: vec![Vec::new(); levels as usize],
            checksum: 0,
        };
        let (bw, bh) = c.level_dims(levels as usize);
        c.base = r.take(3 * bw * bh, "base image")?.to_vec();
        for l in (0..levels as usize).rev() {
            let n = r.u32("residual length")? as usize;
            let (w, h) = c.level_dims(l + 1);
            if n != packed_len(3 * w * h) {
                return Err(Error::Format(format!(
                    "level {l} residual section has {n} bytes, expected {}",
                    packed_len(3 * w * h)
                )));
            }
            c.residuals[l] = r.take(n, "residuals")?.to_vec();
        }
        for l in (0..levels as usize).rev() {
            let n = r.u32("stream length")? as usize;
            c.streams[l] = r.take(n, "stream")?.to_vec();
        }
        c.checksum = r.u64("checksum")?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(c)
    }

    /// Residual plane of level `l`, i.e. of the pooling that produced
    /// level `l + 1`.
    pub fn residual_plane(&self, l: usize) -> Result<ResidualPlane> {
        let (w, h) = self.level_dims(l + 1);
        ResidualPlane::new(w, h, unpack_codes(&self.residuals[l], 3 * w * h)?)
    }
}
