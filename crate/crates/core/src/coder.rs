//! Range coder over 16-bit quantized cumulative distributions.
//!
//! The encoder keeps a 33-bit `low` with LZMA-style carry propagation
//! through a cached byte, and a 32-bit `range` renormalized a byte at a time
//! to stay at or above 2^24. Interval splits multiply before shifting, so
//! even mass-1 symbols never collapse the range.

/// Probability precision: every table sums to `1 << PRECISION`.
pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;
const TOP: u32 = 1 << 24;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CoderError {
    #[error("read past end of stream")]
    Underrun,
    #[error("code value outside the current interval")]
    InvalidCode,
    #[error("{0} unread bytes after the last symbol")]
    Trailing(usize),
    #[error("unsupported table: {0}")]
    Table(String),
}

/// Quantized CDF: `cdf[0] = 0`, `cdf[S] = 65536`, strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    cdf: Vec<u32>,
}

impl CdfTable {
    pub fn from_cdf(cdf: Vec<u32>) -> Result<Self, CoderError> {
        if cdf.len() < 2 || cdf[0] != 0 || *cdf.last().unwrap() != TOTAL {
            return Err(CoderError::Table("cdf must run from 0 to 65536".into()));
        }
        if cdf.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CoderError::Table("cdf must be strictly increasing".into()));
        }
        Ok(CdfTable { cdf })
    }

    /// The table [`build_cdf`] gives a flat pmf: equal shares, the
    /// leftover units going to the lowest symbols.
    pub fn uniform(size: usize) -> Self {
        assert!(
            (1..=TOTAL as usize).contains(&size),
            "uniform table over {size} symbols"
        );
        let spare = TOTAL as usize - size;
        let (q, r) = ((spare / size) as u32, spare % size);
        let mut cdf = Vec::with_capacity(size + 1);
        let mut acc = 0;
        cdf.push(0);
        for i in 0..size {
            acc += 1 + q + (i < r) as u32;
            cdf.push(acc);
        }
        CdfTable { cdf }
    }

    pub fn size(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    #[inline]
    pub fn mass(&self, s: usize) -> u32 {
        self.cdf[s + 1] - self.cdf[s]
    }

    /// Ideal code length of `s` under this table, in bits.
    pub fn cost_bits(&self, s: usize) -> f64 {
        PRECISION as f64 - (self.mass(s) as f64).log2()
    }
}

/// Quantizes a pmf to the 1/65536 grid. Every symbol first receives a unit
/// of mass; the remaining `65536 − S` units are shared out proportionally by
/// largest remainder, ties broken toward lower symbol indices. The pmf need
/// not be normalized; a non-positive or non-finite total yields a uniform
/// table.
pub fn build_cdf(pmf: &[f64]) -> Result<CdfTable, CoderError> {
    let size = pmf.len();
    if size == 0 {
        return Err(CoderError::Table("empty alphabet".into()));
    }
    if size > TOTAL as usize {
        return Err(CoderError::Table(format!(
            "{size} symbols exceed the 16-bit precision"
        )));
    }
    let spare = (TOTAL as usize - size) as f64;
    let total: f64 = pmf.iter().map(|&p| p.max(0.0)).sum();
    let uniform = !(total.is_finite() && total > 0.0) || pmf.iter().any(|p| p.is_nan());

    let mut mass = vec![1u32; size];
    // remainder bits (descending) and index (ascending) in one sortable key
    let mut keys = Vec::with_capacity(size);
    let mut assigned = 0u64;
    for i in 0..size {
        let share = if uniform {
            spare / size as f64
        } else {
            pmf[i].max(0.0) / total * spare
        };
        let whole = share as u32;
        mass[i] += whole;
        assigned += whole as u64;
        let rem = share - whole as f64;
        keys.push(((!rem.to_bits() as u128) << 64) | i as u128);
    }
    let deficit = (spare as u64).saturating_sub(assigned) as usize;
    if deficit > 0 {
        if deficit < size {
            keys.select_nth_unstable(deficit - 1);
        }
        for &k in &keys[..deficit.min(size)] {
            mass[k as u64 as usize] += 1;
        }
    }
    let mut cdf = Vec::with_capacity(size + 1);
    let mut acc = 0u32;
    cdf.push(0);
    for m in mass {
        acc += m;
        cdf.push(acc);
    }
    debug_assert_eq!(acc, TOTAL);
    Ok(CdfTable { cdf })
}

pub struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    first: bool,
    out: Vec<u8>,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Encoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            first: true,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, table: &CdfTable, symbol: usize) {
        let r = self.range as u64;
        let lo = (r * table.cdf[symbol] as u64) >> PRECISION;
        let hi = (r * table.cdf[symbol + 1] as u64) >> PRECISION;
        self.low += lo;
        self.range = (hi - lo) as u32;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Bytes emitted so far, excluding bytes still held for carry.
    pub fn bytes_written(&self) -> usize {
        self.out.len()
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn emit(&mut self, byte: u8) {
        if self.first {
            // The leading byte is the carry slot above the initial interval
            // and is always zero.
            debug_assert_eq!(byte, 0);
            self.first = false;
        } else {
            self.out.push(byte);
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self, CoderError> {
        let mut dec = Decoder {
            data,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..4 {
            dec.code = (dec.code << 8) | dec.next_byte()? as u32;
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8, CoderError> {
        let b = *self.data.get(self.pos).ok_or(CoderError::Underrun)?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<usize, CoderError> {
        let r = self.range as u64;
        // Largest cumulative value c with floor(r·c / 2^16) <= code.
        let target = (((self.code as u64 + 1) << PRECISION) - 1) / r;
        if target >= TOTAL as u64 {
            return Err(CoderError::InvalidCode);
        }
        let cdf = &table.cdf;
        let symbol = cdf.partition_point(|&c| c as u64 <= target) - 1;
        let lo = (r * cdf[symbol] as u64) >> PRECISION;
        let hi = (r * cdf[symbol + 1] as u64) >> PRECISION;
        self.code -= lo as u32;
        self.range = (hi - lo) as u32;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte()? as u32;
        }
        Ok(symbol)
    }

    /// Checks that the stream was consumed exactly.
    pub fn finish(self) -> Result<(), CoderError> {
        match self.data.len() - self.pos {
            0 => Ok(()),
            n => Err(CoderError::Trailing(n)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn masses(t: &CdfTable) -> Vec<u32> {
        (0..t.size()).map(|s| t.mass(s)).collect()
    }

    #[test]
    fn build_cdf_examples() {
        assert!(masses(&build_cdf(&[1.0 / 256.0; 256]).unwrap())
            .iter()
            .all(|&m| m == 256));
        assert_eq!(masses(&build_cdf(&[1.0, 0.0]).unwrap()), vec![65535, 1]);
        assert_eq!(
            masses(&build_cdf(&[0.5, 0.25, 0.25]).unwrap()),
            vec![32768, 16384, 16384]
        );
        assert_eq!(masses(&build_cdf(&[0.3]).unwrap()), vec![65536]);
        assert!(build_cdf(&vec![1.0; 65537]).is_err());
        assert!(build_cdf(&[]).is_err());
        assert_eq!(build_cdf(&[0.0, 0.0]).unwrap(), CdfTable::uniform(2));
        assert_eq!(build_cdf(&[f64::NAN, 1.0]).unwrap(), CdfTable::uniform(2));
    }

    #[test]
    fn uniform_matches_build_cdf() {
        for size in (1..=300).chain([4096, 65535, 65536]) {
            assert_eq!(
                CdfTable::uniform(size),
                build_cdf(&vec![1.0; size]).unwrap(),
                "{size}"
            );
        }
    }

    #[test]
    fn from_cdf_validates() {
        assert!(CdfTable::from_cdf(vec![0, 65536]).is_ok());
        assert!(CdfTable::from_cdf(vec![0, 10, 10, 65536]).is_err());
        assert!(CdfTable::from_cdf(vec![1, 65536]).is_err());
    }

    #[test]
    fn near_certain_symbols_are_cheap() {
        let t = build_cdf(&[1.0, 0.0]).unwrap();
        let mut enc = Encoder::new();
        for _ in 0..1000 {
            enc.encode(&t, 0);
        }
        let bytes = enc.finish();
        assert!(bytes.len() <= 8, "{} bytes", bytes.len());
        let mut dec = Decoder::new(&bytes).unwrap();
        for _ in 0..1000 {
            assert_eq!(dec.decode(&t).unwrap(), 0);
        }
        dec.finish().unwrap();
    }

    #[test]
    fn uniform_bytes_cost_eight_bits() {
        let t = CdfTable::uniform(256);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let syms: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..256)).collect();
        let mut enc = Encoder::new();
        for &s in &syms {
            enc.encode(&t, s);
        }
        let bytes = enc.finish();
        assert!((992..=1008).contains(&bytes.len()), "{}", bytes.len());
        let mut dec = Decoder::new(&bytes).unwrap();
        for &s in &syms {
            assert_eq!(dec.decode(&t).unwrap(), s);
        }
        dec.finish().unwrap();
    }

    #[test]
    fn tiny_and_empty_streams() {
        let t = CdfTable::uniform(2);
        let mut enc = Encoder::new();
        enc.encode(&t, 1);
        let bytes = enc.finish();
        assert!(bytes.len() <= 8);
        let mut dec = Decoder::new(&bytes).unwrap();
        assert_eq!(dec.decode(&t).unwrap(), 1);

        let bytes = Encoder::new().finish();
        assert!(bytes.len() <= 8);
        Decoder::new(&bytes).unwrap().finish().unwrap();
        assert_eq!(Decoder::new(&[]).err(), Some(CoderError::Underrun));
    }

    #[test]
    fn trailing_bytes_detected() {
        let mut bytes = Encoder::new().finish();
        bytes.push(7);
        let dec = Decoder::new(&bytes).unwrap();
        assert_eq!(dec.finish(), Err(CoderError::Trailing(1)));
    }

    fn random_table(rng: &mut ChaCha8Rng) -> CdfTable {
        let size = match rng.gen_range(0..4) {
            0 => 1,
            1 => rng.gen_range(2..8),
            2 => 256,
            _ => rng.gen_range(2..300),
        };
        let peak = rng.gen_range(0..size);
        let sharp: f64 = rng.gen_range(0.0..4.0);
        let pmf: Vec<f64> = (0..size)
            .map(|i| (-(i as f64 - peak as f64).abs() * sharp).exp() * rng.gen_range(0.0..1.0))
            .collect();
        build_cdf(&pmf).unwrap()
    }

    #[test]
    fn random_round_trip_and_efficiency() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tables = Vec::new();
        let mut syms = Vec::new();
        let mut ideal = 0.0;
        for _ in 0..100_000 {
            let t = random_table(&mut rng);
            // draw from the table itself so the stream is realistic
            let u = rng.gen_range(0..TOTAL);
            let s = t.cdf().partition_point(|&c| c <= u) - 1;
            ideal += t.cost_bits(s);
            tables.push(t);
            syms.push(s);
        }
        let mut enc = Encoder::new();
        for (t, &s) in tables.iter().zip(&syms) {
            enc.encode(t, s);
        }
        let bytes = enc.finish();
        let bits = bytes.len() as f64 * 8.0;
        assert!(bits <= ideal + 64.0, "{bits} > {ideal} + 64");
        let mut dec = Decoder::new(&bytes).unwrap();
        for (t, &s) in tables.iter().zip(&syms) {
            assert_eq!(dec.decode(t).unwrap(), s);
        }
        dec.finish().unwrap();
    }

    #[test]
    fn bit_flips_never_panic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tables: Vec<CdfTable> = (0..500).map(|_| random_table(&mut rng)).collect();
        let syms: Vec<usize> = tables.iter().map(|t| rng.gen_range(0..t.size())).collect();
        let mut enc = Encoder::new();
        for (t, &s) in tables.iter().zip(&syms) {
            enc.encode(t, s);
        }
        let bytes = enc.finish();
        for trial in 0..2000 {
            let mut bad = bytes.clone();
            let i = rng.gen_range(0..bad.len());
            bad[i] ^= 1 << rng.gen_range(0..8);
            if trial % 3 == 0 {
                bad.truncate(rng.gen_range(0..bad.len()));
            }
            let Ok(mut dec) = Decoder::new(&bad) else { continue };
            for t in &tables {
                if dec.decode(t).is_err() {
                    break;
                }
            }
        }
    }

    #[test]
    fn deterministic_streams() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut enc = Encoder::new();
            for _ in 0..5000 {
                let t = random_table(&mut rng);
                let s = rng.gen_range(0..t.size());
                enc.encode(&t, s);
            }
            enc.finish()
        };
        assert_eq!(run(), run());
    }
}
