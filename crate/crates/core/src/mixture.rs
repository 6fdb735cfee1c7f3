//! Discretized logistic mixtures over 8-bit values.
//!
//! Each pixel carries `12·K` raw parameters laid out kind-major: for kind
//! `j` and component `k` the value sits at `j·K + k`. Kinds are
//!
//! | j    | meaning                                   |
//! |------|-------------------------------------------|
//! | 0..3 | weight logits for R, G, B                 |
//! | 3..6 | means for R, G, B                         |
//! | 6..9 | log-scales for R, G, B                    |
//! | 9    | coefficient of R in the G mean            |
//! | 10   | coefficient of R in the B mean            |
//! | 11   | coefficient of G in the B mean            |
//!
//! Means and scales live in the `[-1, 1]` value domain (`x/127.5 − 1`), so
//! one 8-bit step is `2/255` wide. Bins 0 and 255 absorb the tails.

use rand::Rng;

use crate::coder::{build_cdf, CdfTable};
use crate::{Error, Result};

pub const PARAMS_PER_MIXTURE: usize = 12;
pub const DEFAULT_MIXTURES: usize = 10;
/// Scales are floored at 1e-3 in the value domain.
pub const MIN_LOG_SCALE: f64 = -6.907_755_278_982_137;
/// Scales are capped at e^7, far flatter than any 8-bit distribution needs.
pub const MAX_LOG_SCALE: f64 = 7.0;

const HALF_BIN: f64 = 1.0 / 255.0;
const LN2: f64 = std::f64::consts::LN_2;

/// Maps an 8-bit value to the `[-1, 1]` domain.
#[inline]
pub fn to_domain(x: f64) -> f64 {
    x / 127.5 - 1.0
}

/// Raw mixture parameters of one pixel.
#[derive(Clone, Copy, Debug)]
pub struct MixtureParams<'a> {
    raw: &'a [f64],
    k: usize,
}

impl<'a> MixtureParams<'a> {
    pub fn new(raw: &'a [f64]) -> Self {
        assert!(
            !raw.is_empty() && raw.len().is_multiple_of(PARAMS_PER_MIXTURE),
            "parameter count {} is not a positive multiple of 12",
            raw.len()
        );
        MixtureParams {
            raw,
            k: raw.len() / PARAMS_PER_MIXTURE,
        }
    }

    pub fn components(&self) -> usize {
        self.k
    }

    pub fn raw(&self) -> &'a [f64] {
        self.raw
    }

    #[inline]
    fn at(&self, kind: usize, k: usize) -> f64 {
        self.raw[kind * self.k + k]
    }

    /// Effective (domain) mean of component `k` for channel `ch`.
    #[inline]
    fn mean(&self, ch: usize, k: usize, prev: &[f64; 2]) -> f64 {
        let mut mu = self.at(3 + ch, k);
        match ch {
            1 => mu += self.at(9, k) * prev[0],
            2 => mu += self.at(10, k) * prev[0] + self.at(11, k) * prev[1],
            _ => {}
        }
        mu
    }
}

/// Inclusive range of admissible values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TruncRange {
    pub lo: u8,
    pub hi: u8,
}

impl TruncRange {
    pub const FULL: TruncRange = TruncRange { lo: 0, hi: 255 };

    pub fn new(lo: u8, hi: u8) -> Self {
        assert!(lo <= hi);
        TruncRange { lo, hi }
    }

    pub fn len(&self) -> usize {
        (self.hi - self.lo) as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_full(&self) -> bool {
        *self == Self::FULL
    }

    pub fn contains(&self, x: u8) -> bool {
        (self.lo..=self.hi).contains(&x)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// (σ(t), σ(−t)), both to full relative precision.
#[inline]
fn sigmoid_pair(t: f64) -> (f64, f64) {
    let e = (-t.abs()).exp();
    let big = 1.0 / (1.0 + e);
    let small = e * big;
    if t >= 0.0 {
        (big, small)
    } else {
        (small, big)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// ln(σ(upper) − σ(lower)) with its partial derivatives. `None` bounds are
/// infinite.
#[inline]
fn log_sigmoid_diff(upper: Option<f64>, lower: Option<f64>) -> (f64, f64, f64) {
    let ln_dsig = |t: f64| -softplus(t) - softplus(-t);
    let v = match (upper, lower) {
        (None, None) => return (0.0, 0.0, 0.0),
        (None, Some(b)) => -softplus(b),
        (Some(a), None) => -softplus(-a),
        (Some(a), Some(b)) => (a - b).exp_m1().ln() - softplus(-b) - softplus(a),
    };
    let da = upper.map_or(0.0, |a| (ln_dsig(a) - v).exp());
    let db = lower.map_or(0.0, |b| -(ln_dsig(b) - v).exp());
    (v, da, db)
}

/// σ((x−μ+0.5)/s) − σ((x−μ−0.5)/s) in 8-bit units, tails absorbed at 0 and 255.
pub fn bin_prob(mu: f64, s: f64, x: u8) -> f64 {
    assert!(s > 0.0);
    let lower = (x > 0).then(|| (x as f64 - mu - 0.5) / s);
    let upper = (x < 255).then(|| (x as f64 - mu + 0.5) / s);
    bin_mass(upper, lower, x as f64 >= mu)
}

#[inline]
fn bin_mass(upper: Option<f64>, lower: Option<f64>, right_of_mean: bool) -> f64 {
    let (su, cu) = upper.map_or((1.0, 0.0), sigmoid_pair);
    let (sl, cl) = lower.map_or((0.0, 1.0), sigmoid_pair);
    if right_of_mean {
        (cl - cu).max(0.0)
    } else {
        (su - sl).max(0.0)
    }
}

struct Component {
    weight: f64,
    mu: f64,
    scale: f64,
}

fn prev_domain(prev: &[u8]) -> [f64; 2] {
    let mut out = [0.0; 2];
    for (o, &v) in out.iter_mut().zip(prev) {
        *o = to_domain(v as f64);
    }
    out
}

fn channel_components(params: &MixtureParams, ch: usize, prev: &[u8]) -> Vec<Component> {
    assert!(
        ch < 3 && prev.len() >= ch,
        "channel {ch} needs {ch} previous values"
    );
    let k = params.k;
    let prev = prev_domain(prev);
    let logits: Vec<f64> = (0..k).map(|i| params.at(ch, i)).collect();
    let lse = log_sum_exp(&logits);
    (0..k)
        .map(|i| Component {
            weight: (logits[i] - lse).exp(),
            mu: params.mean(ch, i, &prev),
            scale: params.at(6 + ch, i).clamp(MIN_LOG_SCALE, MAX_LOG_SCALE).exp(),
        })
        .collect()
}

/// Untruncated probabilities of the values `range.lo..=range.hi`.
pub fn range_pmf(params: &MixtureParams, ch: usize, prev: &[u8], range: TruncRange) -> Vec<f64> {
    let comps = channel_components(params, ch, prev);
    let n = range.len();
    let mut pmf = vec![0.0; n];
    // σ and 1 − σ at the n + 1 bin boundaries of the range
    let mut sig = vec![0.0; n + 1];
    let mut comp = vec![0.0; n + 1];
    for c in &comps {
        let (first, last) = boundary_sigmoids(c, range.lo, &mut sig, &mut comp);
        // values at or right of the mean take the complement difference
        let split = (((c.mu + 1.0) * 127.5)
            .ceil()
            .clamp(range.lo as f64, range.hi as f64 + 1.0) as usize
            - range.lo as usize)
            .clamp(first, last);
        for i in first..split {
            pmf[i] += c.weight * (sig[i + 1] - sig[i]).max(0.0);
        }
        for i in split..last {
            pmf[i] += c.weight * (comp[i] - comp[i + 1]).max(0.0);
        }
    }
    pmf
}

/// Beyond this many scales from the mean a boundary counts as 0 or 1.
const TAIL_T: f64 = 40.0;

/// Fills σ(t_b) and 1 − σ(t_b) for the boundaries below values
/// `lo..=lo + n` and returns the bins `first..last` that can carry mass.
/// The arguments are evenly spaced, so exp(−|t|) follows a geometric
/// sequence outward from the mean.
fn boundary_sigmoids(c: &Component, lo: u8, sig: &mut [f64], comp: &mut [f64]) -> (usize, usize) {
    let n = sig.len();
    let dt = 2.0 * HALF_BIN / c.scale;
    let t0 = (to_domain(lo as f64) - HALF_BIN - c.mu) / c.scale;
    let ratio = (-dt).exp();
    let t_at = |b: usize| t0 + b as f64 * dt;
    // boundaries lo_b..hi_b are computed, the rest saturate
    let bound = |t: f64| ((t - t0) / dt).clamp(-1.0, n as f64);
    let lo_b = (bound(-TAIL_T).ceil().max(0.0)) as usize;
    let hi_b = ((bound(TAIL_T).floor() + 1.0).max(0.0) as usize).min(n);
    let zero = if t0 >= 0.0 {
        0
    } else {
        ((-t0 / dt).ceil() as usize).min(n)
    };
    sig[..lo_b].fill(0.0);
    comp[..lo_b].fill(1.0);
    sig[hi_b..].fill(1.0);
    comp[hi_b..].fill(0.0);
    let mid = zero.clamp(lo_b, hi_b);
    if mid < hi_b {
        let mut e = (-t_at(mid)).exp();
        for b in mid..hi_b {
            let big = 1.0 / (1.0 + e);
            sig[b] = big;
            comp[b] = e * big;
            e *= ratio;
        }
    }
    if lo_b < mid {
        let mut e = t_at(mid - 1).exp();
        for b in (lo_b..mid).rev() {
            let big = 1.0 / (1.0 + e);
            sig[b] = e * big;
            comp[b] = big;
            e *= ratio;
        }
    }
    // the outer boundaries of values 0 and 255 are infinite, and those bins
    // absorb the tails
    let bins = n - 1;
    let mut first = lo_b.saturating_sub(1).min(bins);
    let mut last = hi_b.min(bins).max(first);
    if lo == 0 {
        sig[0] = 0.0;
        comp[0] = 1.0;
        first = 0;
        last = last.max(1);
    }
    if lo as usize + bins == 256 {
        sig[bins] = 1.0;
        comp[bins] = 0.0;
        first = first.min(bins - 1);
        last = bins;
    }
    (first, last)
}

/// Full 256-value pmf of one channel given the previously decoded channels
/// of the same pixel (R for G; R and G for B).
pub fn channel_pmf(params: &MixtureParams, ch: usize, prev: &[u8]) -> Vec<f64> {
    range_pmf(params, ch, prev, TruncRange::FULL)
}

/// Range of the next coded value of a block with `p` real pixels, given its
/// quarter-unit average and the values already decoded for this channel.
pub fn valid_range(avg_q: u16, p: usize, decoded: &[u8]) -> Result<TruncRange> {
    if decoded.len() + 2 > p {
        return Err(Error::Config(format!(
            "no coded value left in a block of {p} with {} decoded",
            decoded.len()
        )));
    }
    let remaining = (p - decoded.len()) as i32;
    let scaled = p as i32 * avg_q as i32;
    if scaled % 4 != 0 {
        return Err(Error::Integrity(format!(
            "average {avg_q}/4 is not a whole sum for {p} pixels"
        )));
    }
    let rest = scaled / 4 - decoded.iter().map(|&v| v as i32).sum::<i32>();
    let lo = (rest - 255 * (remaining - 1)).max(0);
    let hi = rest.min(255);
    if lo > hi {
        return Err(Error::Integrity(format!(
            "empty value range [{lo}, {hi}] for remaining sum {rest}"
        )));
    }
    Ok(TruncRange::new(lo as u8, hi as u8))
}

/// Zeroes a 256-entry pmf outside `range` and renormalizes. Falls back to a
/// uniform distribution over the range when its mass underflows.
pub fn truncate(pmf: &[f64], range: TruncRange) -> Vec<f64> {
    assert_eq!(pmf.len(), 256);
    let mut out = vec![0.0; 256];
    let inside = &pmf[range.lo as usize..=range.hi as usize];
    let mass: f64 = inside.iter().sum();
    let dst = &mut out[range.lo as usize..=range.hi as usize];
    if mass.is_finite() && mass > 1e-300 {
        for (d, &p) in dst.iter_mut().zip(inside) {
            *d = p / mass;
        }
    } else {
        dst.fill(1.0 / range.len() as f64);
    }
    out
}

/// Quantized coding table over `range.lo..=range.hi`; symbol `i` is the
/// value `range.lo + i`.
pub fn coding_table(params: &MixtureParams, ch: usize, prev: &[u8], range: TruncRange) -> CdfTable {
    if range.len() == 1 {
        return CdfTable::uniform(1);
    }
    let pmf = range_pmf(params, ch, prev, range);
    let mass: f64 = pmf.iter().sum();
    let pmf = if mass.is_finite() && mass > 1e-300 {
        pmf
    } else {
        vec![1.0; range.len()]
    };
    build_cdf(&pmf).expect("at most 256 symbols")
}

/// Natural-log probability of `x` for channel `ch`, renormalized to `range`.
/// When `grad` is given, `scale · ∂/∂raw` is accumulated into it.
pub fn channel_log_prob(
    params: &MixtureParams,
    ch: usize,
    x: u8,
    prev: &[u8],
    range: TruncRange,
    grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let k = params.k;
    let prevd = prev_domain(prev);
    let logits: Vec<f64> = (0..k).map(|i| params.at(ch, i)).collect();
    let lse = log_sum_exp(&logits);
    let xd = to_domain(x as f64);
    let lo_d = to_domain(range.lo as f64);
    let hi_d = to_domain(range.hi as f64);
    let truncated = !range.is_full();

    struct Term {
        scale: f64,
        clamped: bool,
        bin: (Option<f64>, Option<f64>, f64, f64, f64),
        span: (Option<f64>, Option<f64>, f64, f64, f64),
    }
    let mut terms = Vec::with_capacity(k);
    let mut log_bin = Vec::with_capacity(k);
    let mut log_span = Vec::with_capacity(k);
    for i in 0..k {
        let mu = params.mean(ch, i, &prevd);
        let ls = params.at(6 + ch, i);
        let scale = ls.clamp(MIN_LOG_SCALE, MAX_LOG_SCALE).exp();
        let a = (x < 255).then(|| (xd + HALF_BIN - mu) / scale);
        let b = (x > 0).then(|| (xd - HALF_BIN - mu) / scale);
        let (lp, da, db) = log_sigmoid_diff(a, b);
        let span = if truncated {
            let a2 = (range.hi < 255).then(|| (hi_d + HALF_BIN - mu) / scale);
            let b2 = (range.lo > 0).then(|| (lo_d - HALF_BIN - mu) / scale);
            let (lq, dqa, dqb) = log_sigmoid_diff(a2, b2);
            (a2, b2, lq, dqa, dqb)
        } else {
            (None, None, 0.0, 0.0, 0.0)
        };
        let lw = logits[i] - lse;
        log_bin.push(lw + lp);
        log_span.push(lw + span.2);
        terms.push(Term {
            scale,
            clamped: !(MIN_LOG_SCALE..=MAX_LOG_SCALE).contains(&ls),
            bin: (a, b, lp, da, db),
            span,
        });
    }
    let lp = log_sum_exp(&log_bin);
    let lz = if truncated { log_sum_exp(&log_span) } else { 0.0 };

    if let Some((g, mult)) = grad {
        assert_eq!(g.len(), PARAMS_PER_MIXTURE * k);
        for (i, t) in terms.iter().enumerate() {
            let r = (log_bin[i] - lp).exp();
            let q = (log_span[i] - lz).exp();
            let (a, b, _, da, db) = t.bin;
            let (a2, b2, _, dqa, dqb) = t.span;
            // ∂/∂μ of ln P_k is −(∂a + ∂b)/s
            let d_mu = (-r * (da + db) + q * (dqa + dqb)) / t.scale;
            let tilt = |bound: Option<f64>, d: f64| bound.map_or(0.0, |v| v * d);
            let d_ls = if t.clamped {
                0.0
            } else {
                -r * (tilt(a, da) + tilt(b, db)) + q * (tilt(a2, dqa) + tilt(b2, dqb))
            };
            g[ch * k + i] += mult * (r - q);
            g[(3 + ch) * k + i] += mult * d_mu;
            g[(6 + ch) * k + i] += mult * d_ls;
            match ch {
                1 => g[9 * k + i] += mult * d_mu * prevd[0],
                2 => {
                    g[10 * k + i] += mult * d_mu * prevd[0];
                    g[11 * k + i] += mult * d_mu * prevd[1];
                }
                _ => {}
            }
        }
    }
    lp - lz
}

/// Negative log2-likelihood of an RGB pixel, channels conditioned in order.
pub fn nll(params: &MixtureParams, target: [u8; 3], ranges: Option<[TruncRange; 3]>) -> f64 {
    let ranges = ranges.unwrap_or([TruncRange::FULL; 3]);
    -(0..3)
        .map(|ch| channel_log_prob(params, ch, target[ch], &target[..ch], ranges[ch], None))
        .sum::<f64>()
        / LN2
}

/// [`nll`] and its gradient with respect to all `12·K` raw parameters.
pub fn nll_grad(params: &MixtureParams, target: [u8; 3], ranges: Option<[TruncRange; 3]>) -> (f64, Vec<f64>) {
    let ranges = ranges.unwrap_or([TruncRange::FULL; 3]);
    let mut grad = vec![0.0; params.raw.len()];
    let mut total = 0.0;
    for ch in 0..3 {
        total += channel_log_prob(
            params,
            ch,
            target[ch],
            &target[..ch],
            ranges[ch],
            Some((&mut grad, -1.0 / LN2)),
        );
    }
    (-total / LN2, grad)
}

/// Draws one channel value by inverse CDF from the truncated pmf.
pub fn sample<R: Rng + ?Sized>(
    params: &MixtureParams,
    ch: usize,
    prev: &[u8],
    range: TruncRange,
    rng: &mut R,
) -> u8 {
    let pmf = range_pmf(params, ch, prev, range);
    let total: f64 = pmf.iter().sum();
    if !(total.is_finite() && total > 1e-300) {
        return range.lo + rng.gen_range(0..range.len()) as u8;
    }
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, &p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return range.lo + i as u8;
        }
    }
    // u landed in the rounding slack above the accumulated sum
    range.lo + pmf.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(t: f64) -> f64 {
        1.0 / (1.0 + (-t).exp())
    }

    /// Parameters with every component equal: means/log-scales per channel.
    fn single(k: usize, mu: [f64; 3], ls: [f64; 3], coeff: [f64; 3]) -> Vec<f64> {
        let mut raw = vec![0.0; 12 * k];
        for i in 0..k {
            for ch in 0..3 {
                raw[(3 + ch) * k + i] = mu[ch];
                raw[(6 + ch) * k + i] = ls[ch];
                raw[(9 + ch) * k + i] = coeff[ch];
            }
        }
        raw
    }

    fn random_params(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
        (0..12 * k)
            .map(|i| {
                let kind = i / k;
                match kind {
                    0..=2 => rng.gen_range(-2.0..2.0),
                    3..=5 => rng.gen_range(-1.0..1.0),
                    6..=8 => rng.gen_range(-5.0..0.0),
                    _ => rng.gen_range(-1.0..1.0),
                }
            })
            .collect()
    }

    #[test]
    fn bin_prob_examples() {
        let v = bin_prob(128.0, 1.0, 128);
        assert!((v - (2.0 * sigmoid(0.5) - 1.0)).abs() < 1e-12);
        assert!((v - 0.244_918_662_403_709).abs() < 1e-9);
        assert!(bin_prob(0.0, 0.01, 0) > 0.5);
        for (mu, s) in [(0.0, 0.3), (127.3, 20.0), (300.0, 2.0), (-40.0, 500.0)] {
            let total: f64 = (0..=255).map(|x| bin_prob(mu, s, x)).sum();
            assert!((total - 1.0).abs() < 1e-12, "{total}");
        }
    }

    #[test]
    fn pmf_normalized_and_collapses() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let raw = random_params(&mut rng, 10);
            let p = MixtureParams::new(&raw);
            for ch in 0..3 {
                let pmf = channel_pmf(&p, ch, &[40, 200][..ch]);
                assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let ten = single(10, [0.1, -0.2, 0.3], [-3.0, -2.5, -2.0], [0.4, -0.3, 0.2]);
        let one = single(1, [0.1, -0.2, 0.3], [-3.0, -2.5, -2.0], [0.4, -0.3, 0.2]);
        for ch in 0..3 {
            let a = channel_pmf(&MixtureParams::new(&ten), ch, &[17, 99][..ch]);
            let b = channel_pmf(&MixtureParams::new(&one), ch, &[17, 99][..ch]);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn green_independent_of_red_without_coefficients() {
        let raw = single(3, [0.0, 0.1, 0.2], [-3.0; 3], [0.0; 3]);
        let p = MixtureParams::new(&raw);
        assert_eq!(channel_pmf(&p, 1, &[0]), channel_pmf(&p, 1, &[255]));
    }

    #[test]
    fn coefficient_translates_green() {
        // c_GR = 1: raising R by 10 shifts the G distribution by 10 values
        let raw = single(1, [0.0, -0.5, 0.0], [-4.0; 3], [1.0, 0.0, 0.0]);
        let p = MixtureParams::new(&raw);
        let a = channel_pmf(&p, 1, &[100]);
        let b = channel_pmf(&p, 1, &[110]);
        for x in 20..200 {
            assert!((a[x] - b[x + 10]).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn valid_range_examples() {
        assert_eq!(valid_range(0, 4, &[]).unwrap(), TruncRange::new(0, 0));
        assert_eq!(valid_range(1020, 4, &[]).unwrap(), TruncRange::new(255, 255));
        assert_eq!(valid_range(40, 4, &[]).unwrap(), TruncRange::new(0, 40));
        assert_eq!(valid_range(800, 4, &[]).unwrap(), TruncRange::new(35, 255));
        assert_eq!(
            valid_range(800, 4, &[35, 255]).unwrap(),
            TruncRange::new(255, 255)
        );
        assert_eq!(valid_range(34, 2, &[]).unwrap(), TruncRange::new(0, 17));
        assert!(valid_range(40, 4, &[1, 2, 3]).is_err());
        assert!(valid_range(40, 4, &[41]).is_err());
    }

    #[test]
    fn truncate_examples() {
        let raw = single(2, [0.3, 0.0, 0.0], [-2.0; 3], [0.0; 3]);
        let pmf = channel_pmf(&MixtureParams::new(&raw), 0, &[]);
        let same = truncate(&pmf, TruncRange::FULL);
        for (a, b) in pmf.iter().zip(&same) {
            assert!((a - b).abs() < 1e-15);
        }
        let point = truncate(&pmf, TruncRange::new(5, 5));
        assert_eq!(point[5], 1.0);
        assert_eq!(point.iter().sum::<f64>(), 1.0);
        let table = coding_table(&MixtureParams::new(&raw), 0, &[], TruncRange::new(5, 5));
        assert_eq!(table.cost_bits(0), 0.0);

        let uni = truncate(&[1.0 / 256.0; 256], TruncRange::new(0, 127));
        assert!(uni[..128].iter().all(|&p| (p - 1.0 / 128.0).abs() < 1e-15));
        assert!(uni[128..].iter().all(|&p| p == 0.0));

        // far tail underflows to uniform
        let tiny = single(1, [-1.0, 0.0, 0.0], [MIN_LOG_SCALE; 3], [0.0; 3]);
        let pmf = channel_pmf(&MixtureParams::new(&tiny), 0, &[]);
        let t = truncate(&pmf, TruncRange::new(250, 253));
        assert!(t[250..=253].iter().all(|&p| (p - 0.25).abs() < 1e-12));
    }

    #[test]
    fn nll_limits() {
        let sharp = single(
            10,
            [to_domain(77.0), to_domain(3.0), to_domain(250.0)],
            [MIN_LOG_SCALE; 3],
            [0.0; 3],
        );
        let v = nll(&MixtureParams::new(&sharp), [77, 3, 250], None);
        assert!(v < 0.2, "{v}");
        // evenly spaced components approximate the uniform distribution
        let mut flat = single(10, [0.0; 3], [(6.0f64 / 127.5).ln(); 3], [0.0; 3]);
        for i in 0..10 {
            for ch in 0..3 {
                flat[(3 + ch) * 10 + i] = to_domain(12.75 + 25.5 * i as f64);
            }
        }
        let p = MixtureParams::new(&flat);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut total = 0.0;
        for _ in 0..3000 {
            let t = [rng.gen(), rng.gen(), rng.gen()];
            total += nll(&p, t, None) / 3.0;
        }
        let total = total / 10.0;
        assert!((total / 300.0 - 8.0).abs() < 0.05, "{}", total / 300.0);
    }

    #[test]
    fn truncation_never_hurts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let raw = random_params(&mut rng, 4);
            let p = MixtureParams::new(&raw);
            let t: [u8; 3] = [rng.gen(), rng.gen(), rng.gen()];
            let ranges = t.map(|v| {
                let lo = v.saturating_sub(rng.gen_range(0..60));
                let hi = v.saturating_add(rng.gen_range(0..60));
                TruncRange::new(lo, hi)
            });
            assert!(nll(&p, t, Some(ranges)) <= nll(&p, t, None) + 1e-12);
        }
    }

    fn fd_check(raw: &[f64], target: [u8; 3], ranges: Option<[TruncRange; 3]>) -> f64 {
        let (_, g) = nll_grad(&MixtureParams::new(raw), target, ranges);
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for i in 0..raw.len() {
            let mut plus = raw.to_vec();
            let mut minus = raw.to_vec();
            plus[i] += h;
            minus[i] -= h;
            let fd = (nll(&MixtureParams::new(&plus), target, ranges)
                - nll(&MixtureParams::new(&minus), target, ranges))
                / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-5);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for trial in 0..60 {
            let raw = random_params(&mut rng, 10);
            let t: [u8; 3] = match trial % 4 {
                0 => [0, 255, rng.gen()],
                _ => [rng.gen(), rng.gen(), rng.gen()],
            };
            let ranges = (trial % 2 == 1)
                .then(|| t.map(|v| TruncRange::new(v.saturating_sub(30), v.saturating_add(9))));
            let err = fd_check(&raw, t, ranges);
            assert!(err < 1e-4, "trial {trial}: {err}");
        }
    }

    #[test]
    fn sampling() {
        let raw = single(2, [0.2, -0.1, 0.5], [-2.5; 3], [0.3, 0.1, -0.2]);
        let p = MixtureParams::new(&raw);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            assert_eq!(sample(&p, 0, &[], TruncRange::new(5, 5), &mut rng), 5);
        }
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| sample(&p, 1, &[60], TruncRange::FULL, &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(1), draw(1));

        // empirical histogram within 3σ (plus slack) of the pmf
        let n = 100_000;
        let pmf = channel_pmf(&p, 2, &[10, 200]);
        let mut hist = vec![0usize; 256];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..n {
            hist[sample(&p, 2, &[10, 200], TruncRange::FULL, &mut rng) as usize] += 1;
        }
        for x in 0..256 {
            let expect = pmf[x] * n as f64;
            let sd = (n as f64 * pmf[x] * (1.0 - pmf[x])).sqrt();
            assert!(
                (hist[x] as f64 - expect).abs() <= 3.0 * sd + 2.0,
                "x={x}: {} vs {expect}",
                hist[x]
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gradient_property(seed in any::<u64>(), k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw = random_params(&mut rng, k);
            let t: [u8; 3] = [rng.gen(), rng.gen(), rng.gen()];
            prop_assert!(fd_check(&raw, t, None) < 1e-4);
        }

        #[test]
        fn coding_table_covers_range(seed in any::<u64>(), lo in 0u8..=255, width in 0u8..=255) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw = random_params(&mut rng, 3);
            let hi = lo.saturating_add(width);
            let range = TruncRange::new(lo, hi);
            let table = coding_table(&MixtureParams::new(&raw), 2, &[3, 250], range);
            prop_assert_eq!(table.size(), range.len());
            prop_assert_eq!(*table.cdf().last().unwrap(), 65536);
        }

        #[test]
        fn range_pmf_matches_bin_prob(
            seed in any::<u64>(),
            k in 1usize..5,
            lo in 0u8..=255,
            width in 0u8..=255,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut raw = vec![0.0; 12 * k];
            for i in 0..k {
                raw[i] = rng.gen_range(-2.0..2.0);
                raw[3 * k + i] = rng.gen_range(-1.5..1.5);
                raw[6 * k + i] = rng.gen_range(-7.5..2.0);
            }
            let range = TruncRange::new(lo, lo.saturating_add(width));
            let pmf = range_pmf(&MixtureParams::new(&raw), 0, &[], range);
            let lse = log_sum_exp(&raw[..k]);
            for (i, &p) in pmf.iter().enumerate() {
                let x = range.lo + i as u8;
                let expect: f64 = (0..k)
                    .map(|j| {
                        let s = raw[6 * k + j].clamp(MIN_LOG_SCALE, MAX_LOG_SCALE).exp() * 127.5;
                        (raw[j] - lse).exp() * bin_prob((raw[3 * k + j] + 1.0) * 127.5, s, x)
                    })
                    .sum();
                prop_assert!((p - expect).abs() <= 1e-12 + 1e-9 * expect, "x={x}: {p} vs {expect}");
            }
        }
    }
}
