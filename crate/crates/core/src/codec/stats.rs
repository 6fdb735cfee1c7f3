use std::fmt;

use super::container::{Container, CHECKSUM_LEN, HEADER_LEN};

/// Bits of the width and height fields.
const METADATA_BITS: u64 = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct StatsRow {
    pub label: String,
    pub bits: u64,
}

/// Where the bits of a compressed file go. Rows add up to the file size.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsReport {
    pub width: usize,
    pub height: usize,
    pub rows: Vec<StatsRow>,
}

impl StatsReport {
    pub fn from_container(c: &Container) -> Self {
        let levels = c.levels as usize;
        let mut rounding = 0u64;
        let mut padding = 0u64;
        for l in 0..levels {
            let (w, h) = c.level_dims(l + 1);
            let bits = 6 * (w * h) as u64;
            rounding += bits;
            padding += 8 * c.residuals[l].len() as u64 - bits;
        }
        let framing = HEADER_LEN + 2 * 4 * levels + CHECKSUM_LEN;
        let mut rows = vec![
            StatsRow {
                label: "raw base".into(),
                bits: 8 * c.base.len() as u64,
            },
            StatsRow {
                label: "rounding".into(),
                bits: rounding,
            },
        ];
        for l in (0..levels).rev() {
            rows.push(StatsRow {
                label: format!("level {l} stream"),
                bits: 8 * c.streams[l].len() as u64,
            });
        }
        rows.push(StatsRow {
            label: "metadata".into(),
            bits: METADATA_BITS,
        });
        rows.push(StatsRow {
            label: "header".into(),
            bits: 8 * framing as u64 - METADATA_BITS + padding,
        });
        StatsReport {
            width: c.width as usize,
            height: c.height as usize,
            rows,
        }
    }

    pub fn bpsp(&self, bits: u64) -> f64 {
        bits as f64 / (3 * self.width * self.height) as f64
    }

    pub fn total_bits(&self) -> u64 {
        self.rows.iter().map(|r| r.bits).sum()
    }

    pub fn total_bpsp(&self) -> f64 {
        self.bpsp(self.total_bits())
    }

    /// Bits per subpixel of the row called `label`.
    pub fn row(&self, label: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.label == label)
            .map(|r| self.bpsp(r.bits))
    }
}

impl fmt::Display for StatsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}x{} image, {} subpixels",
            self.width,
            self.height,
            3 * self.width * self.height
        )?;
        writeln!(f, "{:<16} {:>12} {:>10}", "section", "bits", "bpsp")?;
        for r in &self.rows {
            writeln!(f, "{:<16} {:>12} {:>10.5}", r.label, r.bits, self.bpsp(r.bits))?;
        }
        write!(
            f,
            "{:<16} {:>12} {:>10.5}",
            "total",
            self.total_bits(),
            self.total_bpsp()
        )
    }
}
