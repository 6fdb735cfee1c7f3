//! Exact integer average-pooling pyramid.
//!
//! Block averages are kept in quarter-units (`4·y`) so that pooling,
//! rounding and the free-pixel identity never touch floating point. Border
//! blocks of odd-sized images average only the pixels that exist, which is
//! what repeat-padding the last row or column before pooling amounts to.

use crate::{Error, Result};

/// Default number of super-resolution levels.
pub const DEFAULT_LEVELS: usize = 3;
/// Upper bound on pyramid depth.
pub const MAX_LEVELS: usize = 8;

/// 8-bit RGB raster, row-major, channel-interleaved.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image({}x{})", self.width, self.height)
    }
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Format(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Format(format!(
                "image data has {} bytes, expected {}",
                data.len(),
                width * height * 3
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        assert!(width > 0 && height > 0);
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Image { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.data[(row * self.width + col) * 3 + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: u8) {
        self.data[(row * self.width + col) * 3 + ch] = v;
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Copy of the `w`×`h` window whose top-left corner is at (`row`, `col`).
    pub fn crop(&self, row: usize, col: usize, w: usize, h: usize) -> Image {
        assert!(row + h <= self.height && col + w <= self.width && w > 0 && h > 0);
        let mut data = Vec::with_capacity(w * h * 3);
        for r in row..row + h {
            let o = (r * self.width + col) * 3;
            data.extend_from_slice(&self.data[o..o + w * 3]);
        }
        Image {
            width: w,
            height: h,
            data,
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                let src = self.pixel(r, self.width - 1 - c);
                for (ch, v) in src.into_iter().enumerate() {
                    out.set(r, c, ch, v);
                }
            }
        }
        out
    }
}

/// Exact block averages of a parent image, in quarter-units.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AveragePlane {
    width: usize,
    height: usize,
    /// Dimensions of the image that was pooled.
    parent_width: usize,
    parent_height: usize,
    data_q: Vec<u16>,
}

impl AveragePlane {
    /// Rebuilds block averages from a rounded low-resolution image and its
    /// residuals: `avgQ = 4·low + r`.
    pub fn from_parts(
        low: &Image,
        residual: &ResidualPlane,
        parent_width: usize,
        parent_height: usize,
    ) -> Result<Self> {
        if low.width() != residual.width
            || low.height() != residual.height
            || low.width() != parent_width.div_ceil(2)
            || low.height() != parent_height.div_ceil(2)
        {
            return Err(Error::Format("residual plane does not match image".into()));
        }
        let mut data_q = Vec::with_capacity(low.data().len());
        for (i, (&x, &code)) in low.data().iter().zip(&residual.codes).enumerate() {
            let q = 4 * x as i32 + residual_from_code(code) as i32;
            let pixel = i / 3;
            let geom = block_geometry(
                low.width(),
                low.height(),
                parent_width,
                parent_height,
                pixel / low.width(),
                pixel % low.width(),
            );
            // p·q/4 must be a whole pixel sum inside [0, 255·p].
            let p = geom.count() as i32;
            if !(0..=1020).contains(&q) || (p * q) % 4 != 0 {
                return Err(Error::Integrity(format!(
                    "block average {q}/4 impossible for a block of {p} pixels"
                )));
            }
            data_q.push(q as u16);
        }
        Ok(AveragePlane {
            width: low.width(),
            height: low.height(),
            parent_width,
            parent_height,
            data_q,
        })
    }

    /// Averages with a zero residual everywhere (`avgQ = 4·low`).
    pub fn from_image(low: &Image, parent_width: usize, parent_height: usize) -> Self {
        assert_eq!(low.width(), parent_width.div_ceil(2));
        assert_eq!(low.height(), parent_height.div_ceil(2));
        AveragePlane {
            width: low.width(),
            height: low.height(),
            parent_width,
            parent_height,
            data_q: low.data().iter().map(|&x| 4 * x as u16).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn parent_width(&self) -> usize {
        self.parent_width
    }

    pub fn parent_height(&self) -> usize {
        self.parent_height
    }

    pub fn data_q(&self) -> &[u16] {
        &self.data_q
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> u16 {
        self.data_q[(row * self.width + col) * 3 + ch]
    }

    pub fn geometry(&self, row: usize, col: usize) -> BlockGeometry {
        block_geometry(
            self.width,
            self.height,
            self.parent_width,
            self.parent_height,
            row,
            col,
        )
    }
}

/// Per-subpixel rounding residuals as 2-bit codes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResidualPlane {
    width: usize,
    height: usize,
    codes: Vec<u8>,
}

impl ResidualPlane {
    pub fn new(width: usize, height: usize, codes: Vec<u8>) -> Result<Self> {
        if codes.len() != width * height * 3 || codes.iter().any(|&c| c > 3) {
            return Err(Error::Format("bad residual plane".into()));
        }
        Ok(ResidualPlane { width, height, codes })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }
}

/// Maps a residual in quarter-units to its 2-bit code.
#[inline]
pub fn residual_code(r: i8) -> u8 {
    match r {
        0 => 0,
        1 => 1,
        2 => 2,
        -1 => 3,
        _ => panic!("residual {r} outside {{-1,0,1,2}}"),
    }
}

#[inline]
pub fn residual_from_code(code: u8) -> i8 {
    match code & 3 {
        0 => 0,
        1 => 1,
        2 => 2,
        _ => -1,
    }
}

/// Rounds a quarter-unit average to the nearest integer, ties downward:
/// `x = ceil(y − 1/2)`, so `4y − 4x ∈ {−1, 0, 1, 2}`.
#[inline]
pub fn round_half_down(q: u16) -> u8 {
    debug_assert!(q <= 1020);
    ((q as u32 + 1) / 4) as u8
}

/// Position of a high-resolution pixel inside its 2×2 block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockPos {
    TopLeft = 0,
    TopRight = 1,
    BottomLeft = 2,
    BottomRight = 3,
}

impl BlockPos {
    pub const ALL: [BlockPos; 4] = [
        BlockPos::TopLeft,
        BlockPos::TopRight,
        BlockPos::BottomLeft,
        BlockPos::BottomRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// (row, col) offset within the block.
    pub fn offset(self) -> (usize, usize) {
        let i = self as usize;
        (i / 2, i % 2)
    }
}

/// Which high-resolution pixels a low-resolution block covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGeometry {
    pub row: usize,
    pub col: usize,
    present: [bool; 4],
}

impl BlockGeometry {
    pub fn count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    pub fn is_present(&self, pos: BlockPos) -> bool {
        self.present[pos.index()]
    }

    /// Present positions in coding order TL → TR → BL → BR.
    pub fn positions(&self) -> impl Iterator<Item = BlockPos> + '_ {
        BlockPos::ALL.into_iter().filter(|p| self.present[p.index()])
    }

    /// The last present position, recovered from the block sum.
    pub fn free(&self) -> BlockPos {
        self.positions()
            .last()
            .expect("block always covers its top-left pixel")
    }

    /// Whether `pos` is entropy coded (present and not the free pixel).
    pub fn is_coded(&self, pos: BlockPos) -> bool {
        self.is_present(pos) && pos != self.free()
    }

    /// Present positions that precede `pos` in coding order.
    pub fn before(&self, pos: BlockPos) -> impl Iterator<Item = BlockPos> + '_ {
        self.positions().filter(move |p| *p < pos)
    }

    /// High-resolution (row, col) of a position.
    pub fn pixel(&self, pos: BlockPos) -> (usize, usize) {
        let (dr, dc) = pos.offset();
        (2 * self.row + dr, 2 * self.col + dc)
    }
}

pub fn block_geometry(
    low_w: usize,
    low_h: usize,
    orig_w: usize,
    orig_h: usize,
    row: usize,
    col: usize,
) -> BlockGeometry {
    debug_assert!(row < low_h && col < low_w);
    let right = 2 * col + 1 < orig_w;
    let below = 2 * row + 1 < orig_h;
    BlockGeometry {
        row,
        col,
        present: [true, right, below, right && below],
    }
}

/// Pools one level: exact averages, their half-down rounding and residuals.
pub fn downsample(image: &Image) -> (Image, ResidualPlane, AveragePlane) {
    let (w, h) = (image.width(), image.height());
    let (lw, lh) = (w.div_ceil(2), h.div_ceil(2));
    let mut low = Vec::with_capacity(lw * lh * 3);
    let mut codes = Vec::with_capacity(lw * lh * 3);
    let mut data_q = Vec::with_capacity(lw * lh * 3);
    for row in 0..lh {
        for col in 0..lw {
            let geom = block_geometry(lw, lh, w, h, row, col);
            let p = geom.count() as u32;
            for ch in 0..3 {
                let sum: u32 = geom
                    .positions()
                    .map(|pos| {
                        let (r, c) = geom.pixel(pos);
                        image.get(r, c, ch) as u32
                    })
                    .sum();
                // 4·sum/p is integral for p ∈ {1, 2, 4}.
                let q = (4 * sum / p) as u16;
                let x = round_half_down(q);
                let r = q as i32 - 4 * x as i32;
                data_q.push(q);
                low.push(x);
                codes.push(residual_code(r as i8));
            }
        }
    }
    (
        Image {
            width: lw,
            height: lh,
            data: low,
        },
        ResidualPlane {
            width: lw,
            height: lh,
            codes,
        },
        AveragePlane {
            width: lw,
            height: lh,
            parent_width: w,
            parent_height: h,
            data_q,
        },
    )
}

/// Recovers the last pixel of a block from its quarter-unit average and the
/// `p − 1` pixels decoded before it.
pub fn free_pixel(avg_q: u16, p: usize, decoded: &[u8]) -> Result<u8> {
    if decoded.len() + 1 != p {
        return Err(Error::Integrity(format!(
            "free pixel needs {} decoded values, got {}",
            p - 1,
            decoded.len()
        )));
    }
    let scaled = p as i32 * avg_q as i32;
    if scaled % 4 != 0 {
        return Err(Error::Integrity(format!(
            "average {avg_q}/4 is not a whole sum for {p} pixels"
        )));
    }
    let rest = scaled / 4 - decoded.iter().map(|&v| v as i32).sum::<i32>();
    u8::try_from(rest).map_err(|_| Error::Integrity(format!("free pixel {rest} outside [0, 255]")))
}

/// All levels of the pooling pyramid of one image.
#[derive(Clone, Debug)]
pub struct Pyramid {
    /// `levels[l]` is x^(l); `levels[0]` is the input.
    pub levels: Vec<Image>,
    /// `averages[l]` is y^(l+1), the pooled averages of `levels[l]`.
    pub averages: Vec<AveragePlane>,
    /// `residuals[l]` is r^(l+1).
    pub residuals: Vec<ResidualPlane>,
}

impl Pyramid {
    pub fn depth(&self) -> usize {
        self.averages.len()
    }

    pub fn base(&self) -> &Image {
        self.levels.last().unwrap()
    }
}

pub fn build_pyramid(image: &Image, levels: usize) -> Pyramid {
    let mut pyr = Pyramid {
        levels: vec![image.clone()],
        averages: Vec::with_capacity(levels),
        residuals: Vec::with_capacity(levels),
    };
    for _ in 0..levels {
        let (low, res, avg) = downsample(pyr.levels.last().unwrap());
        pyr.levels.push(low);
        pyr.averages.push(avg);
        pyr.residuals.push(res);
    }
    pyr
}
