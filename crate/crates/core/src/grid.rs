//! Dense multi-channel grids and the resampling primitives shared by every
//! other module.
//!
//! Pixels are addressed as `(row, col)` with rows increasing downward. Storage
//! is row-major with channels interleaved, so the value of channel `c` at
//! `(row, col)` lives at `(row * width + col) * channels + c`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        check_shape(height, width, channels)?;
        Ok(Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        })
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_shape(height, width, channels)?;
        if data.len() != height * width * channels {
            return Err(Error::dim(format!(
                "buffer of {} values cannot hold {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image by evaluating `f(row, col, channel)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        check_shape(height, width, channels)?;
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    /// Sample with clamp-to-edge addressing for signed coordinates.
    #[inline]
    pub fn get_clamped(&self, row: isize, col: isize, ch: usize) -> f64 {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.get(r, c, ch)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Extracts a single channel as a one-channel image.
    pub fn channel(&self, ch: usize) -> Result<Image> {
        if ch >= self.channels {
            return Err(Error::param(format!(
                "channel {ch} out of range for {}-channel image",
                self.channels
            )));
        }
        Image::from_fn(self.height, self.width, 1, |r, c, _| self.get(r, c, ch))
    }

    /// Luminance-style average over channels.
    pub fn to_gray(&self) -> Image {
        let n = self.channels as f64;
        Image::from_fn(self.height, self.width, 1, |r, c, _| {
            (0..self.channels).map(|ch| self.get(r, c, ch)).sum::<f64>() / n
        })
        .expect("shape already validated")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copy of the `height x width` window whose top-left corner is `(row0, col0)`.
    pub fn crop(&self, row0: usize, col0: usize, height: usize, width: usize) -> Result<Image> {
        if row0 + height > self.height || col0 + width > self.width {
            return Err(Error::dim(format!(
                "crop {}x{} at ({row0},{col0}) exceeds {}x{} image",
                height, width, self.height, self.width
            )));
        }
        Image::from_fn(height, width, self.channels, |r, c, ch| {
            self.get(row0 + r, col0 + c, ch)
        })
    }
}

fn check_shape(height: usize, width: usize, channels: usize) -> Result<()> {
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::dim(format!(
            "image dimensions must be positive, got {height}x{width}x{channels}"
        )));
    }
    Ok(())
}

/// One row per output pixel holding its `k x k` neighbourhood, channel-major
/// within the row (all `k*k` offsets of channel 0, then channel 1, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl PatchMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Records how much replicate padding was appended so it can be removed again.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl CropRecord {
    pub fn is_empty(&self) -> bool {
        self.pad_bottom == 0 && self.pad_right == 0
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        if self.is_empty() && img.height() == self.height && img.width() == self.width {
            return Ok(img.clone());
        }
        img.crop(0, 0, self.height, self.width)
    }
}

/// 2x2 mean pooling.
pub fn downsample_half(img: &Image) -> Result<Image> {
    let (h, w, ch) = img.dims();
    if h % 2 != 0 {
        return Err(Error::dim(format!("height {h} is odd; pad before downsampling")));
    }
    if w % 2 != 0 {
        return Err(Error::dim(format!("width {w} is odd; pad before downsampling")));
    }
    Image::from_fn(h / 2, w / 2, ch, |r, c, k| {
        let (r2, c2) = (2 * r, 2 * c);
        0.25 * (img.get(r2, c2, k)
            + img.get(r2, c2 + 1, k)
            + img.get(r2 + 1, c2, k)
            + img.get(r2 + 1, c2 + 1, k))
    })
}

/// Nearest-neighbour 2x upsampling: every pixel becomes a 2x2 block.
pub fn upsample_nn_2x(img: &Image) -> Image {
    let (h, w, ch) = img.dims();
    Image::from_fn(2 * h, 2 * w, ch, |r, c, k| img.get(r / 2, c / 2, k))
        .expect("doubling a valid shape stays valid")
}

pub fn im2col(img: &Image, k: usize) -> Result<PatchMatrix> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::param(format!("kernel size must be odd and >= 1, got {k}")));
    }
    let (h, w, ch) = img.dims();
    let r = (k / 2) as isize;
    let kk = k * k;
    let cols = kk * ch;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let src = img.data();
    let mut data = vec![0.0; h * w * cols];
    let mut col_idx = vec![0usize; k];
    for row in 0..h {
        let row_idx: Vec<usize> = (-r..=r).map(|dr| clamp(row as isize + dr, h) * w).collect();
        for col in 0..w {
            for (j, dc) in (-r..=r).enumerate() {
                col_idx[j] = clamp(col as isize + dc, w);
            }
            let out = &mut data[(row * w + col) * cols..(row * w + col + 1) * cols];
            for c in 0..ch {
                let seg = &mut out[c * kk..(c + 1) * kk];
                for (i, &ro) in row_idx.iter().enumerate() {
                    for (j, &co) in col_idx.iter().enumerate() {
                        seg[i * k + j] = src[(ro + co) * ch + c];
                    }
                }
            }
        }
    }
    Ok(PatchMatrix {
        rows: h * w,
        cols,
        data,
    })
}

/// Replicate-pads the bottom and right edges up to the next multiple of `m`.
pub fn pad_to_multiple(img: &Image, m: usize) -> Result<(Image, CropRecord)> {
    if m == 0 {
        return Err(Error::param("padding multiple must be >= 1"));
    }
    let (h, w, ch) = img.dims();
    let ph = h.div_ceil(m) * m;
    let pw = w.div_ceil(m) * m;
    let record = CropRecord {
        height: h,
        width: w,
        pad_bottom: ph - h,
        pad_right: pw - w,
    };
    if record.is_empty() {
        return Ok((img.clone(), record));
    }
    let padded = Image::from_fn(ph, pw, ch, |r, c, k| img.get(r.min(h - 1), c.min(w - 1), k))?;
    Ok((padded, record))
}

/// Level 0 of the returned list is full resolution; level `l` is
/// `downsample_half` applied `l` times.
pub fn build_pyramid(img: &Image, levels: usize) -> Result<Vec<Image>> {
    if levels == 0 {
        return Err(Error::param("pyramid needs at least one level"));
    }
    let factor = 1usize << (levels - 1);
    if img.height() % factor != 0 || img.width() % factor != 0 {
        return Err(Error::dim(format!(
            "{}x{} image is not divisible by {factor} for a {levels}-level pyramid",
            img.height(),
            img.width()
        )));
    }
    let mut out = Vec::with_capacity(levels);
    out.push(img.clone());
    for _ in 1..levels {
        let next = downsample_half(out.last().expect("non-empty"))?;
        out.push(next);
    }
    Ok(out)
}

/// Horizontal mirror of every channel.
pub fn flip_horizontal(img: &Image) -> Image {
    let w = img.width();
    Image::from_fn(img.height(), w, img.channels(), |r, c, k| img.get(r, w - 1 - c, k))
        .expect("same shape")
}

pub fn flip_vertical(img: &Image) -> Image {
    let h = img.height();
    Image::from_fn(h, img.width(), img.channels(), |r, c, k| img.get(h - 1 - r, c, k))
        .expect("same shape")
}

/// Rotation by 90 degrees counter-clockwise; output is `width x height`.
pub fn rotate90(img: &Image) -> Image {
    let (h, w, ch) = img.dims();
    Image::from_fn(w, h, ch, |r, c, k| img.get(c, w - 1 - r, k)).expect("same area")
}
