//! Light-field video container and epipolar-plane slicing.
//!
//! Samples are stored densely in the canonical order `(t, u, v, y, x, c)`,
//! row-major. `u`/`v` are the horizontal/vertical angular coordinates and
//! `x`/`y` the spatial ones, so the gradient image written `S_H(x, u, y)`
//! elsewhere in the literature is addressed here as `[u][y][x]`.

mod io;
mod synth;

pub use io::{load_lightfield, save_lightfield, StorageFormat};
pub use synth::{generate_synthetic, Background, GroundTruth, Layer, SceneSpec, Texture};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LfDims {
    pub t: usize,
    pub u: usize,
    pub v: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl LfDims {
    pub fn new(t: usize, u: usize, v: usize, h: usize, w: usize, c: usize) -> Self {
        Self { t, u, v, h, w, c }
    }

    pub fn len(&self) -> usize {
        self.t * self.u * self.v * self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if [self.t, self.u, self.v, self.h, self.w, self.c].contains(&0) {
            return Err(Error::Shape(format!(
                "all dimensions must be >= 1, got {self:?}"
            )));
        }
        if self.c != 1 && self.c != 3 {
            return Err(Error::Shape(format!(
                "channel count must be 1 or 3, got {}",
                self.c
            )));
        }
        Ok(())
    }

    /// Center angular indices `(⌊U/2⌋, ⌊V/2⌋)`.
    pub fn center(&self) -> (usize, usize) {
        (self.u / 2, self.v / 2)
    }

    #[inline]
    pub fn offset(&self, t: usize, u: usize, v: usize, y: usize, x: usize, c: usize) -> usize {
        ((((t * self.u + u) * self.v + v) * self.h + y) * self.w + x) * self.c + c
    }

    /// Number of samples in one `(t, u, v)` view.
    pub fn view_len(&self) -> usize {
        self.h * self.w * self.c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LightFieldVideo {
    dims: LfDims,
    samples: Vec<f64>,
    pub frame_rate_hz: f64,
}

impl LightFieldVideo {
    pub fn new(dims: LfDims, samples: Vec<f64>, frame_rate_hz: f64) -> Result<Self> {
        dims.validate()?;
        if samples.len() != dims.len() {
            return Err(Error::Shape(format!(
                "expected {} samples for {dims:?}, got {}",
                dims.len(),
                samples.len()
            )));
        }
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(Error::Invalid(format!(
                "frame rate must be positive, got {frame_rate_hz}"
            )));
        }
        let lf = Self {
            dims,
            samples,
            frame_rate_hz,
        };
        lf.check_samples()?;
        Ok(lf)
    }

    pub fn constant(dims: LfDims, value: f64) -> Result<Self> {
        Self::new(dims, vec![value; dims.len()], 25.0)
    }

    fn check_samples(&self) -> Result<()> {
        if let Some(i) = self
            .samples
            .iter()
            .position(|s| !s.is_finite() || !(0.0..=1.0).contains(s))
        {
            let (t, u, v, y, x, c) = self.unravel(i);
            let what = if self.samples[i].is_finite() {
                "outside [0,1]"
            } else {
                "non-finite"
            };
            return Err(Error::NonFinite(format!(
                "sample (t={t}, u={u}, v={v}, y={y}, x={x}, c={c}) is {what}: {}",
                self.samples[i]
            )));
        }
        Ok(())
    }

    pub(crate) fn unravel(&self, mut i: usize) -> (usize, usize, usize, usize, usize, usize) {
        let d = &self.dims;
        let c = i % d.c;
        i /= d.c;
        let x = i % d.w;
        i /= d.w;
        let y = i % d.h;
        i /= d.h;
        let v = i % d.v;
        i /= d.v;
        let u = i % d.u;
        (i / d.u, u, v, y, x, c)
    }

    pub fn dims(&self) -> LfDims {
        self.dims
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    #[inline]
    pub fn get(&self, t: usize, u: usize, v: usize, y: usize, x: usize, c: usize) -> f64 {
        self.samples[self.dims.offset(t, u, v, y, x, c)]
    }

    /// One `(t, u, v)` view as a contiguous `(y, x, c)` slice.
    pub fn view(&self, t: usize, u: usize, v: usize) -> &[f64] {
        let start = self.dims.offset(t, u, v, 0, 0, 0);
        &self.samples[start..start + self.dims.view_len()]
    }

    /// Multiplies every sample by `alpha` (clamped to [0, 1]).
    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        let samples = self
            .samples
            .iter()
            .map(|s| (s * alpha).clamp(0.0, 1.0))
            .collect();
        Self::new(self.dims, samples, self.frame_rate_hz)
    }

    /// Swaps `x <-> y` and `u <-> v`.
    pub fn transposed(&self) -> Self {
        let d = self.dims;
        let td = LfDims::new(d.t, d.v, d.u, d.w, d.h, d.c);
        let mut out = vec![0.0; d.len()];
        for t in 0..d.t {
            for u in 0..d.u {
                for v in 0..d.v {
                    for y in 0..d.h {
                        for x in 0..d.w {
                            for c in 0..d.c {
                                out[td.offset(t, v, u, x, y, c)] = self.get(t, u, v, y, x, c);
                            }
                        }
                    }
                }
            }
        }
        Self {
            dims: td,
            samples: out,
            frame_rate_hz: self.frame_rate_hz,
        }
    }

    fn check_index(&self, name: &str, value: usize, bound: usize) -> Result<()> {
        if value >= bound {
            return Err(Error::Index(format!("{name}={value} not in [0, {bound})")));
        }
        Ok(())
    }

    /// Horizontal EPI `(u, x)` at fixed `(t, v, y, c)`.
    pub fn extract_epi_h(&self, t: usize, v: usize, y: usize, c: usize) -> Result<EpiImage> {
        let d = self.dims;
        self.check_index("t", t, d.t)?;
        self.check_index("v", v, d.v)?;
        self.check_index("y", y, d.h)?;
        self.check_index("c", c, d.c)?;
        let mut values = Vec::with_capacity(d.u * d.w);
        for u in 0..d.u {
            for x in 0..d.w {
                values.push(self.get(t, u, v, y, x, c));
            }
        }
        Ok(EpiImage {
            kind: EpiKind::Horizontal,
            rows: d.u,
            cols: d.w,
            values,
            fixed: [t, v, y, c],
        })
    }

    /// Vertical EPI `(v, y)` at fixed `(t, u, x, c)`.
    pub fn extract_epi_v(&self, t: usize, u: usize, x: usize, c: usize) -> Result<EpiImage> {
        let d = self.dims;
        self.check_index("t", t, d.t)?;
        self.check_index("u", u, d.u)?;
        self.check_index("x", x, d.w)?;
        self.check_index("c", c, d.c)?;
        let mut values = Vec::with_capacity(d.v * d.h);
        for v in 0..d.v {
            for y in 0..d.h {
                values.push(self.get(t, u, v, y, x, c));
            }
        }
        Ok(EpiImage {
            kind: EpiKind::Vertical,
            rows: d.v,
            cols: d.h,
            values,
            fixed: [t, u, x, c],
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpiKind {
    Horizontal,
    Vertical,
}

/// A 2-D epipolar-plane slice. Horizontal EPIs are `(u, x)` with fixed
/// `(t, v, y, c)`; vertical EPIs are `(v, y)` with fixed `(t, u, x, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpiImage {
    pub kind: EpiKind,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub fixed: [usize; 4],
}

impl EpiImage {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }
}
