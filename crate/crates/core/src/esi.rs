//! Angular EPI gradients and the epipolar structure image (ESI).
//!
//! The horizontal gradient image holds, for every horizontal EPI at the
//! fixed vertical view `v_fixed`, the angular central difference
//! `(L(u + d) − L(u − d)) / 2d`, stored as `[u][y][x]`. Rows `u < d` and
//! `u > U − 1 − d` have no neighbour on one side and are exactly zero. The
//! vertical image mirrors this over `v` at fixed `u_fixed`.
//!
//! The ESI amplitude is `sqrt(gh[u_sel]² + gv[v_sel]²)`; the ablation
//! variants reduce `|gh|`/`|gv|` over the interior angular range first.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use image::{ImageBuffer, Luma};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lf::LightFieldVideo;

/// Which samples feed the gradient: a single stored channel or Rec.601 luma.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelSource {
    Channel(usize),
    Luma,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ChannelPolicy {
    #[default]
    Luma,
    PerChannel,
}

impl FromStr for ChannelPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "luma" => Ok(Self::Luma),
            "per_channel" => Ok(Self::PerChannel),
            _ => Err(Error::Config(format!(
                "unknown channel policy {s:?} (luma|per_channel)"
            ))),
        }
    }
}

impl fmt::Display for ChannelPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Luma => "luma",
            Self::PerChannel => "per_channel",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EsiVariant {
    #[default]
    Esi,
    Max,
    Mean,
    Sum,
    HOnly,
    VOnly,
}

impl FromStr for EsiVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "esi" => Ok(Self::Esi),
            "max" => Ok(Self::Max),
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            "h_only" => Ok(Self::HOnly),
            "v_only" => Ok(Self::VOnly),
            _ => Err(Error::Config(format!(
                "unknown ESI variant {s:?} (esi|max|mean|sum|h_only|v_only)"
            ))),
        }
    }
}

impl fmt::Display for EsiVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Esi => "esi",
            Self::Max => "max",
            Self::Mean => "mean",
            Self::Sum => "sum",
            Self::HOnly => "h_only",
            Self::VOnly => "v_only",
        })
    }
}

/// Angular gradient over one angular axis, `[a][y][x]` with `a` the varying
/// angular index (`u` for horizontal, `v` for vertical).
#[derive(Clone, Debug, PartialEq)]
pub struct GradientImage {
    pub values: Vec<f64>,
    pub angular: usize,
    pub height: usize,
    pub width: usize,
    pub step: usize,
    /// The orthogonal angular index held fixed.
    pub fixed_view: usize,
}

pub type GradientImageH = GradientImage;
pub type GradientImageV = GradientImage;

impl GradientImage {
    pub fn slice(&self, a: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[a * n..(a + 1) * n]
    }

    pub fn at(&self, a: usize, y: usize, x: usize) -> f64 {
        self.values[(a * self.height + y) * self.width + x]
    }

    fn interior(&self) -> std::ops::RangeInclusive<usize> {
        self.step..=self.angular - 1 - self.step
    }
}

fn sample(
    lf: &LightFieldVideo,
    src: ChannelSource,
    t: usize,
    u: usize,
    v: usize,
    y: usize,
    x: usize,
) -> f64 {
    match src {
        ChannelSource::Channel(c) => lf.get(t, u, v, y, x, c),
        ChannelSource::Luma => {
            if lf.dims().c == 1 {
                lf.get(t, u, v, y, x, 0)
            } else {
                0.299 * lf.get(t, u, v, y, x, 0)
                    + 0.587 * lf.get(t, u, v, y, x, 1)
                    + 0.114 * lf.get(t, u, v, y, x, 2)
            }
        }
    }
}

fn check_gradient_args(
    lf: &LightFieldVideo,
    t: usize,
    src: ChannelSource,
    d: usize,
    n_ang: usize,
    fixed: usize,
    n_fixed: usize,
) -> Result<()> {
    let dims = lf.dims();
    if d == 0 {
        return Err(Error::Invalid("angular step d must be >= 1".into()));
    }
    if n_ang < 2 * d + 1 {
        return Err(Error::Shape(format!(
            "angular size {n_ang} is too small for step {d} (need >= {})",
            2 * d + 1
        )));
    }
    if t >= dims.t {
        return Err(Error::Index(format!("t={t} not in [0, {})", dims.t)));
    }
    if fixed >= n_fixed {
        return Err(Error::Index(format!(
            "fixed view {fixed} not in [0, {n_fixed})"
        )));
    }
    if let ChannelSource::Channel(c) = src {
        if c >= dims.c {
            return Err(Error::Index(format!("c={c} not in [0, {})", dims.c)));
        }
    }
    Ok(())
}

/// Horizontal angular gradient of frame `t` at fixed vertical view `v_fixed`.
pub fn gradient_h(
    lf: &LightFieldVideo,
    t: usize,
    c: usize,
    d: usize,
    v_fixed: usize,
) -> Result<GradientImageH> {
    gradient_h_from(lf, t, ChannelSource::Channel(c), d, v_fixed)
}

/// Vertical angular gradient of frame `t` at fixed horizontal view `u_fixed`.
pub fn gradient_v(
    lf: &LightFieldVideo,
    t: usize,
    c: usize,
    d: usize,
    u_fixed: usize,
) -> Result<GradientImageV> {
    gradient_v_from(lf, t, ChannelSource::Channel(c), d, u_fixed)
}

pub fn gradient_h_from(
    lf: &LightFieldVideo,
    t: usize,
    src: ChannelSource,
    d: usize,
    v_fixed: usize,
) -> Result<GradientImageH> {
    let dims = lf.dims();
    check_gradient_args(lf, t, src, d, dims.u, v_fixed, dims.v)?;
    let (h, w) = (dims.h, dims.w);
    let denom = 2.0 * d as f64;
    let mut values = vec![0.0; dims.u * h * w];
    for u in d..dims.u - d {
        for y in 0..h {
            for x in 0..w {
                let fwd = sample(lf, src, t, u + d, v_fixed, y, x);
                let back = sample(lf, src, t, u - d, v_fixed, y, x);
                values[(u * h + y) * w + x] = (fwd - back) / denom;
            }
        }
    }
    Ok(GradientImage {
        values,
        angular: dims.u,
        height: h,
        width: w,
        step: d,
        fixed_view: v_fixed,
    })
}

pub fn gradient_v_from(
    lf: &LightFieldVideo,
    t: usize,
    src: ChannelSource,
    d: usize,
    u_fixed: usize,
) -> Result<GradientImageV> {
    let dims = lf.dims();
    check_gradient_args(lf, t, src, d, dims.v, u_fixed, dims.u)?;
    let (h, w) = (dims.h, dims.w);
    let denom = 2.0 * d as f64;
    let mut values = vec![0.0; dims.v * h * w];
    for v in d..dims.v - d {
        for y in 0..h {
            for x in 0..w {
                let fwd = sample(lf, src, t, u_fixed, v + d, y, x);
                let back = sample(lf, src, t, u_fixed, v - d, y, x);
                values[(v * h + y) * w + x] = (fwd - back) / denom;
            }
        }
    }
    Ok(GradientImage {
        values,
        angular: dims.v,
        height: h,
        width: w,
        step: d,
        fixed_view: u_fixed,
    })
}

/// A single-frame structure image, `channels × height × width` planes.
#[derive(Clone, Debug, PartialEq)]
pub struct EsiFrame {
    pub values: Vec<f64>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub variant: EsiVariant,
    pub t: usize,
    pub step: usize,
    pub u_sel: usize,
    pub v_sel: usize,
}

impl EsiFrame {
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    /// `(min, max, mean)` over all channels.
    pub fn stats(&self) -> (f64, f64, f64) {
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self
            .values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let mean = self.values.iter().sum::<f64>() / self.values.len() as f64;
        (min, max, mean)
    }

    /// Builds a single-channel frame from raw values (used for crops and tests).
    pub fn from_plane(values: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "plane has {} values, expected {height}x{width}",
                values.len()
            )));
        }
        Ok(Self {
            values,
            channels: 1,
            height,
            width,
            variant: EsiVariant::Esi,
            t: 0,
            step: 1,
            u_sel: 0,
            v_sel: 0,
        })
    }
}

fn check_pair(gh: &GradientImageH, gv: &GradientImageV) -> Result<()> {
    if (gh.height, gh.width) != (gv.height, gv.width) {
        return Err(Error::Shape(format!(
            "gradient spatial dims differ: {}x{} vs {}x{}",
            gh.height, gh.width, gv.height, gv.width
        )));
    }
    Ok(())
}

/// `sqrt(gh[u_sel]² + gv[v_sel]²)` elementwise.
pub fn esi_amplitude(
    gh: &GradientImageH,
    gv: &GradientImageV,
    u_sel: usize,
    v_sel: usize,
) -> Result<EsiFrame> {
    check_pair(gh, gv)?;
    if u_sel >= gh.angular || v_sel >= gv.angular {
        return Err(Error::Index(format!(
            "selection (u={u_sel}, v={v_sel}) outside angular grid {}x{}",
            gh.angular, gv.angular
        )));
    }
    let values = gh
        .slice(u_sel)
        .iter()
        .zip(gv.slice(v_sel))
        .map(|(a, b)| (a * a + b * b).sqrt())
        .collect();
    Ok(EsiFrame {
        values,
        channels: 1,
        height: gh.height,
        width: gh.width,
        variant: EsiVariant::Esi,
        t: 0,
        step: gh.step,
        u_sel,
        v_sel,
    })
}

fn reduce_abs(g: &GradientImage, variant: EsiVariant) -> Vec<f64> {
    let n = g.height * g.width;
    let range = g.interior();
    let count = range.clone().count() as f64;
    (0..n)
        .map(|p| {
            let mut it = range.clone().map(|a| g.values[a * n + p].abs());
            match variant {
                EsiVariant::Max => it.fold(0.0, f64::max),
                EsiVariant::Sum => it.sum(),
                EsiVariant::Mean => it.by_ref().sum::<f64>() / count,
                _ => unreachable!("reduce_abs only handles max/mean/sum"),
            }
        })
        .collect()
}

/// Ablation variants: reductions over the interior angular range, or one
/// direction alone. `Esi` delegates to [`esi_amplitude`] at the centre views.
pub fn esi_variant(
    gh: &GradientImageH,
    gv: &GradientImageV,
    variant: EsiVariant,
) -> Result<EsiFrame> {
    check_pair(gh, gv)?;
    let u_sel = gh.angular / 2;
    let v_sel = gv.angular / 2;
    let values: Vec<f64> = match variant {
        EsiVariant::Esi => return esi_amplitude(gh, gv, u_sel, v_sel),
        EsiVariant::HOnly => gh.slice(u_sel).iter().map(|a| a.abs()).collect(),
        EsiVariant::VOnly => gv.slice(v_sel).iter().map(|b| b.abs()).collect(),
        EsiVariant::Max | EsiVariant::Mean | EsiVariant::Sum => {
            let rh = reduce_abs(gh, variant);
            let rv = reduce_abs(gv, variant);
            rh.iter()
                .zip(&rv)
                .map(|(a, b)| (a * a + b * b).sqrt())
                .collect()
        }
    };
    Ok(EsiFrame {
        values,
        channels: 1,
        height: gh.height,
        width: gh.width,
        variant,
        t: 0,
        step: gh.step,
        u_sel,
        v_sel,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EsiConfig {
    pub step: usize,
    pub variant: EsiVariant,
    pub policy: ChannelPolicy,
}

impl Default for EsiConfig {
    fn default() -> Self {
        Self {
            step: 1,
            variant: EsiVariant::Esi,
            policy: ChannelPolicy::Luma,
        }
    }
}

/// Structure image of one frame using the centre views as fixed anchors.
pub fn esi_frame(lf: &LightFieldVideo, t: usize, cfg: &EsiConfig) -> Result<EsiFrame> {
    let dims = lf.dims();
    let (uc, vc) = dims.center();
    let sources: Vec<ChannelSource> = match (cfg.policy, dims.c) {
        (ChannelPolicy::PerChannel, c) => (0..c).map(ChannelSource::Channel).collect(),
        (ChannelPolicy::Luma, _) => vec![ChannelSource::Luma],
    };
    let mut out: Option<EsiFrame> = None;
    for src in sources {
        let gh = gradient_h_from(lf, t, src, cfg.step, vc)?;
        let gv = gradient_v_from(lf, t, src, cfg.step, uc)?;
        let plane = esi_variant(&gh, &gv, cfg.variant)?;
        match &mut out {
            None => out = Some(plane),
            Some(frame) => {
                frame.values.extend_from_slice(&plane.values);
                frame.channels += 1;
            }
        }
    }
    let mut frame = out.expect("at least one channel");
    frame.t = t;
    Ok(frame)
}

/// One structure image per frame, in frame order.
pub fn esi_video(lf: &LightFieldVideo, cfg: &EsiConfig) -> Result<Vec<EsiFrame>> {
    (0..lf.dims().t)
        .into_par_iter()
        .map(|t| esi_frame(lf, t, cfg))
        .collect()
}

/// Writes a frame as little-endian PFM (`Pf` grey or `PF` RGB), rows
/// bottom-to-top as the format requires.
pub fn write_pfm(frame: &EsiFrame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pfm(frame)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_pfm(frame: &EsiFrame) -> Result<Vec<u8>> {
    let tag = match frame.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::Shape(format!("PFM needs 1 or 3 channels, got {c}"))),
    };
    let mut buf = format!("{tag}\n{} {}\n-1.0\n", frame.width, frame.height).into_bytes();
    for y in (0..frame.height).rev() {
        for x in 0..frame.width {
            for c in 0..frame.channels {
                buf.extend_from_slice(&(frame.at(c, y, x) as f32).to_le_bytes());
            }
        }
    }
    Ok(buf)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<EsiFrame> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut header = Vec::new();
    let mut pos = 0;
    while header.len() < 3 {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, "truncated PFM header"))?;
        header.push(
            String::from_utf8_lossy(&bytes[pos..pos + end])
                .trim()
                .to_string(),
        );
        pos += end + 1;
    }
    let channels = match header[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(Error::format(path, "bad PFM tag")),
    };
    let mut dims = header[1].split_whitespace().map(|s| s.parse::<usize>());
    let (width, height) = match (dims.next(), dims.next()) {
        (Some(Ok(w)), Some(Ok(h))) => (w, h),
        _ => return Err(Error::format(path, "bad PFM dimensions")),
    };
    let scale: f64 = header[2]
        .parse()
        .map_err(|_| Error::format(path, "bad PFM scale"))?;
    if scale >= 0.0 {
        return Err(Error::format(path, "big-endian PFM is not supported"));
    }
    let data = &bytes[pos..];
    if data.len() != width * height * channels * 4 {
        return Err(Error::format(path, "PFM payload size mismatch"));
    }
    let mut values = vec![0.0; width * height * channels];
    for (i, chunk) in data.chunks_exact(4).enumerate() {
        let c = i % channels;
        let x = (i / channels) % width;
        let y = height - 1 - i / (channels * width);
        values[(c * height + y) * width + x] =
            f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
    }
    Ok(EsiFrame {
        values,
        channels,
        height,
        width,
        variant: EsiVariant::Esi,
        t: 0,
        step: 1,
        u_sel: 0,
        v_sel: 0,
    })
}

/// Writes channel 0 as a 16-bit PNG scaled by the frame maximum, plus a
/// `<path>.norm.txt` sidecar recording that maximum.
pub fn write_png_normalized(frame: &EsiFrame, path: impl AsRef<Path>) -> Result<f64> {
    let path = path.as_ref();
    let (_, max, _) = frame.stats();
    let scale = if max > 0.0 { 65535.0 / max } else { 0.0 };
    let pixels: Vec<u16> = frame
        .plane(0)
        .iter()
        .map(|&s| (s * scale + 0.5).floor().min(65535.0) as u16)
        .collect();
    ImageBuffer::<Luma<u16>, _>::from_raw(frame.width as u32, frame.height as u32, pixels)
        .expect("buffer size")
        .save(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".norm.txt");
    fs::write(&sidecar, format!("{max:e}\n")).map_err(|e| Error::io(&sidecar, e))?;
    Ok(max)
}
