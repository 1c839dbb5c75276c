//! Crops and the synthetic toy tracking videos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::BBox;
use crate::error::{Error, Result};
use crate::esi::{esi_video, EsiConfig};
use crate::lf::{
    generate_synthetic, Background, Layer, LfDims, LightFieldVideo, SceneSpec, Texture,
};

/// Square crop resampled to `out × out`. Crop pixel `(j, i)` samples the
/// frame at `(x0 + scale·j, y0 + scale·i)`, pixel centres at integers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub scale: f64,
    pub out: usize,
}

impl CropWindow {
    /// Window of `side` frame pixels centred on `(cx, cy)`, shifted to stay
    /// inside an `h × w` frame when it fits.
    pub fn around(cx: f64, cy: f64, side: f64, out: usize, h: usize, w: usize) -> Self {
        let scale = side / out as f64;
        let extent = scale * (out as f64 - 1.0);
        let place = |c: f64, n: usize| {
            let hi = (n as f64 - 1.0) - extent;
            if hi >= 0.0 {
                (c - extent / 2.0).clamp(0.0, hi)
            } else {
                hi / 2.0
            }
        };
        Self {
            x0: place(cx, w),
            y0: place(cy, h),
            scale,
            out,
        }
    }

    pub fn to_frame(&self, x: f64, y: f64) -> (f64, f64) {
        (self.x0 + self.scale * x, self.y0 + self.scale * y)
    }

    pub fn to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x0) / self.scale, (y - self.y0) / self.scale)
    }

    pub fn box_to_crop(&self, b: &BBox) -> BBox {
        let (cx, cy) = self.to_crop(b.cx, b.cy);
        BBox::new(cx, cy, b.w / self.scale, b.h / self.scale)
    }
}

/// Bilinear resampling with edge clamping.
pub fn crop_resample(frame: &[f64], h: usize, w: usize, win: &CropWindow) -> Vec<f64> {
    let mut out = Vec::with_capacity(win.out * win.out);
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        frame[y * w + x]
    };
    for i in 0..win.out {
        for j in 0..win.out {
            let (fx, fy) = win.to_frame(j as f64, i as f64);
            let (x0, y0) = (fx.floor(), fy.floor());
            let (tx, ty) = (fx - x0, fy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = (1.0 - ty) * ((1.0 - tx) * at(x0, y0) + tx * at(x0 + 1, y0))
                + ty * ((1.0 - tx) * at(x0, y0 + 1) + tx * at(x0 + 1, y0 + 1));
            out.push(v);
        }
    }
    out
}

/// Divides a frame by its maximum (all-zero frames are returned unchanged).
pub fn normalize_frame(values: &[f64]) -> Vec<f64> {
    let m = values.iter().fold(0.0f64, |a, &b| a.max(b));
    if m > 0.0 {
        values.iter().map(|v| v / m).collect()
    } else {
        values.to_vec()
    }
}

/// Moving textured square at nonzero disparity, a distractor square and a
/// textured background on the focal plane, under low gain.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub size: usize,
    pub frames: usize,
    pub views: usize,
    pub target_side: usize,
    pub disparity: f64,
    pub max_speed: f64,
    pub distractor: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            size: 96,
            frames: 32,
            views: 5,
            target_side: 16,
            disparity: 2.0,
            max_speed: 1.5,
            distractor: true,
        }
    }
}

/// A tracking sequence of normalised single-channel ESI frames.
#[derive(Clone, Debug)]
pub struct ToyVideo {
    pub frames: Vec<Vec<f64>>,
    pub h: usize,
    pub w: usize,
    pub boxes: Vec<BBox>,
}

fn moving_square(rng: &mut ChaCha8Rng, cfg: &ToyConfig, disparity: f64, texture: Texture) -> Layer {
    let margin = disparity.abs() * (cfg.views / 2) as f64 + 2.0;
    let travel = (cfg.frames.max(1) - 1) as f64;
    let side = cfg.target_side as f64;
    let span = cfg.size as f64 - 2.0 * margin - side;
    // keep the whole trajectory inside the frame
    let speed = cfg.max_speed.min(0.9 * span / travel.max(1.0));
    let place = |rng: &mut ChaCha8Rng| {
        let v = rng.gen_range(-speed..=speed);
        let lo = margin - (v * travel).min(0.0);
        let hi = margin + span - (v * travel).max(0.0);
        (rng.gen_range(lo..=hi.max(lo)), v)
    };
    let (left, vx) = place(rng);
    let (top, vy) = place(rng);
    Layer::new(
        left,
        top,
        cfg.target_side,
        cfg.target_side,
        disparity,
        texture,
    )
    .with_velocity(vx, vy)
}

/// Scene and dims of toy video `seed`; layer 0 is the target.
pub fn toy_scene(cfg: &ToyConfig, seed: u64) -> (SceneSpec, LfDims) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let target = moving_square(
        &mut rng,
        cfg,
        sign * cfg.disparity,
        Texture::Noise {
            cell: 3,
            lo: 0.2,
            hi: 1.0,
        },
    );
    let mut layers = vec![target];
    if cfg.distractor {
        layers.push(moving_square(
            &mut rng,
            cfg,
            0.0,
            Texture::Noise {
                cell: 3,
                lo: 0.2,
                hi: 1.0,
            },
        ));
    }
    let spec = SceneSpec {
        layers,
        background: Background::Textured(Texture::Noise {
            cell: 6,
            lo: 0.1,
            hi: 0.6,
        }),
        global_gain: rng.gen_range(0.2..=0.5),
    };
    let dims = LfDims::new(cfg.frames, cfg.views, cfg.views, cfg.size, cfg.size, 1);
    (spec, dims)
}

/// Renders a toy scene and converts it to normalised ESI frames.
pub fn toy_video(cfg: &ToyConfig, seed: u64) -> Result<ToyVideo> {
    let (spec, dims) = toy_scene(cfg, seed);
    let (lf, gt) = generate_synthetic(&spec, dims, seed)?;
    let boxes: Vec<[f64; 4]> = (0..dims.t).map(|t| gt.box_at(t, 0)).collect();
    esi_sequence(&lf, &boxes, &EsiConfig::default())
}

/// Normalised single-channel ESI frames of a light field with one target
/// box per frame.
pub fn esi_sequence(lf: &LightFieldVideo, boxes: &[[f64; 4]], cfg: &EsiConfig) -> Result<ToyVideo> {
    let dims = lf.dims();
    if boxes.len() != dims.t {
        return Err(Error::Invalid(format!(
            "{} boxes for {} frames",
            boxes.len(),
            dims.t
        )));
    }
    let esi = esi_video(lf, cfg)?;
    if esi.iter().any(|f| f.channels != 1) {
        return Err(Error::Config(
            "tracking needs single-channel ESI (channel_policy=luma)".into(),
        ));
    }
    let boxes: Vec<BBox> = boxes.iter().map(|b| BBox::from_array(*b)).collect();
    for b in &boxes {
        b.validate()?;
    }
    Ok(ToyVideo {
        frames: esi.iter().map(|f| normalize_frame(&f.values)).collect(),
        h: dims.h,
        w: dims.w,
        boxes,
    })
}
