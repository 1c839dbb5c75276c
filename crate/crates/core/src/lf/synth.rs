//! Synthetic light-field videos of textured fronto-parallel layers.
//!
//! View `(u, v)` of frame `t` shows each layer translated by
//! `(t·vx + δ·(u − ⌊U/2⌋), t·vy + δ·(v − ⌊V/2⌋))`. Layers are sampled
//! bilinearly (colour and coverage) and composited front to back.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{LfDims, LightFieldVideo};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Texture {
    Constant(f64),
    /// Square checkerboard with `cell`-texel squares alternating `lo`/`hi`.
    Checker {
        cell: usize,
        lo: f64,
        hi: f64,
    },
    /// Value noise on a lattice of spacing `cell`, bilinearly interpolated.
    Noise {
        cell: usize,
        lo: f64,
        hi: f64,
    },
}

impl Texture {
    fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        match *self {
            Texture::Constant(v) if in_unit(v) => Ok(()),
            Texture::Checker { cell, lo, hi } | Texture::Noise { cell, lo, hi }
                if cell > 0 && in_unit(lo) && in_unit(hi) =>
            {
                Ok(())
            }
            _ => Err(Error::Invalid(format!("invalid texture {self:?}"))),
        }
    }

    /// Rasterizes `w × h` texels.
    fn render(&self, w: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match *self {
            Texture::Constant(v) => vec![v; w * h],
            Texture::Checker { cell, lo, hi } => (0..h)
                .flat_map(|j| {
                    (0..w).map(move |i| {
                        if (i / cell + j / cell) % 2 == 0 {
                            lo
                        } else {
                            hi
                        }
                    })
                })
                .collect(),
            Texture::Noise { cell, lo, hi } => {
                let lw = w / cell + 2;
                let lh = h / cell + 2;
                let lattice: Vec<f64> = (0..lw * lh).map(|_| rng.gen::<f64>()).collect();
                let mut out = Vec::with_capacity(w * h);
                for j in 0..h {
                    let fy = j as f64 / cell as f64;
                    let y0 = fy.floor() as usize;
                    let ty = fy - y0 as f64;
                    for i in 0..w {
                        let fx = i as f64 / cell as f64;
                        let x0 = fx.floor() as usize;
                        let tx = fx - x0 as f64;
                        let at = |x: usize, y: usize| lattice[y * lw + x];
                        let n = (1.0 - ty) * ((1.0 - tx) * at(x0, y0) + tx * at(x0 + 1, y0))
                            + ty * ((1.0 - tx) * at(x0, y0 + 1) + tx * at(x0 + 1, y0 + 1));
                        out.push(lo + (hi - lo) * n);
                    }
                }
                out
            }
        }
    }
}

/// A textured rectangle. `left`/`top` place texel (0, 0) in the center view
/// at frame 0; texel `(i, j)` sits at pixel `(left + i, top + j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub left: f64,
    pub top: f64,
    pub width: usize,
    pub height: usize,
    /// Pixels of shift per angular step.
    pub disparity: f64,
    /// Pixels per frame `(vx, vy)`.
    pub velocity: (f64, f64),
    pub texture: Texture,
    /// Per-channel multiplier, only the first `C` entries are used.
    pub tint: [f64; 3],
}

impl Layer {
    pub fn new(
        left: f64,
        top: f64,
        width: usize,
        height: usize,
        disparity: f64,
        texture: Texture,
    ) -> Self {
        Self {
            left,
            top,
            width,
            height,
            disparity,
            velocity: (0.0, 0.0),
            texture,
            tint: [1.0; 3],
        }
    }

    pub fn with_velocity(mut self, vx: f64, vy: f64) -> Self {
        self.velocity = (vx, vy);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Background {
    Constant(f64),
    /// Full-frame texture at disparity 0.
    Textured(Texture),
}

/// Layers are ordered front to back.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub layers: Vec<Layer>,
    pub background: Background,
    pub global_gain: f64,
}

impl SceneSpec {
    pub fn validate(&self, dims: &LfDims) -> Result<()> {
        dims.validate()?;
        if !(self.global_gain.is_finite() && self.global_gain > 0.0) {
            return Err(Error::Invalid(format!(
                "global_gain must be > 0, got {}",
                self.global_gain
            )));
        }
        match &self.background {
            Background::Constant(v) => Texture::Constant(*v).validate()?,
            Background::Textured(t) => t.validate()?,
        }
        let (uc, vc) = dims.center();
        let reach = uc.max(dims.u - 1 - uc).max(vc).max(dims.v - 1 - vc) as f64;
        let bound = dims.h.min(dims.w) as f64 / 4.0;
        for (k, layer) in self.layers.iter().enumerate() {
            layer.texture.validate()?;
            if layer.width == 0 || layer.height == 0 {
                return Err(Error::Invalid(format!("layer {k} has an empty extent")));
            }
            let finite = [
                layer.left,
                layer.top,
                layer.disparity,
                layer.velocity.0,
                layer.velocity.1,
            ];
            if finite.iter().any(|v| !v.is_finite())
                || layer.tint.iter().any(|t| !(0.0..=1.0).contains(t))
            {
                return Err(Error::Invalid(format!(
                    "layer {k} has non-finite geometry or bad tint"
                )));
            }
            let shift = layer.disparity.abs() * reach;
            if shift >= bound {
                return Err(Error::ShiftBound(format!(
                    "layer {k}: |disparity| * max angular offset = {shift} must be < min(H, W)/4 = {bound}"
                )));
            }
        }
        Ok(())
    }
}

/// Center-view boxes `(cx, cy, w, h)` per frame and layer, plus the
/// disparity of the front-most covering layer per center-view pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub boxes: Vec<Vec<[f64; 4]>>,
    pub disparity: Vec<Vec<f64>>,
    pub width: usize,
    pub height: usize,
}

impl GroundTruth {
    pub fn box_at(&self, t: usize, layer: usize) -> [f64; 4] {
        self.boxes[t][layer]
    }

    /// Text form: one `t layer cx cy w h` line per box.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (t, frame) in self.boxes.iter().enumerate() {
            for (k, b) in frame.iter().enumerate() {
                s.push_str(&format!("{t} {k} {} {} {} {}\n", b[0], b[1], b[2], b[3]));
            }
        }
        s
    }

    /// Parses `to_text` output; boxes only, disparity maps are left empty.
    pub fn boxes_from_text(text: &str) -> Result<Vec<Vec<[f64; 4]>>> {
        let mut boxes: Vec<Vec<[f64; 4]>> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Config(format!("ground truth line {}: {line:?}", n + 1));
            if f.len() != 6 {
                return Err(bad());
            }
            let t: usize = f[0].parse().map_err(|_| bad())?;
            let k: usize = f[1].parse().map_err(|_| bad())?;
            let mut b = [0.0; 4];
            for (i, v) in f[2..].iter().enumerate() {
                b[i] = v.parse().map_err(|_| bad())?;
            }
            if t >= boxes.len() {
                boxes.resize(t + 1, Vec::new());
            }
            if k != boxes[t].len() {
                return Err(bad());
            }
            boxes[t].push(b);
        }
        Ok(boxes)
    }
}

struct RasterLayer<'a> {
    layer: &'a Layer,
    texels: Vec<f64>,
}

impl RasterLayer<'_> {
    /// Bilinear (intensity, coverage) at continuous texel coordinates.
    #[inline]
    fn sample(&self, lx: f64, ly: f64) -> (f64, f64) {
        let (w, h) = (self.layer.width as isize, self.layer.height as isize);
        let x0 = lx.floor();
        let y0 = ly.floor();
        let tx = lx - x0;
        let ty = ly - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let mut color = 0.0;
        let mut alpha = 0.0;
        for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
            for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                let (x, y) = (x0 + dx, y0 + dy);
                let wgt = wx * wy;
                if wgt == 0.0 || x < 0 || y < 0 || x >= w || y >= h {
                    continue;
                }
                color += wgt * self.texels[(y * w + x) as usize];
                alpha += wgt;
            }
        }
        (color, alpha)
    }
}

/// Renders a synthetic light-field video and its ground truth.
pub fn generate_synthetic(
    spec: &SceneSpec,
    dims: LfDims,
    seed: u64,
) -> Result<(LightFieldVideo, GroundTruth)> {
    spec.validate(&dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers: Vec<RasterLayer> = spec
        .layers
        .iter()
        .map(|l| RasterLayer {
            layer: l,
            texels: l.texture.render(l.width, l.height, &mut rng),
        })
        .collect();
    let background = match &spec.background {
        Background::Constant(v) => vec![*v; dims.h * dims.w],
        Background::Textured(t) => t.render(dims.w, dims.h, &mut rng),
    };

    let (uc, vc) = dims.center();
    let view_len = dims.view_len();
    let mut samples = vec![0.0; dims.len()];
    samples
        .par_chunks_mut(view_len)
        .enumerate()
        .for_each(|(view_idx, out)| {
            let v = view_idx % dims.v;
            let u = (view_idx / dims.v) % dims.u;
            let t = view_idx / (dims.u * dims.v);
            render_view(
                spec,
                &layers,
                &background,
                dims,
                t,
                u as f64 - uc as f64,
                v as f64 - vc as f64,
                out,
            );
        });
    let lf = LightFieldVideo::new(dims, samples, 25.0)?;

    let boxes = (0..dims.t)
        .map(|t| {
            spec.layers
                .iter()
                .map(|l| {
                    let (sx, sy) = (t as f64 * l.velocity.0, t as f64 * l.velocity.1);
                    [
                        l.left + sx + (l.width as f64 - 1.0) / 2.0,
                        l.top + sy + (l.height as f64 - 1.0) / 2.0,
                        l.width as f64,
                        l.height as f64,
                    ]
                })
                .collect()
        })
        .collect();
    let disparity = (0..dims.t)
        .map(|t| {
            let mut map = vec![0.0; dims.h * dims.w];
            for y in 0..dims.h {
                for x in 0..dims.w {
                    for rl in &layers {
                        let l = rl.layer;
                        let lx = x as f64 - (l.left + t as f64 * l.velocity.0);
                        let ly = y as f64 - (l.top + t as f64 * l.velocity.1);
                        if rl.sample(lx, ly).1 >= 0.5 {
                            map[y * dims.w + x] = l.disparity;
                            break;
                        }
                    }
                }
            }
            map
        })
        .collect();
    Ok((
        lf,
        GroundTruth {
            boxes,
            disparity,
            width: dims.w,
            height: dims.h,
        },
    ))
}

#[allow(clippy::too_many_arguments)]
fn render_view(
    spec: &SceneSpec,
    layers: &[RasterLayer],
    background: &[f64],
    dims: LfDims,
    t: usize,
    du: f64,
    dv: f64,
    out: &mut [f64],
) {
    let (h, w, c) = (dims.h, dims.w, dims.c);
    // Per pixel: accumulated premultiplied colour per channel and coverage.
    let mut acc = vec![0.0; h * w * c];
    let mut cover = vec![0.0; h * w];
    for rl in layers {
        let l = rl.layer;
        let left = l.left + t as f64 * l.velocity.0 + l.disparity * du;
        let top = l.top + t as f64 * l.velocity.1 + l.disparity * dv;
        let x_lo = (left - 1.0).floor().max(0.0) as usize;
        let y_lo = (top - 1.0).floor().max(0.0) as usize;
        let x_hi = ((left + l.width as f64 + 1.0).ceil().max(0.0) as usize).min(w);
        let y_hi = ((top + l.height as f64 + 1.0).ceil().max(0.0) as usize).min(h);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let (col, alpha) = rl.sample(x as f64 - left, y as f64 - top);
                if alpha == 0.0 {
                    continue;
                }
                let p = y * w + x;
                let remaining = 1.0 - cover[p];
                for ch in 0..c {
                    acc[p * c + ch] += remaining * col * l.tint[ch];
                }
                cover[p] += remaining * alpha;
            }
        }
    }
    for p in 0..h * w {
        let remaining = 1.0 - cover[p];
        for ch in 0..c {
            let raw = acc[p * c + ch] + remaining * background[p];
            out[p * c + ch] = (raw * spec.global_gain).clamp(0.0, 1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_layer(disparity: f64, texture: Texture) -> SceneSpec {
        SceneSpec {
            layers: vec![Layer::new(12.0, 10.0, 16, 14, disparity, texture)],
            background: Background::Constant(0.1),
            global_gain: 1.0,
        }
    }

    #[test]
    fn zero_disparity_static_views_are_identical() {
        let spec = one_layer(
            0.0,
            Texture::Noise {
                cell: 3,
                lo: 0.2,
                hi: 0.9,
            },
        );
        let dims = LfDims::new(3, 5, 5, 40, 40, 1);
        let (lf, _) = generate_synthetic(&spec, dims, 1).unwrap();
        for t in 0..3 {
            let center = lf.view(t, 2, 2).to_vec();
            for u in 0..5 {
                for v in 0..5 {
                    assert_eq!(lf.view(t, u, v), center.as_slice());
                }
            }
        }
    }

    #[test]
    fn integer_disparity_translates_center_view() {
        let spec = one_layer(
            2.0,
            Texture::Noise {
                cell: 4,
                lo: 0.3,
                hi: 1.0,
            },
        );
        let dims = LfDims::new(1, 5, 5, 48, 48, 1);
        let (lf, _) = generate_synthetic(&spec, dims, 7).unwrap();
        let center = lf.view(0, 2, 2);
        let right = lf.view(0, 4, 2);
        // layer support in the u=4 view: x in [16, 32), y in [10, 24)
        for y in 10..24 {
            for x in 16..32 {
                assert_eq!(right[y * 48 + x], center[y * 48 + x - 4], "({x},{y})");
            }
        }
    }

    #[test]
    fn gain_is_linear_below_saturation() {
        let mut spec = one_layer(
            1.5,
            Texture::Checker {
                cell: 3,
                lo: 0.1,
                hi: 0.8,
            },
        );
        spec.layers[0].velocity = (0.7, -0.3);
        let dims = LfDims::new(2, 3, 3, 32, 32, 3);
        let (full, _) = generate_synthetic(&spec, dims, 2).unwrap();
        spec.global_gain = 0.1;
        let (dim, _) = generate_synthetic(&spec, dims, 2).unwrap();
        for (a, b) in full.samples().iter().zip(dim.samples()) {
            assert!((b - 0.1 * a).abs() <= 1e-15, "{a} {b}");
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = SceneSpec {
            layers: vec![Layer::new(
                5.5,
                7.25,
                9,
                9,
                0.75,
                Texture::Noise {
                    cell: 2,
                    lo: 0.0,
                    hi: 1.0,
                },
            )
            .with_velocity(0.5, 0.25)],
            background: Background::Textured(Texture::Noise {
                cell: 5,
                lo: 0.1,
                hi: 0.4,
            }),
            global_gain: 0.4,
        };
        let dims = LfDims::new(3, 5, 5, 32, 32, 1);
        let a = generate_synthetic(&spec, dims, 99).unwrap();
        let b = generate_synthetic(&spec, dims, 99).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&spec, dims, 100).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn boxes_match_rendered_support() {
        let mut spec = one_layer(1.0, Texture::Constant(0.9));
        spec.layers[0].velocity = (2.0, -1.0);
        spec.background = Background::Constant(0.0);
        let dims = LfDims::new(4, 3, 3, 48, 48, 1);
        let (lf, gt) = generate_synthetic(&spec, dims, 0).unwrap();
        for t in 0..dims.t {
            let view = lf.view(t, 1, 1);
            let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0, usize::MAX, 0);
            for y in 0..48 {
                for x in 0..48 {
                    if view[y * 48 + x] > 0.0 {
                        x0 = x0.min(x);
                        x1 = x1.max(x);
                        y0 = y0.min(y);
                        y1 = y1.max(y);
                    }
                }
            }
            let brute = [
                (x0 + x1) as f64 / 2.0,
                (y0 + y1) as f64 / 2.0,
                (x1 - x0 + 1) as f64,
                (y1 - y0 + 1) as f64,
            ];
            assert_eq!(gt.box_at(t, 0), brute, "frame {t}");
            assert_eq!(gt.box_at(t, 0)[0], gt.box_at(0, 0)[0] + 2.0 * t as f64);
            let d = &gt.disparity[t];
            assert_eq!(d[(brute[1] as usize) * 48 + brute[0] as usize], 1.0);
            assert_eq!(d[0], 0.0);
        }
    }

    #[test]
    fn shift_bound_is_enforced() {
        let spec = one_layer(4.0, Texture::Constant(0.5));
        let err = generate_synthetic(&spec, LfDims::new(1, 5, 5, 32, 32, 1), 0).unwrap_err();
        assert!(matches!(err, Error::ShiftBound(_)), "{err}");
        assert!(err.to_string().contains("min(H, W)/4"));
        assert!(generate_synthetic(&spec, LfDims::new(1, 5, 5, 36, 36, 1), 0).is_ok());
    }

    #[test]
    fn front_layer_occludes() {
        let spec = SceneSpec {
            layers: vec![
                Layer::new(4.0, 4.0, 4, 4, 0.0, Texture::Constant(1.0)),
                Layer::new(2.0, 2.0, 10, 10, 0.0, Texture::Constant(0.5)),
            ],
            background: Background::Constant(0.0),
            global_gain: 1.0,
        };
        let (lf, _) = generate_synthetic(&spec, LfDims::new(1, 3, 3, 16, 16, 1), 0).unwrap();
        let v = lf.view(0, 1, 1);
        assert_eq!(v[5 * 16 + 5], 1.0);
        assert_eq!(v[2 * 16 + 2], 0.5);
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn gt_text_round_trip() {
        let spec = one_layer(1.0, Texture::Constant(0.5));
        let (_, gt) = generate_synthetic(&spec, LfDims::new(3, 3, 3, 32, 32, 1), 0).unwrap();
        assert_eq!(
            GroundTruth::boxes_from_text(&gt.to_text()).unwrap(),
            gt.boxes
        );
    }
}
