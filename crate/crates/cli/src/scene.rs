//! `key=value` scene files for the synthetic generator.
//!
//! ```text
//! t=8
//! u=5
//! v=5
//! h=64
//! w=64
//! c=1
//! gain=1
//! background=noise:6,0.1,0.6
//! layer.0.rect=20,18,16,16
//! layer.0.disparity=1.5
//! layer.0.velocity=0.5,0.25
//! layer.0.texture=checker:4,0.2,0.9
//! layer.0.tint=1,1,1
//! ```
//!
//! Textures are `constant:v`, `checker:cell,lo,hi` or `noise:cell,lo,hi`;
//! `background` also accepts a bare number. Layers are listed front to back
//! and must be numbered from 0 without gaps.

use std::collections::BTreeMap;
use std::str::FromStr;

use anyhow::{bail, Result};
use lfesi::lf::{Background, Layer, LfDims, SceneSpec, Texture};
use lfesi::Error;

fn bad(msg: String) -> anyhow::Error {
    Error::Config(msg).into()
}

fn num<T: FromStr>(key: &str, s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| bad(format!("{key}: cannot parse {s:?}")))
}

fn list(key: &str, s: &str, n: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = s.split(',').map(|p| num(key, p)).collect::<Result<_>>()?;
    if v.len() != n {
        bail!(bad(format!(
            "{key}: expected {n} comma-separated numbers, got {s:?}"
        )));
    }
    Ok(v)
}

fn texture(key: &str, s: &str) -> Result<Texture> {
    let (kind, args) = s.split_once(':').unwrap_or((s, ""));
    match kind.trim() {
        "constant" => Ok(Texture::Constant(num(key, args)?)),
        "checker" | "noise" => {
            let v = list(key, args, 3)?;
            if v[0] < 1.0 || v[0].fract() != 0.0 {
                bail!(bad(format!(
                    "{key}: texture cell must be a positive integer"
                )));
            }
            let (cell, lo, hi) = (v[0] as usize, v[1], v[2]);
            Ok(if kind.trim() == "checker" {
                Texture::Checker { cell, lo, hi }
            } else {
                Texture::Noise { cell, lo, hi }
            })
        }
        _ => bail!(bad(format!("{key}: unknown texture {s:?}"))),
    }
}

#[derive(Default)]
struct LayerFields {
    rect: Option<Vec<f64>>,
    disparity: f64,
    velocity: (f64, f64),
    texture: Option<Texture>,
    tint: Option<[f64; 3]>,
}

/// Parses a scene file into the scene and the light-field dimensions.
/// Structural validation (including the shift bound) is left to
/// [`SceneSpec::validate`].
pub fn parse_scene(text: &str) -> Result<(SceneSpec, LfDims)> {
    let mut dims = [None::<usize>; 6];
    let names = ["t", "u", "v", "h", "w", "c"];
    let mut gain = 1.0;
    let mut background = Background::Constant(0.0);
    let mut layers: BTreeMap<usize, LayerFields> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("scene line {}: expected key=value", n + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if let Some(i) = names.iter().position(|&d| d == key) {
            dims[i] = Some(num(key, value)?);
            continue;
        }
        match key {
            "gain" => gain = num(key, value)?,
            "background" => {
                background = match value.parse::<f64>() {
                    Ok(v) => Background::Constant(v),
                    Err(_) => match texture(key, value)? {
                        Texture::Constant(v) => Background::Constant(v),
                        t => Background::Textured(t),
                    },
                }
            }
            _ => {
                let mut parts = key.splitn(3, '.');
                let (Some("layer"), Some(idx), Some(field)) =
                    (parts.next(), parts.next(), parts.next())
                else {
                    bail!(bad(format!("unknown scene key {key:?}")));
                };
                let idx: usize = num(key, idx)?;
                let l = layers.entry(idx).or_default();
                match field {
                    "rect" => l.rect = Some(list(key, value, 4)?),
                    "disparity" => l.disparity = num(key, value)?,
                    "velocity" => {
                        let v = list(key, value, 2)?;
                        l.velocity = (v[0], v[1]);
                    }
                    "texture" => l.texture = Some(texture(key, value)?),
                    "tint" => {
                        let v = list(key, value, 3)?;
                        l.tint = Some([v[0], v[1], v[2]]);
                    }
                    _ => bail!(bad(format!("unknown layer field {key:?}"))),
                }
            }
        }
    }
    let mut d = [0usize; 6];
    for (i, v) in dims.iter().enumerate() {
        d[i] = match (v, names[i]) {
            (Some(x), _) => *x,
            (None, "c") => 1,
            (None, name) => bail!(bad(format!("scene is missing {name}="))),
        };
    }
    let mut out = Vec::with_capacity(layers.len());
    for (expect, (idx, f)) in layers.into_iter().enumerate() {
        if idx != expect {
            bail!(bad(format!(
                "layer indices must run 0, 1, ... without gaps; found {idx}"
            )));
        }
        let r = f
            .rect
            .ok_or_else(|| bad(format!("layer.{idx}.rect is required")))?;
        if r[2] < 1.0 || r[3] < 1.0 || r[2].fract() != 0.0 || r[3].fract() != 0.0 {
            bail!(bad(format!(
                "layer.{idx}.rect width and height must be positive integers"
            )));
        }
        let tex = f.texture.unwrap_or(Texture::Constant(1.0));
        let mut layer = Layer::new(r[0], r[1], r[2] as usize, r[3] as usize, f.disparity, tex)
            .with_velocity(f.velocity.0, f.velocity.1);
        if let Some(t) = f.tint {
            layer.tint = t;
        }
        out.push(layer);
    }
    let spec = SceneSpec {
        layers: out,
        background,
        global_gain: gain,
    };
    Ok((spec, LfDims::new(d[0], d[1], d[2], d[3], d[4], d[5])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_layers_and_defaults() {
        let text = "t=2\nu=3\nv=3\nh=32\nw=32\nbackground=0.25\nlayer.0.rect=4,5,8,8\nlayer.0.texture=checker:2,0,1\n";
        let (spec, dims) = parse_scene(text).unwrap();
        assert_eq!(dims, LfDims::new(2, 3, 3, 32, 32, 1));
        assert_eq!(spec.background, Background::Constant(0.25));
        assert_eq!(spec.layers.len(), 1);
        assert_eq!(spec.layers[0].width, 8);
        assert!(spec.validate(&dims).is_ok());
    }

    #[test]
    fn rejects_gaps_and_unknown_keys() {
        assert!(parse_scene("t=1\nu=1\nv=1\nh=8\nw=8\nlayer.1.rect=0,0,2,2\n").is_err());
        assert!(parse_scene("t=1\nu=1\nv=1\nh=8\nw=8\ncolour=3\n").is_err());
        assert!(parse_scene("u=1\nv=1\nh=8\nw=8\n").is_err());
    }
}
