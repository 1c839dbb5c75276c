//! On-disk light-field formats.
//!
//! * Packed `.lft`: `"LFT1"`, seven little-endian `u32` (T, U, V, H, W, C, 0),
//!   then `T·U·V·H·W·C` little-endian `f32` samples in canonical order.
//! * Manifest directory: `manifest.json` plus one PNG per `(t, u, v)` view.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use super::{LfDims, LightFieldVideo};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LFT1";
const HEADER_LEN: usize = 4 + 7 * 4;
const DEFAULT_VIEW_PATTERN: &str = "t{t:03}_u{u:02}_v{v:02}.png";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StorageFormat {
    Packed,
    Manifest { bit_depth: u8 },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: String,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "U")]
    u: usize,
    #[serde(rename = "V")]
    v: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "W")]
    w: usize,
    #[serde(rename = "C")]
    c: usize,
    bit_depth: u8,
    frame_rate_hz: f64,
    view_pattern: String,
}

/// Loads either a manifest directory or a packed `.lft` file.
pub fn load_lightfield(path: impl AsRef<Path>) -> Result<LightFieldVideo> {
    let path = path.as_ref();
    if path.is_dir() {
        load_manifest(path)
    } else {
        load_packed(path)
    }
}

pub fn save_lightfield(
    lf: &LightFieldVideo,
    path: impl AsRef<Path>,
    format: StorageFormat,
) -> Result<()> {
    let path = path.as_ref();
    match format {
        StorageFormat::Packed => save_packed(lf, path),
        StorageFormat::Manifest { bit_depth } => save_manifest(lf, path, bit_depth),
    }
}

fn encode_packed(lf: &LightFieldVideo) -> Vec<u8> {
    let d = lf.dims();
    let mut buf = Vec::with_capacity(HEADER_LEN + d.len() * 4);
    buf.extend_from_slice(MAGIC);
    for n in [d.t, d.u, d.v, d.h, d.w, d.c, 0] {
        buf.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for &s in lf.samples() {
        buf.extend_from_slice(&(s as f32).to_le_bytes());
    }
    buf
}

fn save_packed(lf: &LightFieldVideo, path: &Path) -> Result<()> {
    let bytes = encode_packed(lf);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn load_packed(path: &Path) -> Result<LightFieldVideo> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            path,
            format!("truncated header ({} bytes)", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, "bad magic, expected LFT1"));
    }
    let word = |i: usize| {
        let o = 4 + 4 * i;
        u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
    };
    let dims = LfDims::new(word(0), word(1), word(2), word(3), word(4), word(5));
    if word(6) != 0 {
        return Err(Error::format(path, "reserved header word is not zero"));
    }
    dims.validate()?;
    let expected = dims
        .t
        .checked_mul(dims.u)
        .and_then(|n| n.checked_mul(dims.v))
        .and_then(|n| n.checked_mul(dims.h))
        .and_then(|n| n.checked_mul(dims.w))
        .and_then(|n| n.checked_mul(dims.c))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, "header dimensions overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "truncated payload: expected {expected} bytes, found {}",
                payload.len()
            ),
        ));
    }
    let samples: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    LightFieldVideo::new(dims, samples, 25.0)
}

/// Expands `{t:03}`-style placeholders for `t`, `u` and `v`.
fn render_pattern(pattern: &str, t: usize, u: usize, v: usize) -> Result<String> {
    let mut out = String::new();
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::Config(format!("unterminated placeholder in {pattern:?}")))?
            + open;
        let field = &rest[open + 1..close];
        let (name, width) = match field.split_once(':') {
            Some((n, w)) => {
                let w = w.trim_start_matches('0');
                let width = if w.is_empty() {
                    0
                } else {
                    w.parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad width in placeholder {field:?}")))?
                };
                (n, width)
            }
            None => (field, 0),
        };
        let value = match name {
            "t" => t,
            "u" => u,
            "v" => v,
            _ => {
                return Err(Error::Config(format!(
                    "unknown placeholder {name:?} in {pattern:?}"
                )))
            }
        };
        out.push_str(&format!("{value:0width$}"));
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn quantize(value: f64, max: f64) -> f64 {
    // round-half-up
    (value * max + 0.5).floor().min(max)
}

fn save_manifest(lf: &LightFieldVideo, dir: &Path, bit_depth: u8) -> Result<()> {
    if bit_depth != 8 && bit_depth != 16 {
        return Err(Error::Invalid(format!(
            "bit depth must be 8 or 16, got {bit_depth}"
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let d = lf.dims();
    let manifest = Manifest {
        format_version: "1".into(),
        t: d.t,
        u: d.u,
        v: d.v,
        h: d.h,
        w: d.w,
        c: d.c,
        bit_depth,
        frame_rate_hz: lf.frame_rate_hz,
        view_pattern: DEFAULT_VIEW_PATTERN.into(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;

    let max = ((1u32 << bit_depth) - 1) as f64;
    for t in 0..d.t {
        for u in 0..d.u {
            for v in 0..d.v {
                let file = dir.join(render_pattern(DEFAULT_VIEW_PATTERN, t, u, v)?);
                let q: Vec<f64> = lf.view(t, u, v).iter().map(|&s| quantize(s, max)).collect();
                let (w, h) = (d.w as u32, d.h as u32);
                let res = match (d.c, bit_depth) {
                    (1, 8) => ImageBuffer::<Luma<u8>, _>::from_raw(
                        w,
                        h,
                        q.iter().map(|&s| s as u8).collect::<Vec<_>>(),
                    )
                    .expect("buffer size")
                    .save(&file),
                    (1, _) => ImageBuffer::<Luma<u16>, _>::from_raw(
                        w,
                        h,
                        q.iter().map(|&s| s as u16).collect::<Vec<_>>(),
                    )
                    .expect("buffer size")
                    .save(&file),
                    (_, 8) => ImageBuffer::<Rgb<u8>, _>::from_raw(
                        w,
                        h,
                        q.iter().map(|&s| s as u8).collect::<Vec<_>>(),
                    )
                    .expect("buffer size")
                    .save(&file),
                    _ => ImageBuffer::<Rgb<u16>, _>::from_raw(
                        w,
                        h,
                        q.iter().map(|&s| s as u16).collect::<Vec<_>>(),
                    )
                    .expect("buffer size")
                    .save(&file),
                };
                res.map_err(|source| Error::Image { path: file, source })?;
            }
        }
    }
    Ok(())
}

fn load_manifest(dir: &Path) -> Result<LightFieldVideo> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if m.format_version != "1" {
        return Err(Error::format(
            &mpath,
            format!("unsupported format_version {:?}", m.format_version),
        ));
    }
    if m.bit_depth != 8 && m.bit_depth != 16 {
        return Err(Error::format(
            &mpath,
            format!("bit_depth must be 8 or 16, got {}", m.bit_depth),
        ));
    }
    let dims = LfDims::new(m.t, m.u, m.v, m.h, m.w, m.c);
    dims.validate()
        .map_err(|e| Error::format(&mpath, e.to_string()))?;

    // Check every view exists up front so the error names the first gap.
    let mut files: Vec<PathBuf> = Vec::with_capacity(m.t * m.u * m.v);
    for t in 0..m.t {
        for u in 0..m.u {
            for v in 0..m.v {
                let f = dir.join(render_pattern(&m.view_pattern, t, u, v)?);
                if !f.is_file() {
                    return Err(Error::format(
                        &mpath,
                        format!("missing view (t={t}, u={u}, v={v}): {}", f.display()),
                    ));
                }
                files.push(f);
            }
        }
    }

    let max = ((1u32 << m.bit_depth) - 1) as f64;
    let mut samples = Vec::with_capacity(dims.len());
    for file in files {
        let img = image::open(&file).map_err(|source| Error::Image {
            path: file.clone(),
            source,
        })?;
        if (img.width() as usize, img.height() as usize) != (m.w, m.h) {
            return Err(Error::format(
                &file,
                format!(
                    "view is {}x{}, manifest declares {}x{}",
                    img.width(),
                    img.height(),
                    m.w,
                    m.h
                ),
            ));
        }
        let channels = img.color().channel_count() as usize;
        if channels != m.c {
            return Err(Error::format(
                &file,
                format!("view has {channels} channels, manifest declares {}", m.c),
            ));
        }
        let bits = img.color().bits_per_pixel() as usize / channels;
        if bits != m.bit_depth as usize {
            return Err(Error::format(
                &file,
                format!("view is {bits}-bit, manifest declares {}", m.bit_depth),
            ));
        }
        match (m.c, m.bit_depth) {
            (1, 8) => samples.extend(
                img.to_luma8()
                    .into_raw()
                    .into_iter()
                    .map(|p| p as f64 / max),
            ),
            (1, _) => samples.extend(
                img.to_luma16()
                    .into_raw()
                    .into_iter()
                    .map(|p| p as f64 / max),
            ),
            (_, 8) => samples.extend(img.to_rgb8().into_raw().into_iter().map(|p| p as f64 / max)),
            _ => samples.extend(
                img.to_rgb16()
                    .into_raw()
                    .into_iter()
                    .map(|p| p as f64 / max),
            ),
        }
    }
    LightFieldVideo::new(dims, samples, m.frame_rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_lf(dims: LfDims, seed: u64) -> LightFieldVideo {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..dims.len()).map(|_| rng.gen::<f32>() as f64).collect();
        LightFieldVideo::new(dims, samples, 25.0).unwrap()
    }

    #[test]
    fn packed_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let lf = random_lf(LfDims::new(2, 3, 3, 8, 8, 1), 11);
        let a = dir.path().join("a.lft");
        let b = dir.path().join("b.lft");
        save_lightfield(&lf, &a, StorageFormat::Packed).unwrap();
        save_lightfield(&lf, &b, StorageFormat::Packed).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let back = load_lightfield(&a).unwrap();
        assert_eq!(back.samples(), lf.samples());
        let c = dir.path().join("c.lft");
        save_lightfield(&back, &c, StorageFormat::Packed).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    }

    #[test]
    fn packed_header_layout() {
        let lf = LightFieldVideo::constant(LfDims::new(1, 3, 3, 2, 2, 1), 0.5).unwrap();
        let bytes = encode_packed(&lf);
        assert_eq!(&bytes[..4], b"LFT1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[28..32], &0u32.to_le_bytes());
        assert_eq!(bytes.len(), 32 + 36 * 4);
        assert_eq!(&bytes[32..36], &0.5f32.to_le_bytes());
    }

    #[test]
    fn truncated_packed_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.lft");
        let lf = random_lf(LfDims::new(1, 3, 3, 4, 4, 1), 1);
        let mut bytes = encode_packed(&lf);
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, &bytes).unwrap();
        let err = load_lightfield(&p).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        fs::write(&p, &bytes[..10]).unwrap();
        assert!(load_lightfield(&p).is_err());
    }

    #[test]
    fn non_finite_packed_sample_reports_index() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.lft");
        let lf = LightFieldVideo::constant(LfDims::new(1, 3, 3, 2, 2, 1), 0.5).unwrap();
        let mut bytes = encode_packed(&lf);
        // sample index 5 = (u=0, v=1, y=0, x=1)
        bytes[32 + 5 * 4..32 + 6 * 4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        let err = load_lightfield(&p).unwrap_err().to_string();
        assert!(
            err.contains("v=1") && err.contains("x=1") && err.contains("non-finite"),
            "{err}"
        );
    }

    #[test]
    fn manifest_constant_half_quantizes_up() {
        let dir = tempfile::tempdir().unwrap();
        let lf = LightFieldVideo::constant(LfDims::new(1, 3, 3, 4, 5, 1), 0.5).unwrap();
        save_lightfield(&lf, dir.path(), StorageFormat::Manifest { bit_depth: 8 }).unwrap();
        let img = image::open(dir.path().join("t000_u01_v02.png"))
            .unwrap()
            .to_luma8();
        assert_eq!((img.width(), img.height()), (5, 4));
        assert!(img.pixels().all(|p| p.0[0] == 128));
    }

    #[test]
    fn manifest_round_trip_exact_for_representable_values() {
        let dir = tempfile::tempdir().unwrap();
        let dims = LfDims::new(2, 3, 3, 4, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples = (0..dims.len())
            .map(|_| rng.gen_range(0..=65535u32) as f64 / 65535.0)
            .collect();
        let lf = LightFieldVideo::new(dims, samples, 30.0).unwrap();
        save_lightfield(&lf, dir.path(), StorageFormat::Manifest { bit_depth: 16 }).unwrap();
        let back = load_lightfield(dir.path()).unwrap();
        assert_eq!(back, lf);
        let again = tempfile::tempdir().unwrap();
        save_lightfield(
            &back,
            again.path(),
            StorageFormat::Manifest { bit_depth: 16 },
        )
        .unwrap();
        for name in ["manifest.json", "t001_u02_v00.png"] {
            assert_eq!(
                fs::read(dir.path().join(name)).unwrap(),
                fs::read(again.path().join(name)).unwrap()
            );
        }
    }

    #[test]
    fn sixteen_bit_max_is_one() {
        let dir = tempfile::tempdir().unwrap();
        let lf = LightFieldVideo::constant(LfDims::new(1, 3, 3, 2, 2, 1), 0.0).unwrap();
        save_lightfield(&lf, dir.path(), StorageFormat::Manifest { bit_depth: 16 }).unwrap();
        let img = ImageBuffer::<Luma<u16>, _>::from_raw(2, 2, vec![65535u16, 0, 65535, 1]).unwrap();
        img.save(dir.path().join("t000_u00_v00.png")).unwrap();
        let back = load_lightfield(dir.path()).unwrap();
        let view = back.view(0, 0, 0);
        assert_eq!(view[0], 65535.0 / 65535.0);
        assert_eq!(view[0], 1.0);
        assert_eq!(view[3], 1.0 / 65535.0);
    }

    #[test]
    fn missing_view_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let lf = LightFieldVideo::constant(LfDims::new(1, 3, 3, 2, 2, 1), 0.2).unwrap();
        save_lightfield(&lf, dir.path(), StorageFormat::Manifest { bit_depth: 8 }).unwrap();
        fs::remove_file(dir.path().join("t000_u02_v01.png")).unwrap();
        let err = load_lightfield(dir.path()).unwrap_err().to_string();
        assert!(err.contains("u=2, v=1"), "{err}");
    }

    #[test]
    fn view_size_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let lf = LightFieldVideo::constant(LfDims::new(1, 3, 3, 2, 2, 1), 0.2).unwrap();
        save_lightfield(&lf, dir.path(), StorageFormat::Manifest { bit_depth: 8 }).unwrap();
        ImageBuffer::<Luma<u8>, _>::from_raw(3, 2, vec![0u8; 6])
            .unwrap()
            .save(dir.path().join("t000_u01_v01.png"))
            .unwrap();
        let err = load_lightfield(dir.path()).unwrap_err().to_string();
        assert!(err.contains("3x2"), "{err}");
    }

    #[test]
    fn manifest_with_missing_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("manifest.json"),
            r#"{"format_version":"1","T":1,"U":3,"V":3,"H":2,"W":2,"bit_depth":8,"frame_rate_hz":25,"view_pattern":"x.png"}"#,
        )
        .unwrap();
        let err = load_lightfield(dir.path()).unwrap_err().to_string();
        assert!(err.contains("C"), "{err}");
    }

    #[test]
    fn pattern_rendering() {
        assert_eq!(
            render_pattern(DEFAULT_VIEW_PATTERN, 3, 1, 12).unwrap(),
            "t003_u01_v12.png"
        );
        assert_eq!(
            render_pattern("v{v}_{t:2}.png", 4, 0, 7).unwrap(),
            "v7_04.png"
        );
        assert!(render_pattern("{q}", 0, 0, 0).is_err());
    }
}
