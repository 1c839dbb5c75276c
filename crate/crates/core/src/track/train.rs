//! Toy trainer: random temporal pairs from synthetic videos, AdamW on the
//! weighted sum of reconstruction, heatmap and box losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    cell_anchor, crop_resample, encode_pair, gaussian_target, head_forward, template_features,
    CropWindow, PairCrops, ToyVideo, Tracker,
};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::gas::GasRun;
use crate::params::AdamW;
use crate::ssl::{decode, sample_mask, ssl_loss};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Largest frame gap between template and search frames.
    pub max_gap: usize,
    /// Search-centre jitter as a fraction of the box side.
    pub jitter: f64,
    /// Log-uniform search-scale jitter half-width.
    pub scale_jitter: f64,
    /// Temperature multiplier applied every `anneal_every` steps.
    pub tau_anneal: f64,
    pub anneal_every: usize,
    /// Reuse the first sample (pair, mask and noise) at every step.
    pub fixed_sample: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            max_gap: 8,
            jitter: 0.75,
            scale_jitter: 0.1,
            tau_anneal: 1.0,
            anneal_every: 100,
            fixed_sample: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub ssl: f64,
    pub cls: f64,
    pub reg: f64,
}

/// One training example in crop coordinates.
pub struct Sample {
    pub template: Vec<f64>,
    pub template_frame: Vec<f64>,
    pub search: Vec<f64>,
    pub gt: super::BBox,
    pub noise_seed: u64,
}

pub fn draw_sample(
    model: &Tracker,
    data: &[ToyVideo],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let mc = &model.cfg;
    let v = &data[rng.gen_range(0..data.len())];
    let t_len = v.frames.len();
    let t1 = rng.gen_range(0..t_len);
    let lo = t1.saturating_sub(cfg.max_gap);
    let hi = (t1 + cfg.max_gap).min(t_len - 1);
    let t2 = rng.gen_range(lo..=hi);
    let b1 = v.boxes[t1];
    let b2 = v.boxes[t2];
    let side = b1.side() * mc.search_scale;
    let tw = CropWindow::around(
        b1.cx,
        b1.cy,
        side * mc.template_side as f64 / mc.search_side as f64,
        mc.template_side,
        v.h,
        v.w,
    );
    let fw = CropWindow::around(b1.cx, b1.cy, side, mc.search_side, v.h, v.w);
    let j = cfg.jitter * b2.side();
    let (dx, dy) = if j > 0.0 {
        (rng.gen_range(-j..=j), rng.gen_range(-j..=j))
    } else {
        (0.0, 0.0)
    };
    let s = if cfg.scale_jitter > 0.0 {
        rng.gen_range(-cfg.scale_jitter..=cfg.scale_jitter).exp()
    } else {
        1.0
    };
    let sw = CropWindow::around(
        b2.cx + dx,
        b2.cy + dy,
        b2.side() * mc.search_scale * s,
        mc.search_side,
        v.h,
        v.w,
    );
    Ok(Sample {
        template: crop_resample(&v.frames[t1], v.h, v.w, &tw),
        template_frame: crop_resample(&v.frames[t1], v.h, v.w, &fw),
        search: crop_resample(&v.frames[t2], v.h, v.w, &sw),
        gt: sw.box_to_crop(&b2),
        noise_seed: rng.gen(),
    })
}

/// Loss graph of one sample: `(total, [ssl, cls, reg])`.
/// `dropout` toggles the decoder's attention dropout.
pub fn sample_loss(
    tape: &mut Tape,
    model: &Tracker,
    s: &Sample,
    run: &GasRun,
    dropout: bool,
) -> Result<(Var, [f64; 3])> {
    let mc = &model.cfg;
    let w = mc.weights;
    let crops = PairCrops {
        template: &s.template,
        template_frame: &s.template_frame,
        search: &s.search,
    };
    let enc = encode_pair(tape, model, &crops, run)?;
    let mut parts: Vec<Var> = Vec::new();
    let mut vals = [0.0; 3];
    if w.ssl > 0.0 {
        let n = mc.attn.n_tokens();
        let mask = sample_mask(2 * n, mc.mask_rate, s.noise_seed ^ 0x5eed_0001)?;
        // Row-normalised embeddings: with a constant target the encoder
        // otherwise inflates its own outputs and the loss grows.
        let c = mc.attn.c_emb;
        let ones = tape.constant(Tensor::full(&[c], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[c]));
        let e = tape.layer_norm(enc.features, ones, zeros);
        let target = tape.value(e).clone();
        let mut drng = ChaCha8Rng::seed_from_u64(s.noise_seed ^ 0x5eed_0002);
        let dec = decode(
            tape,
            &model.params,
            &model.ids.decoder,
            &mc.decoder,
            e,
            &mask,
            n,
            dropout.then_some(&mut drng),
        )?;
        let l = ssl_loss(tape, dec.output, &target, &mask, mc.decoder.literal_loss)?;
        vals[0] = tape.value(l).item();
        parts.push(tape.scale(l, w.ssl));
    }
    if w.cls > 0.0 || w.reg > 0.0 {
        let t = template_features(tape, model, &s.template)?;
        let out = head_forward(tape, model, &enc, t, &s.search)?;
        let map = mc.score_map();
        if w.cls > 0.0 {
            let target = gaussian_target(&s.gt, &map)?;
            let l = tape.focal_loss(out.heat, target);
            vals[1] = tape.value(l).item();
            parts.push(tape.scale(l, w.cls));
        }
        if w.reg > 0.0 {
            let (i, j) = map.nearest_cell(s.gt.cx, s.gt.cy);
            let raw = tape.gather_rows(out.reg, vec![i * map.w + j]);
            let raw = tape.reshape(raw, &[4]);
            let b = tape.decode_box(raw, cell_anchor(model, i, j));
            let l = tape.iou_loss(b, s.gt.to_array());
            vals[2] = tape.value(l).item();
            parts.push(tape.scale(l, w.reg));
        }
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p);
    }
    Ok((total, vals))
}

/// Trains in place and returns the per-step loss trace. Aborts with
/// [`Error::Diverged`] on the first non-finite loss or parameter.
pub fn train_toy(
    model: &mut Tracker,
    data: &[ToyVideo],
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    if data.is_empty() {
        return Err(Error::Invalid("training needs at least one video".into()));
    }
    if data
        .iter()
        .any(|v| v.frames.is_empty() || v.frames.len() != v.boxes.len())
    {
        return Err(Error::Invalid(
            "every video needs frames with one box each".into(),
        ));
    }
    if !(cfg.lr >= 0.0 && cfg.weight_decay >= 0.0) {
        return Err(Error::Config("lr and weight_decay must be >= 0".into()));
    }
    let mut opt = AdamW::new(&model.params, cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tau0 = model.cfg.gas.as_ref().map(|g| g.tau);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut fixed: Option<Sample> = None;
    for step in 0..cfg.steps {
        if let (Some(g), Some(t0)) = (model.cfg.gas.as_mut(), tau0) {
            g.tau = t0 * cfg.tau_anneal.powi((step / cfg.anneal_every.max(1)) as i32);
        }
        let fresh;
        let sample = if cfg.fixed_sample {
            if fixed.is_none() {
                fixed = Some(draw_sample(model, data, cfg, &mut rng)?);
            }
            fixed.as_ref().unwrap()
        } else {
            fresh = draw_sample(model, data, cfg, &mut rng)?;
            &fresh
        };
        let mut tape = Tape::new();
        let run = GasRun::train(sample.noise_seed);
        let (loss, parts) = sample_loss(&mut tape, model, sample, &run, true)?;
        let total = tape.value(loss).item();
        if !total.is_finite() {
            return Err(Error::Diverged(step));
        }
        let grads = tape.backward(loss, model.params.len()).into_params();
        if grads
            .iter()
            .flatten()
            .any(|g| g.data.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Diverged(step));
        }
        opt.step(&mut model.params, &grads);
        if !model.params.all_finite() {
            return Err(Error::Diverged(step));
        }
        trace.push(LossRecord {
            step,
            total,
            ssl: parts[0],
            cls: parts[1],
            reg: parts[2],
        });
    }
    if let (Some(g), Some(t0)) = (model.cfg.gas.as_mut(), tau0) {
        g.tau = t0;
    }
    Ok(trace)
}
