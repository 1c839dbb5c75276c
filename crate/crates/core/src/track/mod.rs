//! Dual-stream correlation tracker on ESI frames.
//!
//! One stream is a small strided CNN, the other the joint attention encoder.
//! Each stream correlates template features against search features; the two
//! correlation maps are concatenated, mixed by a 1×1 layer and fed to a
//! classification heatmap head and a per-cell box regression head.

mod data;
mod metrics;
mod train;

pub use data::{
    crop_resample, esi_sequence, normalize_frame, toy_scene, toy_video, CropWindow, ToyConfig,
    ToyVideo,
};
pub use metrics::{eval_sot, format_sig, read_results, write_results, SotMetrics};
pub use train::{draw_sample, sample_loss, train_toy, LossRecord, Sample, TrainConfig};

use rand::Rng;

use crate::attn::{encode, patchify, AttnConfig, Encoded, EncoderIds, LinearIds};
use crate::autograd::{iou_value, ConvGeom, Tape, Var, XcorrGeom};
use crate::error::{Error, Result};
use crate::gas::{GasConfig, GasRun};
use crate::params::{truncated_normal, ParamId, ParamStore};
use crate::ssl::{DecoderConfig, DecoderIds};
use crate::tensor::Tensor;

/// Centre-parameterised axis-aligned box in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.to_array().iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("degenerate box {self:?}")))
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou_value(&self.to_array(), &other.to_array())
    }

    pub fn side(&self) -> f64 {
        (self.w * self.h).sqrt()
    }
}

/// `1 − IoU`, rejecting degenerate boxes.
pub fn iou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    pred.validate()?;
    gt.validate()?;
    Ok(1.0 - pred.iou(gt))
}

/// Penalty-reduced focal loss of a heatmap in `(0, 1)` against a target.
pub fn focal_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "heatmap sizes {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    if let Some(i) = pred.iter().position(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(Error::Invalid(format!(
            "prediction {i} = {} is outside (0, 1)",
            pred[i]
        )));
    }
    Ok(crate::autograd::focal_loss_value(pred, target))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ssl: f64,
    pub cls: f64,
    pub reg: f64,
}

impl LossWeights {
    pub fn new(ssl: f64, cls: f64, reg: f64) -> Result<Self> {
        let w = [ssl, cls, reg];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0, got {w:?}"
            )));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("loss weights are all zero".into()));
        }
        Ok(Self { ssl, cls, reg })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ssl: 1.0,
            cls: 1.0,
            reg: 1.0,
        }
    }
}

pub fn total_loss(w: &LossWeights, l_m: f64, l_cls: f64, l_reg: f64) -> Result<f64> {
    for (name, v) in [("ssl", l_m), ("cls", l_cls), ("reg", l_reg)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss")));
        }
        if v < 0.0 {
            return Err(Error::Invalid(format!("{name} loss is negative: {v}")));
        }
    }
    Ok(w.ssl * l_m + w.cls * l_cls + w.reg * l_reg)
}

/// Cell layout of a score map in crop coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapGeom {
    pub h: usize,
    pub w: usize,
    pub stride: f64,
    /// Crop coordinate of cell (0, 0)'s centre.
    pub offset: f64,
}

impl MapGeom {
    /// `(x, y)` centre of cell `(i, j)`.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.offset + self.stride * j as f64,
            self.offset + self.stride * i as f64,
        )
    }

    /// Cell `(i, j)` whose centre is nearest to `(x, y)`.
    pub fn nearest_cell(&self, x: f64, y: f64) -> (usize, usize) {
        let q = |v: f64, n: usize| {
            ((v - self.offset) / self.stride)
                .round()
                .clamp(0.0, (n - 1) as f64) as usize
        };
        (q(y, self.h), q(x, self.w))
    }
}

/// Gaussian heatmap peaking at 1 on the cell nearest the box centre, with
/// `σ = max(1, min(w, h) / (8·stride))` in cell units.
pub fn gaussian_target(gt: &BBox, map: &MapGeom) -> Result<Tensor> {
    gt.validate()?;
    let (ci, cj) = map.nearest_cell(gt.cx, gt.cy);
    let sigma = (gt.w.min(gt.h) / (8.0 * map.stride)).max(1.0);
    let mut t = Tensor::zeros(&[map.h * map.w, 1]);
    for i in 0..map.h {
        for j in 0..map.w {
            let d2 = (i as f64 - ci as f64).powi(2) + (j as f64 - cj as f64).powi(2);
            t.data[i * map.w + j] = (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerConfig {
    pub attn: AttnConfig,
    pub gas: Option<GasConfig>,
    pub decoder: DecoderConfig,
    pub mask_rate: f64,
    /// Channels of the first two backbone stages.
    pub backbone: [usize; 2],
    pub template_side: usize,
    pub search_side: usize,
    /// Search crop side as a multiple of the box side.
    pub search_scale: f64,
    pub weights: LossWeights,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            attn: AttnConfig::default(),
            gas: Some(GasConfig::default()),
            decoder: DecoderConfig::default(),
            mask_rate: 0.5,
            backbone: [16, 32],
            template_side: 32,
            search_side: 64,
            search_scale: 4.0,
            weights: LossWeights::default(),
        }
    }
}

/// Total downsampling of the backbone.
pub const BACKBONE_STRIDE: usize = 8;

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        self.attn.validate()?;
        if self.attn.patch != BACKBONE_STRIDE {
            return Err(Error::Config(format!(
                "patch must equal the backbone stride {BACKBONE_STRIDE} so both streams share a grid"
            )));
        }
        if self.attn.frame_h != self.search_side || self.attn.frame_w != self.search_side {
            return Err(Error::Config(
                "encoder frame size must equal the search crop side".into(),
            ));
        }
        if self.attn.channels != 1 {
            return Err(Error::Config(
                "the tracker consumes single-channel (luma) ESI".into(),
            ));
        }
        let s = BACKBONE_STRIDE;
        if self.template_side % s != 0
            || self.search_side % s != 0
            || self.template_side > self.search_side
        {
            return Err(Error::Config(format!(
                "template {} and search {} sides must be multiples of {s} with template <= search",
                self.template_side, self.search_side
            )));
        }
        if (self.search_side - self.template_side) / s % 2 != 0 {
            return Err(Error::Config(
                "template must sit centred on the encoder grid".into(),
            ));
        }
        if !(self.search_scale > 0.0) {
            return Err(Error::Config("search_scale must be positive".into()));
        }
        if self.backbone.iter().any(|&c| c == 0) {
            return Err(Error::Config("backbone channels must be positive".into()));
        }
        if !(self.decoder.p_drop >= 0.0 && self.decoder.p_drop <= 1.0) {
            return Err(Error::Config(format!(
                "p_drop must be in [0, 1], got {}",
                self.decoder.p_drop
            )));
        }
        if self.weights.ssl > 0.0 {
            let len = 2 * self.attn.n_tokens();
            crate::ssl::sample_mask(len, self.mask_rate, 0)?;
        }
        if let Some(g) = &self.gas {
            if !(g.tau > 0.0) {
                return Err(Error::Config(format!(
                    "tau must be positive, got {}",
                    g.tau
                )));
            }
        }
        Ok(())
    }

    pub fn score_map(&self) -> MapGeom {
        let n = (self.search_side - self.template_side) / BACKBONE_STRIDE + 1;
        MapGeom {
            h: n,
            w: n,
            stride: BACKBONE_STRIDE as f64,
            offset: (self.template_side as f64 - 1.0) / 2.0,
        }
    }

    /// Nominal target side inside a search crop.
    pub fn anchor_side(&self) -> f64 {
        self.search_side as f64 / self.search_scale
    }

    fn conv_geoms(&self, side: usize) -> [ConvGeom; 3] {
        let c = [1, self.backbone[0], self.backbone[1], self.attn.c_emb];
        let mut s = side;
        let mut out = [ConvGeom {
            in_h: 0,
            in_w: 0,
            in_c: 0,
            out_c: 0,
            kernel: 3,
            stride: 2,
            pad: 1,
        }; 3];
        for (k, g) in out.iter_mut().enumerate() {
            *g = ConvGeom {
                in_h: s,
                in_w: s,
                in_c: c[k],
                out_c: c[k + 1],
                kernel: 3,
                stride: 2,
                pad: 1,
            };
            s = g.out_h();
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrackerIds {
    pub convs: Vec<(ParamId, ParamId)>,
    pub encoder: EncoderIds,
    pub decoder: DecoderIds,
    pub mix: LinearIds,
    /// 3×3 convolution over the fused score map.
    pub hidden: (ParamId, ParamId),
    pub cls: LinearIds,
    pub reg: LinearIds,
}

/// Model parameters plus their layout.
#[derive(Clone, Debug)]
pub struct Tracker {
    pub cfg: TrackerConfig,
    pub params: ParamStore,
    pub ids: TrackerIds,
}

/// Initial classification bias: sigmoid(b) = 0.1.
pub const CLS_PRIOR_BIAS: f64 = -2.197_224_577_336_219_6;

impl Tracker {
    pub fn new<R: Rng>(cfg: TrackerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let c = cfg.attn.c_emb;
        let mut convs = Vec::new();
        for (k, g) in cfg.conv_geoms(cfg.search_side).iter().enumerate() {
            let fan_in = g.kernel * g.kernel * g.in_c;
            let std = (2.0 / fan_in as f64).sqrt();
            let w = store.add(
                format!("backbone.{k}.w"),
                truncated_normal(rng, &[fan_in, g.out_c], std),
            );
            let b = store.add(format!("backbone.{k}.b"), Tensor::zeros(&[g.out_c]));
            convs.push((w, b));
        }
        let encoder = EncoderIds::init(&mut store, rng, "enc", &cfg.attn, cfg.gas.is_some())?;
        let decoder = DecoderIds::init(
            &mut store,
            rng,
            "dec",
            &cfg.decoder,
            2 * cfg.attn.n_tokens(),
            c,
        );
        let mix = fan_in_linear(&mut store, rng, "head.mix", 2 * c, c);
        let hidden = (
            store.add(
                "head.hidden.w",
                truncated_normal(rng, &[9 * c, c], (1.0 / (9 * c) as f64).sqrt()),
            ),
            store.add("head.hidden.b", Tensor::zeros(&[c])),
        );
        let cls = fan_in_linear(&mut store, rng, "head.cls", c, 1);
        store.get_mut(cls.b).data[0] = CLS_PRIOR_BIAS;
        let reg = fan_in_linear(&mut store, rng, "head.reg", c, 4);
        // start regression at the anchor box
        store.get_mut(reg.w).data.iter_mut().for_each(|v| *v *= 0.1);
        Ok(Self {
            cfg,
            params: store,
            ids: TrackerIds {
                convs,
                encoder,
                decoder,
                mix,
                hidden,
                cls,
                reg,
            },
        })
    }
}

fn fan_in_linear<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> LinearIds {
    let w = store.add(
        format!("{prefix}.w"),
        truncated_normal(rng, &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt()),
    );
    let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    LinearIds { w, b }
}

/// Three stride-2 3×3 convolutions with GELU between stages; `x` is a
/// single-channel `side × side` crop stored as `(side², 1)`.
pub fn conv_backbone(tape: &mut Tape, model: &Tracker, x: Var, side: usize) -> Result<Var> {
    if side % BACKBONE_STRIDE != 0 {
        return Err(Error::Shape(format!(
            "crop side {side} is not divisible by {BACKBONE_STRIDE}"
        )));
    }
    let geoms = model.cfg.conv_geoms(side);
    let mut h = x;
    for (k, (g, &(w, b))) in geoms.iter().zip(&model.ids.convs).enumerate() {
        let wv = tape.param(&model.params, w);
        let bv = tape.param(&model.params, b);
        h = tape.conv2d(h, wv, bv, *g)?;
        if k + 1 < geoms.len() {
            h = tape.gelu(h);
        }
    }
    Ok(h)
}

/// Value-level depthwise correlation on `(h·w, c)` maps.
pub fn depthwise_xcorr(
    template: &Tensor,
    t_hw: (usize, usize),
    search: &Tensor,
    s_hw: (usize, usize),
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let t = tape.constant(template.clone());
    let s = tape.constant(search.clone());
    let g = XcorrGeom {
        ht: t_hw.0,
        wt: t_hw.1,
        hs: s_hw.0,
        ws: s_hw.1,
        c: template.cols(),
    };
    let out = tape.xcorr(t, s, g)?;
    Ok(tape.value(out).clone())
}

/// Channel concatenation then a 1×1 linear mix.
pub fn fuse_streams(
    tape: &mut Tape,
    store: &ParamStore,
    mix: &LinearIds,
    a: Var,
    b: Var,
) -> Result<Var> {
    if tape.value(a).rows() != tape.value(b).rows() {
        return Err(Error::Shape(format!(
            "correlation maps have {} and {} cells",
            tape.value(a).rows(),
            tape.value(b).rows()
        )));
    }
    let cat = tape.concat_cols(&[a, b]);
    Ok(mix.apply(tape, store, cat))
}

/// Crops that make one forward pass. All are single-channel, normalised,
/// row-major: `template` is `template_side²`, the other two `search_side²`.
pub struct PairCrops<'a> {
    pub template: &'a [f64],
    /// Template frame at search scale, the encoder's first frame.
    pub template_frame: &'a [f64],
    pub search: &'a [f64],
}

pub struct HeadOut {
    pub heat: Var,
    pub reg: Var,
}

fn crop_var(tape: &mut Tape, data: &[f64]) -> Var {
    tape.constant(Tensor {
        shape: vec![data.len(), 1],
        data: data.to_vec(),
    })
}

/// Encoder stream on the pair `(template_frame, search)`.
pub fn encode_pair(
    tape: &mut Tape,
    model: &Tracker,
    crops: &PairCrops,
    run: &GasRun,
) -> Result<Encoded> {
    let cfg = &model.cfg;
    let tokens = patchify(
        tape,
        &model.params,
        &model.ids.encoder,
        &cfg.attn,
        crops.template_frame,
        crops.search,
    )?;
    let gas = cfg.gas.as_ref().map(|g| (g, run));
    encode(
        tape,
        &model.params,
        &model.ids.encoder,
        &cfg.attn,
        tokens,
        gas,
    )
}

/// CNN template features; fixed per tracked sequence.
pub fn template_features(tape: &mut Tape, model: &Tracker, template: &[f64]) -> Result<Var> {
    let side = model.cfg.template_side;
    if template.len() != side * side {
        return Err(Error::Shape(format!(
            "template crop has {} values, expected {side}²",
            template.len()
        )));
    }
    let x = crop_var(tape, template);
    conv_backbone(tape, model, x, side)
}

/// Both correlation streams, fusion and heads.
pub fn head_forward(
    tape: &mut Tape,
    model: &Tracker,
    enc: &Encoded,
    cnn_template: Var,
    search: &[f64],
) -> Result<HeadOut> {
    let cfg = &model.cfg;
    let c = cfg.attn.c_emb;
    let ss = cfg.search_side;
    if search.len() != ss * ss {
        return Err(Error::Shape(format!(
            "search crop has {} values, expected {ss}²",
            search.len()
        )));
    }
    let tg = cfg.template_side / BACKBONE_STRIDE;
    let sg = ss / BACKBONE_STRIDE;
    let geom = XcorrGeom {
        ht: tg,
        wt: tg,
        hs: sg,
        ws: sg,
        c,
    };
    let norm = 1.0 / (tg * tg) as f64;

    let xs = crop_var(tape, search);
    let fs = conv_backbone(tape, model, xs, ss)?;
    let corr_a = tape.xcorr(cnn_template, fs, geom)?;
    let corr_a = tape.scale(corr_a, norm);

    let off = (sg - tg) / 2;
    let rows: Vec<usize> = (0..tg)
        .flat_map(|i| (0..tg).map(move |j| (off + i) * sg + off + j))
        .collect();
    let t_enc = tape.gather_rows(enc.map1, rows);
    let corr_b = tape.xcorr(t_enc, enc.map2, geom)?;
    let corr_b = tape.scale(corr_b, norm);

    let fused = fuse_streams(tape, &model.params, &model.ids.mix, corr_a, corr_b)?;
    let n = cfg.score_map().h;
    let hw = tape.param(&model.params, model.ids.hidden.0);
    let hb = tape.param(&model.params, model.ids.hidden.1);
    let hg = ConvGeom {
        in_h: n,
        in_w: n,
        in_c: c,
        out_c: c,
        kernel: 3,
        stride: 1,
        pad: 1,
    };
    let h = tape.conv2d(fused, hw, hb, hg)?;
    let h = tape.gelu(h);
    let logits = model.ids.cls.apply(tape, &model.params, h);
    let heat = tape.sigmoid(logits);
    let reg = model.ids.reg.apply(tape, &model.params, h);
    Ok(HeadOut { heat, reg })
}

/// Anchor `(cx, cy, side, stride)` of a score cell for box decoding.
pub fn cell_anchor(model: &Tracker, i: usize, j: usize) -> [f64; 4] {
    let map = model.cfg.score_map();
    let (x, y) = map.cell_center(i, j);
    [x, y, model.cfg.anchor_side(), map.stride]
}

/// Box in crop coordinates from the raw regression row of cell `(i, j)`.
pub fn decode_cell(model: &Tracker, reg: &Tensor, i: usize, j: usize) -> BBox {
    let map = model.cfg.score_map();
    let r = reg.row(i * map.w + j);
    let a = cell_anchor(model, i, j);
    BBox::new(
        a[0] + a[3] * r[2],
        a[1] + a[3] * r[3],
        a[2] * r[0].exp(),
        a[2] * r[1].exp(),
    )
}

/// Per-sequence inference state. The template is fixed at initialisation.
#[derive(Clone, Debug)]
pub struct TrackerState {
    template_frame: Vec<f64>,
    cnn_template: Tensor,
    pub prev: BBox,
    pub frame_h: usize,
    pub frame_w: usize,
}

impl TrackerState {
    /// Crops the template from the (normalised) first frame.
    pub fn init(model: &Tracker, frame: &[f64], h: usize, w: usize, init: BBox) -> Result<Self> {
        init.validate()?;
        if frame.len() != h * w {
            return Err(Error::Shape(format!(
                "frame has {} values, expected {h}x{w}",
                frame.len()
            )));
        }
        let cfg = &model.cfg;
        let side = init.side();
        let t_side = side * cfg.search_scale * cfg.template_side as f64 / cfg.search_side as f64;
        let tw = CropWindow::around(init.cx, init.cy, t_side, cfg.template_side, h, w);
        let template = crop_resample(frame, h, w, &tw);
        let fw = CropWindow::around(
            init.cx,
            init.cy,
            side * cfg.search_scale,
            cfg.search_side,
            h,
            w,
        );
        let template_frame = crop_resample(frame, h, w, &fw);
        let mut tape = Tape::new();
        let t = template_features(&mut tape, model, &template)?;
        Ok(Self {
            template_frame,
            cnn_template: tape.value(t).clone(),
            prev: init,
            frame_h: h,
            frame_w: w,
        })
    }
}

/// Search window around the previous box and the resampled crop.
fn search_crop(
    model: &Tracker,
    state: &TrackerState,
    frame: &[f64],
) -> Result<(CropWindow, Vec<f64>)> {
    let (h, w) = (state.frame_h, state.frame_w);
    if frame.len() != h * w {
        return Err(Error::Shape(format!(
            "frame has {} values, expected {h}x{w}",
            frame.len()
        )));
    }
    let win = CropWindow::around(
        state.prev.cx,
        state.prev.cy,
        state.prev.side() * model.cfg.search_scale,
        model.cfg.search_side,
        h,
        w,
    );
    let search = crop_resample(frame, h, w, &win);
    Ok((win, search))
}

/// Relation matrices of every partition layer for the next search crop,
/// in evaluation mode; empty without the partition branch.
pub fn relation_maps(model: &Tracker, state: &TrackerState, frame: &[f64]) -> Result<Vec<Tensor>> {
    let (_, search) = search_crop(model, state, frame)?;
    let mut tape = Tape::new();
    let crops = PairCrops {
        template: &[],
        template_frame: &state.template_frame,
        search: &search,
    };
    let enc = encode_pair(&mut tape, model, &crops, &GasRun::eval())?;
    Ok(enc
        .layers
        .iter()
        .filter_map(|l| l.gas.as_ref())
        .map(|g| tape.value(g.relation).clone())
        .collect())
}

/// One tracking step on a normalised frame; returns the new box and its
/// heatmap score.
pub fn track_step(model: &Tracker, state: &mut TrackerState, frame: &[f64]) -> Result<(BBox, f64)> {
    let (h, w) = (state.frame_h, state.frame_w);
    let cfg = &model.cfg;
    let (win, search) = search_crop(model, state, frame)?;
    let mut tape = Tape::new();
    let crops = PairCrops {
        template: &[],
        template_frame: &state.template_frame,
        search: &search,
    };
    let enc = encode_pair(&mut tape, model, &crops, &GasRun::eval())?;
    let t = tape.constant(state.cnn_template.clone());
    let out = head_forward(&mut tape, model, &enc, t, &search)?;
    let heat = tape.value(out.heat);
    let map = cfg.score_map();
    let mut best = 0;
    for k in 1..heat.len() {
        if heat.data[k] > heat.data[best] {
            best = k;
        }
    }
    let score = heat.data[best];
    let (i, j) = (best / map.w, best % map.w);
    let b = decode_cell(model, tape.value(out.reg), i, j);
    let (cx, cy) = win.to_frame(b.cx, b.cy);
    let bw = (b.w * win.scale).clamp(1.0, w as f64);
    let bh = (b.h * win.scale).clamp(1.0, h as f64);
    let next = BBox::new(
        cx.clamp(0.0, (w - 1) as f64),
        cy.clamp(0.0, (h - 1) as f64),
        bw,
        bh,
    );
    if !next.to_array().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("tracker output box".into()));
    }
    state.prev = next;
    Ok((next, score))
}

/// Tracks a whole normalised sequence from a given first box. The first
/// entry is the initial box with score 1.
pub fn track_sequence(
    model: &Tracker,
    frames: &[Vec<f64>],
    h: usize,
    w: usize,
    init: BBox,
) -> Result<Vec<(BBox, f64)>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Invalid("empty sequence".into()))?;
    let mut state = TrackerState::init(model, first, h, w, init)?;
    let mut out = vec![(init, 1.0)];
    for f in &frames[1..] {
        out.push(track_step(model, &mut state, f)?);
    }
    Ok(out)
}
