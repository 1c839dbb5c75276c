//! Flat `key=value` run configuration shared by every subcommand.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use lfesi::attn::{AttnConfig, MaskMode};
use lfesi::esi::{ChannelPolicy, EsiConfig, EsiVariant};
use lfesi::gas::{GasConfig, RelationMode};
use lfesi::gradcheck::{GradCheckOptions, StackCheck};
use lfesi::track::{LossWeights, ToyConfig, TrackerConfig, TrainConfig};
use lfesi::Error;

/// Which subcommands read a key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Esi,
    Model,
    Train,
    Toy,
    Track,
    GradCheck,
}

pub struct KeyInfo {
    pub key: &'static str,
    pub group: Group,
    pub help: &'static str,
}

const fn k(key: &'static str, group: Group, help: &'static str) -> KeyInfo {
    KeyInfo { key, group, help }
}

pub const KEYS: &[KeyInfo] = &[
    k("esi_step", Group::Esi, "angular gradient step d"),
    k("esi_variant", Group::Esi, "esi|max|mean|sum|h_only|v_only"),
    k("channel_policy", Group::Esi, "luma|per_channel"),
    k("patch", Group::Model, "patch side P (must be 8)"),
    k("c_emb", Group::Model, "embedding width"),
    k("depth", Group::Model, "encoder layers"),
    k("heads", Group::Model, "attention heads"),
    k("norm", Group::Model, "pre|none"),
    k("gas", Group::Model, "partition branch on|off"),
    k("tau", Group::Model, "Gumbel-softmax temperature"),
    k("mask_mode", Group::Model, "post_softmax|pre_softmax"),
    k("relation_mode", Group::Model, "full|intra|inter"),
    k(
        "mask_rate",
        Group::Model,
        "hidden token fraction of the reconstruction task",
    ),
    k("decoder_depth", Group::Model, "decoder layers"),
    k("decoder_heads", Group::Model, "decoder heads"),
    k(
        "p_drop",
        Group::Model,
        "same-frame attention dropout in the decoder",
    ),
    k(
        "literal_loss",
        Group::Model,
        "score all rows against the zeroed target (true|false)",
    ),
    k(
        "backbone",
        Group::Model,
        "conv channels of the first two stages, e.g. 16,32",
    ),
    k(
        "template_side",
        Group::Model,
        "template crop side in pixels",
    ),
    k("search_side", Group::Model, "search crop side in pixels"),
    k(
        "search_scale",
        Group::Model,
        "search crop side over target side",
    ),
    k("lambda_ssl", Group::Model, "reconstruction loss weight"),
    k("lambda_cls", Group::Model, "heatmap loss weight"),
    k("lambda_reg", Group::Model, "box loss weight"),
    k("steps", Group::Train, "optimisation steps"),
    k("lr", Group::Train, "learning rate"),
    k("weight_decay", Group::Train, "decoupled weight decay"),
    k(
        "seed",
        Group::Train,
        "seed of initialisation, sampling and noise",
    ),
    k("max_gap", Group::Train, "largest template/search frame gap"),
    k(
        "jitter",
        Group::Train,
        "search centre jitter as a fraction of the box side",
    ),
    k(
        "scale_jitter",
        Group::Train,
        "log-uniform search scale jitter",
    ),
    k(
        "tau_anneal",
        Group::Train,
        "temperature factor per anneal period",
    ),
    k("anneal_every", Group::Train, "steps per anneal period"),
    k(
        "fixed_sample",
        Group::Train,
        "reuse the first sample at every step (true|false)",
    ),
    k(
        "toy_videos",
        Group::Toy,
        "synthetic training videos when no data is given",
    ),
    k("toy_seed", Group::Toy, "seed of the first synthetic video"),
    k("toy_size", Group::Toy, "synthetic frame side"),
    k("toy_frames", Group::Toy, "frames per synthetic video"),
    k("toy_views", Group::Toy, "angular views per axis"),
    k(
        "toy_disparity",
        Group::Toy,
        "target disparity in pixels per view",
    ),
    k(
        "toy_speed",
        Group::Toy,
        "largest target speed in pixels per frame",
    ),
    k(
        "toy_distractor",
        Group::Toy,
        "add a zero-disparity distractor (true|false)",
    ),
    k(
        "target_layer",
        Group::Track,
        "ground-truth layer that is the target",
    ),
    k("gc_tol", Group::GradCheck, "relative error tolerance"),
    k(
        "gc_st_tol",
        Group::GradCheck,
        "tolerance of the relaxed partition path",
    ),
    k("gc_eps", Group::GradCheck, "finite-difference step"),
    k(
        "gc_per_param",
        Group::GradCheck,
        "entries checked per parameter tensor (0 = all)",
    ),
];

/// Help text listing every key of the given groups, plus `extra` keys,
/// with defaults.
pub fn keys_help(groups: &[Group], extra: &[&str]) -> String {
    let d = RunConfig::default();
    let mut s = String::from("Config keys (set in --config files or with --set key=value):\n");
    for info in KEYS
        .iter()
        .filter(|i| groups.contains(&i.group) || extra.contains(&i.key))
    {
        let v = d.get(info.key).unwrap_or_default();
        s.push_str(&format!(
            "  {:<16} {} [default: {v}]\n",
            info.key, info.help
        ));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub esi: EsiConfig,
    pub tracker: TrackerConfig,
    /// Partition branch settings; kept when `gas=off` so they round-trip.
    pub gas_cfg: GasConfig,
    pub gas: bool,
    pub train: TrainConfig,
    pub toy: ToyConfig,
    pub toy_videos: usize,
    pub toy_seed: u64,
    pub target_layer: usize,
    pub gradcheck: StackCheck,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tracker = TrackerConfig::default();
        Self {
            esi: EsiConfig::default(),
            gas_cfg: tracker.gas.clone().unwrap_or_default(),
            gas: tracker.gas.is_some(),
            tracker,
            train: TrainConfig::default(),
            toy: ToyConfig::default(),
            toy_videos: 8,
            toy_seed: 0,
            target_layer: 0,
            gradcheck: StackCheck::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}={value}: {e}")).into())
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}={value}: expected true|false")).into()),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.tracker;
        let a = &mut t.attn;
        match key {
            "esi_step" => self.esi.step = parse(key, v)?,
            "esi_variant" => self.esi.variant = v.parse::<EsiVariant>()?,
            "channel_policy" => self.esi.policy = v.parse::<ChannelPolicy>()?,
            "patch" => a.patch = parse(key, v)?,
            "c_emb" => a.c_emb = parse(key, v)?,
            "depth" => a.depth = parse(key, v)?,
            "heads" => a.heads = parse(key, v)?,
            "norm" => {
                a.pre_norm = match v {
                    "pre" => true,
                    "none" => false,
                    _ => bail!(Error::Config(format!("norm={v}: expected pre|none"))),
                }
            }
            "gas" => self.gas = parse_bool(key, v)?,
            "tau" => self.gas_cfg.tau = parse(key, v)?,
            "mask_mode" => self.gas_cfg.mask_mode = v.parse::<MaskMode>()?,
            "relation_mode" => self.gas_cfg.relation_mode = v.parse::<RelationMode>()?,
            "mask_rate" => t.mask_rate = parse(key, v)?,
            "decoder_depth" => t.decoder.depth = parse(key, v)?,
            "decoder_heads" => t.decoder.heads = parse(key, v)?,
            "p_drop" => t.decoder.p_drop = parse(key, v)?,
            "literal_loss" => t.decoder.literal_loss = parse_bool(key, v)?,
            "backbone" => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 2 {
                    bail!(Error::Config(format!(
                        "backbone={v}: expected two channel counts"
                    )));
                }
                t.backbone = [parse(key, parts[0])?, parse(key, parts[1])?];
            }
            "template_side" => t.template_side = parse(key, v)?,
            "search_side" => t.search_side = parse(key, v)?,
            "search_scale" => t.search_scale = parse(key, v)?,
            "lambda_ssl" => t.weights.ssl = parse(key, v)?,
            "lambda_cls" => t.weights.cls = parse(key, v)?,
            "lambda_reg" => t.weights.reg = parse(key, v)?,
            "steps" => self.train.steps = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "weight_decay" => self.train.weight_decay = parse(key, v)?,
            "seed" => self.train.seed = parse(key, v)?,
            "max_gap" => self.train.max_gap = parse(key, v)?,
            "jitter" => self.train.jitter = parse(key, v)?,
            "scale_jitter" => self.train.scale_jitter = parse(key, v)?,
            "tau_anneal" => self.train.tau_anneal = parse(key, v)?,
            "anneal_every" => self.train.anneal_every = parse(key, v)?,
            "fixed_sample" => self.train.fixed_sample = parse_bool(key, v)?,
            "toy_videos" => self.toy_videos = parse(key, v)?,
            "toy_seed" => self.toy_seed = parse(key, v)?,
            "toy_size" => self.toy.size = parse(key, v)?,
            "toy_frames" => self.toy.frames = parse(key, v)?,
            "toy_views" => self.toy.views = parse(key, v)?,
            "toy_disparity" => self.toy.disparity = parse(key, v)?,
            "toy_speed" => self.toy.max_speed = parse(key, v)?,
            "toy_distractor" => self.toy.distractor = parse_bool(key, v)?,
            "target_layer" => self.target_layer = parse(key, v)?,
            "gc_tol" => self.gradcheck.opts.tol = parse(key, v)?,
            "gc_st_tol" => self.gradcheck.st_tol = parse(key, v)?,
            "gc_eps" => self.gradcheck.opts.eps = parse(key, v)?,
            "gc_per_param" => {
                let n: usize = parse(key, v)?;
                self.gradcheck.opts.per_param = (n > 0).then_some(n);
            }
            _ => bail!(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.tracker;
        let a = &t.attn;
        let s = match key {
            "esi_step" => self.esi.step.to_string(),
            "esi_variant" => self.esi.variant.to_string(),
            "channel_policy" => self.esi.policy.to_string(),
            "patch" => a.patch.to_string(),
            "c_emb" => a.c_emb.to_string(),
            "depth" => a.depth.to_string(),
            "heads" => a.heads.to_string(),
            "norm" => if a.pre_norm { "pre" } else { "none" }.to_string(),
            "gas" => if self.gas { "on" } else { "off" }.to_string(),
            "tau" => self.gas_cfg.tau.to_string(),
            "mask_mode" => self.gas_cfg.mask_mode.to_string(),
            "relation_mode" => self.gas_cfg.relation_mode.to_string(),
            "mask_rate" => t.mask_rate.to_string(),
            "decoder_depth" => t.decoder.depth.to_string(),
            "decoder_heads" => t.decoder.heads.to_string(),
            "p_drop" => t.decoder.p_drop.to_string(),
            "literal_loss" => t.decoder.literal_loss.to_string(),
            "backbone" => format!("{},{}", t.backbone[0], t.backbone[1]),
            "template_side" => t.template_side.to_string(),
            "search_side" => t.search_side.to_string(),
            "search_scale" => t.search_scale.to_string(),
            "lambda_ssl" => t.weights.ssl.to_string(),
            "lambda_cls" => t.weights.cls.to_string(),
            "lambda_reg" => t.weights.reg.to_string(),
            "steps" => self.train.steps.to_string(),
            "lr" => self.train.lr.to_string(),
            "weight_decay" => self.train.weight_decay.to_string(),
            "seed" => self.train.seed.to_string(),
            "max_gap" => self.train.max_gap.to_string(),
            "jitter" => self.train.jitter.to_string(),
            "scale_jitter" => self.train.scale_jitter.to_string(),
            "tau_anneal" => self.train.tau_anneal.to_string(),
            "anneal_every" => self.train.anneal_every.to_string(),
            "fixed_sample" => self.train.fixed_sample.to_string(),
            "toy_videos" => self.toy_videos.to_string(),
            "toy_seed" => self.toy_seed.to_string(),
            "toy_size" => self.toy.size.to_string(),
            "toy_frames" => self.toy.frames.to_string(),
            "toy_views" => self.toy.views.to_string(),
            "toy_disparity" => self.toy.disparity.to_string(),
            "toy_speed" => self.toy.max_speed.to_string(),
            "toy_distractor" => self.toy.distractor.to_string(),
            "target_layer" => self.target_layer.to_string(),
            "gc_tol" => self.gradcheck.opts.tol.to_string(),
            "gc_st_tol" => self.gradcheck.st_tol.to_string(),
            "gc_eps" => self.gradcheck.opts.eps.to_string(),
            "gc_per_param" => self.gradcheck.opts.per_param.unwrap_or(0).to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key=value", n + 1)))?;
            self.set(key.trim(), value)
                .with_context(|| format!("{origin}:{}", n + 1))?;
        }
        Ok(())
    }

    /// Defaults, then each file in order, then each `key=value` override;
    /// later settings win.
    pub fn load(files: &[impl AsRef<Path>], sets: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        for f in files {
            let f = f.as_ref();
            let text = fs::read_to_string(f)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", f.display())))?;
            cfg.apply_text(&text, &f.display().to_string())?;
        }
        for s in sets {
            cfg.apply_text(s, "--set")?;
        }
        Ok(cfg)
    }

    /// Every key with its current value.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|i| format!("{}={}\n", i.key, self.get(i.key).unwrap_or_default()))
            .collect()
    }

    /// Model configuration with the partition branch resolved and validated.
    pub fn tracker_config(&self) -> Result<TrackerConfig> {
        let mut t = self.tracker.clone();
        t.gas = self.gas.then(|| self.gas_cfg.clone());
        let w = t.weights;
        t.weights = LossWeights::new(w.ssl, w.cls, w.reg)?;
        let side = t.search_side;
        t.attn = AttnConfig {
            frame_h: side,
            frame_w: side,
            channels: 1,
            ..t.attn
        };
        t.validate()?;
        Ok(t)
    }

    pub fn esi_config(&self) -> Result<EsiConfig> {
        if self.esi.step == 0 {
            bail!(Error::Config("esi_step must be at least 1".into()));
        }
        Ok(self.esi)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let c = &self.train;
        if !(c.lr >= 0.0 && c.weight_decay >= 0.0 && c.jitter >= 0.0 && c.scale_jitter >= 0.0) {
            bail!(Error::Config(
                "lr, weight_decay, jitter and scale_jitter must be >= 0".into()
            ));
        }
        if !(c.tau_anneal > 0.0) || c.anneal_every == 0 {
            bail!(Error::Config(
                "tau_anneal must be > 0 and anneal_every >= 1".into()
            ));
        }
        Ok(c.clone())
    }

    pub fn toy_config(&self) -> Result<ToyConfig> {
        let t = &self.toy;
        if self.toy_videos == 0 || t.frames < 2 || t.views < 1 || t.size < 32 || t.target_side == 0
        {
            bail!(Error::Config(
                "toy data needs toy_videos >= 1, toy_frames >= 2, toy_views >= 1 and toy_size >= 32".into()
            ));
        }
        Ok(t.clone())
    }

    pub fn gradcheck_options(&self) -> Result<StackCheck> {
        let g = &self.gradcheck;
        let GradCheckOptions { tol, eps, .. } = g.opts;
        if !(tol > 0.0 && eps > 0.0 && g.st_tol > 0.0) {
            bail!(Error::Config(
                "gc_tol, gc_st_tol and gc_eps must be positive".into()
            ));
        }
        Ok(g.clone())
    }
}
