//! Run configuration: a flat, dotted-key text format plus the typed
//! struct every command consumes.
//!
//! The file is line-oriented `key = value`. Blank lines and lines whose
//! first non-space character is `#` are ignored. Keys not listed below
//! are rejected, as are duplicates; values that fail to parse name the
//! offending key. Triples (dims, spacing) are comma-separated. The seed
//! is resolved with precedence: `--seed` flag, then the `FLOWSEG_SEED`
//! environment variable, then the config file.

use crate::error::{Error, Result};
use crate::flow::FlowTrainConfig;
use crate::guidance::{GuidanceConfig, ThresholdMethod};
use crate::latent::AeTrainConfig;
use crate::phantom::PhantomConfig;
use crate::predictor::{AugmentationConfig, PredictorTrainConfig};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory; everything a run writes lives under it.
    pub out: String,
    pub data_count: usize,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub nodule_count: (usize, usize),
    pub radius_mm: (f32, f32),
    pub contrast_hu: (f32, f32),
    pub noise_hu: f32,
    pub lobed_p: f64,
    pub k_folds: usize,
    pub ae_identity: bool,
    pub ae_steps: u64,
    pub ae_lr: f32,
    pub ae_batch: usize,
    pub ae_target_mse: f32,
    pub ae_eval_every: u64,
    pub ae_holdout: f32,
    pub flow_t_steps: usize,
    pub flow_steps: u64,
    pub flow_lr: f32,
    pub flow_batch: usize,
    pub predictor_iterations: u64,
    pub predictor_lr: f32,
    pub predictor_batch: usize,
    pub predictor_eval_every: u64,
    pub predictor_holdout: f32,
    pub slab_k: usize,
    pub aug_flip_p: f32,
    pub aug_rot_p: f32,
    pub aug_rot_deg: f32,
    pub aug_trans_p: f32,
    pub aug_trans_frac: f32,
    pub aug_zoom_p: f32,
    pub aug_zoom: (f32, f32),
    pub guidance_s: f32,
    pub guidance_tau: usize,
    pub guidance_m: usize,
    pub guidance_label: f32,
    pub guidance_slice_threshold: f32,
    pub guidance_recompute_slices: bool,
    pub guidance_smooth_residual: bool,
    pub guidance_threshold: ThresholdMethod,
    pub baseline_positive_threshold: f32,
    pub baseline_theta: f32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PhantomConfig::default();
        let ae = AeTrainConfig::default();
        let fl = FlowTrainConfig::default();
        let pr = PredictorTrainConfig::default();
        let au = AugmentationConfig::default();
        let g = GuidanceConfig::default();
        RunConfig {
            seed: 42,
            out: "out".into(),
            data_count: 60,
            dims: p.dims,
            spacing: p.spacing,
            nodule_count: p.nodule_count,
            radius_mm: p.radius_mm,
            contrast_hu: p.contrast_hu,
            noise_hu: p.noise_amplitude_hu,
            lobed_p: p.lobed_probability,
            k_folds: 3,
            ae_identity: false,
            ae_steps: ae.steps,
            ae_lr: ae.lr,
            ae_batch: ae.batch,
            ae_target_mse: ae.target_mse,
            ae_eval_every: ae.eval_every,
            ae_holdout: ae.holdout_fraction,
            flow_t_steps: g.t_steps,
            flow_steps: fl.steps,
            flow_lr: fl.lr,
            flow_batch: fl.batch,
            predictor_iterations: pr.iterations,
            predictor_lr: pr.lr,
            predictor_batch: pr.batch,
            predictor_eval_every: pr.eval_every,
            predictor_holdout: pr.holdout_fraction,
            slab_k: pr.slab_k,
            aug_flip_p: au.flip_p,
            aug_rot_p: au.rot_p,
            aug_rot_deg: au.rot_deg,
            aug_trans_p: au.trans_p,
            aug_trans_frac: au.trans_frac,
            aug_zoom_p: au.zoom_p,
            aug_zoom: (au.zoom_lo, au.zoom_hi),
            guidance_s: g.s,
            guidance_tau: g.tau,
            guidance_m: g.m,
            guidance_label: g.label,
            guidance_slice_threshold: g.guided_slice_threshold,
            guidance_recompute_slices: g.recompute_slices,
            guidance_smooth_residual: g.smooth_residual,
            guidance_threshold: g.threshold,
            baseline_positive_threshold: 0.5,
            baseline_theta: 0.5,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("bad value for {key}: {v:?} (want true/false)"))),
    }
}

fn parse_triple<T: std::str::FromStr + Copy>(key: &str, v: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("{key} wants three comma-separated values, got {v:?}")));
    }
    let a = parse_num(key, parts[0])?;
    let b = parse_num(key, parts[1])?;
    let c = parse_num(key, parts[2])?;
    Ok([a, b, c])
}

fn parse_threshold(key: &str, v: &str) -> Result<ThresholdMethod> {
    if v == "otsu" {
        return Ok(ThresholdMethod::Otsu);
    }
    Ok(ThresholdMethod::Fixed(parse_num(key, v)?))
}

fn apply(c: &mut RunConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "seed" => c.seed = parse_num(key, v)?,
        "out" => c.out = v.to_string(),
        "data.count" => c.data_count = parse_num(key, v)?,
        "data.dims" => c.dims = parse_triple(key, v)?,
        "data.spacing" => c.spacing = parse_triple(key, v)?,
        "data.nodule_min" => c.nodule_count.0 = parse_num(key, v)?,
        "data.nodule_max" => c.nodule_count.1 = parse_num(key, v)?,
        "data.radius_min_mm" => c.radius_mm.0 = parse_num(key, v)?,
        "data.radius_max_mm" => c.radius_mm.1 = parse_num(key, v)?,
        "data.contrast_min_hu" => c.contrast_hu.0 = parse_num(key, v)?,
        "data.contrast_max_hu" => c.contrast_hu.1 = parse_num(key, v)?,
        "data.noise_hu" => c.noise_hu = parse_num(key, v)?,
        "data.lobed_p" => c.lobed_p = parse_num(key, v)?,
        "folds.k" => c.k_folds = parse_num(key, v)?,
        "ae.identity" => c.ae_identity = parse_bool(key, v)?,
        "ae.steps" => c.ae_steps = parse_num(key, v)?,
        "ae.lr" => c.ae_lr = parse_num(key, v)?,
        "ae.batch" => c.ae_batch = parse_num(key, v)?,
        "ae.target_mse" => c.ae_target_mse = parse_num(key, v)?,
        "ae.eval_every" => c.ae_eval_every = parse_num(key, v)?,
        "ae.holdout" => c.ae_holdout = parse_num(key, v)?,
        "flow.t_steps" => c.flow_t_steps = parse_num(key, v)?,
        "flow.steps" => c.flow_steps = parse_num(key, v)?,
        "flow.lr" => c.flow_lr = parse_num(key, v)?,
        "flow.batch" => c.flow_batch = parse_num(key, v)?,
        "predictor.iterations" => c.predictor_iterations = parse_num(key, v)?,
        "predictor.lr" => c.predictor_lr = parse_num(key, v)?,
        "predictor.batch" => c.predictor_batch = parse_num(key, v)?,
        "predictor.eval_every" => c.predictor_eval_every = parse_num(key, v)?,
        "predictor.holdout" => c.predictor_holdout = parse_num(key, v)?,
        "predictor.slab_k" => c.slab_k = parse_num(key, v)?,
        "aug.flip_p" => c.aug_flip_p = parse_num(key, v)?,
        "aug.rot_p" => c.aug_rot_p = parse_num(key, v)?,
        "aug.rot_deg" => c.aug_rot_deg = parse_num(key, v)?,
        "aug.trans_p" => c.aug_trans_p = parse_num(key, v)?,
        "aug.trans_frac" => c.aug_trans_frac = parse_num(key, v)?,
        "aug.zoom_p" => c.aug_zoom_p = parse_num(key, v)?,
        "aug.zoom_min" => c.aug_zoom.0 = parse_num(key, v)?,
        "aug.zoom_max" => c.aug_zoom.1 = parse_num(key, v)?,
        "guidance.s" => c.guidance_s = parse_num(key, v)?,
        "guidance.tau" => c.guidance_tau = parse_num(key, v)?,
        "guidance.m" => c.guidance_m = parse_num(key, v)?,
        "guidance.label" => c.guidance_label = parse_num(key, v)?,
        "guidance.slice_threshold" => c.guidance_slice_threshold = parse_num(key, v)?,
        "guidance.recompute_slices" => c.guidance_recompute_slices = parse_bool(key, v)?,
        "guidance.smooth_residual" => c.guidance_smooth_residual = parse_bool(key, v)?,
        "guidance.threshold" => c.guidance_threshold = parse_threshold(key, v)?,
        "baseline.positive_threshold" => c.baseline_positive_threshold = parse_num(key, v)?,
        "baseline.theta" => c.baseline_theta = parse_num(key, v)?,
        _ => return Err(Error::Config(format!("unknown config key {key}"))),
    }
    Ok(())
}

impl RunConfig {
    /// Parse the key-value text against the defaults. Unknown keys,
    /// duplicate keys, and malformed values are config errors.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let v = value.trim();
            if seen.iter().any(|s| s == key) {
                return Err(Error::Config(format!("duplicate key {key}")));
            }
            seen.push(key.to_string());
            apply(&mut c, key, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::MissingArtifact(format!("config file {}: {e}", path.display()))
        })?;
        RunConfig::parse(&text)
    }

    /// Set a single key from its textual value. Cross-field rules are
    /// deliberately not checked here so keys can be set in any order;
    /// call `validate` once the config is fully assembled.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        apply(self, key.trim(), value.trim())
    }

    /// Canonical text form listing every key; `parse` of it returns an
    /// equal config.
    pub fn serialize(&self) -> String {
        let tm = match self.guidance_threshold {
            ThresholdMethod::Otsu => "otsu".to_string(),
            ThresholdMethod::Fixed(t) => format!("{t}"),
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("seed", format!("{}", self.seed));
        kv("out", self.out.clone());
        kv("data.count", format!("{}", self.data_count));
        kv("data.dims", format!("{},{},{}", self.dims[0], self.dims[1], self.dims[2]));
        kv(
            "data.spacing",
            format!("{},{},{}", self.spacing[0], self.spacing[1], self.spacing[2]),
        );
        kv("data.nodule_min", format!("{}", self.nodule_count.0));
        kv("data.nodule_max", format!("{}", self.nodule_count.1));
        kv("data.radius_min_mm", format!("{}", self.radius_mm.0));
        kv("data.radius_max_mm", format!("{}", self.radius_mm.1));
        kv("data.contrast_min_hu", format!("{}", self.contrast_hu.0));
        kv("data.contrast_max_hu", format!("{}", self.contrast_hu.1));
        kv("data.noise_hu", format!("{}", self.noise_hu));
        kv("data.lobed_p", format!("{}", self.lobed_p));
        kv("folds.k", format!("{}", self.k_folds));
        kv("ae.identity", format!("{}", self.ae_identity));
        kv("ae.steps", format!("{}", self.ae_steps));
        kv("ae.lr", format!("{}", self.ae_lr));
        kv("ae.batch", format!("{}", self.ae_batch));
        kv("ae.target_mse", format!("{}", self.ae_target_mse));
        kv("ae.eval_every", format!("{}", self.ae_eval_every));
        kv("ae.holdout", format!("{}", self.ae_holdout));
        kv("flow.t_steps", format!("{}", self.flow_t_steps));
        kv("flow.steps", format!("{}", self.flow_steps));
        kv("flow.lr", format!("{}", self.flow_lr));
        kv("flow.batch", format!("{}", self.flow_batch));
        kv("predictor.iterations", format!("{}", self.predictor_iterations));
        kv("predictor.lr", format!("{}", self.predictor_lr));
        kv("predictor.batch", format!("{}", self.predictor_batch));
        kv("predictor.eval_every", format!("{}", self.predictor_eval_every));
        kv("predictor.holdout", format!("{}", self.predictor_holdout));
        kv("predictor.slab_k", format!("{}", self.slab_k));
        kv("aug.flip_p", format!("{}", self.aug_flip_p));
        kv("aug.rot_p", format!("{}", self.aug_rot_p));
        kv("aug.rot_deg", format!("{}", self.aug_rot_deg));
        kv("aug.trans_p", format!("{}", self.aug_trans_p));
        kv("aug.trans_frac", format!("{}", self.aug_trans_frac));
        kv("aug.zoom_p", format!("{}", self.aug_zoom_p));
        kv("aug.zoom_min", format!("{}", self.aug_zoom.0));
        kv("aug.zoom_max", format!("{}", self.aug_zoom.1));
        kv("guidance.s", format!("{}", self.guidance_s));
        kv("guidance.tau", format!("{}", self.guidance_tau));
        kv("guidance.m", format!("{}", self.guidance_m));
        kv("guidance.label", format!("{}", self.guidance_label));
        kv("guidance.slice_threshold", format!("{}", self.guidance_slice_threshold));
        kv("guidance.recompute_slices", format!("{}", self.guidance_recompute_slices));
        kv("guidance.smooth_residual", format!("{}", self.guidance_smooth_residual));
        kv("guidance.threshold", tm);
        kv("baseline.positive_threshold", format!("{}", self.baseline_positive_threshold));
        kv("baseline.theta", format!("{}", self.baseline_theta));
        s
    }

    /// Cross-field checks shared by every command; per-module configs
    /// re-validate on use.
    pub fn validate(&self) -> Result<()> {
        self.phantom_config().validate()?;
        self.augmentation_config().validate()?;
        self.guidance_config().validate()?;
        if self.k_folds < 2 {
            return Err(Error::Config(format!("folds.k must be >= 2, got {}", self.k_folds)));
        }
        if !(0.0..=1.0).contains(&self.baseline_positive_threshold)
            || !(0.0..=1.0).contains(&self.baseline_theta)
        {
            return Err(Error::Config("baseline thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn phantom_config(&self) -> PhantomConfig {
        PhantomConfig {
            dims: self.dims,
            spacing: self.spacing,
            nodule_count: self.nodule_count,
            radius_mm: self.radius_mm,
            contrast_hu: self.contrast_hu,
            noise_amplitude_hu: self.noise_hu,
            lobed_probability: self.lobed_p,
        }
    }

    pub fn ae_config(&self) -> AeTrainConfig {
        AeTrainConfig {
            steps: self.ae_steps,
            lr: self.ae_lr,
            batch: self.ae_batch,
            target_mse: self.ae_target_mse,
            eval_every: self.ae_eval_every,
            holdout_fraction: self.ae_holdout,
        }
    }

    pub fn flow_config(&self) -> FlowTrainConfig {
        FlowTrainConfig { steps: self.flow_steps, lr: self.flow_lr, batch: self.flow_batch }
    }

    pub fn predictor_config(&self) -> PredictorTrainConfig {
        PredictorTrainConfig {
            iterations: self.predictor_iterations,
            lr: self.predictor_lr,
            batch: self.predictor_batch,
            eval_every: self.predictor_eval_every,
            holdout_fraction: self.predictor_holdout,
            slab_k: self.slab_k,
        }
    }

    pub fn augmentation_config(&self) -> AugmentationConfig {
        AugmentationConfig {
            flip_p: self.aug_flip_p,
            rot_p: self.aug_rot_p,
            rot_deg: self.aug_rot_deg,
            trans_p: self.aug_trans_p,
            trans_frac: self.aug_trans_frac,
            zoom_p: self.aug_zoom_p,
            zoom_lo: self.aug_zoom.0,
            zoom_hi: self.aug_zoom.1,
        }
    }

    pub fn guidance_config(&self) -> GuidanceConfig {
        GuidanceConfig {
            s: self.guidance_s,
            t_steps: self.flow_t_steps,
            tau: self.guidance_tau,
            m: self.guidance_m,
            label: self.guidance_label,
            guided_slice_threshold: self.guidance_slice_threshold,
            recompute_slices: self.guidance_recompute_slices,
            smooth_residual: self.guidance_smooth_residual,
            threshold: self.guidance_threshold,
        }
    }
}

/// Seed precedence: explicit flag beats the environment beats the config
/// file. `env` is the raw FLOWSEG_SEED value when set.
pub fn resolve_seed(config_seed: u64, env: Option<&str>, flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(text) = env {
        return text
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("FLOWSEG_SEED must be an integer, got {text:?}")));
    }
    Ok(config_seed)
}

/// [`resolve_seed`] against the live environment.
pub fn resolve_seed_from_env(config_seed: u64, flag: Option<u64>) -> Result<u64> {
    let env = std::env::var("FLOWSEG_SEED").ok();
    resolve_seed(config_seed, env.as_deref(), flag)
}
