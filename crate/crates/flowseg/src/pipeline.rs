//! Command pipeline: data generation, training, segmentation and
//! evaluation, each reading and writing artifacts under one output
//! directory.
//!
//! Layout under the output root:
//!
//! ```text
//! manifest.json
//! volumes/vol_012.fsvl          preprocessed images, display units
//! masks/mask_012.fsvl           voxel ground truth, 0/1
//! checkpoints/fold0/{ae,flow,clf}.fsg1
//! logs/fold0/{ae,flow,clf}.csv
//! segment/tfg/fold0/vol_012/{counterfactual,residual,mask}.fsvl
//! segment/tfg/fold0/vol_012/{trace,probe}.csv + panels/*.pgm
//! results.csv  summary.csv  table.txt
//! ```
//!
//! Every command is a pure function of (config, seed, prior artifacts),
//! so re-runs overwrite with byte-identical files.

use crate::baselines::{self, AttributionMethod};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::flow::{train_flow, flow_train_checkpoint, VelocityField};
use crate::guidance::{tfg_segment, GuidanceModels, SegmentationResult};
use crate::io::{
    fmt_f32, fmt_f64, read_checkpoint, read_manifest, read_volume, write_checkpoint, write_csv,
    write_manifest, write_pgm, write_volume, Manifest, VolumeEntry, MANIFEST_VERSION,
};
use crate::latent::{ae_train_checkpoint, display_to_unit, train_autoencoder, Autoencoder, TrainLogRow};
use crate::metrics::{dice, mean_surface_distance, render_table, summarize, MethodSummary, VolumeMetrics};
use crate::phantom::{generate_phantom, make_folds, preprocess, slice_labels, Volume};
use crate::predictor::{predictor_train_checkpoint, train_predictor, Classifier};
use crate::rng;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Path policy for one output directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
}

pub fn volume_label(id: usize) -> String {
    format!("vol_{id:03}")
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn volume_rel(&self, id: usize) -> String {
        format!("volumes/{}.fsvl", volume_label(id))
    }

    pub fn mask_rel(&self, id: usize) -> String {
        format!("masks/mask_{id:03}.fsvl")
    }

    pub fn checkpoint_path(&self, fold: usize, which: &str) -> PathBuf {
        self.root.join(format!("checkpoints/fold{fold}/{which}.fsg1"))
    }

    pub fn log_path(&self, fold: usize, which: &str) -> PathBuf {
        self.root.join(format!("logs/fold{fold}/{which}.csv"))
    }

    pub fn segment_dir(&self, method: &str, fold: usize, id: usize) -> PathBuf {
        self.root.join(format!("segment/{method}/fold{fold}/{}", volume_label(id)))
    }

    pub fn results_csv(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn summary_csv(&self) -> PathBuf {
        self.root.join("summary.csv")
    }

    pub fn table_txt(&self) -> PathBuf {
        self.root.join("table.txt")
    }

    fn load_manifest(&self) -> Result<Manifest> {
        read_manifest(&self.manifest_path())
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Run `f` over `items` on up to `jobs` threads, preserving result order.
/// On failure the error from the lowest item index wins, so the outcome
/// does not depend on scheduling.
fn par_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    let failure: Mutex<Option<(usize, Error)>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                match f(&items[i]) {
                    Ok(r) => slots.lock().unwrap()[i] = Some(r),
                    Err(e) => {
                        let mut slot = failure.lock().unwrap();
                        if slot.as_ref().map_or(true, |(at, _)| i < *at) {
                            *slot = Some((i, e));
                        }
                        break;
                    }
                }
            });
        }
    });
    if let Some((_, e)) = failure.into_inner().unwrap() {
        return Err(e);
    }
    Ok(slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("worker filled every slot"))
        .collect())
}

/// Generate the phantom corpus: volumes, masks, and the manifest tying
/// ids to files, per-slice labels, and fold assignments.
pub fn gen_data(cfg: &RunConfig) -> Result<Manifest> {
    let pcfg = cfg.phantom_config();
    pcfg.validate()?;
    let ws = Workspace::new(&cfg.out);
    std::fs::create_dir_all(ws.root().join("volumes"))?;
    std::fs::create_dir_all(ws.root().join("masks"))?;

    let fold_of: Vec<usize> = if cfg.data_count == 0 {
        Vec::new()
    } else {
        let folds = make_folds(cfg.data_count, cfg.k_folds, rng::substream_seed(cfg.seed, "folds"))?;
        let mut of = vec![0usize; cfg.data_count];
        for (f, split) in folds.iter().enumerate() {
            for &id in &split.eval {
                of[id] = f;
            }
        }
        of
    };

    let mut entries = Vec::with_capacity(cfg.data_count);
    for id in 0..cfg.data_count {
        let vseed = rng::substream_seed(cfg.seed, &format!("data/{id}"));
        let ph = generate_phantom(&pcfg, vseed)?;
        let image = preprocess(&ph.image);
        let labels = slice_labels(&ph.gt_mask);
        let image_rel = ws.volume_rel(id);
        let mask_rel = ws.mask_rel(id);
        write_volume(&ws.root().join(&image_rel), &image)?;
        write_volume(&ws.root().join(&mask_rel), &ph.gt_mask)?;
        entries.push(VolumeEntry {
            id,
            seed: vseed,
            image: image_rel,
            mask: mask_rel,
            labels: labels.iter().map(|&b| u8::from(b)).collect(),
            fold: fold_of[id],
            nodule_count: ph.nodules.len(),
        });
    }

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: cfg.seed,
        dims: pcfg.dims,
        spacing: pcfg.spacing,
        k_folds: cfg.k_folds,
        volumes: entries,
    };
    write_manifest(&ws.manifest_path(), &manifest)?;
    Ok(manifest)
}

fn check_fold(manifest: &Manifest, fold: usize) -> Result<()> {
    if fold >= manifest.k_folds {
        return Err(Error::Config(format!(
            "fold {fold} out of range: corpus has {} folds",
            manifest.k_folds
        )));
    }
    Ok(())
}

fn read_display_volume(ws: &Workspace, entry: &VolumeEntry) -> Result<Volume> {
    read_volume(&ws.root().join(&entry.image))
}

fn read_gt_mask(ws: &Workspace, entry: &VolumeEntry) -> Result<Volume> {
    read_volume(&ws.root().join(&entry.mask))
}

fn training_entries<'m>(manifest: &'m Manifest, fold: usize) -> Result<Vec<&'m VolumeEntry>> {
    let ids = manifest.ids_not_in_fold(fold);
    if ids.is_empty() {
        return Err(Error::Config(format!("fold {fold} leaves no training volumes")));
    }
    ids.iter().map(|&id| manifest.entry(id)).collect()
}

fn write_train_log(path: &Path, log: &[TrainLogRow]) -> Result<()> {
    ensure_parent(path)?;
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                fmt_f32(r.loss),
                r.val.map(fmt_f32).unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(path, &["step", "loss", "val"], &rows)
}

/// Train (or, in identity mode, materialize) the autoencoder for one
/// fold. Returns the final held-out reconstruction MSE.
pub fn train_ae_cmd(cfg: &RunConfig, fold: usize) -> Result<f32> {
    let ws = Workspace::new(&cfg.out);
    let manifest = ws.load_manifest()?;
    check_fold(&manifest, fold)?;
    let ckpt_path = ws.checkpoint_path(fold, "ae");
    ensure_parent(&ckpt_path)?;

    if cfg.ae_identity {
        let ae = Autoencoder::identity_mode();
        write_checkpoint(&ckpt_path, &ae.to_checkpoint()?)?;
        write_train_log(&ws.log_path(fold, "ae"), &[])?;
        return Ok(0.0);
    }

    let entries = training_entries(&manifest, fold)?;
    let vols: Vec<_> = entries
        .iter()
        .map(|e| read_display_volume(&ws, e).map(|v| display_to_unit(&v)))
        .collect::<Result<_>>()?;
    let mut train_rng = rng::substream(cfg.seed, &format!("train/ae/fold{fold}"));
    let out = train_autoencoder(&vols, &cfg.ae_config(), &mut train_rng, None)?;
    write_checkpoint(&ckpt_path, &ae_train_checkpoint(&out.ae, &train_rng)?)?;
    write_train_log(&ws.log_path(fold, "ae"), &out.log)?;
    Ok(out.final_val_mse)
}

/// Load the three trained models segmentation needs for one fold.
pub fn load_fold_models(
    cfg: &RunConfig,
    fold: usize,
) -> Result<(Autoencoder, VelocityField, Classifier)> {
    let ws = Workspace::new(&cfg.out);
    Ok((load_ae(cfg, &ws, fold)?, load_flow(&ws, fold)?, load_clf(&ws, fold)?))
}

fn load_ae(cfg: &RunConfig, ws: &Workspace, fold: usize) -> Result<Autoencoder> {
    if cfg.ae_identity {
        return Ok(Autoencoder::identity_mode());
    }
    let path = ws.checkpoint_path(fold, "ae");
    let ckpt = read_checkpoint(&path).map_err(|e| missing_hint(e, "train-ae", fold))?;
    Autoencoder::from_checkpoint(&ckpt)
}

fn load_flow(ws: &Workspace, fold: usize) -> Result<VelocityField> {
    let ckpt = read_checkpoint(&ws.checkpoint_path(fold, "flow"))
        .map_err(|e| missing_hint(e, "train-flow", fold))?;
    VelocityField::from_checkpoint(&ckpt)
}

fn load_clf(ws: &Workspace, fold: usize) -> Result<Classifier> {
    let ckpt = read_checkpoint(&ws.checkpoint_path(fold, "clf"))
        .map_err(|e| missing_hint(e, "train-predictor", fold))?;
    Classifier::from_checkpoint(&ckpt)
}

fn missing_hint(e: Error, command: &str, fold: usize) -> Error {
    match e {
        Error::MissingArtifact(m) => {
            Error::MissingArtifact(format!("{m}; run `flowseg {command} --fold {fold}` first"))
        }
        other => other,
    }
}

/// Train the latent velocity field for one fold. Returns (head, tail)
/// mean losses over 100-step windows for a quick convergence read.
pub fn train_flow_cmd(cfg: &RunConfig, fold: usize) -> Result<(f64, f64)> {
    let ws = Workspace::new(&cfg.out);
    let manifest = ws.load_manifest()?;
    check_fold(&manifest, fold)?;
    let ae = load_ae(cfg, &ws, fold)?;
    let entries = training_entries(&manifest, fold)?;
    let latents: Vec<_> = entries
        .iter()
        .map(|e| {
            let v = read_display_volume(&ws, e)?;
            ae.encode_tensor(&display_to_unit(&v))
        })
        .collect::<Result<_>>()?;
    let mut train_rng = rng::substream(cfg.seed, &format!("train/flow/fold{fold}"));
    let out = train_flow(&latents, &cfg.flow_config(), &mut train_rng, None)?;
    let ckpt_path = ws.checkpoint_path(fold, "flow");
    ensure_parent(&ckpt_path)?;
    write_checkpoint(&ckpt_path, &flow_train_checkpoint(&out.field, &train_rng)?)?;
    write_train_log(&ws.log_path(fold, "flow"), &out.log)?;
    Ok((out.head_mean_loss(100), out.tail_mean_loss(100)))
}

/// Train the slice classifier for one fold. Returns the best held-out F1.
pub fn train_predictor_cmd(cfg: &RunConfig, fold: usize) -> Result<f32> {
    let ws = Workspace::new(&cfg.out);
    let manifest = ws.load_manifest()?;
    check_fold(&manifest, fold)?;
    let entries = training_entries(&manifest, fold)?;
    let samples: Vec<(Volume, Vec<bool>)> = entries
        .iter()
        .map(|e| {
            let v = read_display_volume(&ws, e)?;
            Ok((v, e.labels.iter().map(|&b| b != 0).collect()))
        })
        .collect::<Result<_>>()?;
    let mut train_rng = rng::substream(cfg.seed, &format!("train/clf/fold{fold}"));
    let out = train_predictor(
        &samples,
        &cfg.predictor_config(),
        &cfg.augmentation_config(),
        &mut train_rng,
        None,
    )?;
    let ckpt_path = ws.checkpoint_path(fold, "clf");
    ensure_parent(&ckpt_path)?;
    write_checkpoint(&ckpt_path, &predictor_train_checkpoint(&out, &train_rng)?)?;
    write_train_log(&ws.log_path(fold, "clf"), &out.log)?;
    Ok(out.best_f1)
}

/// Axial slices worth rendering: anything positive in ground truth or
/// prediction, or the center slice when both are empty.
fn panel_slices(gt: &Volume, mask: &Volume) -> Vec<usize> {
    let mut out: Vec<usize> = (0..gt.depth())
        .filter(|&k| {
            gt.axial_slice(k).iter().any(|&v| v > 0.5) || mask.axial_slice(k).iter().any(|&v| v > 0.5)
        })
        .collect();
    if out.is_empty() {
        out.push(gt.depth() / 2);
    }
    out
}

fn write_panel(dir: &Path, slice: usize, name: &str, v: &Volume, lo: f32, hi: f32) -> Result<()> {
    let [d0, d1, _] = v.dims;
    let path = dir.join(format!("s{slice:03}_{name}.pgm"));
    ensure_parent(&path)?;
    write_pgm(&path, d1, d0, &v.axial_slice(slice), lo, hi)
}

fn write_tfg_outputs(
    dir: &Path,
    x: &Volume,
    gt: &Volume,
    result: &SegmentationResult,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_volume(&dir.join("counterfactual.fsvl"), &result.counterfactual)?;
    write_volume(&dir.join("residual.fsvl"), &result.residual)?;
    write_volume(&dir.join("mask.fsvl"), &result.mask)?;

    let trace_rows: Vec<Vec<String>> = result
        .trace
        .rows
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                fmt_f32(r.grad_norm),
                fmt_f32(r.loss),
                fmt_f32(r.mean_prob),
            ]
        })
        .collect();
    write_csv(
        &dir.join("trace.csv"),
        &["step", "grad_norm", "loss", "mean_prob"],
        &trace_rows,
    )?;

    // Before/after probe: the first guided step's mean probability vs the
    // re-evaluation after the last guided update.
    let pre = result.trace.rows.first().map(|r| fmt_f32(r.mean_prob)).unwrap_or_default();
    let post = result.trace.final_mean_prob.map(fmt_f32).unwrap_or_default();
    write_csv(
        &dir.join("probe.csv"),
        &["pre_prob", "post_prob", "skipped"],
        &[vec![pre, post, u8::from(result.guidance_skipped).to_string()]],
    )?;

    let panels = dir.join("panels");
    let residual_hi = result.residual.values.iter().cloned().fold(0.0f32, f32::max).max(1e-6);
    for k in panel_slices(gt, &result.mask) {
        write_panel(&panels, k, "input", x, 0.0, 255.0)?;
        write_panel(&panels, k, "counterfactual", &result.counterfactual, 0.0, 255.0)?;
        write_panel(&panels, k, "residual", &result.residual, 0.0, residual_hi)?;
        write_panel(&panels, k, "mask", &result.mask, 0.0, 1.0)?;
        write_panel(&panels, k, "gt", gt, 0.0, 1.0)?;
    }
    Ok(())
}

fn write_baseline_outputs(dir: &Path, x: &Volume, gt: &Volume, mask: &Volume) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_volume(&dir.join("mask.fsvl"), mask)?;
    let panels = dir.join("panels");
    for k in panel_slices(gt, mask) {
        write_panel(&panels, k, "input", x, 0.0, 255.0)?;
        write_panel(&panels, k, "mask", mask, 0.0, 1.0)?;
        write_panel(&panels, k, "gt", gt, 0.0, 1.0)?;
    }
    Ok(())
}

/// Which volumes one segment invocation covers.
fn segment_targets(
    manifest: &Manifest,
    fold: Option<usize>,
    volume: Option<usize>,
) -> Result<Vec<(usize, usize)>> {
    if let Some(id) = volume {
        let entry = manifest.entry(id)?;
        if let Some(f) = fold {
            if f != entry.fold {
                return Err(Error::Config(format!(
                    "volume {id} belongs to fold {}, not fold {f}",
                    entry.fold
                )));
            }
        }
        return Ok(vec![(entry.fold, id)]);
    }
    let folds: Vec<usize> = match fold {
        Some(f) => {
            check_fold(manifest, f)?;
            vec![f]
        }
        None => (0..manifest.k_folds).collect(),
    };
    let mut targets = Vec::new();
    for f in folds {
        for id in manifest.ids_in_fold(f) {
            targets.push((f, id));
        }
    }
    Ok(targets)
}

/// Segment held-out volumes with one method. Returns the number of
/// volumes processed.
pub fn segment_cmd(
    cfg: &RunConfig,
    method: &str,
    fold: Option<usize>,
    volume: Option<usize>,
    s_override: Option<f32>,
    jobs: usize,
) -> Result<usize> {
    if method != "tfg" && s_override.is_some() {
        return Err(Error::Config("--s only applies to --method tfg".into()));
    }
    let attribution = if method == "tfg" {
        None
    } else {
        Some(AttributionMethod::from_str(method)?)
    };
    let ws = Workspace::new(&cfg.out);
    let manifest = ws.load_manifest()?;
    let targets = segment_targets(&manifest, fold, volume)?;
    let mut folds: Vec<usize> = targets.iter().map(|&(f, _)| f).collect();
    folds.sort_unstable();
    folds.dedup();

    let mut gcfg = cfg.guidance_config();
    if let Some(s) = s_override {
        gcfg.s = s;
    }
    gcfg.validate()?;

    for &f in &folds {
        let clf = load_clf(&ws, f)?;
        let fold_targets: Vec<usize> =
            targets.iter().filter(|&&(tf, _)| tf == f).map(|&(_, id)| id).collect();
        if let Some(attr) = attribution {
            par_map(&fold_targets, jobs, |&id| {
                let clf = clf.clone();
                let entry = manifest.entry(id)?;
                let x = read_display_volume(&ws, entry)?;
                let gt = read_gt_mask(&ws, entry)?;
                let mask = baselines::baseline_segment(
                    &clf,
                    &x,
                    attr,
                    cfg.baseline_positive_threshold,
                    cfg.baseline_theta,
                )?;
                write_baseline_outputs(&ws.segment_dir(method, f, id), &x, &gt, &mask)
            })?;
        } else {
            let ae = load_ae(cfg, &ws, f)?;
            let flow = load_flow(&ws, f)?;
            par_map(&fold_targets, jobs, |&id| {
                // Each worker runs against its own copies; the originals
                // stay untouched for the next fold.
                let ae = ae.clone();
                let flow = flow.clone();
                let clf = clf.clone();
                let models = GuidanceModels { ae: &ae, flow: &flow, clf: &clf };
                let entry = manifest.entry(id)?;
                let x = read_display_volume(&ws, entry)?;
                let gt = read_gt_mask(&ws, entry)?;
                let result = tfg_segment(&x, &models, &gcfg)?;
                write_tfg_outputs(&ws.segment_dir(method, f, id), &x, &gt, &result)
            })?;
        }
    }
    Ok(targets.len())
}

/// Score every (method, fold, held-out volume) cell and write
/// results.csv, summary.csv and table.txt. Returns the rendered table.
pub fn eval_cmd(
    cfg: &RunConfig,
    methods: &[String],
    k_override: Option<usize>,
    jobs: usize,
) -> Result<String> {
    if methods.is_empty() {
        return Err(Error::Config("eval needs at least one method".into()));
    }
    let ws = Workspace::new(&cfg.out);
    let manifest = ws.load_manifest()?;
    let k = k_override.unwrap_or(manifest.k_folds);
    if k == 0 || k > manifest.k_folds {
        return Err(Error::Config(format!(
            "--k {k} out of range: corpus has {} folds",
            manifest.k_folds
        )));
    }

    // Enumerate every expected cell first and report all gaps at once.
    let mut cells: Vec<(String, usize, usize)> = Vec::new();
    let mut missing: Vec<String> = Vec::new();
    for method in methods {
        for f in 0..k {
            for id in manifest.ids_in_fold(f) {
                let mask_path = ws.segment_dir(method, f, id).join("mask.fsvl");
                if mask_path.is_file() {
                    cells.push((method.clone(), f, id));
                } else {
                    missing.push(format!("{method} fold {f} {}", volume_label(id)));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "{} segment outputs absent: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    if cells.is_empty() {
        return Err(Error::Config("no held-out volumes to evaluate".into()));
    }

    let rows: Vec<VolumeMetrics> = par_map(&cells, jobs, |(method, f, id)| {
        let entry = manifest.entry(*id)?;
        let gt = read_gt_mask(&ws, entry)?;
        let pred = read_volume(&ws.segment_dir(method, *f, *id).join("mask.fsvl"))?;
        Ok(VolumeMetrics {
            volume_id: volume_label(*id),
            fold: *f,
            dice: dice(&pred, &gt)?,
            msd_mm: mean_surface_distance(&pred, &gt, gt.spacing)?,
        })
    })?;

    let csv_rows: Vec<Vec<String>> = cells
        .iter()
        .zip(&rows)
        .map(|((method, f, _), r)| {
            vec![
                method.clone(),
                f.to_string(),
                r.volume_id.clone(),
                fmt_f64(r.dice),
                fmt_f64(r.msd_mm),
            ]
        })
        .collect();
    write_csv(
        &ws.results_csv(),
        &["method", "fold", "volume_id", "dice", "msd_mm"],
        &csv_rows,
    )?;

    let summaries: Vec<MethodSummary> = methods
        .iter()
        .map(|m| {
            let mine: Vec<VolumeMetrics> = cells
                .iter()
                .zip(&rows)
                .filter(|((cm, _, _), _)| cm == m)
                .map(|(_, r)| r.clone())
                .collect();
            summarize(m, &mine)
        })
        .collect::<Result<_>>()?;
    let summary_rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| {
            vec![
                s.method.clone(),
                fmt_f64(s.mean_dice),
                fmt_f64(s.std_dice),
                fmt_f64(s.median_msd),
            ]
        })
        .collect();
    write_csv(
        &ws.summary_csv(),
        &["method", "mean_dice", "std_dice", "median_msd"],
        &summary_rows,
    )?;

    let table = render_table(&summaries);
    std::fs::write(ws.table_txt(), &table)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use tempfile::TempDir;

    /// Smallest corpus the pipeline accepts: 16-cubed phantoms need the
    /// tight nodule geometry, identity latents skip AE training.
    fn tiny_config(root: &Path) -> RunConfig {
        let mut c = RunConfig::default();
        c.out = root.to_string_lossy().into_owned();
        c.seed = 11;
        c.data_count = 6;
        c.dims = [16, 16, 16];
        c.nodule_count = (1, 1);
        c.radius_mm = (1.0, 1.5);
        c.lobed_p = 0.0;
        c.k_folds = 2;
        c.ae_identity = true;
        c.flow_t_steps = 4;
        c.flow_steps = 2;
        c.flow_batch = 1;
        c.guidance_tau = 2;
        c.guidance_m = 1;
        c.predictor_iterations = 4;
        c.predictor_eval_every = 2;
        c.predictor_batch = 1;
        c.slab_k = 3;
        c
    }

    #[test]
    fn gen_data_is_deterministic_and_complete() {
        let dir = TempDir::new().unwrap();
        let cfg = tiny_config(dir.path());
        let m = gen_data(&cfg).unwrap();
        assert_eq!(m.volumes.len(), 6);
        m.validate(dir.path()).unwrap();
        // Every fold got at least one eval volume.
        for f in 0..2 {
            assert!(!m.ids_in_fold(f).is_empty());
        }
        let manifest_bytes = std::fs::read(Workspace::new(dir.path()).manifest_path()).unwrap();
        let vol_bytes = std::fs::read(dir.path().join("volumes/vol_000.fsvl")).unwrap();

        // Regenerating into a second directory yields identical bytes.
        let dir2 = TempDir::new().unwrap();
        let mut cfg2 = tiny_config(dir2.path());
        cfg2.out = dir2.path().to_string_lossy().into_owned();
        gen_data(&cfg2).unwrap();
        let manifest_bytes2 = std::fs::read(Workspace::new(dir2.path()).manifest_path()).unwrap();
        let vol_bytes2 = std::fs::read(dir2.path().join("volumes/vol_000.fsvl")).unwrap();
        // The manifests differ only if paths differ; ours are relative,
        // so the bytes match.
        assert_eq!(manifest_bytes, manifest_bytes2);
        assert_eq!(vol_bytes, vol_bytes2);
    }

    #[test]
    fn gen_data_with_zero_volumes_writes_an_empty_manifest() {
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.data_count = 0;
        let m = gen_data(&cfg).unwrap();
        assert!(m.volumes.is_empty());
        assert!(Workspace::new(dir.path()).manifest_path().is_file());
    }

    #[test]
    fn training_commands_require_the_corpus() {
        let dir = TempDir::new().unwrap();
        let cfg = tiny_config(dir.path());
        let err = train_ae_cmd(&cfg, 0).unwrap_err();
        assert_eq!(err.exit_code(), 3, "{err}");
    }

    #[test]
    fn segment_requires_checkpoints_with_a_hint() {
        let dir = TempDir::new().unwrap();
        let cfg = tiny_config(dir.path());
        gen_data(&cfg).unwrap();
        let err = segment_cmd(&cfg, "tfg", Some(0), None, None, 1).unwrap_err();
        assert_eq!(err.exit_code(), 3, "{err}");
        assert!(err.to_string().contains("train-predictor"), "{err}");
    }

    #[test]
    fn pipeline_end_to_end_on_a_tiny_corpus() {
        let dir = TempDir::new().unwrap();
        let cfg = tiny_config(dir.path());
        gen_data(&cfg).unwrap();
        let mse = train_ae_cmd(&cfg, 0).unwrap();
        assert_eq!(mse, 0.0, "identity mode reconstructs exactly");
        train_flow_cmd(&cfg, 0).unwrap();
        let f1 = train_predictor_cmd(&cfg, 0).unwrap();
        assert!((0.0..=1.0).contains(&f1));

        let n = segment_cmd(&cfg, "tfg", Some(0), None, None, 1).unwrap();
        let ws = Workspace::new(dir.path());
        let manifest = ws.load_manifest().unwrap();
        assert_eq!(n, manifest.ids_in_fold(0).len());
        let n2 = segment_cmd(&cfg, "cam", Some(0), None, None, 2).unwrap();
        assert_eq!(n2, n);

        let id = manifest.ids_in_fold(0)[0];
        let tdir = ws.segment_dir("tfg", 0, id);
        for f in ["counterfactual.fsvl", "residual.fsvl", "mask.fsvl", "trace.csv", "probe.csv"] {
            assert!(tdir.join(f).is_file(), "missing {f}");
        }
        assert!(std::fs::read_dir(tdir.join("panels")).unwrap().count() >= 5);

        // Eval over fold 0 only; fold 1 has no outputs, so a full eval
        // must list them and abort.
        let methods = vec!["tfg".to_string(), "cam".to_string()];
        let err = eval_cmd(&cfg, &methods, None, 1).unwrap_err();
        assert_eq!(err.exit_code(), 3, "{err}");
        assert!(err.to_string().contains("fold 1"), "{err}");

        let table = eval_cmd(&cfg, &methods, Some(1), 1).unwrap();
        assert!(table.contains("Ours"), "{table}");
        assert!(table.contains("CAM"), "{table}");
        assert!(ws.results_csv().is_file());
        assert!(ws.summary_csv().is_file());

        // Re-running eval on unchanged inputs is byte-identical.
        let before = std::fs::read(ws.results_csv()).unwrap();
        eval_cmd(&cfg, &methods, Some(1), 2).unwrap();
        let after = std::fs::read(ws.results_csv()).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn segment_single_volume_checks_fold_membership() {
        let dir = TempDir::new().unwrap();
        let cfg = tiny_config(dir.path());
        let manifest = gen_data(&cfg).unwrap();
        let id = manifest.ids_in_fold(1)[0];
        let err = segment_cmd(&cfg, "tfg", Some(0), Some(id), None, 1).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");
        let err = segment_cmd(&cfg, "cam", None, None, Some(0.0), 1).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");
    }

    #[test]
    fn par_map_preserves_order_and_reports_lowest_failure() {
        let items: Vec<usize> = (0..50).collect();
        let out = par_map(&items, 8, |&i| Ok::<usize, Error>(i * 2)).unwrap();
        assert_eq!(out, (0..100).step_by(2).collect::<Vec<_>>());
        let err = par_map(&items, 8, |&i| {
            if i % 7 == 3 {
                Err(Error::Numeric(format!("boom {i}")))
            } else {
                Ok(i)
            }
        })
        .unwrap_err();
        assert_eq!(err.to_string(), "numeric: boom 3");
    }
}
