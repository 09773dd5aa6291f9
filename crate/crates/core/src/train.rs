//! Adam updates, the per-step loss choreography, and the training driver.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::{build_manifest, load_records, Fractions, PairRecord, SplitManifest};
use crate::equilibrium::{
    convergence_measure, discriminator_objective, discriminator_passes, equilibrium_step,
    generator_loss, EquilibriumState, LossReport,
};
use crate::error::{Error, Result};
use crate::eval::mean_psnr_on_records;
use crate::model::{make_pair, DiscriminatorSpec, GeneratorSpec, WidthMultiplier};
use crate::ops::l1_mean_grad;
use crate::params::ParameterSet;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "step,l_g,l_dr,l_df,l_d,k,m_c,wall_ms";
pub const VALIDATION_HEADER: &str = "epoch,step,psnr_bicubic,psnr_generator";

/// Training hyperparameters and paths, read from `key = value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub lambda_k: f64,
    pub width_multiplier: WidthMultiplier,
    pub image_size: usize,
    pub leaky_slope: f64,
    pub max_steps: u64,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Used only when no manifest file is given.
    pub fractions: Fractions,
    /// When false the `wall_ms` column is written as 0, making the metrics
    /// file a pure function of the inputs.
    pub log_wall_time: bool,
    pub corpus_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            gamma: 0.5,
            lambda_k: 0.001,
            width_multiplier: WidthMultiplier::ONE,
            image_size: 128,
            leaky_slope: 0.2,
            max_steps: 1000,
            checkpoint_every: 500,
            seed: 0,
            fractions: Fractions::default(),
            log_wall_time: true,
            corpus_dir: None,
            manifest: None,
            output_dir: None,
            resume: None,
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config { line: i + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            macro_rules! num {
                () => {
                    value
                        .parse()
                        .map_err(|_| err(format!("{key}: cannot parse {value:?}")))?
                };
            }
            match key {
                "learning_rate" => cfg.learning_rate = num!(),
                "adam_beta1" => cfg.adam_beta1 = num!(),
                "adam_beta2" => cfg.adam_beta2 = num!(),
                "adam_eps" => cfg.adam_eps = num!(),
                "batch_size" => cfg.batch_size = num!(),
                "gamma" => cfg.gamma = num!(),
                "lambda_k" => cfg.lambda_k = num!(),
                "width_multiplier" => {
                    cfg.width_multiplier = value.parse().map_err(|e: Error| err(e.to_string()))?
                }
                "image_size" => cfg.image_size = num!(),
                "leaky_slope" => cfg.leaky_slope = num!(),
                "max_steps" => cfg.max_steps = num!(),
                "checkpoint_every" => cfg.checkpoint_every = num!(),
                "seed" => cfg.seed = num!(),
                "fractions" => {
                    cfg.fractions = value.parse().map_err(|e: Error| err(e.to_string()))?
                }
                "log_wall_time" => cfg.log_wall_time = num!(),
                "corpus_dir" => cfg.corpus_dir = Some(value.into()),
                "manifest" => cfg.manifest = Some(value.into()),
                "output_dir" => cfg.output_dir = Some(value.into()),
                "resume" => cfg.resume = Some(value.into()),
                _ => return Err(err(format!("unknown key {key:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        // Relative paths in a config file are relative to the file.
        if let Some(base) = path.parent() {
            for p in [
                &mut cfg.corpus_dir,
                &mut cfg.manifest,
                &mut cfg.output_dir,
                &mut cfg.resume,
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::Invalid(msg));
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return invalid(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be at least 1".into());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return invalid(format!("leaky_slope {} outside (0, 1)", self.leaky_slope));
        }
        EquilibriumState::new(self.gamma, self.lambda_k)?;
        self.generator_spec().layout().shape_trace(self.image_size)?;
        self.discriminator_spec().layout().shape_trace(self.image_size)?;
        if !self.image_size.is_multiple_of(crate::data::UPSCALE) {
            return invalid(format!("image_size {} not divisible by 4", self.image_size));
        }
        Ok(())
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            width: self.width_multiplier,
            image_size: self.image_size,
            slope: self.leaky_slope,
        }
    }

    pub fn discriminator_spec(&self) -> DiscriminatorSpec {
        DiscriminatorSpec {
            width: self.width_multiplier,
            image_size: self.image_size,
            slope: self.leaky_slope,
        }
    }

    /// Hyperparameters only, in config-file syntax. Stored in checkpoints.
    pub fn snapshot_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("learning_rate", &self.learning_rate);
        kv("adam_beta1", &self.adam_beta1);
        kv("adam_beta2", &self.adam_beta2);
        kv("adam_eps", &self.adam_eps);
        kv("batch_size", &self.batch_size);
        kv("gamma", &self.gamma);
        kv("lambda_k", &self.lambda_k);
        kv("width_multiplier", &self.width_multiplier);
        kv("image_size", &self.image_size);
        kv("leaky_slope", &self.leaky_slope);
        kv("max_steps", &self.max_steps);
        kv("checkpoint_every", &self.checkpoint_every);
        kv("seed", &self.seed);
        kv("fractions", &self.fractions);
        kv("log_wall_time", &self.log_wall_time);
        s
    }

    /// Full config, including paths.
    pub fn to_text(&self) -> String {
        let mut s = self.snapshot_text();
        for (k, v) in [
            ("corpus_dir", &self.corpus_dir),
            ("manifest", &self.manifest),
            ("output_dir", &self.output_dir),
            ("resume", &self.resume),
        ] {
            if let Some(p) = v {
                let _ = writeln!(s, "{k} = {}", p.display());
            }
        }
        s
    }

    /// Same hyperparameters with the paths cleared.
    pub fn without_paths(&self) -> Self {
        TrainConfig {
            corpus_dir: None,
            manifest: None,
            output_dir: None,
            resume: None,
            ..self.clone()
        }
    }
}

/// Parameters of one network plus Adam first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: ParameterSet,
    pub m: ParameterSet,
    pub v: ParameterSet,
}

impl ModelState {
    pub fn new(params: ParameterSet) -> Self {
        ModelState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            params,
        }
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed steps; also the Adam time step.
    pub step: u64,
    pub g: ModelState,
    pub d: ModelState,
    pub eq: EquilibriumState,
}

impl TrainState {
    /// Fresh networks: generator from `seed`, discriminator from `seed + 1`.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(TrainState {
            step: 0,
            g: ModelState::new(cfg.generator_spec().layout().init_params(cfg.seed)),
            d: ModelState::new(
                cfg.discriminator_spec()
                    .layout()
                    .init_params(cfg.seed.wrapping_add(1)),
            ),
            eq: EquilibriumState::new(cfg.gamma, cfg.lambda_k)?,
        })
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            lr: c.learning_rate,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

/// One bias-corrected Adam update of a single tensor at time step `t >= 1`.
pub fn adam_step(
    name: &str,
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    param.check_same_shape("adam_step", grad)?;
    param.check_same_shape("adam_step", m)?;
    param.check_same_shape("adam_step", v)?;
    if t == 0 {
        return Err(Error::Invalid("adam_step: time step starts at 1".into()));
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let c1 = (1.0 - cfg.beta1.powf(t as f64)) as f32;
    let c2 = (1.0 - cfg.beta2.powf(t as f64)) as f32;
    let (lr, eps) = (cfg.lr as f32, cfg.eps as f32);
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Applies [`adam_step`] to every tensor of a model.
pub fn adam_update(
    model: &mut ModelState,
    grads: &ParameterSet,
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if !grads.same_layout(&model.params) {
        return Err(Error::Invalid(
            "gradient layout does not match parameters".into(),
        ));
    }
    let ModelState { params, m, v } = model;
    for (((name, p), (_, g)), ((_, m), (_, v))) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(m.iter_mut().zip(v.iter_mut()))
    {
        adam_step(name, p, g, m, v, t, cfg)?;
    }
    Ok(())
}

/// One minibatch: `z` is the BHR condition, `x` the real HR, `y` the
/// generator output (filled by the step).
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub z: Tensor,
    pub x: Tensor,
    pub y: Option<Tensor>,
}

impl TrainingBatch {
    pub fn from_records(records: &[&PairRecord]) -> Result<Self> {
        let z = Tensor::stack(&records.iter().map(|r| &r.bhr).collect::<Vec<_>>())?;
        let x = Tensor::stack(&records.iter().map(|r| &r.hr).collect::<Vec<_>>())?;
        Ok(TrainingBatch { z, x, y: None })
    }
}

/// Gradients and losses of one step, computed from a single forward pass
/// of each network before either is updated.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub report: LossReport,
    pub g: ParameterSet,
    pub d: ParameterSet,
}

/// Forward and backward passes of both networks.
///
/// The generator gradient comes from `L_G = |G(z) - x|` alone; the
/// discriminator sees `G(z)` as a constant input and gets the gradient of
/// `L_D = L_Dr - k L_Df`.
pub fn compute_gradients(
    batch: &mut TrainingBatch,
    state: &TrainState,
    cfg: &TrainConfig,
) -> Result<StepGradients> {
    let g_layout = cfg.generator_spec().layout();
    let d_spec = cfg.discriminator_spec();
    let d_layout = d_spec.layout();

    let g_cache = g_layout.forward(&state.g.params, &batch.z)?;
    let y = g_cache.output().clone();
    let l_g = generator_loss(&y, &batch.x)?;
    let grad_y = l1_mean_grad(&y, &batch.x, 1.0)?;
    let (g_grads, _) = g_layout.backward(&state.g.params, &g_cache, &grad_y, false)?;
    drop(g_cache);

    let real_pair = make_pair(&batch.z, &batch.x)?;
    let fake_pair = make_pair(&batch.z, &y)?;
    batch.y = Some(y);
    let (l_dr, l_df, real_cache, fake_cache) =
        discriminator_passes(&d_spec, &state.d.params, &real_pair, &fake_pair)?;
    let k = state.eq.k;
    let l_d = discriminator_objective(l_dr, l_df, &state.eq);

    let grad_real = l1_mean_grad(real_cache.output(), &real_pair, 1.0)?;
    let (mut d_grads, _) = d_layout.backward(&state.d.params, &real_cache, &grad_real, false)?;
    if k != 0.0 {
        let grad_fake = l1_mean_grad(fake_cache.output(), &fake_pair, -k)?;
        let (fake_grads, _) = d_layout.backward(&state.d.params, &fake_cache, &grad_fake, false)?;
        for ((_, acc), (_, g)) in d_grads.iter_mut().zip(fake_grads.iter()) {
            acc.axpy(1.0, g)?;
        }
    }

    let report = LossReport {
        l_g,
        l_dr,
        l_df,
        l_d,
        k,
        m_c: convergence_measure(l_dr, l_g, state.eq.gamma),
    };
    if !report.is_finite() {
        return Err(Error::NonFinite(format!("losses {report:?}")));
    }
    g_grads.ensure_finite("generator gradient")?;
    d_grads.ensure_finite("discriminator gradient")?;
    Ok(StepGradients {
        report,
        g: g_grads,
        d: d_grads,
    })
}

/// Which network's Adam update runs first. Both orders give identical
/// results because all gradients are computed beforehand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOrder {
    GeneratorFirst,
    DiscriminatorFirst,
}

/// Updates both networks and the controller from precomputed gradients.
pub fn apply_gradients(
    state: &mut TrainState,
    grads: &StepGradients,
    cfg: &TrainConfig,
    order: UpdateOrder,
) -> Result<()> {
    let adam = AdamConfig::from(cfg);
    let t = state.step + 1;
    match order {
        UpdateOrder::GeneratorFirst => {
            adam_update(&mut state.g, &grads.g, t, &adam)?;
            adam_update(&mut state.d, &grads.d, t, &adam)?;
        }
        UpdateOrder::DiscriminatorFirst => {
            adam_update(&mut state.d, &grads.d, t, &adam)?;
            adam_update(&mut state.g, &grads.g, t, &adam)?;
        }
    }
    state.eq = equilibrium_step(&state.eq, grads.report.l_dr, grads.report.l_g)?;
    state.step = t;
    Ok(())
}

/// One full training step: gradients of both networks, simultaneous Adam
/// updates, controller update.
pub fn train_step(
    batch: &mut TrainingBatch,
    state: &mut TrainState,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let grads = compute_gradients(batch, state, cfg)?;
    apply_gradients(state, &grads, cfg, UpdateOrder::GeneratorFirst)?;
    Ok(grads.report)
}

/// Deterministic batch schedule: each epoch is a ChaCha8 permutation of the
/// training records keyed by `(seed, epoch)`, cut into full batches.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    seed: u64,
    n: usize,
    batch: usize,
}

impl BatchSchedule {
    pub fn new(seed: u64, n: usize, batch_size: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Invalid("no training records".into()));
        }
        Ok(BatchSchedule {
            seed,
            n,
            batch: batch_size.min(n),
        })
    }

    pub fn batches_per_epoch(&self) -> u64 {
        (self.n / self.batch) as u64
    }

    /// Record indices for 1-based `step`.
    pub fn indices(&self, step: u64) -> Vec<usize> {
        let b = step - 1;
        let epoch = b / self.batches_per_epoch();
        let pos = (b % self.batches_per_epoch()) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut perm: Vec<usize> = (0..self.n).collect();
        perm.shuffle(&mut rng);
        perm[pos * self.batch..(pos + 1) * self.batch].to_vec()
    }

    /// True when `step` completes an epoch.
    pub fn ends_epoch(&self, step: u64) -> bool {
        step.is_multiple_of(self.batches_per_epoch())
    }
}

/// Formats one metrics CSV row.
pub fn metrics_row(step: u64, r: &LossReport, wall_ms: u128) -> String {
    format!(
        "{step},{},{},{},{},{},{},{wall_ms}",
        r.l_g, r.l_dr, r.l_df, r.l_d, r.k, r.m_c
    )
}

/// Paths written by [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutputs {
    pub checkpoint: Checkpoint,
    pub metrics: PathBuf,
    pub validation: PathBuf,
    pub final_checkpoint: PathBuf,
    pub manifest: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const VALIDATION_FILE: &str = "validation.csv";
pub const LATEST_CHECKPOINT: &str = "latest.fcgn";
pub const FINAL_CHECKPOINT: &str = "final.fcgn";
pub const MANIFEST_FILE: &str = "manifest.tsv";

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Invalid(format!("config is missing `{key}`")))
}

/// Keeps the header and the rows with `step <= keep` of an existing CSV.
fn truncate_csv(path: &Path, header: &str, keep: u64, step_column: usize) -> Result<String> {
    let mut out = format!("{header}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let step: Option<u64> = line.split(',').nth(step_column).and_then(|s| s.parse().ok());
            if step.is_some_and(|s| s <= keep) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Runs training to `cfg.max_steps`, resuming from `cfg.resume` when set.
///
/// Writes `metrics.csv` (one row per step), `validation.csv` (one row per
/// epoch, when the manifest has validation ids), `latest.fcgn` every
/// `checkpoint_every` steps, `final.fcgn`, and the manifest used.
pub fn fit(cfg: &TrainConfig) -> Result<FitOutputs> {
    cfg.validate()?;
    let corpus = required(&cfg.corpus_dir, "corpus_dir")?;
    let out_dir = required(&cfg.output_dir, "output_dir")?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let manifest = match &cfg.manifest {
        Some(p) => SplitManifest::load(p)?,
        None => build_manifest(corpus, cfg.seed, cfg.fractions)?,
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    manifest.save(&manifest_path)?;

    let train = load_records(corpus, &manifest.train, cfg.image_size)?;
    let val = load_records(corpus, &manifest.val, cfg.image_size)?;
    let schedule = BatchSchedule::new(cfg.seed, train.len(), cfg.batch_size)?;

    let mut state = match &cfg.resume {
        Some(path) => {
            let ckpt = crate::checkpoint::load_checkpoint(path)?;
            let fresh = TrainState::init(cfg)?;
            if !ckpt.state.g.params.same_layout(&fresh.g.params)
                || !ckpt.state.d.params.same_layout(&fresh.d.params)
            {
                return Err(Error::Invalid(format!(
                    "{}: network layout differs from the config",
                    path.display()
                )));
            }
            ckpt.state
        }
        None => TrainState::init(cfg)?,
    };

    let metrics_path = out_dir.join(METRICS_FILE);
    let validation_path = out_dir.join(VALIDATION_FILE);
    let metrics_prefix = truncate_csv(&metrics_path, METRICS_HEADER, state.step, 0)?;
    let validation_prefix = truncate_csv(&validation_path, VALIDATION_HEADER, state.step, 1)?;
    let open = |path: &Path, prefix: &str| -> Result<BufWriter<File>> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        w.write_all(prefix.as_bytes())
            .map_err(|e| Error::io(path, e))?;
        Ok(w)
    };
    let mut metrics = open(&metrics_path, &metrics_prefix)?;
    let mut validation = open(&validation_path, &validation_prefix)?;

    let snapshot = cfg.without_paths();
    let checkpoint_of = |state: &TrainState| Checkpoint {
        config: snapshot.clone(),
        state: state.clone(),
    };

    while state.step < cfg.max_steps {
        let step = state.step + 1;
        let picked: Vec<&PairRecord> = schedule.indices(step).iter().map(|&i| &train[i]).collect();
        let mut batch = TrainingBatch::from_records(&picked)?;
        let started = Instant::now();
        let report = match train_step(&mut batch, &mut state, cfg) {
            Ok(r) => r,
            Err(Error::NonFinite(what)) => {
                metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
                return Err(Error::Diverged { step, what });
            }
            Err(e) => return Err(e),
        };
        let wall = if cfg.log_wall_time {
            started.elapsed().as_millis()
        } else {
            0
        };
        writeln!(metrics, "{}", metrics_row(step, &report, wall))
            .map_err(|e| Error::io(&metrics_path, e))?;

        if schedule.ends_epoch(step) && !val.is_empty() {
            let epoch = step / schedule.batches_per_epoch();
            let (bicubic, generated) =
                mean_psnr_on_records(&cfg.generator_spec(), &state.g.params, &val)?;
            writeln!(
                validation,
                "{epoch},{step},{},{}",
                crate::eval::format_psnr(bicubic),
                crate::eval::format_psnr(generated)
            )
            .map_err(|e| Error::io(&validation_path, e))?;
        }

        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
            validation
                .flush()
                .map_err(|e| Error::io(&validation_path, e))?;
            save_checkpoint(&out_dir.join(LATEST_CHECKPOINT), &checkpoint_of(&state))?;
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    validation
        .flush()
        .map_err(|e| Error::io(&validation_path, e))?;

    let checkpoint = checkpoint_of(&state);
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_path, &checkpoint)?;
    Ok(FitOutputs {
        checkpoint,
        metrics: metrics_path,
        validation: validation_path,
        final_checkpoint: final_path,
        manifest: manifest_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn scalar(v: f32) -> Tensor {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn adam_zero_gradient_keeps_param() {
        let cfg = AdamConfig::from(&TrainConfig::default());
        let mut p = Tensor::from_fn(&[5], |i| i as f32);
        let orig = p.clone();
        let (mut m, mut v) = (Tensor::zeros(&[5]), Tensor::zeros(&[5]));
        adam_step("p", &mut p, &Tensor::zeros(&[5]), &mut m, &mut v, 1, &cfg).unwrap();
        assert_eq!(p, orig);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001; bias correction gives m_hat = v_hat = 1, so the
        // step is lr / (1 + eps).
        let cfg = AdamConfig::from(&TrainConfig::default());
        let mut p = scalar(1.0);
        let (mut m, mut v) = (scalar(0.0), scalar(0.0));
        adam_step("p", &mut p, &scalar(1.0), &mut m, &mut v, 1, &cfg).unwrap();
        assert!((p.data()[0] - (1.0 - 1e-4)).abs() < 1e-7);

        let mut p2 = scalar(1.0);
        let (mut m2, mut v2) = (scalar(0.0), scalar(0.0));
        adam_step("p", &mut p2, &scalar(1.0), &mut m2, &mut v2, 1, &cfg).unwrap();
        assert_eq!(p.data()[0].to_bits(), p2.data()[0].to_bits());
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let cfg = AdamConfig::from(&TrainConfig::default());
        let mut p = scalar(1.0);
        let (mut m, mut v) = (scalar(0.0), scalar(0.0));
        let err = adam_step("enc3.weight", &mut p, &scalar(f32::NAN), &mut m, &mut v, 1, &cfg)
            .unwrap_err();
        assert!(err.to_string().contains("enc3.weight"));
    }

    #[test]
    fn config_round_trip_and_errors() {
        let text = "# desk run\nlearning_rate = 0.001\nwidth_multiplier = 1/8\nbatch_size = 4\n\
                    image_size = 64\nfractions = 1,0,0\nlog_wall_time = false\noutput_dir = out\n";
        let cfg = TrainConfig::parse(text).unwrap();
        assert_eq!(cfg.learning_rate, 0.001);
        assert_eq!(cfg.width_multiplier, WidthMultiplier::new(1, 8).unwrap());
        assert_eq!(cfg.batch_size, 4);
        assert!(!cfg.log_wall_time);
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(
            TrainConfig::parse(&cfg.snapshot_text()).unwrap(),
            cfg.without_paths()
        );

        assert!(matches!(
            TrainConfig::parse("bogus = 1"),
            Err(Error::Config { line: 1, .. })
        ));
        assert!(TrainConfig::parse("batch_size = 0").is_err());
        assert!(TrainConfig::parse("image_size = 96").is_err());
        assert!(TrainConfig::parse("leaky_slope = 2").is_err());
        assert!(TrainConfig::parse("gamma").is_err());
    }

    #[test]
    fn schedule_is_a_permutation_per_epoch() {
        let s = BatchSchedule::new(3, 10, 3).unwrap();
        assert_eq!(s.batches_per_epoch(), 3);
        let mut seen: Vec<usize> = (1..=3).flat_map(|st| s.indices(st)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(s.indices(5), BatchSchedule::new(3, 10, 3).unwrap().indices(5));
        assert!(s.ends_epoch(3) && !s.ends_epoch(4));

        let one = BatchSchedule::new(0, 1, 16).unwrap();
        assert_eq!(one.indices(1), vec![0]);
        assert_eq!(one.indices(7), vec![0]);
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            width_multiplier: WidthMultiplier::new(1, 32).unwrap(),
            image_size: 64,
            batch_size: 2,
            ..Default::default()
        }
    }

    fn tiny_batch(seed: u64) -> TrainingBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hr = Tensor::from_fn(&[2, 3, 64, 64], |_| rng.random_range(-0.9f32..0.9));
        let z = Tensor::stack(&[
            &crate::data::degrade(&hr.sample(0).unwrap().reshape(&[3, 64, 64]).unwrap())
                .unwrap()
                .1,
            &crate::data::degrade(&hr.sample(1).unwrap().reshape(&[3, 64, 64]).unwrap())
                .unwrap()
                .1,
        ])
        .unwrap();
        TrainingBatch { z, x: hr, y: None }
    }

    #[test]
    fn update_order_does_not_matter() {
        let cfg = tiny_config();
        let mut state = TrainState::init(&cfg).unwrap();
        state.eq.k = 0.3;
        let grads = compute_gradients(&mut tiny_batch(1), &state, &cfg).unwrap();
        let mut a = state.clone();
        let mut b = state.clone();
        apply_gradients(&mut a, &grads, &cfg, UpdateOrder::GeneratorFirst).unwrap();
        apply_gradients(&mut b, &grads, &cfg, UpdateOrder::DiscriminatorFirst).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generator_gradient_ignores_discriminator() {
        let cfg = tiny_config();
        let state = TrainState::init(&cfg).unwrap();
        let mut other = state.clone();
        other.d = ModelState::new(cfg.discriminator_spec().layout().init_params(99));
        other.eq.k = 0.7;
        let a = compute_gradients(&mut tiny_batch(2), &state, &cfg).unwrap();
        let b = compute_gradients(&mut tiny_batch(2), &other, &cfg).unwrap();
        assert_eq!(a.g, b.g);
        assert_eq!(a.report.l_g, b.report.l_g);
        assert_ne!(a.d, b.d);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let cfg = tiny_config();
        let mut state = TrainState::init(&cfg).unwrap();
        state.eq.k = 0.5;
        let grads = compute_gradients(&mut tiny_batch(3), &state, &cfg).unwrap();
        for (name, g) in grads.g.iter().chain(grads.d.iter()) {
            assert!(g.data().iter().any(|&v| v != 0.0), "{name}");
        }
    }

    #[test]
    fn frozen_controller_keeps_k() {
        let cfg = TrainConfig {
            lambda_k: 0.0,
            ..tiny_config()
        };
        let mut state = TrainState::init(&cfg).unwrap();
        for s in 0..3 {
            let r = train_step(&mut tiny_batch(s), &mut state, &cfg).unwrap();
            assert_eq!(r.k, 0.0);
        }
        assert_eq!(state.eq.k, 0.0);
        assert_eq!(state.step, 3);
    }

    #[test]
    fn step_is_deterministic_and_finite() {
        let cfg = tiny_config();
        let mut a = TrainState::init(&cfg).unwrap();
        let mut b = TrainState::init(&cfg).unwrap();
        let ra = train_step(&mut tiny_batch(5), &mut a, &cfg).unwrap();
        let rb = train_step(&mut tiny_batch(5), &mut b, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        let mut batch = tiny_batch(5);
        let after = compute_gradients(&mut batch, &a, &cfg).unwrap();
        assert!(after.report.l_g.is_finite());
        assert!(batch.y.is_some());
    }

    #[test]
    fn non_finite_input_halts() {
        let cfg = tiny_config();
        let mut state = TrainState::init(&cfg).unwrap();
        let mut batch = tiny_batch(1);
        batch.x.data_mut()[0] = f32::NAN;
        assert!(matches!(
            train_step(&mut batch, &mut state, &cfg),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(state.step, 0);
    }
}
