//! Training loop: generate, propose a region, revise.
//!
//! Each step updates the patch discriminator, then the reviser, then the
//! generator, once each. All randomness in a step (dropout, penalty noise,
//! flips) is seeded from `(seed, global step)` and batch order from
//! `(seed, epoch)`, so a run is a pure function of its config and data, and a
//! resumed run continues exactly where the checkpoint left off.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad, Var};
use crate::checkpoint::{Checkpoint, NetworkRecord, TensorRecord};
use crate::config::TrainConfig;
use crate::data::{to_level, write_png, PairedDataset};
use crate::error::{Error, Result};
use crate::export::{heatmap, sample_grid};
use crate::fake_mask::{composite, composite_var, crop_var};
use crate::metrics::{psnr, ssim, MetricResult};
use crate::models::{Generator, Network, PatchDiscriminator, Reviser};
use crate::nn::{Adam, AdamConfig, ParamStore, Pass};
use crate::objectives::{
    generator_adversarial_term, gradient_penalty_inputs, l1_terms_var, patch_d_loss_var, penalty_from_norms_var,
    reviser_adversarial_var, reviser_gradient_norms, LossReport,
};
use crate::region_proposal::{propose_region, Region, ScoreMap};
use crate::tensor::Tensor;

pub const TELEMETRY_FILE: &str = "telemetry.csv";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";

/// Mixes a tag and counter into the master seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, tag: &str, n: u64) -> u64 {
    let mut z = seed ^ n.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for b in tag.bytes() {
        z = (z ^ b as u64).wrapping_mul(0x100_0000_01B3);
    }
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct TrainState {
    pub config: TrainConfig,
    pub generator: Generator<f32>,
    pub discriminator: PatchDiscriminator<f32>,
    pub reviser: Reviser<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub opt_r: Adam<f32>,
    /// Completed steps.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Epoch-averaged `scoremap_mean`, one entry per completed epoch.
    pub scoremap_history: Vec<f64>,
}

/// Everything a step produced, for telemetry and inspection.
pub struct StepOutput {
    pub report: LossReport,
    pub score_maps: Vec<ScoreMap>,
    pub regions: Vec<Region>,
    pub fake: Tensor<f32>,
    pub masked_fake: Tensor<f32>,
}

fn check_finite(step: u64, name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            step,
            detail: format!("{name} = {v}"),
        })
    }
}

fn update(opt: &mut Adam<f32>, store: &mut ParamStore<f32>, pass: Pass<f32>, loss: &Var<f32>) {
    let params = pass.trainable(store);
    let refs: Vec<&Var<f32>> = params.iter().collect();
    let grads = grad(loss, &refs, false);
    opt.step(store, &grads);
    store.commit(pass);
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let generator = Generator::new(config.generator_spec(), derive_seed(seed, "generator", 0));
        let discriminator = PatchDiscriminator::new(config.discriminator_spec(), derive_seed(seed, "discriminator", 0));
        let reviser = Reviser::new(config.reviser_spec(), derive_seed(seed, "reviser", 0))?;
        Ok(TrainState {
            opt_g: Adam::new(config.optim.generator, generator.store()),
            opt_d: Adam::new(config.optim.discriminator, discriminator.store()),
            opt_r: Adam::new(config.optim.reviser, reviser.store()),
            generator,
            discriminator,
            reviser,
            config,
            step: 0,
            epoch: 0,
            scoremap_history: Vec::new(),
        })
    }

    /// One generate → propose → revise step on a batch of `(N, 3, H, W)` pairs.
    pub fn train_step(&mut self, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<StepOutput> {
        let cfg = self.config.clone();
        let geom = cfg.geometry_config()?;
        let image = cfg.geometry.image_size;
        let expect = [x.shape().first().copied().unwrap_or(0), 3, image, image];
        if x.shape() != expect || y.shape() != expect || expect[0] == 0 {
            return Err(Error::Shape(format!(
                "batch {:?}/{:?}, expected (N, 3, {image}, {image})",
                x.shape(),
                y.shape()
            )));
        }
        let step = self.step;
        let step_seed = derive_seed(cfg.seed, "step", step);
        let literal = cfg.variant.literal_generator_objective;
        let lambda = cfg.effective_lambda();
        let xv = Var::constant(x.clone());
        let yv = Var::constant(y.clone());

        // (1) generate
        let mut gpass = self
            .generator
            .store()
            .bind(true, true)
            .with_dropout(ChaCha8Rng::seed_from_u64(derive_seed(step_seed, "dropout", 0)));
        let fake = self.generator.forward(&mut gpass, &xv)?;
        let fake_d = fake.detach();

        // (2) score map on the fake and region proposal; (4) patch discriminator update
        let mut dpass = self.discriminator.store().bind(true, true);
        let s_real = self.discriminator.forward(&mut dpass, &xv, &yv)?;
        let s_fake = self.discriminator.forward(&mut dpass, &xv, &fake_d)?;
        let score_maps = ScoreMap::from_batch(s_fake.value(), image)?;
        let regions = score_maps
            .iter()
            .map(|m| propose_region(m, &geom))
            .collect::<Result<Vec<_>>>()?;
        let scoremap_mean = s_fake.value().mean();
        let d_loss = patch_d_loss_var(&s_real, &s_fake)?;
        let d_value = check_finite(step, "d_loss", d_loss.item() as f64)?;
        let g_adv_patch_pre = generator_adversarial_term(&s_fake.detach(), literal)?.item() as f64;
        update(&mut self.opt_d, self.discriminator.store_mut(), dpass, &d_loss);

        // (3) masked fake; (5) reviser update
        let masked_d = if cfg.variant.use_fake_mask {
            composite_var(&yv, &fake_d, &regions)?
        } else {
            fake_d.clone()
        };
        let (mut r_value, mut penalty) = (0.0, 0.0);
        if lambda > 0.0 {
            let mut rpass = self.reviser.store().bind(true, true);
            let p_real = self.reviser.forward(&mut rpass, &xv, &yv)?;
            let p_fake = self.reviser.forward(&mut rpass, &xv, &masked_d)?;
            let adv = reviser_adversarial_var(&p_real, &p_fake)?;
            let perturbed = gradient_penalty_inputs(y, cfg.weights.delta_scale, derive_seed(step_seed, "penalty", 0));
            let norms = reviser_gradient_norms(&self.reviser, &mut rpass, &xv, &perturbed)?;
            let pen = penalty_from_norms_var(&norms);
            let loss = adv.add(&pen.mul_scalar(cfg.weights.alpha as f32));
            r_value = check_finite(step, "r_loss", loss.item() as f64)?;
            penalty = pen.item() as f64;
            update(&mut self.opt_r, self.reviser.store_mut(), rpass, &loss);
        }

        // (6) generator update
        let (l1_full, l1_region) = l1_terms_var(
            &yv,
            &fake,
            &crop_var(&yv, &regions)?,
            &crop_var(&fake, &regions)?,
            &cfg.weights,
        )?;
        let mut total = l1_full.clone();
        if cfg.variant.use_region_l1 {
            total = total.add(&l1_region);
        }
        let mut g_adv_patch = g_adv_patch_pre;
        let mut side_passes = Vec::new();
        if lambda < 1.0 {
            let mut pass = self.discriminator.store().bind(false, true);
            let s = self.discriminator.forward(&mut pass, &xv, &fake)?;
            let term = generator_adversarial_term(&s, literal)?;
            g_adv_patch = term.item() as f64;
            total = total.add(&term.mul_scalar((1.0 - lambda) as f32));
            side_passes.push((false, pass));
        }
        let mut g_adv_reviser = 0.0;
        if lambda > 0.0 {
            let candidate = if cfg.variant.use_fake_mask {
                composite_var(&yv, &fake, &regions)?
            } else {
                fake.clone()
            };
            let mut pass = self.reviser.store().bind(false, true);
            let p = self.reviser.forward(&mut pass, &xv, &candidate)?;
            let term = generator_adversarial_term(&p, literal)?;
            g_adv_reviser = term.item() as f64;
            total = total.add(&term.mul_scalar(lambda as f32));
            side_passes.push((true, pass));
        }
        let total_g = check_finite(step, "total_g", total.item() as f64)?;
        update(&mut self.opt_g, self.generator.store_mut(), gpass, &total);
        for (is_reviser, pass) in side_passes {
            if is_reviser {
                self.reviser.store_mut().commit(pass);
            } else {
                self.discriminator.store_mut().commit(pass);
            }
        }

        let report = LossReport {
            d_loss: d_value,
            r_loss: r_value,
            g_adv_patch,
            g_adv_reviser,
            l1_full: l1_full.item() as f64,
            l1_region: if cfg.variant.use_region_l1 { l1_region.item() as f64 } else { 0.0 },
            penalty,
            total_g,
            scoremap_mean,
        };
        if let Some(field) = report.first_non_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("{field} is not finite"),
            });
        }
        self.step += 1;
        Ok(StepOutput {
            report,
            score_maps,
            regions,
            fake: fake_d.value().clone(),
            masked_fake: masked_d.value().clone(),
        })
    }

    /// Eval-mode generation (running statistics, no dropout).
    pub fn generate(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut pass = self.generator.store().bind(false, false);
        Ok(self.generator.forward(&mut pass, &Var::constant(x.clone()))?.value().clone())
    }

    /// Generates from `x` and proposes one region per sample from the eval-mode score map.
    pub fn propose(&self, x: &Tensor<f32>) -> Result<(Tensor<f32>, Vec<ScoreMap>, Vec<Region>)> {
        let fake = self.generate(x)?;
        let maps = self.discriminator.score_patches(x, &fake)?;
        let geom = self.config.geometry_config()?;
        let regions = maps.iter().map(|m| propose_region(m, &geom)).collect::<Result<Vec<_>>>()?;
        Ok((fake, maps, regions))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        fn record(name: &str, net: &dyn Network<f32>, opt: &Adam<f32>) -> NetworkRecord {
            NetworkRecord {
                name: name.into(),
                spec_hash: net.spec_hash(),
                tensors: net
                    .store()
                    .entries()
                    .iter()
                    .map(|e| TensorRecord {
                        name: e.name.clone(),
                        trainable: e.trainable,
                        tensor: e.tensor.clone(),
                    })
                    .collect(),
                adam_steps: opt.steps,
                adam_first: opt.first.clone(),
                adam_second: opt.second.clone(),
            }
        }
        Checkpoint {
            config_toml: self.config.to_toml_string(),
            step: self.step,
            epoch: self.epoch,
            scoremap_history: self.scoremap_history.clone(),
            networks: vec![
                record("generator", &self.generator, &self.opt_g),
                record("discriminator", &self.discriminator, &self.opt_d),
                record("reviser", &self.reviser, &self.opt_r),
            ],
        }
    }

    /// Restores a state. With `config`, the stored architecture must match it
    /// but everything else (variant flags, weights, epochs, optimizer rates)
    /// comes from `config`: this is how a warm start switches variants.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: Option<TrainConfig>, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let stored = TrainConfig::from_toml_str(&ckpt.config_toml, &[])?;
        let config = config.unwrap_or(stored);
        let mut state = TrainState::new(config.clone())?;
        let restore = |name: &str, net: &mut dyn Network<f32>, opt: &mut Adam<f32>, lr: AdamConfig| -> Result<()> {
            let rec = ckpt.network(name).ok_or_else(|| bad(format!("no {name} block")))?;
            if rec.spec_hash != net.spec_hash() {
                return Err(bad(format!("{name} architecture differs from the configuration")));
            }
            net.store_mut()
                .load(rec.tensors.iter().map(|t| (t.name.clone(), t.tensor.clone())).collect())
                .map_err(|e| bad(format!("{name}: {e}")))?;
            if rec.adam_first.len() != opt.first.len() || rec.adam_second.len() != opt.second.len() {
                return Err(bad(format!("{name}: optimizer state does not match")));
            }
            *opt = Adam {
                config: lr,
                steps: rec.adam_steps,
                first: rec.adam_first.clone(),
                second: rec.adam_second.clone(),
            };
            Ok(())
        };
        restore("generator", &mut state.generator, &mut state.opt_g, config.optim.generator)?;
        restore("discriminator", &mut state.discriminator, &mut state.opt_d, config.optim.discriminator)?;
        restore("reviser", &mut state.reviser, &mut state.opt_r, config.optim.reviser)?;
        state.step = ckpt.step;
        state.epoch = ckpt.epoch;
        state.scoremap_history = ckpt.scoremap_history.clone();
        Ok(state)
    }

    pub fn load(path: &Path, config: Option<TrainConfig>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, config, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }
}

/// Per-step telemetry rows.
pub struct Telemetry {
    writer: csv::Writer<File>,
}

impl Telemetry {
    pub const HEADER: [&'static str; 11] = [
        "step",
        "epoch",
        "d_loss",
        "r_loss",
        "g_adv_patch",
        "g_adv_reviser",
        "l1_full",
        "l1_region",
        "penalty",
        "total_g",
        "scoremap_mean",
    ];

    /// Creates the file, or appends when `append` and it already exists.
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let exists = path.exists();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        if !(append && exists) {
            writer.write_record(Self::HEADER)?;
            writer.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(Telemetry { writer })
    }

    pub fn row(&mut self, step: u64, epoch: u64, r: &LossReport) -> Result<()> {
        let mut rec = vec![step.to_string(), epoch.to_string()];
        rec.extend(r.values().iter().map(|v| v.to_string()));
        self.writer.write_record(&rec)?;
        self.writer.flush().map_err(|e| Error::io("telemetry", e))
    }
}

/// Parses a telemetry file back into `(step, epoch, report)` rows.
pub fn read_telemetry(path: &Path) -> Result<Vec<(u64, u64, LossReport)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Range(format!("{}: bad telemetry field {i}", path.display())))
        };
        let report = LossReport {
            d_loss: num(2)?,
            r_loss: num(3)?,
            g_adv_patch: num(4)?,
            g_adv_reviser: num(5)?,
            l1_full: num(6)?,
            l1_region: num(7)?,
            penalty: num(8)?,
            total_g: num(9)?,
            scoremap_mean: num(10)?,
        };
        out.push((num(0)? as u64, num(1)? as u64, report));
    }
    Ok(out)
}

/// Where a run's artifacts go.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Result<Self> {
        for sub in ["", "checkpoints", "samples"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(RunPaths { root: root.to_path_buf() })
    }
    pub fn telemetry(&self) -> PathBuf {
        self.root.join(TELEMETRY_FILE)
    }
    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_SNAPSHOT)
    }
    pub fn checkpoint(&self, epoch: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"))
    }
    pub fn latest(&self) -> PathBuf {
        self.root.join("checkpoints").join(LATEST_CHECKPOINT)
    }
    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }
}

/// Writes the input / fake / masked fake / real grid and the first sample's
/// heatmap for the first `max_samples` pairs of `dataset`.
pub fn export_samples(state: &TrainState, dataset: &PairedDataset, dir: &Path, epoch: u64) -> Result<()> {
    let n = dataset.len().min(state.config.schedule.max_samples.max(1));
    let (x, y) = dataset.batch(&(0..n).collect::<Vec<_>>(), None)?;
    let (fake, maps, regions) = state.propose(&x)?;
    let masked = composite(&y, &fake, &regions)?.masked_fake;
    let grid = sample_grid(&[&x, &fake, &masked, &y], n)?;
    write_png(&grid, &dir.join(format!("epoch_{epoch:04}_grid.png")))?;
    write_png(&heatmap(&maps[0], Some(&regions[0])), &dir.join(format!("epoch_{epoch:04}_heatmap.png")))
}

/// Runs epochs `state.epoch .. config.epochs`, writing telemetry, samples and
/// checkpoints under `out_dir`. A new state is created when `state` is `None`.
pub fn train(
    config: &TrainConfig,
    dataset: &PairedDataset,
    out_dir: &Path,
    state: Option<TrainState>,
) -> Result<TrainState> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("training set".into()));
    }
    if dataset.resolution() != config.geometry.image_size {
        return Err(Error::Shape(format!(
            "dataset resolution {} differs from image_size {}",
            dataset.resolution(),
            config.geometry.image_size
        )));
    }
    let resuming = state.is_some();
    let mut state = match state {
        Some(s) => s,
        None => TrainState::new(config.clone())?,
    };
    let paths = RunPaths::new(out_dir)?;
    fs::write(paths.config(), config.to_toml_string()).map_err(|e| Error::io(paths.config(), e))?;
    let mut telemetry = Telemetry::open(&paths.telemetry(), resuming)?;
    let bs = config.batch_size;
    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let order = dataset.epoch_order(config.seed, epoch);
        let mut means = Vec::new();
        for chunk in order.chunks(bs) {
            let mut flip_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "flip", state.step));
            let (x, y) = dataset.batch(chunk, config.data.flip.then_some(&mut flip_rng))?;
            let out = state.train_step(&x, &y)?;
            telemetry.row(state.step, epoch + 1, &out.report)?;
            means.push(out.report.scoremap_mean);
        }
        state.epoch += 1;
        state.scoremap_history.push(means.iter().sum::<f64>() / means.len() as f64);
        let done = state.epoch == config.epochs;
        if state.epoch % config.schedule.sample_every == 0 || done {
            export_samples(&state, dataset, &paths.samples(), state.epoch)?;
        }
        if state.epoch % config.schedule.checkpoint_every == 0 || done {
            let ckpt = state.to_checkpoint();
            ckpt.save(&paths.checkpoint(state.epoch))?;
            ckpt.save(&paths.latest())?;
        }
        log::info!(
            "epoch {} done: step {}, scoremap mean {:.4}",
            state.epoch,
            state.step,
            state.scoremap_history.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(state)
}

/// Per-sample PSNR and SSIM of eval-mode generations against the targets.
pub struct EvalReport {
    pub ids: Vec<String>,
    pub psnr: MetricResult,
    pub ssim: MetricResult,
}

impl EvalReport {
    /// One row per sample plus a trailing `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "psnr", "ssim"])?;
        for (i, id) in self.ids.iter().enumerate() {
            w.write_record([id.clone(), self.psnr.per_sample[i].to_string(), self.ssim.per_sample[i].to_string()])?;
        }
        w.write_record(["mean".to_string(), self.psnr.mean.to_string(), self.ssim.mean.to_string()])?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// 8-bit levels of one `(3, H, W)` image, as metrics expect.
fn levels(t: &Tensor<f32>) -> Tensor<f64> {
    Tensor::from_vec(t.shape().to_vec(), t.data().iter().map(|&v| to_level(v) as f64).collect())
        .expect("same shape")
}

pub fn evaluate(state: &TrainState, dataset: &PairedDataset) -> Result<EvalReport> {
    let image = state.config.geometry.image_size;
    if dataset.resolution() != image {
        return Err(Error::Shape(format!(
            "dataset resolution {} differs from the model's {image}",
            dataset.resolution()
        )));
    }
    let (mut ids, mut p, mut s) = (Vec::new(), Vec::new(), Vec::new());
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(state.config.batch_size.max(1)) {
        let (x, y) = dataset.batch(chunk, None)?;
        let fake = state.generate(&x)?;
        for (k, &i) in chunk.iter().enumerate() {
            let one = |t: &Tensor<f32>| t.slice(&[k, 0, 0, 0], &[1, 3, image, image]).reshape(&[3, image, image]);
            let (f, t) = (levels(&one(&fake)?), levels(&one(&y)?));
            p.push(psnr(&f, &t, 255.0)?);
            s.push(ssim(&f, &t, 255.0)?);
            ids.push(dataset.samples()[i].id.clone());
        }
    }
    Ok(EvalReport {
        ids,
        psnr: MetricResult::new("psnr", p),
        ssim: MetricResult::new("ssim", s),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PairedSample;

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig::from_toml_str(
            "epochs = 2\nbatch_size = 2\n\
             [geometry]\nimage_size = 32\nregion_size = 8\n\
             [generator]\nbase_width = 4\nresidual_blocks = 1\n\
             [discriminator]\nbase_width = 4\n[reviser]\nbase_width = 4\n",
            &[],
        )
        .unwrap()
    }

    pub(crate) fn tiny_dataset(n: usize, size: usize) -> PairedDataset {
        let samples = (0..n)
            .map(|i| {
                let cond: Vec<f32> = (0..3 * size * size).map(|k| ((k * 7 + i * 13) % 17) as f32 / 8.5 - 1.0).collect();
                let target: Vec<f32> = cond.iter().map(|v| -v * 0.5).collect();
                PairedSample {
                    condition: Tensor::from_vec(vec![3, size, size], cond).unwrap(),
                    target: Tensor::from_vec(vec![3, size, size], target).unwrap(),
                    id: format!("s{i}"),
                }
            })
            .collect();
        PairedDataset::new(samples, size).unwrap()
    }

    fn store_hash(s: &ParamStore<f32>) -> Vec<u32> {
        s.entries().iter().flat_map(|e| e.tensor.data().iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn step_reports_are_finite_and_scoremap_mean_matches_maps() {
        let mut st = TrainState::new(tiny_config()).unwrap();
        let (x, y) = tiny_dataset(2, 32).batch(&[0, 1], None).unwrap();
        let out = st.train_step(&x, &y).unwrap();
        assert!(out.report.first_non_finite().is_none());
        let mean: f64 = out.score_maps.iter().map(|m| m.mean()).sum::<f64>() / out.score_maps.len() as f64;
        assert!((mean - out.report.scoremap_mean).abs() < 1e-6);
        assert_eq!(out.regions.len(), 2);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn every_network_moves_and_reviser_is_skipped_without_it() {
        let (x, y) = tiny_dataset(2, 32).batch(&[0, 1], None).unwrap();
        let mut st = TrainState::new(tiny_config()).unwrap();
        let before = [store_hash(st.generator.store()), store_hash(st.discriminator.store()), store_hash(st.reviser.store())];
        st.train_step(&x, &y).unwrap();
        assert_ne!(before[0], store_hash(st.generator.store()));
        assert_ne!(before[1], store_hash(st.discriminator.store()));
        assert_ne!(before[2], store_hash(st.reviser.store()));

        let mut cfg = tiny_config();
        cfg.variant.use_reviser = false;
        let mut st = TrainState::new(cfg).unwrap();
        let r0 = store_hash(st.reviser.store());
        let out = st.train_step(&x, &y).unwrap();
        assert_eq!(r0, store_hash(st.reviser.store()));
        assert_eq!(out.report.r_loss, 0.0);
        assert_eq!(out.report.g_adv_reviser, 0.0);
    }

    #[test]
    fn lambda_one_keeps_discriminator_training() {
        let (x, y) = tiny_dataset(2, 32).batch(&[0, 1], None).unwrap();
        let mut cfg = tiny_config();
        cfg.weights.lambda = 1.0;
        let mut st = TrainState::new(cfg).unwrap();
        let d0 = store_hash(st.discriminator.store());
        let out = st.train_step(&x, &y).unwrap();
        assert_ne!(d0, store_hash(st.discriminator.store()));
        let expect = out.report.l1_full + out.report.l1_region + out.report.g_adv_reviser;
        assert!((out.report.total_g - expect).abs() < 1e-3 * expect.abs().max(1.0));
    }

    #[test]
    fn derive_seed_separates_tags_and_counters() {
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "b", 0));
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
        assert_eq!(derive_seed(5, "x", 9), derive_seed(5, "x", 9));
    }

    #[test]
    fn checkpoint_round_trip_restores_state() {
        let (x, y) = tiny_dataset(2, 32).batch(&[0, 1], None).unwrap();
        let mut st = TrainState::new(tiny_config()).unwrap();
        st.train_step(&x, &y).unwrap();
        let ck = st.to_checkpoint();
        let bytes = ck.encode();
        let restored = TrainState::from_checkpoint(&Checkpoint::decode(&bytes).unwrap(), None, Path::new("mem")).unwrap();
        assert_eq!(restored.to_checkpoint().encode(), bytes);
        let mut other = tiny_config();
        other.generator.base_width = 8;
        assert!(TrainState::from_checkpoint(&ck, Some(other), Path::new("mem")).is_err());
    }

    #[test]
    fn evaluate_shapes_and_mismatch() {
        let st = TrainState::new(tiny_config()).unwrap();
        let r = evaluate(&st, &tiny_dataset(3, 32)).unwrap();
        assert_eq!(r.ids.len(), 3);
        assert_eq!(r.psnr.per_sample.len(), 3);
        assert!(evaluate(&st, &tiny_dataset(1, 16)).is_err());
    }
}
