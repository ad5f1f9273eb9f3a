//! Stage training loops with dependency checks, loss-curve CSVs, and
//! periodic checkpointing. Stage order: vqvae -> {ar, clvp, diffusion} ->
//! diffusion-ft.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ar::ArTrainer;
use crate::clvp::ClvpTrainer;
use crate::diffusion::{DiffusionTrainer, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::warmup_lr;
use crate::pipeline::checkpoint::{self, Stage};
use crate::pipeline::config::PipelineConfig;
use crate::pipeline::data::{self, Dataset};
use crate::textdata::BpeVocab;
use crate::vqvae::VqvaeTrainer;

pub fn stage_checkpoint_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{}.ckpt", stage.tag()))
}

fn require_checkpoint(dir: &Path, stage: Stage, needed_by: Stage) -> Result<checkpoint::Checkpoint> {
    let path = stage_checkpoint_path(dir, stage);
    if !path.exists() {
        return Err(Error::StageDependency(format!(
            "stage '{}' requires a trained '{}' checkpoint at {}",
            needed_by.tag(),
            stage.tag(),
            path.display()
        )));
    }
    checkpoint::load(path)
}

struct CsvLog {
    path: PathBuf,
    body: String,
}

impl CsvLog {
    fn new(dir: &Path, stage: Stage, columns: &str) -> Self {
        CsvLog {
            path: dir.join(format!("{}_loss.csv", stage.tag())),
            body: format!("step,lr,{columns}\n"),
        }
    }

    fn row(&mut self, step: usize, lr: f64, values: &[f64]) {
        let _ = write!(self.body, "{step},{lr}");
        for v in values {
            let _ = write!(self.body, ",{v}");
        }
        self.body.push('\n');
    }

    fn flush(&self) -> Result<()> {
        std::fs::write(&self.path, &self.body).map_err(|e| Error::io(&self.path, e))
    }
}

fn batch_indices(n_items: usize, step: usize, batch_size: usize) -> Vec<usize> {
    (0..batch_size).map(|j| (step * batch_size + j) % n_items).collect()
}

/// Train one stage from the run directory's manifest and vocab, writing its
/// checkpoint and loss curve. Returns the final checkpoint path.
pub fn train_stage(stage: Stage, dir: impl AsRef<Path>, cfg: &PipelineConfig) -> Result<PathBuf> {
    let dir = dir.as_ref();
    cfg.validate()?;
    let vocab = BpeVocab::load(dir.join("vocab.json"))?;
    let ds = Dataset::load(dir.join("manifest.tsv"), &vocab, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stage_seed_salt(stage));
    let out_path = stage_checkpoint_path(dir, stage);
    let tcfg = &cfg.training;
    let parallel = tcfg.parallel_batch;

    match stage {
        Stage::Vqvae => {
            let mut trainer = VqvaeTrainer::new(cfg.vqvae, 20, &mut rng);
            let examples = data::vqvae_examples(&ds, cfg);
            let mut log = CsvLog::new(dir, stage, "reconstruction_mse,commitment,codebook_usage");
            for step in 0..tcfg.vqvae_steps {
                let idx = batch_indices(examples.len(), step, tcfg.batch_size);
                let batch: Vec<&_> = idx.iter().map(|&i| &examples[i]).collect();
                let losses = trainer.train_step(&batch, parallel)?;
                log_and_save(
                    &mut log,
                    step,
                    tcfg,
                    warmup_lr(trainer.opt.step_count, trainer.opt.lr, trainer.opt.warmup_steps),
                    &[losses.reconstruction_mse, losses.commitment, losses.codebook_usage],
                    || checkpoint::save(&out_path, stage, cfg, &trainer.params, &trainer.ema),
                )?;
            }
            checkpoint::save(&out_path, stage, cfg, &trainer.params, &trainer.ema)?;
            log.flush()?;
        }
        Stage::Ar => {
            let vq = require_checkpoint(dir, Stage::Vqvae, stage)?;
            let examples = data::ar_examples(&ds, vq.inference_params(), cfg)?;
            let mut trainer = ArTrainer::new(cfg.ar, &mut rng);
            let mut log = CsvLog::new(dir, stage, "loss");
            for step in 0..tcfg.ar_steps {
                let idx = batch_indices(examples.len(), step, tcfg.batch_size);
                let batch: Vec<&_> = idx.iter().map(|&i| &examples[i]).collect();
                let losses = trainer.train_step(&batch, parallel)?;
                log_and_save(
                    &mut log,
                    step,
                    tcfg,
                    warmup_lr(trainer.opt.step_count, trainer.opt.lr, trainer.opt.warmup_steps),
                    &[losses.total],
                    || checkpoint::save(&out_path, stage, cfg, &trainer.params, &trainer.ema),
                )?;
            }
            checkpoint::save(&out_path, stage, cfg, &trainer.params, &trainer.ema)?;
            log.flush()?;
        }
        Stage::Clvp => {
            let vq = require_checkpoint(dir, Stage::Vqvae, stage)?;
            let examples = data::clvp_examples(&ds, vq.inference_params(), cfg)?;
            let mut trainer = ClvpTrainer::new(cfg.clvp, &mut rng);
            let mut log = CsvLog::new(dir, stage, "contrastive");
            // the contrastive batch is the whole (tiny) corpus
            let batch: Vec<&_> = examples.iter().collect();
            for step in 0..tcfg.clvp_steps {
                let losses = trainer.train_step(&batch)?;
                log_and_save(
                    &mut log,
                    step,
                    tcfg,
                    warmup_lr(trainer.opt.step_count, trainer.opt.lr, trainer.opt.warmup_steps),
                    &[losses.contrastive],
                    || checkpoint::save(&out_path, stage, cfg, &trainer.params, &trainer.ema),
                )?;
            }
            checkpoint::save(&out_path, stage, cfg, &trainer.params, &trainer.ema)?;
            log.flush()?;
        }
        Stage::Diffusion => {
            let vq = require_checkpoint(dir, Stage::Vqvae, stage)?;
            let examples = data::diffusion_examples(&ds, vq.inference_params(), cfg)?;
            let mut trainer = DiffusionTrainer::new(cfg.diffusion, &mut rng)?;
            let mut log = CsvLog::new(dir, stage, "total,mse,vlb");
            for step in 0..tcfg.diffusion_steps {
                let idx = batch_indices(examples.len(), step, tcfg.batch_size);
                let batch: Vec<&_> = idx.iter().map(|&i| &examples[i]).collect();
                let losses = trainer.train_step(&batch)?;
                log_and_save(
                    &mut log,
                    step,
                    tcfg,
                    warmup_lr(trainer.opt.step_count, trainer.opt.lr, trainer.opt.warmup_steps),
                    &[losses.total, losses.mse, losses.vlb],
                    || checkpoint::save(&out_path, stage, cfg, &trainer.params, &trainer.ema),
                )?;
            }
            checkpoint::save(&out_path, stage, cfg, &trainer.params, &trainer.ema)?;
            log.flush()?;
        }
        Stage::DiffusionFt => {
            let vq = require_checkpoint(dir, Stage::Vqvae, stage)?;
            let ar = require_checkpoint(dir, Stage::Ar, stage)?;
            let base = require_checkpoint(dir, Stage::Diffusion, stage)?;
            let examples = data::diffusion_examples(&ds, vq.inference_params(), cfg)?;
            let mut ft_cfg = cfg.diffusion;
            ft_cfg.lr = tcfg.finetune_lr;
            ft_cfg.warmup_steps = 0;
            // the frozen AR model runs on its inference (EMA) weights
            let mut trainer = DiffusionTrainer::new_finetune(
                ft_cfg,
                base.raw.clone(),
                ar.inference_params().clone(),
                cfg.ar,
                &mut rng,
            )?;
            let mut log = CsvLog::new(dir, stage, "total,mse,vlb");
            for step in 0..tcfg.finetune_steps {
                let idx = batch_indices(examples.len(), step, tcfg.batch_size);
                let batch: Vec<&_> = idx.iter().map(|&i| &examples[i]).collect();
                let losses = trainer.train_step(&batch)?;
                log_and_save(
                    &mut log,
                    step,
                    tcfg,
                    warmup_lr(trainer.opt.step_count, trainer.opt.lr, trainer.opt.warmup_steps),
                    &[losses.total, losses.mse, losses.vlb],
                    || checkpoint::save(&out_path, stage, cfg, &trainer.params, &trainer.ema),
                )?;
            }
            checkpoint::save(&out_path, stage, cfg, &trainer.params, &trainer.ema)?;
            log.flush()?;
        }
    }
    Ok(out_path)
}

fn log_and_save(
    log: &mut CsvLog,
    step: usize,
    tcfg: &crate::pipeline::config::TrainingConfig,
    lr: f64,
    values: &[f64],
    save: impl FnOnce() -> Result<()>,
) -> Result<()> {
    if step % tcfg.log_interval == 0 {
        log.row(step, lr, values);
        log.flush()?;
    }
    if step > 0 && step % tcfg.checkpoint_interval == 0 {
        save()?;
    }
    Ok(())
}

fn stage_seed_salt(stage: Stage) -> u64 {
    match stage {
        Stage::Vqvae => 0x5651,
        Stage::Ar => 0x4152,
        Stage::Clvp => 0x434c,
        Stage::Diffusion => 0x4446,
        Stage::DiffusionFt => 0x4654,
    }
}

/// Noise schedule used by trained diffusion weights.
pub fn schedule_for(cfg: &PipelineConfig) -> Result<NoiseSchedule> {
    crate::diffusion::make_schedule(
        cfg.diffusion.train_timesteps,
        cfg.diffusion.beta_start,
        cfg.diffusion.beta_end,
    )
}
