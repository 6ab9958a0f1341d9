use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::loss::{label_smoothed_ce, multiresolution_loss};
use super::optim::{clip_grad_norm, AdamState, StepOutcome};
use crate::checkpoint::Checkpoint;
use crate::data::{ensure_stacked, make_batches, Batch, BatchOptions, Utterance};
use crate::error::{Error, Result};
use crate::model::{AvAsrModel, ModelConfig};
use crate::tensor::{Graph, ParamSet, Real, Var};
use crate::tokenizer::{Resolution, Tokenizers};

/// Where training stands; everything needed to resume exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Progress {
    /// Optimizer steps taken (skipped steps included).
    pub step: u64,
    /// Current epoch, counting from 1.
    pub epoch: usize,
    /// Batches already consumed in the current epoch.
    pub cursor: usize,
    /// Running sums of batch losses in the current epoch.
    pub epoch_sums: [Real; 3],
    pub best_dev: Real,
    /// 0 until the first dev evaluation.
    pub best_epoch: usize,
    pub bad_epochs: usize,
    pub skipped_steps: u64,
}

impl Default for Progress {
    fn default() -> Self {
        Progress {
            step: 0,
            epoch: 1,
            cursor: 0,
            epoch_sums: [0.0; 3],
            best_dev: Real::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
            skipped_steps: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    /// γ-weighted objective.
    pub total: Real,
    pub chars: Real,
    pub subwords: Real,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: LossBreakdown,
    pub lr: Real,
    /// Global gradient norm before clipping.
    pub grad_norm: Real,
    pub skipped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: Real,
    pub train: LossBreakdown,
    pub dev: LossBreakdown,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
    pub skipped_steps: u64,
}

pub const METRICS_HEADER: &str = "epoch\tstep\tlr\ttrain_loss\ttrain_char_loss\ttrain_subword_loss\tdev_loss\tdev_char_loss\tdev_subword_loss\tbest_epoch\tepochs_since_best\tskipped_steps";

impl EpochRecord {
    /// One tab-separated metrics line matching [`METRICS_HEADER`].
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}",
            self.epoch,
            self.step,
            self.lr,
            self.train.total,
            self.train.chars,
            self.train.subwords,
            self.dev.total,
            self.dev.chars,
            self.dev.subwords,
            self.best_epoch,
            self.epochs_since_best,
            self.skipped_steps
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
    MaxSteps,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub epochs: Vec<EpochRecord>,
    pub stop: StopReason,
    pub best_epoch: usize,
    pub best_dev_loss: Real,
    /// Weights from the best dev epoch.
    pub best_params: ParamSet,
}

impl FitReport {
    pub fn metrics_tsv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for e in &self.epochs {
            s.push_str(&e.tsv_line());
            s.push('\n');
        }
        s
    }
}

pub struct Trainer {
    pub model: AvAsrModel,
    pub tokenizers: Tokenizers,
    pub config: TrainConfig,
    pub adam: AdamState,
    pub progress: Progress,
    best_params: Option<ParamSet>,
}

impl Trainer {
    /// Fresh model seeded by `config.seed`; vocabulary sizes come from the
    /// tokenizers.
    pub fn new(mut model_config: ModelConfig, config: TrainConfig, tokenizers: Tokenizers) -> Result<Self> {
        config.validate()?;
        model_config.char_vocab_size = tokenizers.vocab_size(Resolution::Character);
        model_config.subword_vocab_size = tokenizers.vocab_size(Resolution::Subword);
        let model = AvAsrModel::new(model_config, config.seed)?;
        Ok(Self::with_model(model, config, tokenizers))
    }

    pub fn with_model(model: AvAsrModel, config: TrainConfig, tokenizers: Tokenizers) -> Self {
        let adam = AdamState::new(&model.params);
        Trainer {
            model,
            tokenizers,
            config,
            adam,
            progress: Progress::default(),
            best_params: None,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let model = ckpt.build_model()?;
        let adam = match ckpt.adam {
            Some(a) if a.matches(&model.params) => a,
            Some(_) => return Err(Error::Version("optimizer state does not match parameters".into())),
            None => AdamState::new(&model.params),
        };
        Ok(Trainer {
            model,
            tokenizers: ckpt.tokenizers,
            config: ckpt.train_config,
            adam,
            progress: ckpt.progress,
            best_params: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config.clone(),
            train_config: self.config.clone(),
            tokenizers: self.tokenizers.clone(),
            params: self.model.params.clone(),
            adam: Some(self.adam.clone()),
            progress: self.progress.clone(),
        }
    }

    /// Length-bucketed batches in a fixed order; features are stacked to the
    /// model's stack factor when needed.
    pub fn batches(&self, utts: &[Utterance]) -> Result<Vec<Batch>> {
        let k = self.model.config.stack_factor;
        let stacked = utts
            .iter()
            .map(|u| ensure_stacked(u.clone(), k))
            .collect::<Result<Vec<_>>>()?;
        make_batches(
            &stacked,
            &self.tokenizers,
            &BatchOptions {
                frame_budget: self.config.batch_frames,
                shuffle_seed: None,
                video_dim: self.model.config.video_dim,
            },
        )
    }

    /// Batch visiting order for an epoch.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(0x5eed_0000_0000 + epoch as u64);
        order.shuffle(&mut rng);
        order
    }

    fn losses(&self, g: &mut Graph, batch: &Batch) -> Result<(Var, Var, Var)> {
        let eps = self.config.label_smoothing;
        let logits = self.model.forward(g, batch, false)?;
        let lc = label_smoothed_ce(g, logits.chars, &batch.chars.outputs(), &batch.chars.output_mask(), eps)?;
        let ls = label_smoothed_ce(
            g,
            logits.subwords,
            &batch.subwords.outputs(),
            &batch.subwords.output_mask(),
            eps,
        )?;
        let total = multiresolution_loss(g, lc, ls, self.config.gamma)?;
        Ok((total, lc, ls))
    }

    /// Loss and parameter gradients (stored in `model.params`) for a batch.
    /// `dropout_stream` selects the dropout mask; `None` disables dropout.
    pub fn loss_and_grads(&mut self, batch: &Batch, dropout_stream: Option<u64>) -> Result<LossBreakdown> {
        let (loss, grads) = {
            let mut g = Graph::with_params(&self.model.params);
            if let Some(stream) = dropout_stream {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                rng.set_stream(stream);
                g = g.training(rng);
            }
            let (total, lc, ls) = self.losses(&mut g, batch)?;
            let loss = LossBreakdown {
                total: g.value(total).item(),
                chars: g.value(lc).item(),
                subwords: g.value(ls).item(),
            };
            (loss, g.backward(total)?)
        };
        self.model.params.zero_grad();
        self.model.params.accumulate(&grads);
        Ok(loss)
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepStats> {
        let step = self.progress.step + 1;
        let loss = self.loss_and_grads(batch, Some(step))?;
        let grad_norm = clip_grad_norm(&mut self.model.params, self.config.clip_norm);
        let lr = self.config.schedule.lr(step, self.config.base_lr, self.config.warmup_steps);
        let outcome = if grad_norm.is_finite() {
            self.adam.update(&mut self.model.params, lr, &self.config.adam)
        } else {
            StepOutcome::Skipped
        };
        self.model.params.zero_grad();
        self.progress.step = step;
        let skipped = outcome == StepOutcome::Skipped;
        if skipped {
            self.progress.skipped_steps += 1;
            log::warn!("step {step}: non-finite gradient, update skipped");
        }
        Ok(StepStats {
            step,
            loss,
            lr,
            grad_norm,
            skipped,
        })
    }

    /// Trains on the next batch of the current epoch.
    pub fn advance(&mut self, batches: &[Batch]) -> Result<StepStats> {
        let order = self.epoch_order(self.progress.epoch, batches.len());
        let Some(&next) = order.get(self.progress.cursor) else {
            return Err(Error::Contract("epoch already complete".into()));
        };
        let stats = self.train_step(&batches[next])?;
        self.progress.cursor += 1;
        let sums = &mut self.progress.epoch_sums;
        sums[0] += stats.loss.total;
        sums[1] += stats.loss.chars;
        sums[2] += stats.loss.subwords;
        Ok(stats)
    }

    /// Dropout-free loss over `batches`, each resolution averaged per token.
    pub fn evaluate_loss(&self, batches: &[Batch]) -> Result<LossBreakdown> {
        let (mut c, mut s, mut nc, mut ns) = (0.0, 0.0, 0usize, 0usize);
        for b in batches {
            let mut g = Graph::with_params(&self.model.params);
            let (_, lc, ls) = self.losses(&mut g, b)?;
            let tc = b.chars.output_lens().iter().sum::<usize>();
            let ts = b.subwords.output_lens().iter().sum::<usize>();
            c += g.value(lc).item() * tc as Real;
            s += g.value(ls).item() * ts as Real;
            nc += tc;
            ns += ts;
        }
        if nc == 0 || ns == 0 {
            return Err(Error::Contract("no evaluation batches".into()));
        }
        let (chars, subwords) = (c / nc as Real, s / ns as Real);
        let gamma = self.config.gamma;
        Ok(LossBreakdown {
            total: gamma * subwords + (1.0 - gamma) * chars,
            chars,
            subwords,
        })
    }

    /// Closes the current epoch: evaluates the dev loss and updates early
    /// stopping state. Returns the record and whether the dev loss improved.
    pub fn end_epoch(&mut self, dev: &[Batch]) -> Result<(EpochRecord, bool)> {
        let dev_loss = self.evaluate_loss(dev)?;
        let p = &mut self.progress;
        let n = p.cursor.max(1) as Real;
        let train = LossBreakdown {
            total: p.epoch_sums[0] / n,
            chars: p.epoch_sums[1] / n,
            subwords: p.epoch_sums[2] / n,
        };
        let improved = dev_loss.total < p.best_dev;
        if improved {
            p.best_dev = dev_loss.total;
            p.best_epoch = p.epoch;
            p.bad_epochs = 0;
        } else {
            p.bad_epochs += 1;
        }
        let record = EpochRecord {
            epoch: p.epoch,
            step: p.step,
            lr: self
                .config
                .schedule
                .lr(p.step.max(1), self.config.base_lr, self.config.warmup_steps),
            train,
            dev: dev_loss,
            best_epoch: p.best_epoch,
            epochs_since_best: p.bad_epochs,
            skipped_steps: p.skipped_steps,
        };
        p.epoch += 1;
        p.cursor = 0;
        p.epoch_sums = [0.0; 3];
        if improved {
            self.best_params = Some(self.model.params.clone());
        }
        Ok((record, improved))
    }

    /// Runs epochs until patience, `max_epochs` or `max_steps` is exhausted.
    ///
    /// With `out_dir`, writes `metrics.tsv` (one line per epoch, wall time
    /// excluded so identical runs give identical files), `timing.tsv`,
    /// `last.ckpt` after every epoch and `best.ckpt` on improvement.
    pub fn fit(&mut self, train: &[Utterance], dev: &[Utterance], out_dir: Option<&Path>) -> Result<FitReport> {
        let train_batches = self.batches(train)?;
        let dev_batches = self.batches(dev)?;
        if train_batches.is_empty() {
            return Err(Error::Contract("no training utterances".into()));
        }
        let mut metrics = None;
        let mut timing = None;
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
            metrics = Some(open_log(&dir.join("metrics.tsv"), METRICS_HEADER)?);
            timing = Some(open_log(&dir.join("timing.tsv"), "epoch\twall_seconds")?);
        }
        let mut epochs = Vec::new();
        let stop = loop {
            if self.progress.epoch > self.config.max_epochs {
                break StopReason::MaxEpochs;
            }
            let started = Instant::now();
            let mut hit_max_steps = false;
            while self.progress.cursor < train_batches.len() {
                if self.config.max_steps > 0 && self.progress.step >= self.config.max_steps {
                    hit_max_steps = true;
                    break;
                }
                self.advance(&train_batches)?;
            }
            if hit_max_steps && self.progress.cursor == 0 {
                break StopReason::MaxSteps;
            }
            let (record, improved) = self.end_epoch(&dev_batches)?;
            let secs = started.elapsed().as_secs_f64();
            log::info!("{}\twall {secs:.2}s", record.tsv_line());
            if let (Some(m), Some(t)) = (metrics.as_mut(), timing.as_mut()) {
                write_line(m, &record.tsv_line())?;
                write_line(t, &format!("{}\t{secs:.3}", record.epoch))?;
            }
            if let Some(dir) = out_dir {
                let ckpt = self.checkpoint();
                ckpt.save(&dir.join("last.ckpt"))?;
                if improved {
                    ckpt.save(&dir.join("best.ckpt"))?;
                }
            }
            epochs.push(record);
            if self.progress.bad_epochs >= self.config.patience {
                break StopReason::Patience;
            }
            if hit_max_steps || (self.config.max_steps > 0 && self.progress.step >= self.config.max_steps) {
                break StopReason::MaxSteps;
            }
        };
        Ok(FitReport {
            epochs,
            stop,
            best_epoch: self.progress.best_epoch,
            best_dev_loss: self.progress.best_dev,
            best_params: self.best_params.clone().unwrap_or_else(|| self.model.params.clone()),
        })
    }
}

fn open_log(path: &Path, header: &str) -> Result<fs::File> {
    let exists = path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::file(path, e))?;
    if !exists {
        writeln!(f, "{header}").map_err(|e| Error::file(path, e))?;
    }
    Ok(f)
}

fn write_line(f: &mut fs::File, line: &str) -> Result<()> {
    writeln!(f, "{line}")?;
    Ok(())
}
