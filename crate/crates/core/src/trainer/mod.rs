//! Training loop for the mapping network.

pub mod adamw;
pub mod checkpoint;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::pcm::{total_loss_and_grads, Activation, MappingParams, ObjectiveConfig};
use crate::ptc::{construct_pseudo_triplets, satisfies_crop_constraints, PseudoTriplet, PtcConfig, PtcStats};
use crate::rng::{stream_rng, Stream};
use crate::store::{Store, StoreRecord};

pub use adamw::{adamw_step, lr_at_step, AdamWConfig, OptimizerState};
pub use checkpoint::{Checkpoint, Progress};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub objective: ObjectiveConfig,
    pub ptc: PtcConfig,
    /// Hidden width of the mapping network; `None` uses the embedding dimension.
    pub hidden: Option<usize>,
    pub activation: Activation,
    /// Abort after this many consecutive batches with fewer than two triplets.
    pub max_consecutive_skips: u64,
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            warmup_steps: 100,
            batch_size: 64,
            total_steps: 1000,
            seed: 0,
            optimizer: AdamWConfig::default(),
            objective: ObjectiveConfig::default(),
            ptc: PtcConfig::default(),
            hidden: None,
            activation: Activation::Gelu,
            max_consecutive_skips: 100,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if !(self.objective.tau > 0.0) || !self.objective.tau.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "temperature must be > 0, got {}",
                self.objective.tau
            )));
        }
        if !self.objective.terms.compose && !self.objective.terms.align {
            return Err(Error::InvalidConfig("at least one loss term must be enabled".into()));
        }
        if self.hidden == Some(0) {
            return Err(Error::InvalidConfig("hidden width must be >= 1".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::InvalidConfig("checkpoint interval must be >= 1".into()));
        }
        self.optimizer.validate()?;
        self.ptc.crop.validate()?;
        self.ptc.mixture.validate()
    }

    /// Hash of every setting that shapes the trajectory. Run length and
    /// checkpoint cadence are excluded so a run can be extended on resume.
    pub fn trajectory_hash(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.total_steps = 0;
        c.checkpoint_every = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(json).into()
    }
}

/// One line of the JSON-lines training log. `step` is the number of updates
/// applied before this batch, so step 0 is the loss at initialization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub l_compose: f64,
    pub l_align: f64,
    pub l_total: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub triplets: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: MappingParams,
    pub optimizer: OptimizerState,
    pub progress: Progress,
    pub log: Vec<LogEntry>,
    pub skipped: u64,
}

impl TrainOutput {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            progress: self.progress,
            config_hash: cfg.trajectory_hash(),
        }
    }
}

pub enum TrainEvent<'a> {
    Step(&'a LogEntry),
    Checkpoint(&'a Checkpoint),
}

/// Freshly initialized mapping for `store`/`encoders` under `cfg`.
pub fn initial_params(d: usize, encoders: &Encoders, cfg: &TrainConfig) -> Result<MappingParams> {
    let mut rng = stream_rng(cfg.seed, Stream::Init, 0);
    MappingParams::init(
        d,
        cfg.hidden.unwrap_or(d),
        encoders.token_dim(),
        cfg.activation,
        &mut rng,
    )
}

/// Records whose crop candidates are restricted to the configured crop range.
/// Candidates outside the range are dropped; an image left without any is an
/// error.
pub fn training_records(store: &Store, cfg: &PtcConfig) -> Result<Vec<StoreRecord>> {
    store
        .records()
        .iter()
        .map(|r| {
            let mut r = r.clone();
            let (w, h) = (r.image.width, r.image.height);
            r.image
                .crop_candidates
                .retain(|c| satisfies_crop_constraints(&c.bbox, w, h, &cfg.crop));
            if r.image.crop_candidates.is_empty() {
                return Err(Error::InfeasibleCrop(format!(
                    "image `{}` has no crop candidate within {}..={} px",
                    r.image.id, cfg.crop.min, cfg.crop.max
                )));
            }
            Ok(r)
        })
        .collect()
}

/// Batch schedule: epochs of `⌊n / batch⌋` batches over a seeded permutation.
#[derive(Clone, Debug)]
pub struct BatchSchedule {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: Option<(u64, Vec<usize>)>,
}

impl BatchSchedule {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n < batch_size {
            return Err(Error::InvalidConfig(format!(
                "store has {n} records, fewer than the batch size {batch_size}"
            )));
        }
        Ok(Self {
            n,
            batch_size,
            seed,
            epoch: None,
        })
    }

    pub fn batches_per_epoch(&self) -> u64 {
        (self.n / self.batch_size) as u64
    }

    /// Record indices of the batch consumed at `iteration`.
    pub fn batch(&mut self, iteration: u64) -> &[usize] {
        let bpe = self.batches_per_epoch();
        let (epoch, pos) = (iteration / bpe, (iteration % bpe) as usize);
        if self.epoch.as_ref().map(|e| e.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.n).collect();
            perm.shuffle(&mut stream_rng(self.seed, Stream::Batch, epoch));
            self.epoch = Some((epoch, perm));
        }
        let perm = &self.epoch.as_ref().unwrap().1;
        &perm[pos * self.batch_size..(pos + 1) * self.batch_size]
    }
}

/// Pseudo triplets for the batch at `iteration`, exactly as the training loop
/// builds them.
pub fn triplets_for_iteration(
    records: &[StoreRecord],
    schedule: &mut BatchSchedule,
    cfg: &TrainConfig,
    iteration: u64,
) -> Result<(Vec<PseudoTriplet>, PtcStats)> {
    let batch: Vec<&StoreRecord> = schedule.batch(iteration).iter().map(|&i| &records[i]).collect();
    let mut crop_rng = stream_rng(cfg.seed, Stream::Crop, iteration);
    let mut mix_rng = stream_rng(cfg.seed, Stream::Mixture, iteration);
    let out = construct_pseudo_triplets(&batch, &mut crop_rng, &mut mix_rng, &cfg.ptc)?;
    Ok((out.triplets, out.stats))
}

fn check_dims(store: &Store, encoders: &Encoders) -> Result<()> {
    if store.dim() != encoders.out_dim() {
        return Err(Error::DimensionMismatch {
            expected: encoders.out_dim(),
            got: store.dim(),
            context: "store embedding dim vs text encoder output",
        });
    }
    Ok(())
}

pub fn train(store: &Store, encoders: &Encoders, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with(store, encoders, cfg, None, |_| Ok(()))
}

/// Full training loop. `resume` continues from a checkpoint taken under the
/// same configuration; `on_event` sees every log line and checkpoint.
pub fn train_with<F>(
    store: &Store,
    encoders: &Encoders,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    mut on_event: F,
) -> Result<TrainOutput>
where
    F: FnMut(TrainEvent<'_>) -> Result<()>,
{
    cfg.validate()?;
    if store.is_empty() {
        return Err(Error::Empty("store"));
    }
    check_dims(store, encoders)?;
    let records = training_records(store, &cfg.ptc)?;
    let mut schedule = BatchSchedule::new(records.len(), cfg.batch_size, cfg.seed)?;

    let (mut params, mut optimizer, mut progress) = match resume {
        Some(ck) => {
            if ck.config_hash != cfg.trajectory_hash() {
                return Err(Error::InvalidConfig(
                    "checkpoint was written under a different training configuration".into(),
                ));
            }
            if ck.params.input_dim() != store.dim() || ck.params.output_dim() != encoders.token_dim() {
                return Err(Error::DimensionMismatch {
                    expected: store.dim(),
                    got: ck.params.input_dim(),
                    context: "checkpoint mapping input dim",
                });
            }
            (ck.params, ck.optimizer, ck.progress)
        }
        None => {
            let p = initial_params(store.dim(), encoders, cfg)?;
            let o = OptimizerState::for_params(&p);
            (p, o, Progress::default())
        }
    };

    let mut log = Vec::new();
    let mut skipped = 0;
    while progress.step < cfg.total_steps {
        let iteration = progress.iteration;
        progress.iteration += 1;
        let (triplets, stats) = triplets_for_iteration(&records, &mut schedule, cfg, iteration)?;
        if triplets.len() < 2 {
            skipped += 1;
            progress.consecutive_skips += 1;
            log::debug!(
                "iteration {iteration}: {} triplets survived filtering, skipping",
                stats.selected
            );
            if progress.consecutive_skips > cfg.max_consecutive_skips {
                return Err(Error::TrainingAborted(format!(
                    "{} consecutive batches left fewer than 2 triplets after filtering",
                    progress.consecutive_skips
                )));
            }
            continue;
        }
        progress.consecutive_skips = 0;

        let (loss, grads) = total_loss_and_grads(&params, &triplets, encoders, &cfg.objective)?;
        if !loss.l_total.is_finite() {
            return Err(Error::TrainingAborted(format!(
                "non-finite loss at step {}",
                progress.step
            )));
        }
        let lr = lr_at_step(progress.step + 1, cfg.learning_rate, cfg.warmup_steps);
        let entry = LogEntry {
            step: progress.step,
            l_compose: loss.l_compose,
            l_align: loss.l_align,
            l_total: loss.l_total,
            grad_norm: grads.norm(),
            lr,
            triplets: triplets.len(),
        };
        adamw_step(&mut params, &grads, &mut optimizer, lr, &cfg.optimizer)
            .map_err(|e| Error::TrainingAborted(format!("optimizer step {}: {e}", progress.step)))?;
        progress.step += 1;
        if progress.step % 50 == 0 || progress.step == cfg.total_steps {
            log::info!(
                "step {} l_total {:.5} ({} triplets)",
                entry.step,
                entry.l_total,
                entry.triplets
            );
        }
        on_event(TrainEvent::Step(&entry))?;
        log.push(entry);

        if let Some(every) = cfg.checkpoint_every {
            if progress.step % every == 0 {
                let ck = Checkpoint {
                    params: params.clone(),
                    optimizer: optimizer.clone(),
                    progress,
                    config_hash: cfg.trajectory_hash(),
                };
                on_event(TrainEvent::Checkpoint(&ck))?;
            }
        }
    }
    Ok(TrainOutput {
        params,
        optimizer,
        progress,
        log,
        skipped,
    })
}
