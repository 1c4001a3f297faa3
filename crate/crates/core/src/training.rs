//! Stage-wise training: Adam over the total loss, stages switched on coarse
//! to fine by a schedule, checkpoints that replay exactly.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{total_loss_backward, LossReport, LossWeights, StageTerms};
use crate::network::{Network, NetworkConfig, NUM_STAGES};
use crate::nn::ParamStore;
use crate::optim::{AdamConfig, AdamState};
use crate::scalar::{lit, Scalar};
use crate::volume::Volume;

/// Train with the `active_stages` coarsest stages for `num_steps` steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleBlock {
    pub active_stages: usize,
    pub num_steps: u64,
}

/// One block per stage count `1..=num_stages`, each `block_steps` long.
pub fn stage_schedule_default(num_stages: usize, block_steps: u64) -> Result<Vec<ScheduleBlock>> {
    if num_stages == 0 || block_steps == 0 {
        return Err(Error::validation(
            "schedule needs at least one stage and one step per block",
        ));
    }
    Ok((1..=num_stages)
        .map(|k| ScheduleBlock {
            active_stages: k,
            num_steps: block_steps,
        })
        .collect())
}

/// Lengthens the last block so the schedule spans `total` steps.
pub fn extend_schedule(schedule: &mut [ScheduleBlock], total: u64) {
    let sum = schedule_len(schedule);
    if let Some(last) = schedule.last_mut() {
        if total > sum {
            last.num_steps += total - sum;
        }
    }
}

/// Truncates or extends `schedule` to exactly `total` steps.
pub fn fit_schedule(schedule: &[ScheduleBlock], total: u64) -> Vec<ScheduleBlock> {
    let mut out = Vec::new();
    let mut left = total;
    for b in schedule {
        if left == 0 {
            break;
        }
        let n = b.num_steps.min(left);
        out.push(ScheduleBlock { num_steps: n, ..*b });
        left -= n;
    }
    extend_schedule(&mut out, total);
    out
}

pub fn schedule_len(schedule: &[ScheduleBlock]) -> u64 {
    schedule.iter().map(|b| b.num_steps).sum()
}

pub fn validate_schedule(schedule: &[ScheduleBlock], num_stages: usize) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::validation("stage schedule is empty"));
    }
    let mut prev = 0;
    for (i, b) in schedule.iter().enumerate() {
        if b.active_stages == 0 || b.active_stages > num_stages {
            return Err(Error::validation(format!(
                "schedule block {i}: active_stages {} outside 1..={num_stages}",
                b.active_stages
            )));
        }
        if b.active_stages < prev {
            return Err(Error::validation(format!(
                "schedule block {i} deactivates a stage ({} after {prev})",
                b.active_stages
            )));
        }
        if b.num_steps == 0 {
            return Err(Error::validation(format!(
                "schedule block {i} has no steps"
            )));
        }
        prev = b.active_stages;
    }
    Ok(())
}

/// Stages active at `step`; past the end the last block stays in force.
pub fn active_stages_at(schedule: &[ScheduleBlock], step: u64) -> [bool; NUM_STAGES] {
    let mut end = 0;
    let mut k = schedule.last().map_or(NUM_STAGES, |b| b.active_stages);
    for b in schedule {
        end += b.num_steps;
        if step < end {
            k = b.active_stages;
            break;
        }
    }
    std::array::from_fn(|s| s < k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub schedule: Vec<ScheduleBlock>,
    /// Pairs per update; gradients are averaged over the batch.
    pub batch_size: usize,
    pub seed: u64,
    /// Write `checkpoint.bin` every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            schedule: stage_schedule_default(NUM_STAGES, 200).expect("valid"),
            batch_size: 1,
            seed: 0,
            checkpoint_every: 0,
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::validation(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        self.adam.validate()?;
        self.weights.validate()?;
        self.network.validate()?;
        validate_schedule(&self.schedule, NUM_STAGES)
    }

    pub fn total_steps(&self) -> u64 {
        schedule_len(&self.schedule)
    }

    /// SHA-256 of the canonical JSON form, stored in checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Volumes are shared so that all-pairs datasets do not copy scans.
#[derive(Clone, Debug)]
pub struct TrainPair<T> {
    pub fixed: Arc<Volume<T>>,
    pub moving: Arc<Volume<T>>,
}

impl<T> TrainPair<T> {
    pub fn new(fixed: Volume<T>, moving: Volume<T>) -> Self {
        TrainPair {
            fixed: Arc::new(fixed),
            moving: Arc::new(moving),
        }
    }
}

/// Visiting order of `n` pairs in `epoch`, a pure function of the seed.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(16));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Indices of the pairs drawn at `step`.
pub fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|b| {
            let k = step * batch as u64 + b;
            let epoch = k / n as u64;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cached = Some((epoch, epoch_order(seed, epoch, n)));
            }
            cached.as_ref().expect("set above").1[(k % n as u64) as usize]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub network: NetworkConfig,
    pub params: ParamStore<T>,
    pub adam: AdamState<T>,
    /// Completed updates.
    pub step: u64,
    pub config_hash: String,
}

const MAGIC: &[u8; 8] = b"STGRCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    step: u64,
    adam_t: u64,
    config_sha256: String,
    network: NetworkConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    key: String,
    dims: Vec<usize>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn build_network(&self) -> Result<Network> {
        Network::new(self.network.clone())
    }

    /// Layout: magic, `u32` version, `u64` header length, JSON header, then
    /// per tensor in header order its values, Adam `m` and Adam `v`, as
    /// little-endian scalars of the header dtype.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            dtype: T::DTYPE.to_string(),
            step: self.step,
            adam_t: self.adam.t,
            config_sha256: self.config_hash.clone(),
            network: self.network.clone(),
            tensors: self
                .params
                .iter()
                .map(|(k, p)| TensorEntry {
                    key: k.clone(),
                    dims: p.dims.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out =
            Vec::with_capacity(json.len() + 3 * T::BYTES * self.params.num_scalars() + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (k, p) in self.params.iter() {
            for store in [&p.data[..], self.adam.m.get(k), self.adam.v.get(k)] {
                for &v in store {
                    v.write_le(&mut out);
                }
            }
        }
        out
    }

    /// Parses [`Checkpoint::to_bytes`] output, converting the stored dtype to
    /// `T` if they differ, and checks the layout against the network config.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::checkpoint("magic", "not a stagereg checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::checkpoint(
                "version",
                format!("unsupported version {version}, expected {VERSION}"),
            ));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(20..20usize.saturating_add(hlen))
            .ok_or_else(|| Error::checkpoint("header", "truncated"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::checkpoint("header", e.to_string()))?;
        let payload = &bytes[20 + hlen..];
        match header.dtype.as_str() {
            "f32" => Self::decode::<f32>(header, payload),
            "f64" => Self::decode::<f64>(header, payload),
            other => Err(Error::checkpoint(
                "dtype",
                format!("unknown dtype `{other}`"),
            )),
        }
    }

    fn decode<S: Scalar>(header: Header, payload: &[u8]) -> Result<Self> {
        let scalars: usize = header
            .tensors
            .iter()
            .map(|t| t.dims.iter().product::<usize>())
            .sum();
        let expected = 3 * scalars * S::BYTES;
        if payload.len() != expected {
            let what = if payload.len() < expected {
                "truncated"
            } else {
                "trailing bytes"
            };
            return Err(Error::checkpoint(
                "payload",
                format!("{what}: {} bytes, expected {expected}", payload.len()),
            ));
        }
        let mut params = ParamStore::<S>::new();
        let mut m = ParamStore::<S>::new();
        let mut v = ParamStore::<S>::new();
        let mut chunks = payload.chunks_exact(S::BYTES).map(S::read_le);
        for t in &header.tensors {
            let len: usize = t.dims.iter().product();
            for store in [&mut params, &mut m, &mut v] {
                let data: Vec<S> = chunks.by_ref().take(len).collect();
                store.insert(t.key.clone(), t.dims.clone(), data);
            }
        }
        let net = Network::new(header.network.clone())?;
        net.check_params(&params)?;
        Ok(Checkpoint {
            network: header.network,
            params: params.cast(),
            adam: AdamState {
                m: m.cast(),
                v: v.cast(),
                t: header.adam_t,
            },
            step: header.step,
            config_hash: header.config_sha256,
        })
    }
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// One history row: the loss evaluated at `step`, before that step's update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub report: LossReport,
}

fn history_header() -> Vec<String> {
    let mut h = vec!["step".to_string(), "total".to_string()];
    for s in 0..NUM_STAGES {
        for t in ["active", "sim", "range", "smooth"] {
            h.push(format!("s{s}_{t}"));
        }
    }
    h
}

/// CSV with `step,total,s0_active,s0_sim,s0_range,s0_smooth,…`; floats are
/// written in shortest round-trip form so histories compare exactly.
pub fn write_history_csv(path: &Path, history: &[StepRecord]) -> Result<()> {
    let err = |e: csv::Error| Error::format("loss history", e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(history_header()).map_err(err)?;
    for r in history {
        let mut row = vec![r.step.to_string(), r.report.total.to_string()];
        for s in &r.report.stages {
            row.push((s.active as u8).to_string());
            row.extend([s.sim, s.range, s.smooth].map(|v| v.to_string()));
        }
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history_csv(path: &Path) -> Result<Vec<StepRecord>> {
    let err = |e: csv::Error| Error::format("loss history", e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    if r.headers().map_err(err)?.iter().collect::<Vec<_>>() != history_header() {
        return Err(Error::format("loss history", "unexpected header"));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::format("loss history", format!("not a number: `{s}`")))
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(err)?;
        let step = rec[0]
            .parse()
            .map_err(|_| Error::format("loss history", format!("bad step `{}`", &rec[0])))?;
        let stages = (0..NUM_STAGES)
            .map(|s| {
                let c = 2 + 4 * s;
                Ok(StageTerms {
                    active: num(&rec[c])? != 0.0,
                    sim: num(&rec[c + 1])?,
                    range: num(&rec[c + 2])?,
                    smooth: num(&rec[c + 3])?,
                })
            })
            .collect::<Result<_>>()?;
        out.push(StepRecord {
            step,
            report: LossReport {
                stages,
                total: num(&rec[1])?,
            },
        });
    }
    Ok(out)
}

/// Owns the parameters and optimizer state of one training run.
pub struct Trainer<T> {
    config: TrainConfig,
    net: Network,
    params: ParamStore<T>,
    adam: AdamState<T>,
    step: u64,
    history: Vec<StepRecord>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = Network::new(config.network.clone())?;
        let params = net.init_params(config.seed);
        let adam = AdamState::new(&params);
        Ok(Trainer {
            config,
            net,
            params,
            adam,
            step: 0,
            history: Vec::new(),
        })
    }

    /// Continues a run; `config` must be the one the checkpoint was made with.
    pub fn resume(config: TrainConfig, ckpt: Checkpoint<T>) -> Result<Self> {
        config.validate()?;
        if ckpt.config_hash != config.hash() {
            return Err(Error::checkpoint(
                "config_sha256",
                "checkpoint was written under a different training config",
            ));
        }
        if ckpt.network != config.network {
            return Err(Error::checkpoint("network", "network config differs"));
        }
        let net = Network::new(config.network.clone())?;
        net.check_params(&ckpt.params)?;
        net.check_params(&ckpt.adam.m)?;
        net.check_params(&ckpt.adam.v)?;
        Ok(Trainer {
            config,
            net,
            params: ckpt.params,
            adam: ckpt.adam,
            step: ckpt.step,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Records produced by this trainer (not those before a resume).
    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            network: self.config.network.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            step: self.step,
            config_hash: self.config.hash(),
        }
    }

    pub fn active_stages(&self) -> [bool; NUM_STAGES] {
        active_stages_at(&self.config.schedule, self.step)
    }

    /// Loss and parameter gradient averaged over `batch`.
    pub fn loss_and_grad(
        &self,
        batch: &[&TrainPair<T>],
        active: &[bool],
    ) -> Result<(LossReport, ParamStore<T>)> {
        let mut grads = self.params.zeros_like();
        let mut reports = Vec::with_capacity(batch.len());
        for pair in batch {
            let (out, tape) = self.net.forward(&self.params, &pair.fixed, &pair.moving)?;
            let inputs = out.loss_inputs();
            reports.push(crate::losses::total_loss(
                &inputs,
                active,
                &self.config.weights,
            )?);
            let sg = total_loss_backward(&inputs, active, &self.config.weights)?;
            grads.accumulate(&self.net.backward(&self.params, &out, &tape, &sg)?);
        }
        if batch.len() > 1 {
            grads.scale(lit(1.0 / batch.len() as f64));
        }
        Ok((LossReport::mean(&reports), grads))
    }

    /// One update. A non-finite loss or gradient leaves the parameters
    /// untouched and returns [`Error::Divergence`].
    pub fn train_step(&mut self, pairs: &[TrainPair<T>]) -> Result<&StepRecord> {
        if pairs.is_empty() {
            return Err(Error::validation("training needs at least one pair"));
        }
        let idx = batch_indices(
            self.config.seed,
            self.step,
            self.config.batch_size,
            pairs.len(),
        );
        let batch: Vec<&TrainPair<T>> = idx.iter().map(|&i| &pairs[i]).collect();
        let active = self.active_stages();
        let (report, grads) = self.loss_and_grad(&batch, &active)?;
        if !report.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                reason: format!("loss is {}", report.total),
            });
        }
        if !grads.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                reason: "gradient is not finite".into(),
            });
        }
        self.adam.step(
            &self.config.adam,
            self.config.learning_rate,
            &mut self.params,
            &grads,
        );
        self.history.push(StepRecord {
            step: self.step,
            report,
        });
        self.step += 1;
        Ok(self.history.last().expect("just pushed"))
    }

    /// Trains until `step == end` (or the schedule's end if `None`).
    pub fn run(&mut self, pairs: &[TrainPair<T>], end: Option<u64>) -> Result<()> {
        let end = end.unwrap_or_else(|| self.config.total_steps());
        while self.step < end {
            self.train_step(pairs)?;
        }
        Ok(())
    }
}

fn check_pairs<T: Scalar>(cfg: &TrainConfig, pairs: &[TrainPair<T>]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::validation("training needs at least one pair"));
    }
    let want = cfg.network.in_shape;
    for (i, p) in pairs.iter().enumerate() {
        if p.fixed.shape != want || p.moving.shape != want {
            return Err(Error::shape(format!(
                "pair {i}: volumes {} / {}, network expects {want}",
                p.fixed.shape, p.moving.shape
            )));
        }
        if !p
            .fixed
            .data
            .iter()
            .chain(&p.moving.data)
            .all(|v| v.is_finite())
        {
            return Err(Error::validation(format!(
                "pair {i}: volume has non-finite voxels"
            )));
        }
    }
    Ok(())
}

/// Files written by [`train`] into its output directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "loss_history.csv";

#[derive(Debug)]
pub struct TrainOutcome<T> {
    pub checkpoint: Checkpoint<T>,
    pub history: Vec<StepRecord>,
    pub checkpoint_path: Option<PathBuf>,
}

/// Runs `config` to the end of its schedule. With `out_dir`, the checkpoint
/// and loss history are written there, periodically if
/// `checkpoint_every > 0`, and always on exit. On divergence the last good
/// state is saved before the error is returned.
pub fn train<T: Scalar>(
    config: TrainConfig,
    pairs: &[TrainPair<T>],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    check_pairs(&config, pairs)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let every = config.checkpoint_every;
    let total = config.total_steps();
    let mut trainer = Trainer::<T>::new(config)?;
    let save = |t: &Trainer<T>| -> Result<Option<PathBuf>> {
        let Some(dir) = out_dir else { return Ok(None) };
        let path = dir.join(CHECKPOINT_FILE);
        save_checkpoint(&t.checkpoint(), &path)?;
        write_history_csv(&dir.join(HISTORY_FILE), t.history())?;
        Ok(Some(path))
    };
    while trainer.step() < total {
        if let Err(e) = trainer.train_step(pairs) {
            if matches!(e, Error::Divergence { .. }) {
                save(&trainer)?;
            }
            return Err(e);
        }
        if every > 0 && trainer.step() % every == 0 && trainer.step() < total {
            save(&trainer)?;
        }
    }
    let checkpoint_path = save(&trainer)?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        history: trainer.history,
        checkpoint_path,
    })
}
