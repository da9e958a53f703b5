use rand::seq::SliceRandom;
use rand::Rng;

use super::{PipelineError, Result, TrainConfig};
use crate::augment::{assemble_pairs, BatchSpec, PairBatch};
use crate::encoder::{EncoderParams, Mode};
use crate::ingest::VelocitySignal;
use crate::numcore::{AdamConfig, AdamState, ExecMode, Graph, Tensor};
use crate::objective::nt_xent_on_graph;
use crate::rng::{substream, Domain};

/// Complete training state. Batches are derived from `(seed, epoch, batch)`,
/// so no generator state needs to be stored to resume exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: EncoderParams<f32>,
    pub adam: AdamState<f32>,
    /// Epoch currently in progress (or the next one to start).
    pub epoch: usize,
    /// Batches of `epoch` already consumed.
    pub batch_in_epoch: usize,
    /// Optimizer steps taken in total.
    pub iteration: u64,
}

impl Checkpoint {
    pub fn fresh(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = EncoderParams::init(&config.encoder, config.seed)?;
        let adam = AdamState::new(params.layers.named().into_iter().map(|(_, t)| t), AdamConfig::default());
        Ok(Self {
            config,
            params,
            adam,
            epoch: 0,
            batch_in_epoch: 0,
            iteration: 0,
        })
    }

    pub fn exec_mode(&self) -> ExecMode {
        if self.config.parallel {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }

    /// True once every configured epoch (or the iteration cap) is done.
    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs || self.config.max_iterations.is_some_and(|m| self.iteration >= m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub iteration: u64,
    pub loss: f64,
}

/// Signals whose dataset is in `datasets` (all when empty).
pub fn select_corpus<'a>(corpus: &'a [VelocitySignal], datasets: &[String]) -> Vec<&'a VelocitySignal> {
    corpus
        .iter()
        .filter(|s| datasets.is_empty() || datasets.contains(&s.dataset_id))
        .collect()
}

/// Full batches per epoch; a trailing partial batch is dropped.
pub fn batches_per_epoch(corpus_len: usize, batch_size: usize) -> usize {
    corpus_len / batch_size
}

/// Visiting order of the corpus in `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut substream(seed, Domain::Shuffle, epoch as u64, 0));
    order
}

pub fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    substream(seed, Domain::Batch, epoch as u64, batch as u64).random()
}

/// One optimizer step on `batch`. The state is untouched on error.
pub fn train_step(state: &mut Checkpoint, batch: &PairBatch) -> Result<f64> {
    let mut graph = Graph::new(state.exec_mode());
    let vars = state.params.bind(&mut graph);
    let x = graph.constant(batch.to_tensor());
    let (h, stats) = state.params.forward(&mut graph, &vars, x, Mode::Train)?;
    let z = state.params.project_on_graph(&mut graph, &vars, h)?;
    let pairing: Vec<usize> = (0..batch.size()).map(|i| batch.pair_of(i)).collect();
    let (loss_var, loss) = nt_xent_on_graph(&mut graph, z, &pairing, state.config.temperature)?;
    if !loss.total.is_finite() {
        return Err(PipelineError::NonFiniteLoss {
            iteration: state.iteration,
        });
    }
    graph.backward(loss_var)?;
    let grads: Vec<Tensor<f32>> = vars.named().into_iter().map(|(_, v)| graph.grad(*v)).collect();
    let mut leaves = state.params.layers.leaves_mut();
    state.adam.step(&mut leaves, &grads, state.config.lr).map_err(|e| match e {
        crate::numcore::NumError::NonFinite(_) => PipelineError::NonFiniteLoss {
            iteration: state.iteration,
        },
        other => other.into(),
    })?;
    state.params.update_running(&stats);
    Ok(loss.total as f64)
}

impl Checkpoint {
    /// Trains until `finished()`, calling `on_step` after every step.
    /// On error the state holds the last successful step.
    pub fn run(&mut self, corpus: &[VelocitySignal], mut on_step: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
        let pool = select_corpus(corpus, &self.config.datasets);
        let n = self.config.batch_size;
        let per_epoch = batches_per_epoch(pool.len(), n);
        if per_epoch == 0 {
            return Err(PipelineError::InsufficientData(format!(
                "{} training signals cannot fill a batch of {n}",
                pool.len()
            )));
        }
        let crops = self.config.crops.clone();
        let transforms = self.config.transforms.clone();
        let mut log = Vec::new();
        while !self.finished() {
            let order = epoch_order(self.config.seed, self.epoch, pool.len());
            while self.batch_in_epoch < per_epoch && !self.finished() {
                let b = self.batch_in_epoch;
                let sources: Vec<&VelocitySignal> = order[b * n..(b + 1) * n].iter().map(|&i| pool[i]).collect();
                let spec = BatchSpec {
                    pairs: n,
                    segment_len: self.config.segment_len,
                    crops: &crops,
                    transforms: &transforms,
                    exec: self.exec_mode(),
                };
                let batch = assemble_pairs(&sources, &spec, batch_seed(self.config.seed, self.epoch, b))?;
                let loss = train_step(self, &batch)?;
                let record = LossRecord {
                    epoch: self.epoch,
                    iteration: self.iteration,
                    loss,
                };
                self.iteration += 1;
                self.batch_in_epoch += 1;
                on_step(&record);
                log.push(record);
            }
            if self.batch_in_epoch == per_epoch {
                self.epoch += 1;
                self.batch_in_epoch = 0;
            }
        }
        Ok(log)
    }
}

/// Trains a fresh encoder on `corpus` under `config`.
pub fn train(config: TrainConfig, corpus: &[VelocitySignal]) -> Result<(Checkpoint, Vec<LossRecord>)> {
    let mut state = Checkpoint::fresh(config)?;
    let log = state.run(corpus, |r| log::debug!("epoch {} iteration {} loss {:.5}", r.epoch, r.iteration, r.loss))?;
    Ok((state, log))
}
