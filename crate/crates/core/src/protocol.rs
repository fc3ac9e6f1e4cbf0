//! Two-party split-learning simulation.
//!
//! Each mini-batch step runs both parties in sequence: the feature party
//! computes cut activations `E = M_b(X)`, the label party forms its
//! (possibly defended) targets, updates `M_t` and sends back `dL/dE`
//! after any gradient-side defense, and the feature party records what it
//! saw and updates `M_b` from the received gradient.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;

use crate::autograd::{mse_loss, Tape};
use crate::data::Dataset;
use crate::defense::{self, DefenseConfig};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, FcNetwork};
use crate::rng;
use crate::tensor::Tensor;

/// What the feature party observed for one mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TranscriptRecord {
    pub epoch: usize,
    /// Rows of the training split in this batch.
    pub batch_indices: Vec<usize>,
    /// `E`, `batch x D_E`.
    pub cut_activations: Tensor,
    /// `G_E` as received, `batch x D_E`.
    pub received_gradient: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transcript {
    pub records: Vec<TranscriptRecord>,
}

const MAGIC: &[u8; 4] = b"SLTX";
const VERSION: u32 = 1;

impl Transcript {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last_epoch(&self) -> Option<usize> {
        self.records.iter().map(|r| r.epoch).max()
    }

    /// Records from the final `k` epochs, in order.
    pub fn last_epochs(&self, k: usize) -> Vec<&TranscriptRecord> {
        let Some(last) = self.last_epoch() else {
            return Vec::new();
        };
        let first = (last + 1).saturating_sub(k.max(1));
        self.records.iter().filter(|r| r.epoch >= first).collect()
    }

    /// Little-endian binary framing: magic, version, record count, then per
    /// record the epoch, index count and indices, and `E` and `G_E` each as
    /// rows, cols and row-major `f64` values.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for r in &self.records {
            w.write_all(&(r.epoch as u64).to_le_bytes())?;
            w.write_all(&(r.batch_indices.len() as u64).to_le_bytes())?;
            for &i in &r.batch_indices {
                w.write_all(&(i as u64).to_le_bytes())?;
            }
            for t in [&r.cut_activations, &r.received_gradient] {
                w.write_all(&(t.rows() as u64).to_le_bytes())?;
                w.write_all(&(t.cols() as u64).to_le_bytes())?;
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let truncated = |e: io::Error| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                Error::Format("transcript is truncated".into())
            } else {
                Error::Io(e)
            }
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a transcript file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(truncated)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported transcript version {version}"
            )));
        }
        let read_u64 = |r: &mut dyn Read| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(truncated)?;
            Ok(u64::from_le_bytes(b))
        };
        let count = read_u64(&mut r)?;
        let mut records = Vec::new();
        for _ in 0..count {
            let epoch = read_u64(&mut r)? as usize;
            let n_idx = read_u64(&mut r)? as usize;
            let batch_indices = (0..n_idx)
                .map(|_| read_u64(&mut r).map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let mut tensors = Vec::with_capacity(2);
            for _ in 0..2 {
                let rows = read_u64(&mut r)? as usize;
                let cols = read_u64(&mut r)? as usize;
                let data = (0..rows * cols)
                    .map(|_| read_u64(&mut r).map(f64::from_bits))
                    .collect::<Result<Vec<_>>>()?;
                tensors.push(Tensor::new(rows, cols, data)?);
            }
            let received_gradient = tensors.pop().unwrap();
            let cut_activations = tensors.pop().unwrap();
            if cut_activations.shape() != received_gradient.shape()
                || cut_activations.rows() != batch_indices.len()
            {
                return Err(Error::Format("transcript record shapes disagree".into()));
            }
            records.push(TranscriptRecord {
                epoch,
                batch_indices,
                cut_activations,
                received_gradient,
            });
        }
        Ok(Transcript { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Transcript::read_from(io::BufReader::new(fs::File::open(path)?))
    }
}

type Observer<'a> = dyn FnMut(&TranscriptRecord, &FcNetwork) + 'a;

/// Both parties' models and training state.
#[derive(Clone, Debug)]
pub struct SplitSession {
    pub bottom: FcNetwork,
    pub top: FcNetwork,
    pub defense: DefenseConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    bottom_opt: Adam,
    top_opt: Adam,
    check_gradients: bool,
}

/// Result of [`SplitSession::train_split`].
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub transcript: Transcript,
    /// Mean label-party loss per epoch.
    pub epoch_losses: Vec<f64>,
}

impl SplitSession {
    pub fn new(
        bottom: FcNetwork,
        top: FcNetwork,
        defense: DefenseConfig,
        optimizer: AdamConfig,
        batch_size: usize,
        epochs: usize,
        seed: u64,
    ) -> Result<Self> {
        defense.validate()?;
        if top.input_dim() != bottom.output_dim() {
            return Err(Error::ShapeMismatch {
                op: "split session cut layer",
                lhs: (bottom.input_dim(), bottom.output_dim()),
                rhs: (top.input_dim(), top.output_dim()),
            });
        }
        if top.output_dim() != defense.top_output_dim() {
            return Err(Error::InvalidArgument(format!(
                "{} defense needs {} top outputs, top has {}",
                defense.name(),
                defense.top_output_dim(),
                top.output_dim()
            )));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(SplitSession {
            bottom,
            top,
            defense,
            batch_size,
            epochs,
            seed,
            bottom_opt: Adam::new(optimizer),
            top_opt: Adam::new(optimizer),
            check_gradients: false,
        })
    }

    /// Re-derives every transmitted gradient on a fresh tape from the
    /// recorded `E` and the pre-update top model, and fails on any bit
    /// difference. Only applies when no gradient-side defense is active.
    pub fn with_gradient_check(mut self, on: bool) -> Self {
        self.check_gradients = on;
        self
    }

    pub fn cut_dim(&self) -> usize {
        self.bottom.output_dim()
    }

    fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn train_split(&mut self, train: &Dataset) -> Result<TrainOutput> {
        self.train_inner(train, None)
    }

    /// [`train_split`](Self::train_split), calling `observe` after every
    /// batch with its record and the top model that computed its gradient
    /// (before that batch's update).
    pub fn train_split_observed(
        &mut self,
        train: &Dataset,
        mut observe: impl FnMut(&TranscriptRecord, &FcNetwork),
    ) -> Result<TrainOutput> {
        self.train_inner(train, Some(&mut observe))
    }

    fn train_inner(
        &mut self,
        train: &Dataset,
        mut observe: Option<&mut Observer<'_>>,
    ) -> Result<TrainOutput> {
        if train.dim() != self.bottom.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "train_split features",
                lhs: train.features.shape(),
                rhs: (train.len(), self.bottom.input_dim()),
            });
        }
        if self.batch_size > train.len() {
            return Err(Error::InvalidArgument(format!(
                "batch size {} exceeds {} training rows",
                self.batch_size,
                train.len()
            )));
        }

        // Dataset-level label transformations, fixed for the whole run.
        let targets: Tensor = match self.defense {
            DefenseConfig::LabelNoise {
                distribution,
                scale,
            } => defense::noise_labels(
                &train.labels,
                distribution,
                scale,
                rng::derive(self.seed, &[rng::stream::LABEL_NOISE]),
            )?,
            DefenseConfig::Rle {
                dims,
                secret_column,
                sigma,
            } => {
                defense::rle_init(
                    &train.labels,
                    dims,
                    secret_column,
                    sigma,
                    rng::derive(self.seed, &[rng::stream::EXTENSION]),
                )?
                .matrix
            }
            // MLE rebuilds its targets from the top model before every
            // loss evaluation, so an initial random extension would never
            // be read.
            _ => train.labels.clone(),
        };

        let n = train.len();
        let n_batches = self.batches_per_epoch(n);
        let mut transcript = Transcript {
            records: Vec::with_capacity(self.epochs * n_batches),
        };
        let mut epoch_losses = Vec::with_capacity(self.epochs);

        for epoch in 0..self.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::seeded(rng::derive(
                self.seed,
                &[rng::stream::SHUFFLE, epoch as u64],
            )));
            let mut loss_sum = 0.0;
            for (batch, idx) in order.chunks(self.batch_size).enumerate() {
                let diverged = |e: Error| match e {
                    Error::NonFinite(_) => Error::TrainingDiverged { epoch, batch },
                    other => other,
                };
                let x = train.features.gather_rows(idx)?;
                let batch_targets = match self.defense {
                    DefenseConfig::Mle { .. } => None,
                    _ => Some(targets.gather_rows(idx)?),
                };
                let top_before = observe.is_some().then(|| self.top.clone());
                let (loss, record) = self
                    .step(epoch, batch, idx, x, batch_targets, &train.labels)
                    .map_err(diverged)?;
                if let (Some(f), Some(top)) = (observe.as_mut(), &top_before) {
                    f(&record, top);
                }
                loss_sum += loss;
                transcript.records.push(record);
            }
            epoch_losses.push(loss_sum / n_batches as f64);
        }
        Ok(TrainOutput {
            transcript,
            epoch_losses,
        })
    }

    /// One protocol round on a single mini-batch. `targets` is `None` for
    /// MLE, whose targets depend on the current cut activations.
    fn step(
        &mut self,
        epoch: usize,
        batch: usize,
        idx: &[usize],
        x: Tensor,
        targets: Option<Tensor>,
        labels: &Tensor,
    ) -> Result<(f64, TranscriptRecord)> {
        // Feature party: forward through the bottom model.
        let feature_tape = Tape::new();
        let bottom = self.bottom.bind(&feature_tape);
        let e = bottom.forward(feature_tape.constant(x))?;
        let e_value = (*e.value()).clone();

        // Label party.
        let targets = match (targets, &self.defense) {
            (Some(t), _) => t,
            (None, DefenseConfig::Mle { secret_column, .. }) => defense::mle_targets(
                &self.top,
                &e_value,
                &labels.gather_rows(idx)?,
                *secret_column,
            )?,
            (None, _) => unreachable!("only MLE defers its targets"),
        };
        let label_tape = Tape::new();
        let e_in = label_tape.leaf(e_value.clone());
        let top = self.top.bind(&label_tape);
        let loss = mse_loss(top.forward(e_in)?, label_tape.constant(targets.clone()))?;
        let loss_value = loss.value().item()?;
        if !loss_value.is_finite() {
            return Err(Error::TrainingDiverged { epoch, batch });
        }
        let mut wrt = vec![e_in];
        wrt.extend(top.params());
        let mut grads = label_tape.gradients(loss, &wrt)?;
        let cut_grad = grads.remove(0);

        let sent = match self.defense {
            DefenseConfig::GradientNoise {
                distribution,
                scale,
            } => defense::noise_gradient(
                &cut_grad,
                distribution,
                scale,
                defense::batch_seed(self.seed, epoch, batch),
            )?,
            DefenseConfig::GradientCompression { keep_rate } => {
                defense::compress_gradient(&cut_grad, keep_rate)?
            }
            _ => {
                if self.check_gradients
                    && recompute_cut_gradient(&self.top, &e_value, &targets)? != cut_grad
                {
                    return Err(Error::InconsistentGradient { epoch, batch });
                }
                cut_grad
            }
        };
        self.top.apply(&mut self.top_opt, &grads)?;

        // Feature party: backpropagate the received gradient into M_b.
        let surrogate = e.mul_const(Rc::new(sent.clone()))?.sum_all()?;
        let bottom_grads = feature_tape.gradients(surrogate, &bottom.params())?;
        self.bottom.apply(&mut self.bottom_opt, &bottom_grads)?;

        Ok((
            loss_value,
            TranscriptRecord {
                epoch,
                batch_indices: idx.to_vec(),
                cut_activations: e_value,
                received_gradient: sent,
            },
        ))
    }

    /// Label-party predictions: the secret column under label extension,
    /// otherwise the single output.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let out = self.top.forward(&self.bottom.forward(x)?)?;
        match self.defense.extension() {
            Some((_, t)) => out.select_col(t),
            None => Ok(out),
        }
    }
}

/// `dMSE(M_t(E), targets)/dE` on its own tape.
pub fn recompute_cut_gradient(top: &FcNetwork, e: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let e_in = tape.leaf(e.clone());
    let pred = top.bind_frozen(&tape).forward(e_in)?;
    let loss = mse_loss(pred, tape.constant(targets.clone()))?;
    Ok(tape.gradients(loss, &[e_in])?.remove(0))
}
