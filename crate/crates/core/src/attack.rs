//! Label inference by the feature party.
//!
//! The attacker freezes its trained bottom model, builds a surrogate top
//! model `M_s` and dummy labels `Y*`, and jointly optimizes both so that
//!
//! * the gradient `dMSE(M_s(E), Y*)/dE` reproduces the recorded `G_E`,
//! * `M_s(E)` agrees with `Y*`, and
//! * `M_s(M_b(X_leaked))` fits the few leaked labels (scaled by `alpha`).
//!
//! The first term contains a gradient, so optimizing it differentiates
//! through a backward pass.

use serde::{Deserialize, Serialize};

use crate::autograd::{mse_loss, Activation, Tape, Var};
use crate::data::{Dataset, LeakedSet};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricPair};
use crate::nn::{Adam, AdamConfig, BoundNetwork, FcNetwork, Role, RowAdam};
use crate::protocol::Transcript;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// Weight of the model-completion loss.
    pub alpha: f64,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub seed: u64,
    /// Hidden widths of the surrogate; empty means a single linear layer.
    pub surrogate_hidden: Vec<usize>,
    pub hidden_activation: Activation,
    /// Output width of the surrogate: 1 without label extension, `D` when
    /// the attacker knows the extension width.
    pub surrogate_outputs: usize,
    /// How many final training epochs of the transcript to replay.
    pub transcript_epochs: usize,
    /// Optimizer steps taken on each transcript batch per attack epoch.
    pub steps_per_batch: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            alpha: 0.05,
            optimizer: AdamConfig::with_lr(0.01),
            epochs: 50,
            seed: 0,
            surrogate_hidden: Vec::new(),
            hidden_activation: Activation::Relu,
            surrogate_outputs: 1,
            transcript_epochs: 1,
            steps_per_batch: 200,
        }
    }
}

/// Surrogate model, dummy labels and their optimizers.
#[derive(Clone, Debug)]
pub struct AttackState {
    pub surrogate: FcNetwork,
    /// `Y*`, one row per training sample.
    pub dummy_labels: Tensor,
    pub alpha: f64,
    surrogate_opt: Adam,
    dummy_opt: RowAdam,
}

impl AttackState {
    /// Random surrogate with widths `[cut_dim, hidden..., outputs]` and
    /// standard-normal dummy labels.
    pub fn new(cut_dim: usize, n_train: usize, config: &AttackConfig) -> Result<Self> {
        if !(config.alpha >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be >= 0, got {}",
                config.alpha
            )));
        }
        if config.surrogate_outputs == 0 {
            return Err(Error::InvalidArgument("surrogate needs an output".into()));
        }
        let mut dims = vec![cut_dim];
        dims.extend(&config.surrogate_hidden);
        dims.push(config.surrogate_outputs);
        let surrogate = FcNetwork::build(
            &dims,
            config.hidden_activation,
            Role::Surrogate,
            rng::derive(config.seed, &[rng::stream::SURROGATE_INIT]),
        )?;
        let mut rng = rng::seeded(rng::derive(config.seed, &[rng::stream::DUMMY_LABELS]));
        let k = config.surrogate_outputs;
        let dummy = (0..n_train * k)
            .map(|_| rng::standard_normal(&mut rng))
            .collect();
        Ok(AttackState {
            surrogate,
            dummy_labels: Tensor::new(n_train, k, dummy)?,
            alpha: config.alpha,
            surrogate_opt: Adam::new(config.optimizer),
            dummy_opt: RowAdam::new(config.optimizer, n_train, k),
        })
    }

    /// Replaces the surrogate and dummy labels, keeping fresh optimizers.
    pub fn with_values(mut self, surrogate: FcNetwork, dummy_labels: Tensor) -> Result<Self> {
        if dummy_labels.shape() != self.dummy_labels.shape()
            || surrogate.output_dim() != dummy_labels.cols()
        {
            return Err(Error::ShapeMismatch {
                op: "attack state",
                lhs: self.dummy_labels.shape(),
                rhs: dummy_labels.shape(),
            });
        }
        self.surrogate = surrogate.with_role(Role::Surrogate);
        self.dummy_labels = dummy_labels;
        Ok(self)
    }

    /// The dummy-label column that best matches the leaked labels by MAE.
    pub fn select_column(&self, leaked: &LeakedSet) -> Result<usize> {
        let rows = self.dummy_labels.gather_rows(&leaked.indices)?;
        let mut best = (0, f64::INFINITY);
        for c in 0..rows.cols() {
            let mae = metrics::evaluate(&rows.select_col(c)?, &leaked.labels)?.mae;
            if mae < best.1 {
                best = (c, mae);
            }
        }
        Ok(best.0)
    }
}

/// The two terms of the gradient-inversion loss and their sum.
#[derive(Clone, Copy, Debug)]
pub struct InversionLoss<'t> {
    /// `MSE(G_E, dMSE(M_s(E), Y*)/dE)`.
    pub gradient_match: Var<'t>,
    /// `MSE(M_s(E), Y*)`.
    pub consistency: Var<'t>,
    pub total: Var<'t>,
}

/// Gradient-inversion loss for one batch. `cut` is `E` from the frozen
/// bottom model; `dummy` holds the batch rows of `Y*`. The result is
/// differentiable with respect to the surrogate parameters and `dummy`.
pub fn gradient_inversion_loss<'t>(
    tape: &'t Tape,
    surrogate: &BoundNetwork<'t>,
    dummy: Var<'t>,
    cut: &Tensor,
    recorded: &Tensor,
) -> Result<InversionLoss<'t>> {
    if cut.shape() != recorded.shape() {
        return Err(Error::ShapeMismatch {
            op: "gradient_inversion_loss",
            lhs: cut.shape(),
            rhs: recorded.shape(),
        });
    }
    let e = tape.leaf(cut.clone());
    let pred = surrogate.forward(e)?;
    let dummy_loss = mse_loss(pred, dummy)?;
    let dummy_grad = tape.gradients_graph(dummy_loss, &[e])?[0];
    let gradient_match = mse_loss(tape.constant(recorded.clone()), dummy_grad)?;
    let consistency = mse_loss(pred, dummy)?;
    Ok(InversionLoss {
        gradient_match,
        consistency,
        total: gradient_match.add(consistency)?,
    })
}

/// `MSE(M_s(E_leaked)[:, column], Y_leaked)`.
pub fn model_completion_loss<'t>(
    tape: &'t Tape,
    surrogate: &BoundNetwork<'t>,
    leaked_cut: &Tensor,
    leaked_labels: &Tensor,
    column: usize,
) -> Result<Var<'t>> {
    if leaked_cut.rows() == 0 {
        return Err(Error::InvalidArgument("leaked set is empty".into()));
    }
    let pred = surrogate.forward(tape.constant(leaked_cut.clone()))?;
    let pred = if pred.shape().1 == 1 && column == 0 {
        pred
    } else {
        pred.select_col(column)?
    };
    mse_loss(pred, tape.constant(leaked_labels.clone()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    /// Inferred training labels, `n_train x 1`.
    pub inferred_labels: Tensor,
    /// Surrogate/dummy column taken as the label.
    pub label_column: usize,
    /// Completed model `M_s(M_b(X_test))` on the label column.
    pub test_predictions: Tensor,
    pub train: MetricPair,
    pub test: MetricPair,
    /// Mean `L_gi + alpha * L_mc` per attack epoch.
    pub loss_trace: Vec<f64>,
    /// Mean `L_gi` per attack epoch.
    pub inversion_trace: Vec<f64>,
    pub surrogate: FcNetwork,
}

/// Runs the full attack against a recorded transcript.
pub fn run_attack(
    transcript: &Transcript,
    bottom: &FcNetwork,
    train: &Dataset,
    test: &Dataset,
    leaked: &LeakedSet,
    config: &AttackConfig,
) -> Result<AttackResult> {
    let state = AttackState::new(bottom.output_dim(), train.len(), config)?;
    run_attack_from(state, transcript, bottom, train, test, leaked, config)
}

/// [`run_attack`] starting from a given state.
pub fn run_attack_from(
    mut state: AttackState,
    transcript: &Transcript,
    bottom: &FcNetwork,
    train: &Dataset,
    test: &Dataset,
    leaked: &LeakedSet,
    config: &AttackConfig,
) -> Result<AttackResult> {
    if transcript.is_empty() {
        return Err(Error::InvalidArgument("transcript is empty".into()));
    }
    if leaked.is_empty() {
        return Err(Error::InvalidArgument("leaked set is empty".into()));
    }
    let cut_dim = bottom.output_dim();
    let records = transcript.last_epochs(config.transcript_epochs);
    let mut batches = Vec::with_capacity(records.len());
    for r in &records {
        if r.received_gradient.cols() != cut_dim {
            return Err(Error::ShapeMismatch {
                op: "transcript vs bottom model",
                lhs: r.received_gradient.shape(),
                rhs: (r.batch_indices.len(), cut_dim),
            });
        }
        let cut = bottom.forward(&train.features.gather_rows(&r.batch_indices)?)?;
        batches.push((r.batch_indices.as_slice(), cut, &r.received_gradient));
    }
    let leaked_cut = bottom.forward(&leaked.features)?;
    let n_params = state.surrogate.params().len();

    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut inversion_trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let diverged = |e: Error| match e {
            Error::NonFinite(_) => Error::AttackDiverged { epoch },
            other => other,
        };
        let column = state.select_column(leaked)?;
        let (mut total_sum, mut inversion_sum, mut steps) = (0.0, 0.0, 0usize);
        for (rows, cut, recorded) in &batches {
            for _ in 0..config.steps_per_batch.max(1) {
                let tape = Tape::new();
                let surrogate = state.surrogate.bind(&tape);
                let dummy = tape.leaf(state.dummy_labels.gather_rows(rows)?);
                let inversion = gradient_inversion_loss(&tape, &surrogate, dummy, cut, recorded)
                    .map_err(diverged)?;
                let completion =
                    model_completion_loss(&tape, &surrogate, &leaked_cut, &leaked.labels, column)
                        .map_err(diverged)?;
                let total = inversion
                    .total
                    .add(completion.scale(state.alpha)?)
                    .map_err(diverged)?;

                let mut wrt = surrogate.params();
                wrt.push(dummy);
                let mut grads = tape.gradients(total, &wrt).map_err(diverged)?;
                let dummy_grad = grads.pop().expect("dummy gradient");
                debug_assert_eq!(grads.len(), n_params);
                state
                    .surrogate
                    .apply(&mut state.surrogate_opt, &grads)
                    .map_err(diverged)?;
                state
                    .dummy_opt
                    .step_rows(&mut state.dummy_labels, rows, &dummy_grad)
                    .map_err(diverged)?;

                total_sum += total.value().item()?;
                inversion_sum += inversion.total.value().item()?;
                steps += 1;
            }
        }
        let mean = total_sum / steps as f64;
        if !mean.is_finite() {
            return Err(Error::AttackDiverged { epoch });
        }
        loss_trace.push(mean);
        inversion_trace.push(inversion_sum / steps as f64);
    }

    let label_column = state.select_column(leaked)?;
    let inferred_labels = state.dummy_labels.select_col(label_column)?;
    let test_predictions = state
        .surrogate
        .forward(&bottom.forward(&test.features)?)?
        .select_col(label_column)?;
    Ok(AttackResult {
        train: evaluate_attack(&inferred_labels, &train.labels)?,
        test: evaluate_attack(&test_predictions, &test.labels)?,
        inferred_labels,
        label_column,
        test_predictions,
        loss_trace,
        inversion_trace,
        surrogate: state.surrogate,
    })
}

/// MAE and MSE of inferred labels against the truth.
pub fn evaluate_attack(inferred: &Tensor, truth: &Tensor) -> Result<MetricPair> {
    metrics::evaluate(inferred, truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_leaked, split_standardize, synth_regression};
    use crate::defense::DefenseConfig;
    use crate::protocol::SplitSession;

    struct Fixture {
        session: SplitSession,
        transcript: Transcript,
        train: Dataset,
        test: Dataset,
        leaked: LeakedSet,
    }

    /// A briefly trained session plus a final zero-learning-rate epoch, so
    /// every recorded batch was produced by the final models.
    fn fixture() -> Fixture {
        let ds = synth_regression(120, 3, 0.1, 4).unwrap();
        let (train, test) = split_standardize(&ds, 0.8, 4).unwrap();
        let leaked = sample_leaked(&train, 0.05, 4).unwrap();
        let bottom = FcNetwork::build(&[3, 6, 4], Activation::Relu, Role::Bottom, 1).unwrap();
        let top = FcNetwork::build(&[4, 1], Activation::Relu, Role::Top, 2).unwrap();
        let mut s = SplitSession::new(
            bottom,
            top,
            DefenseConfig::None,
            AdamConfig::default(),
            16,
            5,
            3,
        )
        .unwrap();
        s.train_split(&train).unwrap();
        let mut frozen = SplitSession::new(
            s.bottom.clone(),
            s.top.clone(),
            DefenseConfig::None,
            AdamConfig::with_lr(0.0),
            16,
            1,
            3,
        )
        .unwrap();
        let transcript = frozen.train_split(&train).unwrap().transcript;
        Fixture {
            session: frozen,
            transcript,
            train,
            test,
            leaked,
        }
    }

    fn small_config() -> AttackConfig {
        AttackConfig {
            epochs: 4,
            steps_per_batch: 3,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn true_model_and_labels_are_a_fixed_point() {
        let f = fixture();
        for r in &f.transcript.records {
            let tape = Tape::new();
            let surrogate = f.session.top.bind(&tape);
            let cut = f
                .session
                .bottom
                .forward(&f.train.features.gather_rows(&r.batch_indices).unwrap())
                .unwrap();
            let y = tape.leaf(f.train.labels.gather_rows(&r.batch_indices).unwrap());
            let loss =
                gradient_inversion_loss(&tape, &surrogate, y, &cut, &r.received_gradient).unwrap();
            assert!(loss.gradient_match.value().item().unwrap() < 1e-10);
        }
    }

    #[test]
    fn consistent_dummy_labels_zero_the_second_term() {
        let f = fixture();
        let r = &f.transcript.records[0];
        let cut = f
            .session
            .bottom
            .forward(&f.train.features.gather_rows(&r.batch_indices).unwrap())
            .unwrap();
        let tape = Tape::new();
        let surrogate = f.session.top.bind(&tape);
        let y = tape.leaf(f.session.top.forward(&cut).unwrap());
        let loss =
            gradient_inversion_loss(&tape, &surrogate, y, &cut, &r.received_gradient).unwrap();
        assert_eq!(loss.consistency.value().item().unwrap(), 0.0);
    }

    fn relative_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn dummy_label_gradient_matches_finite_differences() {
        let f = fixture();
        let r = &f.transcript.records[1];
        let cut = f
            .session
            .bottom
            .forward(&f.train.features.gather_rows(&r.batch_indices).unwrap())
            .unwrap();
        let surrogate = FcNetwork::build(&[4, 1], Activation::Relu, Role::Surrogate, 8).unwrap();
        let mut rng = rng::seeded(5);
        let y0 = Tensor::new(
            cut.rows(),
            1,
            (0..cut.rows())
                .map(|_| rng::standard_normal(&mut rng))
                .collect(),
        )
        .unwrap();
        let value = |y: &Tensor| {
            let tape = Tape::new();
            let s = surrogate.bind(&tape);
            let y = tape.leaf(y.clone());
            gradient_inversion_loss(&tape, &s, y, &cut, &r.received_gradient)
                .unwrap()
                .total
                .value()
                .item()
                .unwrap()
        };
        let tape = Tape::new();
        let s = surrogate.bind(&tape);
        let y = tape.leaf(y0.clone());
        let loss = gradient_inversion_loss(&tape, &s, y, &cut, &r.received_gradient).unwrap();
        let grad = tape.gradients(loss.total, &[y]).unwrap().remove(0);
        let h = 1e-4;
        for i in 0..y0.len() {
            let mut up = y0.clone();
            up.data_mut()[i] += h;
            let mut down = y0.clone();
            down.data_mut()[i] -= h;
            let fd = (value(&up) - value(&down)) / (2.0 * h);
            assert!(
                relative_close(grad.data()[i], fd, 1e-3),
                "{i}: {} vs {fd}",
                grad.data()[i]
            );
        }
    }

    #[test]
    fn completion_loss_cases() {
        let cut = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, 3.0]]).unwrap();
        let labels = Tensor::column(vec![0.5, -1.5, 2.0]).unwrap();
        let mut zero = FcNetwork::build(&[2, 1], Activation::Relu, Role::Surrogate, 1).unwrap();
        zero.zero_params();
        let tape = Tape::new();
        let loss = model_completion_loss(&tape, &zero.bind(&tape), &cut, &labels, 0).unwrap();
        let expected = labels.data().iter().map(|y| y * y).sum::<f64>() / 3.0;
        assert!((loss.value().item().unwrap() - expected).abs() < 1e-15);

        let exact = FcNetwork::build(&[2, 1], Activation::Relu, Role::Surrogate, 1).unwrap();
        let fitted = exact.forward(&cut).unwrap();
        let tape = Tape::new();
        let loss = model_completion_loss(&tape, &exact.bind(&tape), &cut, &fitted, 0).unwrap();
        assert_eq!(loss.value().item().unwrap(), 0.0);

        let tape = Tape::new();
        let empty = Tensor::zeros(0, 2);
        assert!(
            model_completion_loss(&tape, &zero.bind(&tape), &empty, &Tensor::zeros(0, 1), 0)
                .is_err()
        );
    }

    #[test]
    fn completion_gradient_matches_finite_differences() {
        let cut = Tensor::from_rows(&[
            vec![1.0, 2.0, 0.3],
            vec![-1.0, 0.5, 0.1],
            vec![0.2, -0.7, 1.1],
        ])
        .unwrap();
        let labels = Tensor::column(vec![0.5, -1.5, 2.0]).unwrap();
        let net = FcNetwork::build(&[3, 4, 2], Activation::Tanh, Role::Surrogate, 6).unwrap();
        let value = |n: &FcNetwork| {
            let tape = Tape::new();
            model_completion_loss(&tape, &n.bind(&tape), &cut, &labels, 1)
                .unwrap()
                .value()
                .item()
                .unwrap()
        };
        let tape = Tape::new();
        let bound = net.bind(&tape);
        let loss = model_completion_loss(&tape, &bound, &cut, &labels, 1).unwrap();
        let grads = tape.gradients(loss, &bound.params()).unwrap();
        let h = 1e-5;
        for (p, g) in grads.iter().enumerate() {
            for i in 0..g.len() {
                let mut up = net.clone();
                up.params_mut()[p].data_mut()[i] += h;
                let mut down = net.clone();
                down.params_mut()[p].data_mut()[i] -= h;
                let fd = (value(&up) - value(&down)) / (2.0 * h);
                assert!(
                    relative_close(g.data()[i], fd, 1e-3),
                    "param {p}[{i}]: {} vs {fd}",
                    g.data()[i]
                );
            }
        }
    }

    #[test]
    fn zero_alpha_total_equals_inversion_trace() {
        let f = fixture();
        let cfg = AttackConfig {
            alpha: 0.0,
            ..small_config()
        };
        let r = run_attack(
            &f.transcript,
            &f.session.bottom,
            &f.train,
            &f.test,
            &f.leaked,
            &cfg,
        )
        .unwrap();
        assert_eq!(r.loss_trace.len(), 4);
        assert_eq!(r.loss_trace, r.inversion_trace);
    }

    #[test]
    fn attack_is_deterministic_per_seed() {
        let f = fixture();
        let run = |seed| {
            let cfg = AttackConfig {
                seed,
                ..small_config()
            };
            run_attack(
                &f.transcript,
                &f.session.bottom,
                &f.train,
                &f.test,
                &f.leaked,
                &cfg,
            )
            .unwrap()
        };
        let a = run(9);
        assert_eq!(a, run(9));
        assert_ne!(a.inferred_labels, run(10).inferred_labels);
        assert!(a.train.mae >= 0.0 && a.test.mse >= 0.0);
        assert_eq!(a.inferred_labels.shape(), (f.train.len(), 1));
        assert_eq!(a.test_predictions.shape(), (f.test.len(), 1));
    }

    #[test]
    fn rejects_bad_inputs() {
        let f = fixture();
        let cfg = small_config();
        let empty = Transcript::default();
        assert!(run_attack(
            &empty,
            &f.session.bottom,
            &f.train,
            &f.test,
            &f.leaked,
            &cfg
        )
        .is_err());
        let wrong = FcNetwork::build(&[3, 5], Activation::Relu, Role::Bottom, 1).unwrap();
        assert!(run_attack(&f.transcript, &wrong, &f.train, &f.test, &f.leaked, &cfg).is_err());
        let negative = AttackConfig { alpha: -1.0, ..cfg };
        assert!(AttackState::new(4, 10, &negative).is_err());
    }

    #[test]
    fn column_selection_uses_leaked_rows() {
        let f = fixture();
        let cfg = AttackConfig {
            surrogate_outputs: 3,
            ..small_config()
        };
        let state = AttackState::new(4, f.train.len(), &cfg).unwrap();
        let mut dummy = state.dummy_labels.clone();
        let truth = f.train.labels.data();
        for (r, &y) in truth.iter().enumerate() {
            dummy.data_mut()[r * 3 + 2] = y;
        }
        let surrogate = state.surrogate.clone();
        let state = state.with_values(surrogate, dummy).unwrap();
        assert_eq!(state.select_column(&f.leaked).unwrap(), 2);
    }

    #[test]
    fn evaluate_attack_cases() {
        let t = Tensor::column(vec![1.0, -1.0]).unwrap();
        assert_eq!(
            evaluate_attack(&t, &t).unwrap(),
            MetricPair { mae: 0.0, mse: 0.0 }
        );
        let z = Tensor::zeros(2, 1);
        assert_eq!(
            evaluate_attack(&z, &t).unwrap(),
            MetricPair { mae: 1.0, mse: 1.0 }
        );
        assert!(evaluate_attack(&Tensor::zeros(3, 1), &t).is_err());

        let mut rng = rng::seeded(77);
        let a: Vec<f64> = (0..50).map(|_| rng::standard_normal(&mut rng)).collect();
        let b: Vec<f64> = (0..50).map(|_| rng::standard_normal(&mut rng)).collect();
        let (mut abs, mut sq) = (0.0, 0.0);
        for i in 0..50 {
            abs += (a[i] - b[i]).abs();
            sq += (a[i] - b[i]) * (a[i] - b[i]);
        }
        let m = evaluate_attack(&Tensor::column(a).unwrap(), &Tensor::column(b).unwrap()).unwrap();
        assert!((m.mae - abs / 50.0).abs() < 1e-12);
        assert!((m.mse - sq / 50.0).abs() < 1e-12);
    }
}
