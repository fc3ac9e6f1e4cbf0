use splitlab::attack::{run_attack, AttackConfig};
use splitlab::autograd::{mse_loss, Activation, Tape};
use splitlab::data::{sample_leaked, split_standardize, SynthSpec};
use splitlab::defense::DefenseConfig;
use splitlab::harness::{self, DatasetSource, DefenseKind, DefenseSpec, ExperimentConfig};
use splitlab::metrics::evaluate;
use splitlab::nn::{Adam, AdamConfig, FcNetwork, Role};
use splitlab::protocol::SplitSession;

fn linear_data(n: usize, d: usize) -> splitlab::data::Dataset {
    SynthSpec {
        n,
        d,
        noise_std: 0.0,
        sin_weight: 0.0,
        seed: 11,
    }
    .generate()
    .unwrap()
}

#[test]
fn single_layer_fits_linear_data() {
    let ds = linear_data(200, 4);
    let mut net = FcNetwork::build(&[4, 1], Activation::Relu, Role::Top, 3).unwrap();
    let mut opt = Adam::new(AdamConfig::with_lr(0.01));
    let mut last = f64::INFINITY;
    for _ in 0..500 {
        let tape = Tape::new();
        let bound = net.bind(&tape);
        let loss = mse_loss(
            bound.forward(tape.constant(ds.features.clone())).unwrap(),
            tape.constant(ds.labels.clone()),
        )
        .unwrap();
        last = loss.value().item().unwrap();
        let grads = tape.gradients(loss, &bound.params()).unwrap();
        net.apply(&mut opt, &grads).unwrap();
    }
    assert!(last < 1e-3, "final MSE {last}");
}

#[test]
fn split_training_converges_on_linear_data() {
    let (train, _) = split_standardize(&linear_data(500, 4), 0.8, 2).unwrap();
    let bottom = FcNetwork::build(&[4, 4], Activation::Relu, Role::Bottom, 1).unwrap();
    let top = FcNetwork::build(&[4, 1], Activation::Relu, Role::Top, 2).unwrap();
    let mut s = SplitSession::new(
        bottom,
        top,
        DefenseConfig::None,
        AdamConfig::default(),
        64,
        200,
        4,
    )
    .unwrap()
    .with_gradient_check(true);
    let out = s.train_split(&train).unwrap();
    let mse = evaluate(&s.predict(&train.features).unwrap(), &train.labels)
        .unwrap()
        .mse;
    assert!(mse < 0.05, "train MSE {mse}");
    assert!(out.epoch_losses.last().unwrap() < &out.epoch_losses[0]);
}

#[test]
fn attack_loss_mostly_decreases_without_defense() {
    let ds = SynthSpec {
        n: 600,
        d: 4,
        noise_std: 0.1,
        sin_weight: 1.0,
        seed: 5,
    }
    .generate()
    .unwrap();
    let (train, test) = split_standardize(&ds, 0.8, 5).unwrap();
    let leaked = sample_leaked(&train, 0.02, 5).unwrap();
    let bottom = FcNetwork::build(&[4, 16, 8], Activation::Relu, Role::Bottom, 1).unwrap();
    let top = FcNetwork::build(&[8, 1], Activation::Relu, Role::Top, 2).unwrap();
    let mut s = SplitSession::new(
        bottom,
        top,
        DefenseConfig::None,
        AdamConfig::default(),
        64,
        20,
        5,
    )
    .unwrap();
    let transcript = s.train_split(&train).unwrap().transcript;
    let cfg = AttackConfig {
        epochs: 20,
        steps_per_batch: 20,
        seed: 1,
        ..Default::default()
    };
    let r = run_attack(&transcript, &s.bottom, &train, &test, &leaked, &cfg).unwrap();
    let down = r.loss_trace.windows(2).filter(|w| w[1] <= w[0]).count();
    let transitions = r.loss_trace.len() - 1;
    assert!(
        down * 10 >= transitions * 9,
        "{down} of {transitions} transitions decrease: {:?}",
        r.loss_trace
    );
}

fn small() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.dataset = DatasetSource::Synth {
        n: 800,
        d: 6,
        noise_std: 0.1,
        sin_weight: 1.0,
        seed: 3,
    };
    c.training.epochs = 20;
    c.training.batch_size = 64;
    c.attack.epochs = 10;
    c.attack.steps_per_batch = 50;
    c.repeats = 1;
    c
}

#[test]
fn undefended_experiment_beats_mean_prediction() {
    let r = harness::run_experiment(&small()).unwrap();
    assert!(r.original().original_train.mae < r.mp_train.mae);
    assert!(r.attack().attack_train.mae < r.mp_train.mae);
    assert!(r.sufficiency.is_none());
}

#[test]
fn extension_sweep_directions() {
    let c = small();
    let none = harness::run_experiment(&c).unwrap();
    let out = harness::sweep_extension_dims(&c, &[1, 2, 8]).unwrap();
    // D = 1 makes both extensions the plain label.
    assert_eq!(out[0].runs, none.runs);
    assert_eq!(out[1].runs, none.runs);
    for pair in out.chunks(2) {
        let (rle, mle) = (&pair[0], &pair[1]);
        assert!(
            mle.original().original_test.mae <= 1.1 * rle.original().original_test.mae,
            "{} vs {}",
            mle.original().original_test.mae,
            rle.original().original_test.mae
        );
    }
    assert!(out[4].sufficiency.unwrap().underdetermined);
    assert!(out[5].sufficiency.unwrap().underdetermined);
}

#[test]
fn experiments_leave_dataset_files_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("houses.csv");
    let ds = SynthSpec {
        n: 300,
        d: 3,
        noise_std: 0.1,
        sin_weight: 1.0,
        seed: 8,
    }
    .generate()
    .unwrap();
    let mut text = String::from("a,b,c,price\n");
    for i in 0..ds.len() {
        let row: Vec<String> = ds
            .features
            .row(i)
            .iter()
            .chain(ds.labels.row(i))
            .map(|v| v.to_string())
            .collect();
        text += &row.join(",");
        text.push('\n');
    }
    std::fs::write(&path, &text).unwrap();
    let modified = std::fs::metadata(&path).unwrap().modified().unwrap();

    let mut c = small();
    c.dataset = DatasetSource::csv(&path);
    c.defense = DefenseSpec::of(DefenseKind::Mle);
    c.training.epochs = 3;
    c.attack.epochs = 2;
    let r = harness::run_experiment(&c).unwrap();
    assert_eq!(r.dataset, "houses");
    assert_eq!(std::fs::read_to_string(&path).unwrap(), text);
    assert_eq!(
        std::fs::metadata(&path).unwrap().modified().unwrap(),
        modified
    );

    let out = dir.path().join("result.csv");
    harness::emit_results(&[r], harness::OutputFormat::Csv, &out).unwrap();
    let rows = harness::parse_rows(
        &std::fs::read_to_string(&out).unwrap(),
        harness::OutputFormat::Csv,
    )
    .unwrap();
    assert_eq!(rows.len(), 8);
    assert!(rows
        .iter()
        .all(|r| r.dataset == "houses" && r.defense == "mle"));
}
