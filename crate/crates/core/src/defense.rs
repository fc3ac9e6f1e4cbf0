//! Label-party defenses.
//!
//! All functions here are pure: they return new tensors and never modify
//! their inputs.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::FcNetwork;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseDistribution {
    #[default]
    Laplace,
    Gaussian,
}

impl std::str::FromStr for NoiseDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "laplace" => Ok(NoiseDistribution::Laplace),
            "gaussian" | "normal" => Ok(NoiseDistribution::Gaussian),
            other => Err(Error::InvalidArgument(format!("unknown noise {other:?}"))),
        }
    }
}

impl fmt::Display for NoiseDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseDistribution::Laplace => "laplace",
            NoiseDistribution::Gaussian => "gaussian",
        })
    }
}

/// What the label party does to protect its labels.
///
/// For the noise variants `scale` is the Laplace `b` or the Gaussian
/// standard deviation. For the extension variants `dims` is the extended
/// label width `D` and `secret_column` the position `t` of the true label.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseConfig {
    #[default]
    None,
    LabelNoise {
        distribution: NoiseDistribution,
        scale: f64,
    },
    GradientNoise {
        distribution: NoiseDistribution,
        scale: f64,
    },
    GradientCompression {
        keep_rate: f64,
    },
    Rle {
        dims: usize,
        secret_column: usize,
        sigma: f64,
    },
    Mle {
        dims: usize,
        secret_column: usize,
        sigma: f64,
    },
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        match *self {
            DefenseConfig::None => Ok(()),
            DefenseConfig::LabelNoise { scale, .. }
            | DefenseConfig::GradientNoise { scale, .. } => {
                if scale >= 0.0 && scale.is_finite() {
                    Ok(())
                } else {
                    bad(format!("noise scale must be >= 0, got {scale}"))
                }
            }
            DefenseConfig::GradientCompression { keep_rate } => {
                if keep_rate > 0.0 && keep_rate <= 1.0 {
                    Ok(())
                } else {
                    bad(format!("keep rate must lie in (0, 1], got {keep_rate}"))
                }
            }
            DefenseConfig::Rle {
                dims,
                secret_column,
                sigma,
            }
            | DefenseConfig::Mle {
                dims,
                secret_column,
                sigma,
            } => {
                if dims == 0 {
                    bad("extension needs at least one dimension".into())
                } else if secret_column >= dims {
                    bad(format!(
                        "secret column {secret_column} out of range for {dims} dims"
                    ))
                } else if !(sigma >= 0.0 && sigma.is_finite()) {
                    bad(format!("sigma must be >= 0, got {sigma}"))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DefenseConfig::None => "none",
            DefenseConfig::LabelNoise { .. } => "label_noise",
            DefenseConfig::GradientNoise { .. } => "gradient_noise",
            DefenseConfig::GradientCompression { .. } => "gradient_compression",
            DefenseConfig::Rle { .. } => "rle",
            DefenseConfig::Mle { .. } => "mle",
        }
    }

    /// Parameters as `k=v` pairs joined by `;`.
    pub fn params_string(&self) -> String {
        match self {
            DefenseConfig::None => String::new(),
            DefenseConfig::LabelNoise {
                distribution,
                scale,
            }
            | DefenseConfig::GradientNoise {
                distribution,
                scale,
            } => {
                format!("distribution={distribution};scale={scale}")
            }
            DefenseConfig::GradientCompression { keep_rate } => format!("keep_rate={keep_rate}"),
            DefenseConfig::Rle {
                dims,
                secret_column,
                sigma,
            }
            | DefenseConfig::Mle {
                dims,
                secret_column,
                sigma,
            } => {
                format!("dims={dims};secret_column={secret_column};sigma={sigma}")
            }
        }
    }

    /// `(D, t)` for the label-extension variants.
    pub fn extension(&self) -> Option<(usize, usize)> {
        match *self {
            DefenseConfig::Rle {
                dims,
                secret_column,
                ..
            }
            | DefenseConfig::Mle {
                dims,
                secret_column,
                ..
            } => Some((dims, secret_column)),
            _ => None,
        }
    }

    /// Output width the top model must have under this defense.
    pub fn top_output_dim(&self) -> usize {
        self.extension().map_or(1, |(d, _)| d)
    }
}

/// Seed for the gradient noise of one batch.
pub fn batch_seed(session_seed: u64, epoch: usize, batch: usize) -> u64 {
    rng::derive(
        session_seed,
        &[rng::stream::GRADIENT_NOISE, epoch as u64, batch as u64],
    )
}

fn add_noise(x: &Tensor, distribution: NoiseDistribution, scale: f64, seed: u64) -> Result<Tensor> {
    if !(scale >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise scale {scale} < 0")));
    }
    if scale == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = rng::seeded(seed);
    let mut out = x.clone();
    for v in out.data_mut() {
        *v += match distribution {
            NoiseDistribution::Laplace => rng::laplace(&mut rng, scale),
            NoiseDistribution::Gaussian => scale * rng::standard_normal(&mut rng),
        };
    }
    Ok(out)
}

/// `y + n` with i.i.d. noise drawn once per label.
pub fn noise_labels(
    y: &Tensor,
    distribution: NoiseDistribution,
    scale: f64,
    seed: u64,
) -> Result<Tensor> {
    add_noise(y, distribution, scale, seed)
}

/// `g + n` for one transmitted gradient batch. Use [`batch_seed`] to get
/// the per-batch seed.
pub fn noise_gradient(
    g: &Tensor,
    distribution: NoiseDistribution,
    scale: f64,
    seed: u64,
) -> Result<Tensor> {
    add_noise(g, distribution, scale, seed)
}

/// Keeps the `floor(keep_rate * len)` entries of largest magnitude and zeros
/// the rest. Among equal magnitudes the lower flat index is kept first.
pub fn compress_gradient(g: &Tensor, keep_rate: f64) -> Result<Tensor> {
    if !(keep_rate > 0.0 && keep_rate <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep rate must lie in (0, 1], got {keep_rate}"
        )));
    }
    let keep = (keep_rate * g.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..g.len()).collect();
    let data = g.data();
    order.sort_by(|&a, &b| data[b].abs().total_cmp(&data[a].abs()).then(a.cmp(&b)));
    let mut out = Tensor::zeros(g.rows(), g.cols());
    for &i in &order[..keep] {
        out.data_mut()[i] = data[i];
    }
    Ok(out)
}

/// Extended labels `Y_LE` with the true labels in column `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedLabels {
    pub matrix: Tensor,
    pub secret_column: usize,
}

/// Random label extension: an `n x D` Gaussian matrix with standard
/// deviation `sigma` whose column `t` is overwritten with `y`.
pub fn rle_init(
    y: &Tensor,
    dims: usize,
    t: usize,
    sigma: f64,
    seed: u64,
) -> Result<ExtendedLabels> {
    DefenseConfig::Rle {
        dims,
        secret_column: t,
        sigma,
    }
    .validate()?;
    if y.cols() != 1 {
        return Err(Error::ShapeMismatch {
            op: "rle_init",
            lhs: y.shape(),
            rhs: (y.rows(), 1),
        });
    }
    let mut rng = rng::seeded(seed);
    let noise: Vec<f64> = (0..y.rows() * dims)
        .map(|_| sigma * rng::standard_normal(&mut rng))
        .collect();
    let matrix = Tensor::new(y.rows(), dims, noise)?.with_col(t, y)?;
    Ok(ExtendedLabels {
        matrix,
        secret_column: t,
    })
}

/// Model-based label extension for one batch: the top model's current
/// outputs with column `t` replaced by the true labels. The result is a
/// constant target; nothing is differentiated through it.
pub fn mle_targets(top: &FcNetwork, e: &Tensor, y_batch: &Tensor, t: usize) -> Result<Tensor> {
    if t >= top.output_dim() {
        return Err(Error::InvalidArgument(format!(
            "secret column {t} out of range for {} outputs",
            top.output_dim()
        )));
    }
    top.forward(e)?.with_col(t, y_batch)
}

/// Equation count for recovering labels from one linear top layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SufficiencyReport {
    /// `D + D * D_E + D * n`: biases, weights and dummy labels.
    pub unknowns: u128,
    /// `D_E * n`: one per received gradient entry.
    pub equations: u128,
    pub underdetermined: bool,
}

/// Counts unknowns against equations for extension width `dims`, cut
/// width `cut_dims` and `n` samples.
pub fn sufficiency_check(dims: u64, cut_dims: u64, n: u64) -> Result<SufficiencyReport> {
    if dims == 0 || cut_dims == 0 || n == 0 {
        return Err(Error::InvalidArgument(
            "sufficiency check needs positive sizes".into(),
        ));
    }
    let (d, de, n) = (dims as u128, cut_dims as u128, n as u128);
    let unknowns = d + d * de + d * n;
    let equations = de * n;
    Ok(SufficiencyReport {
        unknowns,
        equations,
        underdetermined: equations < unknowns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Activation;
    use crate::nn::Role;

    #[test]
    fn validation() {
        assert!(DefenseConfig::GradientCompression { keep_rate: 0.0 }
            .validate()
            .is_err());
        assert!(DefenseConfig::GradientCompression { keep_rate: 1.0 }
            .validate()
            .is_ok());
        assert!(DefenseConfig::Rle {
            dims: 4,
            secret_column: 4,
            sigma: 1.0
        }
        .validate()
        .is_err());
        assert!(DefenseConfig::Mle {
            dims: 0,
            secret_column: 0,
            sigma: 1.0
        }
        .validate()
        .is_err());
        assert!(DefenseConfig::LabelNoise {
            distribution: NoiseDistribution::Laplace,
            scale: -1.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_scale_noise_is_identity() {
        let y = Tensor::column(vec![0.5, -1.5, 2.0]).unwrap();
        assert_eq!(
            noise_labels(&y, NoiseDistribution::Laplace, 0.0, 4).unwrap(),
            y
        );
        assert_eq!(
            noise_gradient(&y, NoiseDistribution::Gaussian, 0.0, 4).unwrap(),
            y
        );
    }

    #[test]
    fn noise_is_seeded() {
        let y = Tensor::zeros(50, 1);
        let a = noise_labels(&y, NoiseDistribution::Laplace, 1.0, 7).unwrap();
        assert_eq!(
            a,
            noise_labels(&y, NoiseDistribution::Laplace, 1.0, 7).unwrap()
        );
        assert_ne!(
            a,
            noise_labels(&y, NoiseDistribution::Laplace, 1.0, 8).unwrap()
        );
        assert_eq!(y, Tensor::zeros(50, 1));
    }

    #[test]
    fn gradient_noise_differs_per_batch() {
        let g = Tensor::filled(4, 3, 0.25);
        let a = noise_gradient(&g, NoiseDistribution::Laplace, 0.1, batch_seed(1, 0, 0)).unwrap();
        let b = noise_gradient(&g, NoiseDistribution::Laplace, 0.1, batch_seed(1, 0, 1)).unwrap();
        assert_eq!(a.shape(), g.shape());
        assert_ne!(a, b);
    }

    #[test]
    fn compression_hand_case() {
        let g = Tensor::from_rows(&[[3.0, -1.0, 0.5, 2.0]]).unwrap();
        assert_eq!(
            compress_gradient(&g, 0.5).unwrap().data(),
            &[3.0, 0.0, 0.0, 2.0]
        );
        assert_eq!(compress_gradient(&g, 1.0).unwrap(), g);
        assert!(compress_gradient(&g, 0.0).is_err());
    }

    #[test]
    fn compression_tie_prefers_lower_index() {
        let g = Tensor::from_rows(&[[1.0, -1.0, 1.0, 0.5]]).unwrap();
        assert_eq!(
            compress_gradient(&g, 0.5).unwrap().data(),
            &[1.0, -1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn rle_degenerate_and_preserving() {
        let y = Tensor::column(vec![0.1, -0.2, 0.3]).unwrap();
        let le = rle_init(&y, 1, 0, 1.0, 3).unwrap();
        assert_eq!(le.matrix, y);
        let le = rle_init(&y, 4, 2, 1.0, 3).unwrap();
        assert_eq!(le.matrix.select_col(2).unwrap(), y);
        assert_eq!(le, rle_init(&y, 4, 2, 1.0, 3).unwrap());
    }

    #[test]
    fn mle_targets_zero_loss_off_secret_column() {
        let top = FcNetwork::build(&[3, 4], Activation::Relu, Role::Top, 2).unwrap();
        let e = Tensor::from_rows(&[[0.1, 0.2, 0.3], [-0.4, 0.5, 0.0]]).unwrap();
        let y = Tensor::column(vec![1.0, -1.0]).unwrap();
        let targets = mle_targets(&top, &e, &y, 1).unwrap();
        let out = top.forward(&e).unwrap();
        for r in 0..2 {
            for c in 0..4 {
                if c == 1 {
                    assert_eq!(targets.get(r, c), y.get(r, 0));
                } else {
                    assert_eq!(targets.get(r, c), out.get(r, c));
                }
            }
        }
        assert!(mle_targets(&top, &e, &y, 4).is_err());
    }

    #[test]
    fn sufficiency_cases() {
        let r = sufficiency_check(8, 8, 100).unwrap();
        assert_eq!(
            (r.unknowns, r.equations, r.underdetermined),
            (872, 800, true)
        );
        let r = sufficiency_check(1, 8, 100).unwrap();
        assert_eq!(
            (r.unknowns, r.equations, r.underdetermined),
            (109, 800, false)
        );
        assert!(sufficiency_check(0, 8, 100).is_err());
    }
}
