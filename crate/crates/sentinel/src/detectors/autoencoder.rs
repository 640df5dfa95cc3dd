//! Autoencoder and variational autoencoder anomaly scorers.
//!
//! Both are trained on benign feature rows only, full-batch AdamW with
//! early stopping on a benign calibration loss plateau. The anomaly score
//! is the per-width reconstruction error; the VAE adds `beta` times the
//! closed-form diagonal-Gaussian KL term and always scores with the mean
//! latent (no sampling at inference).

use crate::autodiff::{NodeId, Tape};
use crate::error::{Result, SentinelError};
use crate::linalg::Matrix;
use crate::rng::SplitRng;
use crate::testbed::AdamW;

const HIDDEN: usize = 64;
const LATENT: usize = 16;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AeHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for AeHyper {
    fn default() -> Self {
        AeHyper {
            learning_rate: 3e-3,
            epochs: 500,
            patience: 20,
            seed: 0,
        }
    }
}

/// Encoder/decoder weights: input -> 64 -> 16 -> 64 -> input, ReLU on the
/// hidden layers, linear latent and output.
#[derive(Debug, Clone, PartialEq)]
pub struct AeParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub w3: Matrix,
    pub b3: Matrix,
    pub w4: Matrix,
    pub b4: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams {
    pub w_enc: Matrix,
    pub b_enc: Matrix,
    pub w_mu: Matrix,
    pub b_mu: Matrix,
    pub w_logvar: Matrix,
    pub b_logvar: Matrix,
    pub w_dec1: Matrix,
    pub b_dec1: Matrix,
    pub w_dec2: Matrix,
    pub b_dec2: Matrix,
    /// Weight of the KL term in both training loss and score.
    pub beta: f64,
}

fn he_init(rows: usize, cols: usize, rng: &mut SplitRng) -> Matrix {
    let std = (2.0 / rows as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| std * rng.standard_normal()).expect("finite init")
}

struct NamedTensors {
    names: Vec<&'static str>,
    values: Vec<Matrix>,
}

impl NamedTensors {
    fn get(&self, name: &str) -> &Matrix {
        let idx = self.names.iter().position(|&n| n == name).expect("tensor");
        &self.values[idx]
    }
}

/// Generic full-batch trainer with plateau early stopping; `build_loss`
/// stages the tensors as params and returns the scalar training loss node,
/// `calib_loss` evaluates the early-stopping criterion on fixed values.
fn train_full_batch(
    mut tensors: NamedTensors,
    hyper: &AeHyper,
    mut build_loss: impl FnMut(&mut Tape, &[NodeId], usize) -> Result<NodeId>,
    mut calib_loss: impl FnMut(&NamedTensors) -> Result<f64>,
) -> Result<NamedTensors> {
    let shapes: Vec<(usize, usize)> = tensors.values.iter().map(|m| m.shape()).collect();
    let decay = vec![false; shapes.len()];
    let mut opt = AdamW::new(&shapes, decay, hyper.learning_rate, hyper.epochs, 0.0);

    let mut best_loss = f64::INFINITY;
    let mut best: Vec<Matrix> = tensors.values.clone();
    let mut since_best = 0usize;

    for epoch in 0..hyper.epochs {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors
            .values
            .iter()
            .map(|m| tape.param(m.clone()))
            .collect();
        let loss = build_loss(&mut tape, &ids, epoch)?;
        let loss_val = tape.scalar(loss);
        if !loss_val.is_finite() {
            return Err(SentinelError::Diverged(format!(
                "detector training loss became non-finite at epoch {epoch}"
            )));
        }
        let grads = tape.backward(loss)?;
        {
            let grad_refs: Vec<&Matrix> = ids
                .iter()
                .map(|&id| grads.get(id).expect("param gradient"))
                .collect();
            let mut refs: Vec<&mut Matrix> = tensors.values.iter_mut().collect();
            opt.step(&mut refs, &grad_refs);
        }

        let cal = calib_loss(&tensors)?;
        if cal < best_loss * (1.0 - 1e-5) {
            best_loss = cal;
            best = tensors.values.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hyper.patience {
                break;
            }
        }
    }
    tensors.values = best;
    Ok(tensors)
}

fn ae_tensors(input_width: usize, rng: &mut SplitRng) -> NamedTensors {
    NamedTensors {
        names: vec!["w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4"],
        values: vec![
            he_init(input_width, HIDDEN, rng),
            Matrix::zeros(1, HIDDEN),
            he_init(HIDDEN, LATENT, rng),
            Matrix::zeros(1, LATENT),
            he_init(LATENT, HIDDEN, rng),
            Matrix::zeros(1, HIDDEN),
            he_init(HIDDEN, input_width, rng),
            Matrix::zeros(1, input_width),
        ],
    }
}

/// Reconstruction nodes of the plain autoencoder on the tape.
fn ae_recon(tape: &mut Tape, x: NodeId, ids: &[NodeId]) -> Result<NodeId> {
    let h1 = {
        let lin = tape.matmul(x, ids[0])?;
        let lin = tape.add_row(lin, ids[1])?;
        tape.relu(lin)
    };
    let z = {
        let lin = tape.matmul(h1, ids[2])?;
        tape.add_row(lin, ids[3])?
    };
    let h2 = {
        let lin = tape.matmul(z, ids[4])?;
        let lin = tape.add_row(lin, ids[5])?;
        tape.relu(lin)
    };
    let lin = tape.matmul(h2, ids[6])?;
    tape.add_row(lin, ids[7])
}

/// Train the autoencoder on benign rows by mean squared reconstruction.
/// `calibration` drives early stopping only.
pub fn fit_autoencoder(benign: &Matrix, calibration: &Matrix, hyper: &AeHyper) -> Result<AeParams> {
    if benign.rows() == 0 {
        return Err(SentinelError::InvalidArgument(
            "autoencoder fit: empty benign set".into(),
        ));
    }
    let width = benign.cols();
    let mut rng = SplitRng::for_label(hyper.seed, "ae-init");
    let tensors = ae_tensors(width, &mut rng);

    let train_x = benign.clone();
    let calib_x = calibration.clone();
    let trained = train_full_batch(
        tensors,
        hyper,
        |tape, ids, _| {
            let x = tape.constant(train_x.clone());
            let recon = ae_recon(tape, x, ids)?;
            let diff = tape.sub(x, recon)?;
            let sq = tape.mul(diff, diff)?;
            Ok(tape.mean_all(sq))
        },
        |tensors| {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = tensors
                .values
                .iter()
                .map(|m| tape.constant(m.clone()))
                .collect();
            let x = tape.constant(calib_x.clone());
            let recon = ae_recon(&mut tape, x, &ids)?;
            let diff = tape.sub(x, recon)?;
            let sq = tape.mul(diff, diff)?;
            let loss = tape.mean_all(sq);
            Ok(tape.scalar(loss))
        },
    )?;
    let v = trained.values;
    Ok(AeParams {
        w1: v[0].clone(),
        b1: v[1].clone(),
        w2: v[2].clone(),
        b2: v[3].clone(),
        w3: v[4].clone(),
        b3: v[5].clone(),
        w4: v[6].clone(),
        b4: v[7].clone(),
    })
}

fn relu_vec(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn affine(x: &[f64], w: &Matrix, b: &Matrix) -> Vec<f64> {
    let mut out = b.row(0).to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    out
}

/// Deterministic reconstruction of one feature row.
pub fn ae_reconstruct(params: &AeParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.w1.rows() {
        return Err(SentinelError::ShapeMismatch(format!(
            "ae score: feature width {} != {}",
            x.len(),
            params.w1.rows()
        )));
    }
    let mut h1 = affine(x, &params.w1, &params.b1);
    relu_vec(&mut h1);
    let z = affine(&h1, &params.w2, &params.b2);
    let mut h2 = affine(&z, &params.w3, &params.b3);
    relu_vec(&mut h2);
    Ok(affine(&h2, &params.w4, &params.b4))
}

/// Per-width squared reconstruction error.
pub fn score_ae(params: &AeParams, x: &[f64]) -> Result<f64> {
    let recon = ae_reconstruct(params, x)?;
    let err: f64 = x.iter().zip(&recon).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(err / x.len() as f64)
}

/// Closed-form KL of a diagonal Gaussian against the standard normal:
/// `0.5 * sum(mu^2 + sigma^2 - 1 - ln sigma^2)`.
pub fn kl_diag_gaussian(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Train the VAE: mean squared reconstruction plus `beta` times the mean KL
/// term, reparameterized Gaussian sampling during training only.
pub fn fit_vae(
    benign: &Matrix,
    calibration: &Matrix,
    hyper: &AeHyper,
    beta: f64,
) -> Result<VaeParams> {
    if benign.rows() == 0 {
        return Err(SentinelError::InvalidArgument(
            "vae fit: empty benign set".into(),
        ));
    }
    let width = benign.cols();
    let mut rng = SplitRng::for_label(hyper.seed, "vae-init");
    let tensors = NamedTensors {
        names: vec![
            "w_enc", "b_enc", "w_mu", "b_mu", "w_logvar", "b_logvar", "w_dec1", "b_dec1", "w_dec2",
            "b_dec2",
        ],
        values: vec![
            he_init(width, HIDDEN, &mut rng),
            Matrix::zeros(1, HIDDEN),
            he_init(HIDDEN, LATENT, &mut rng).scale(0.1),
            Matrix::zeros(1, LATENT),
            he_init(HIDDEN, LATENT, &mut rng).scale(0.1),
            Matrix::zeros(1, LATENT),
            he_init(LATENT, HIDDEN, &mut rng),
            Matrix::zeros(1, HIDDEN),
            he_init(HIDDEN, width, &mut rng),
            Matrix::zeros(1, width),
        ],
    };

    let n = benign.rows();
    let train_x = benign.clone();
    let calib_x = calibration.clone();
    let mut noise_rng = SplitRng::for_label(hyper.seed, "vae-noise");

    let trained = train_full_batch(
        tensors,
        hyper,
        move |tape, ids, _| {
            let x = tape.constant(train_x.clone());
            let h = {
                let lin = tape.matmul(x, ids[0])?;
                let lin = tape.add_row(lin, ids[1])?;
                tape.relu(lin)
            };
            let mu = {
                let lin = tape.matmul(h, ids[2])?;
                tape.add_row(lin, ids[3])?
            };
            let logvar = {
                let lin = tape.matmul(h, ids[4])?;
                tape.add_row(lin, ids[5])?
            };
            // Reparameterized sample: z = mu + exp(logvar / 2) * eps.
            let eps = Matrix::from_fn(n, LATENT, |_, _| noise_rng.standard_normal())?;
            let eps = tape.constant(eps);
            let half_lv = tape.scale(logvar, 0.5);
            let sigma = tape.exp(half_lv);
            let noise = tape.mul(sigma, eps)?;
            let z = tape.add(mu, noise)?;

            let h2 = {
                let lin = tape.matmul(z, ids[6])?;
                let lin = tape.add_row(lin, ids[7])?;
                tape.relu(lin)
            };
            let recon = {
                let lin = tape.matmul(h2, ids[8])?;
                tape.add_row(lin, ids[9])?
            };

            let diff = tape.sub(x, recon)?;
            let sq = tape.mul(diff, diff)?;
            let recon_loss = tape.mean_all(sq);

            // KL = 0.5 * sum(mu^2 + exp(lv) - 1 - lv), averaged over samples.
            let mu_sq = tape.mul(mu, mu)?;
            let exp_lv = tape.exp(logvar);
            let ones = tape.constant(Matrix::from_vec(n, LATENT, vec![1.0; n * LATENT])?);
            let sum1 = tape.add(mu_sq, exp_lv)?;
            let sum2 = tape.add(ones, logvar)?;
            let inner = tape.sub(sum1, sum2)?;
            let kl_total = tape.sum_all(inner);
            let kl = tape.scale(kl_total, 0.5 / n as f64);

            let weighted_kl = tape.scale(kl, beta);
            tape.add(recon_loss, weighted_kl)
        },
        |tensors| {
            let params = vae_params_from(tensors, beta);
            let mut total = 0.0;
            for i in 0..calib_x.rows() {
                total += score_vae(&params, calib_x.row(i))?;
            }
            Ok(total / calib_x.rows() as f64)
        },
    )?;
    Ok(vae_params_from(&trained, beta))
}

fn vae_params_from(tensors: &NamedTensors, beta: f64) -> VaeParams {
    VaeParams {
        w_enc: tensors.get("w_enc").clone(),
        b_enc: tensors.get("b_enc").clone(),
        w_mu: tensors.get("w_mu").clone(),
        b_mu: tensors.get("b_mu").clone(),
        w_logvar: tensors.get("w_logvar").clone(),
        b_logvar: tensors.get("b_logvar").clone(),
        w_dec1: tensors.get("w_dec1").clone(),
        b_dec1: tensors.get("b_dec1").clone(),
        w_dec2: tensors.get("w_dec2").clone(),
        b_dec2: tensors.get("b_dec2").clone(),
        beta,
    }
}

/// Deterministic VAE score: reconstruction from the mean latent plus
/// `beta` times the KL term. No sampling at score time.
pub fn score_vae(params: &VaeParams, x: &[f64]) -> Result<f64> {
    if x.len() != params.w_enc.rows() {
        return Err(SentinelError::ShapeMismatch(format!(
            "vae score: feature width {} != {}",
            x.len(),
            params.w_enc.rows()
        )));
    }
    let mut h = affine(x, &params.w_enc, &params.b_enc);
    relu_vec(&mut h);
    let mu = affine(&h, &params.w_mu, &params.b_mu);
    let logvar = affine(&h, &params.w_logvar, &params.b_logvar);

    let mut h2 = affine(&mu, &params.w_dec1, &params.b_dec1);
    relu_vec(&mut h2);
    let recon = affine(&h2, &params.w_dec2, &params.b_dec2);

    let err: f64 = x.iter().zip(&recon).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(err / x.len() as f64 + params.beta * kl_diag_gaussian(&mu, &logvar))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_data(n: usize, width: usize, seed: u64) -> Matrix {
        // Low-dimensional structure: rows are affine images of 2 latent draws.
        let mut rng = SplitRng::seeded(seed);
        let basis = Matrix::from_fn(2, width, |_, _| rng.standard_normal()).unwrap();
        Matrix::from_fn(n, width, |i, j| {
            let a = ((i * 37 + 11) % 97) as f64 / 97.0 - 0.5;
            let b = ((i * 53 + 29) % 89) as f64 / 89.0 - 0.5;
            a * basis.get(0, j) + b * basis.get(1, j)
        })
        .unwrap()
    }

    #[test]
    fn zero_weight_decoder_scores_input_norm() {
        let params = AeParams {
            w1: Matrix::zeros(3, HIDDEN),
            b1: Matrix::zeros(1, HIDDEN),
            w2: Matrix::zeros(HIDDEN, LATENT),
            b2: Matrix::zeros(1, LATENT),
            w3: Matrix::zeros(LATENT, HIDDEN),
            b3: Matrix::zeros(1, HIDDEN),
            w4: Matrix::zeros(HIDDEN, 3),
            b4: Matrix::zeros(1, 3),
        };
        let x = [1.0, -2.0, 2.0];
        let s = score_ae(&params, &x).unwrap();
        assert!((s - 9.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ae_learns_structure_and_scores_nonnegative() {
        let train = toy_data(64, 12, 3);
        let calib = toy_data(16, 12, 4);
        let hyper = AeHyper {
            epochs: 300,
            ..Default::default()
        };
        let params = fit_autoencoder(&train, &calib, &hyper).unwrap();
        let mut benign_mean = 0.0;
        for i in 0..train.rows() {
            let s = score_ae(&params, train.row(i)).unwrap();
            assert!(s >= 0.0);
            benign_mean += s;
        }
        benign_mean /= train.rows() as f64;
        // An off-manifold point scores clearly higher.
        let outlier = vec![3.0; 12];
        let s_out = score_ae(&params, &outlier).unwrap();
        assert!(
            s_out > 5.0 * benign_mean.max(1e-6),
            "benign {benign_mean} vs outlier {s_out}"
        );
    }

    #[test]
    fn kl_of_standard_normal_is_zero() {
        assert_eq!(kl_diag_gaussian(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn kl_closed_form_unit_example() {
        // mu = (1, 0), sigma = 1: KL = 0.5 * (1 + 0) = 0.5
        let kl = kl_diag_gaussian(&[1.0, 0.0], &[0.0, 0.0]);
        assert!((kl - 0.5).abs() < 1e-12);
    }

    #[test]
    fn vae_scoring_deterministic() {
        let train = toy_data(48, 10, 7);
        let calib = toy_data(12, 10, 8);
        let hyper = AeHyper {
            epochs: 60,
            ..Default::default()
        };
        let params = fit_vae(&train, &calib, &hyper, 1.0).unwrap();
        let x = toy_data(1, 10, 9);
        let s1 = score_vae(&params, x.row(0)).unwrap();
        let s2 = score_vae(&params, x.row(0)).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn fit_deterministic_under_seed() {
        let train = toy_data(32, 8, 1);
        let calib = toy_data(8, 8, 2);
        let hyper = AeHyper {
            epochs: 40,
            ..Default::default()
        };
        let a = fit_autoencoder(&train, &calib, &hyper).unwrap();
        let b = fit_autoencoder(&train, &calib, &hyper).unwrap();
        assert_eq!(a, b);
    }
}
