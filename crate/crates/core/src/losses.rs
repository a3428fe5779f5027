//! Training objectives. Each loss has a plain-value form and a graph form
//! that the training loop differentiates.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Eval, Graph, Mat, Unary};
use crate::error::{Error, Result};
use crate::nn::Critic;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub mu: f64,
    pub eta: f64,
    pub gp_coef: f64,
    pub kl_coef: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            gamma: 10.0,
            lambda: 1.0,
            mu: 0.1,
            eta: 10.0,
            gp_coef: 10.0,
            kl_coef: 0.0,
        }
    }
}

impl LossWeights {
    /// Offending entries as `(name, message)` pairs.
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("mu", self.mu),
            ("eta", self.eta),
            ("gp_coef", self.gp_coef),
            ("kl_coef", self.kl_coef),
        ]
        .into_iter()
        .filter(|(_, v)| !v.is_finite() || *v < 0.0)
        .map(|(k, v)| (k, format!("must be finite and non-negative, got {v}")))
        .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.into_iter().map(|(k, m)| format!("weights.{k} {m}")).collect()))
        }
    }
}

/// Loss values from one critic or generator update. Fields not touched by
/// that update stay zero; per-chain vectors are empty without chain GANs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub chain_wgan: Vec<f64>,
    pub stability: f64,
    pub ground_truth: Vec<f64>,
    pub local: Vec<f64>,
    pub pose_wgan: f64,
    pub consistency: f64,
    pub pose_ground_truth: f64,
    pub global: f64,
    pub gp_local: Vec<f64>,
    pub gp_global: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.chain_wgan
            .iter()
            .chain(&self.ground_truth)
            .chain(&self.local)
            .chain(&self.gp_local)
            .copied()
            .chain([
                self.stability,
                self.pose_wgan,
                self.consistency,
                self.pose_ground_truth,
                self.global,
                self.gp_global,
                self.kl,
                self.total,
            ])
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }
}

/// Concatenates time-major `rows x d` frames into `rows x (T d)`.
pub fn flatten_frames(frames: &[Mat]) -> Mat {
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    ndarray::concatenate(ndarray::Axis(1), &views).expect("frames share a row count")
}

fn check_same(context: &'static str, a: &Mat, b: &Mat) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dim(context, a.len(), b.len()));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `mean(real) - mean(fake)` over precomputed scores.
pub fn wgan_from_scores(real: &[f64], fake: &[f64]) -> Result<f64> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::dim("wgan scores", real.len(), fake.len()));
    }
    Ok(mean(real) - mean(fake))
}

fn critic_scores(critic: &Critic, x: &Mat) -> Result<Vec<f64>> {
    if x.ncols() != critic.input_dim() {
        return Err(Error::dim("critic input", critic.input_dim(), x.ncols()));
    }
    let mut g = Eval::new();
    let xn = g.constant(x.clone());
    let s = critic.score_flat(&mut g, &xn);
    Ok(s.iter().copied().collect())
}

/// Wasserstein loss of a chain critic on flattened future batches.
pub fn chain_wgan_loss(critic: &Critic, real: &Mat, fake: &Mat) -> Result<f64> {
    check_same("chain_wgan_loss", real, fake)?;
    wgan_from_scores(&critic_scores(critic, real)?, &critic_scores(critic, fake)?)
}

/// Wasserstein loss of the global critic on flattened pose futures.
pub fn pose_wgan_loss(critic: &Critic, real: &Mat, fake: &Mat) -> Result<f64> {
    check_same("pose_wgan_loss", real, fake)?;
    wgan_from_scores(&critic_scores(critic, real)?, &critic_scores(critic, fake)?)
}

pub fn wgan_node<'p, G: Graph<'p>>(g: &mut G, critic: &'p Critic, real: &G::Node, fake: &G::Node) -> G::Node {
    let sr = critic.score_flat(g, real);
    let sf = critic.score_flat(g, fake);
    let mr = g.mean(&sr);
    let mf = g.mean(&sf);
    g.sub(&mr, &mf)
}

/// Population variance of the per-chain losses.
pub fn stability_loss(chain_losses: &[f64]) -> f64 {
    let m = mean(chain_losses);
    chain_losses.iter().map(|l| (l - m) * (l - m)).sum::<f64>() / chain_losses.len() as f64
}

/// Graph form over `1 x 1` loss nodes.
pub fn stability_node<'p, G: Graph<'p>>(g: &mut G, losses: &[G::Node]) -> G::Node {
    let n = losses.len() as f64;
    let all = g.concat_cols(losses);
    let m = g.mean(&all);
    let dev: Vec<G::Node> = losses
        .iter()
        .map(|l| {
            let d = g.sub(l, &m);
            g.unary(&d, Unary::Square)
        })
        .collect();
    let sq = g.concat_cols(&dev);
    let total = g.sum(&sq);
    g.affine(&total, 1.0 / n, 0.0)
}

/// Mean squared error over every entry.
pub fn ground_truth_loss(pred: &Mat, truth: &Mat) -> Result<f64> {
    check_same("ground_truth_loss", pred, truth)?;
    Ok((pred - truth).mapv(|v| v * v).mean().unwrap_or(0.0))
}

pub fn ground_truth_node<'p, G: Graph<'p>>(g: &mut G, pred: &G::Node, truth: &G::Node) -> G::Node {
    let d = g.sub(pred, truth);
    let sq = g.unary(&d, Unary::Square);
    g.mean(&sq)
}

pub fn local_loss(w: &LossWeights, chain_wgan: f64, stability: f64, ground_truth: f64) -> f64 {
    w.alpha * chain_wgan + w.beta * stability + w.gamma * ground_truth
}

pub fn global_loss(w: &LossWeights, pose_wgan: f64, consistency: f64, ground_truth: f64) -> f64 {
    w.lambda * pose_wgan + w.mu * consistency + w.eta * ground_truth
}

/// `Σ_k c_k x_k` over `1 x 1` nodes.
pub fn weighted_sum_node<'p, G: Graph<'p>>(g: &mut G, terms: &[(f64, G::Node)]) -> G::Node {
    let scaled: Vec<G::Node> = terms.iter().map(|(c, x)| g.affine(x, *c, 0.0)).collect();
    let row = g.concat_cols(&scaled);
    g.sum(&row)
}

/// `Σ_i |p_i - p_{i-1}|²` with `p_0 = last_observed`; `pred` is `T x D`.
pub fn consistency_loss(pred: &Mat, last_observed: &[f64]) -> Result<f64> {
    if pred.ncols() != last_observed.len() {
        return Err(Error::dim("consistency_loss", pred.ncols(), last_observed.len()));
    }
    let mut prev: Vec<f64> = last_observed.to_vec();
    let mut total = 0.0;
    for row in pred.rows() {
        for (p, v) in prev.iter_mut().zip(row) {
            total += (v - *p) * (v - *p);
            *p = *v;
        }
    }
    Ok(total)
}

/// Batch-mean consistency over time-major `rows x D` frame nodes.
pub fn consistency_node<'p, G: Graph<'p>>(g: &mut G, frames: &[G::Node], last_observed: &G::Node) -> G::Node {
    let rows = g.value(last_observed).nrows() as f64;
    let mut prev = last_observed.clone();
    let mut terms = Vec::with_capacity(frames.len());
    for f in frames {
        let d = g.sub(f, &prev);
        let sq = g.unary(&d, Unary::Square);
        terms.push(g.sum(&sq));
        prev = f.clone();
    }
    let row = g.concat_cols(&terms);
    let total = g.sum(&row);
    g.affine(&total, 1.0 / rows, 0.0)
}

/// Penalty value with `eps[b]` the interpolation weight of row `b`.
pub fn gradient_penalty(critic: &Critic, real: &Mat, fake: &Mat, eps: &[f64]) -> Result<f64> {
    check_same("gradient_penalty", real, fake)?;
    if eps.len() != real.nrows() {
        return Err(Error::dim("gradient_penalty eps", real.nrows(), eps.len()));
    }
    if real.ncols() != critic.input_dim() {
        return Err(Error::dim("gradient_penalty input", critic.input_dim(), real.ncols()));
    }
    Ok(critic.gradient_penalty(real, fake, eps).value)
}

/// `½ Σ (exp(lv) + m² - 1 - lv)` summed over latent dims, averaged over rows.
pub fn kl_divergence(mean: &Mat, logvar: &Mat) -> Result<f64> {
    check_same("kl_divergence", mean, logvar)?;
    let total: f64 = mean
        .iter()
        .zip(logvar)
        .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
        .sum();
    Ok(0.5 * total / mean.nrows() as f64)
}

pub fn kl_node<'p, G: Graph<'p>>(g: &mut G, mean: &G::Node, logvar: &G::Node) -> G::Node {
    let rows = g.value(mean).nrows() as f64;
    let e = g.unary(logvar, Unary::Exp);
    let m2 = g.unary(mean, Unary::Square);
    let a = g.add(&e, &m2);
    let b = g.sub(&a, logvar);
    let s = g.sum(&b);
    let cols = g.value(mean).ncols() as f64;
    // Σ (e + m² - lv) - L·rows, then halve and average.
    g.affine(&s, 0.5 / rows, -0.5 * cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::Activation;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_critic(weight: &[f64]) -> Critic {
        let n = weight.len();
        let mut c = Critic::new("c", n, n, Activation::LeakyRelu { slope: 1.0 }, &mut ChaCha8Rng::seed_from_u64(0));
        for p in c.params_mut() {
            p.value.fill(0.0);
        }
        for i in 0..n {
            c.layers[0].weight.value[[i, i]] = 1.0;
            c.layers[1].weight.value[[i, i]] = 1.0;
            c.layers[2].weight.value[[i, 0]] = weight[i];
        }
        c
    }

    fn const_critic(n: usize, c: f64) -> Critic {
        let mut critic = linear_critic(&vec![0.0; n]);
        critic.layers[2].bias.value[[0, 0]] = c;
        critic
    }

    #[test]
    fn wgan_examples() {
        let real = array![[1.0, 2.0], [0.5, -1.0]];
        let fake = array![[3.0, 0.0], [0.2, 0.1]];
        assert_eq!(chain_wgan_loss(&const_critic(2, 4.2), &real, &fake).unwrap(), 0.0);
        assert_eq!(wgan_from_scores(&[2.0, 2.0], &[0.5, 0.5]).unwrap(), 1.5);
        assert_eq!(wgan_from_scores(&[1.5, 0.5], &[-1.0, -1.0]).unwrap(), 2.0);
        let c = linear_critic(&[0.3, -0.7]);
        assert_eq!(pose_wgan_loss(&c, &real, &real).unwrap(), 0.0);
        assert!(chain_wgan_loss(&c, &real, &array![[1.0, 2.0]]).is_err());
    }

    #[test]
    fn stability_examples() {
        assert_eq!(stability_loss(&[1.0; 5]), 0.0);
        assert!((stability_loss(&[1.0, 2.0, 3.0, 4.0, 5.0]) - 2.0).abs() < 1e-12);
        let mut g = Eval::new();
        let nodes: Vec<_> = [1.0, 2.0, 3.0, 4.0, 5.0].iter().map(|&v| g.constant(array![[v]])).collect();
        let s = stability_node(&mut g, &nodes);
        assert!((g.scalar(&s) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ground_truth_examples() {
        let t = array![[0.1, 0.2], [0.3, 0.4]];
        assert_eq!(ground_truth_loss(&t, &t).unwrap(), 0.0);
        assert_eq!(ground_truth_loss(&(&t + 1.0), &t).unwrap(), 1.0);
        let a = ground_truth_loss(&(&t + 0.3), &t).unwrap();
        let b = ground_truth_loss(&(&t + 0.6), &t).unwrap();
        assert!((b - 4.0 * a).abs() < 1e-12);
        assert!(ground_truth_loss(&t, &array![[1.0]]).is_err());
    }

    #[test]
    fn local_and_global_examples() {
        let w = LossWeights {
            beta: 0.0,
            gamma: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(local_loss(&w, 0.7, 5.0, 9.0), w.alpha * 0.7);
        let ones = LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            lambda: 1.0,
            mu: 1.0,
            eta: 1.0,
            ..LossWeights::default()
        };
        assert!((local_loss(&ones, 0.5, 0.2, 0.3) - 1.0).abs() < 1e-15);
        assert!((global_loss(&ones, 1.5, 0.3, 0.2) - 2.0).abs() < 1e-15);
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            lambda: 0.0,
            mu: 0.0,
            eta: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(local_loss(&zero, 1.0, 2.0, 3.0), 0.0);
        assert_eq!(global_loss(&zero, 1.0, 2.0, 3.0), 0.0);
        let w2 = LossWeights {
            mu: 0.0,
            eta: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(global_loss(&w2, 0.8, 4.0, 4.0), w2.lambda * 0.8);
    }

    #[test]
    fn consistency_examples() {
        let last = [0.5, -0.5, 1.0];
        let stat = array![[0.5, -0.5, 1.0], [0.5, -0.5, 1.0]];
        assert_eq!(consistency_loss(&stat, &last).unwrap(), 0.0);
        let one = array![[1.5, 0.5, 2.0]];
        assert_eq!(consistency_loss(&one, &last).unwrap(), 3.0);
        let s = [0.1, -0.2, 0.3];
        let ramp = Mat::from_shape_fn((4, 3), |(i, d)| last[d] + (i + 1) as f64 * s[d]);
        let expected = 4.0 * s.iter().map(|v| v * v).sum::<f64>();
        assert!((consistency_loss(&ramp, &last).unwrap() - expected).abs() < 1e-12);
        assert!(consistency_loss(&ramp, &[0.0]).is_err());
    }

    #[test]
    fn consistency_node_matches_plain_batch_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames: Vec<Mat> = (0..4).map(|_| Mat::from_shape_simple_fn((2, 3), || rand::Rng::random_range(&mut rng, -1.0..1.0))).collect();
        let last = array![[0.1, 0.2, 0.3], [-0.1, 0.0, 0.4]];
        let mut g = Eval::new();
        let nodes: Vec<_> = frames.iter().map(|f| g.constant(f.clone())).collect();
        let l = g.constant(last.clone());
        let v = consistency_node(&mut g, &nodes, &l);
        let per_row: f64 = (0..2)
            .map(|r| {
                let pred = Mat::from_shape_fn((4, 3), |(k, d)| frames[k][[r, d]]);
                consistency_loss(&pred, last.row(r).as_slice().unwrap()).unwrap()
            })
            .sum();
        assert!((g.scalar(&v) - per_row / 2.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_penalty_examples() {
        let real = array![[0.4, -0.3], [1.0, 2.0]];
        let fake = array![[0.1, 0.1], [-0.5, 0.0]];
        let eps = [0.25, 0.8];
        assert!((gradient_penalty(&const_critic(2, 1.0), &real, &fake, &eps).unwrap() - 1.0).abs() < 1e-12);
        let unit = linear_critic(&[0.6, 0.8]);
        assert!(gradient_penalty(&unit, &real, &fake, &eps).unwrap().abs() < 1e-12);
        let two = linear_critic(&[1.2, 1.6]);
        assert!((gradient_penalty(&two, &real, &fake, &eps).unwrap() - 1.0).abs() < 1e-12);
        assert!(gradient_penalty(&two, &real, &fake, &[0.5]).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&Mat::zeros((2, 3)), &Mat::zeros((2, 3))).unwrap(), 0.0);
        let m = array![[0.5, -2.0]];
        assert!((kl_divergence(&m, &Mat::zeros((1, 2))).unwrap() - (0.125 + 2.0)).abs() < 1e-12);
        let mut g = Eval::new();
        let mn = g.constant(m.clone());
        let lv = g.constant(array![[0.3, -0.4]]);
        let node = kl_node(&mut g, &mn, &lv);
        let plain = kl_divergence(&m, &array![[0.3, -0.4]]).unwrap();
        assert!((g.scalar(&node) - plain).abs() < 1e-12);
    }

    #[test]
    fn weights_validation_names_fields() {
        let w = LossWeights {
            beta: -1.0,
            kl_coef: f64::NAN,
            ..LossWeights::default()
        };
        let msg = w.validate().unwrap_err().to_string();
        assert!(msg.contains("weights.beta") && msg.contains("weights.kl_coef"), "{msg}");
    }

    #[test]
    fn wgan_node_gradient_flows_to_fake_only_through_critic() {
        let c = linear_critic(&[0.6, 0.8]);
        let mut tape = Tape::new();
        let real = tape.constant(array![[1.0, 0.0]]);
        let fake = tape.constant(array![[0.0, 1.0]]);
        let l = wgan_node(&mut tape, &c, &real, &fake);
        assert!((tape.scalar(&l) - (0.6 - 0.8)).abs() < 1e-12);
        let grads = tape.backward(l);
        // d/dw3 = h_real - h_fake.
        let gw3 = grads.get(&c.layers[2].weight).unwrap();
        assert!((gw3[[0, 0]] - 1.0).abs() < 1e-12 && (gw3[[1, 0]] + 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn stability_shift_invariant_and_nonnegative(v in prop::array::uniform5(-10.0f64..10.0), c in -5.0f64..5.0) {
            let s = stability_loss(&v);
            prop_assert!(s >= 0.0);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            prop_assert!((stability_loss(&shifted) - s).abs() < 1e-9);
        }

        #[test]
        fn wgan_antisymmetric(real in prop::collection::vec(-5.0f64..5.0, 4), fake in prop::collection::vec(-5.0f64..5.0, 4)) {
            let a = wgan_from_scores(&real, &fake).unwrap();
            let b = wgan_from_scores(&fake, &real).unwrap();
            prop_assert!((a + b).abs() < 1e-12);
        }

        #[test]
        fn consistency_nonnegative(vals in prop::collection::vec(-2.0f64..2.0, 9)) {
            let pred = Mat::from_shape_vec((3, 3), vals).unwrap();
            prop_assert!(consistency_loss(&pred, &[0.0, 0.1, 0.2]).unwrap() >= 0.0);
        }

        #[test]
        fn weighted_losses_superpose(
            t in prop::array::uniform3(-3.0f64..3.0),
            w1 in prop::array::uniform3(0.0f64..2.0),
            w2 in prop::array::uniform3(0.0f64..2.0),
        ) {
            let mk = |w: [f64; 3]| LossWeights { alpha: w[0], beta: w[1], gamma: w[2], lambda: w[0], mu: w[1], eta: w[2], ..LossWeights::default() };
            let sum = [w1[0] + w2[0], w1[1] + w2[1], w1[2] + w2[2]];
            let l = local_loss(&mk(w1), t[0], t[1], t[2]) + local_loss(&mk(w2), t[0], t[1], t[2]);
            prop_assert!((local_loss(&mk(sum), t[0], t[1], t[2]) - l).abs() < 1e-9);
            let g = global_loss(&mk(w1), t[0], t[1], t[2]) + global_loss(&mk(w2), t[0], t[1], t[2]);
            prop_assert!((global_loss(&mk(sum), t[0], t[1], t[2]) - g).abs() < 1e-9);
        }
    }
}
