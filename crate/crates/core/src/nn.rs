//! Layers used by the generators, the aggregation layer and the critics.

use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Param, Unary};

/// Uniform fan-in initialisation, `U(-1/sqrt(rows), 1/sqrt(rows))`.
pub fn init_uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    let bound = 1.0 / (rows as f64).sqrt();
    Mat::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng>(name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), init_uniform(rng, input, output)),
            bias: Param::zeros(format!("{name}.bias"), 1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward<'p, G: Graph<'p>>(&'p self, g: &mut G, x: &G::Node) -> G::Node {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matmul(x, &w);
        g.add(&y, &b)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Gated recurrent unit with gate order (reset, update, candidate).
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub w_input: Param,
    pub w_hidden: Param,
    pub b_input: Param,
    pub b_hidden: Param,
}

pub struct BoundGru<N> {
    w_input: N,
    w_hidden: N,
    b_input: N,
    b_hidden: N,
}

impl GruCell {
    pub fn new<R: Rng>(name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_input: Param::new(format!("{name}.w_input"), init_uniform(rng, input, 3 * hidden)),
            w_hidden: Param::new(format!("{name}.w_hidden"), init_uniform(rng, hidden, 3 * hidden)),
            b_input: Param::zeros(format!("{name}.b_input"), 1, 3 * hidden),
            b_hidden: Param::zeros(format!("{name}.b_hidden"), 1, 3 * hidden),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hidden.value.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_input.value.nrows()
    }

    pub fn bind<'p, G: Graph<'p>>(&'p self, g: &mut G) -> BoundGru<G::Node> {
        BoundGru {
            w_input: g.param(&self.w_input),
            w_hidden: g.param(&self.w_hidden),
            b_input: g.param(&self.b_input),
            b_hidden: g.param(&self.b_hidden),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w_input, &self.w_hidden, &self.b_input, &self.b_hidden]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w_input, &mut self.w_hidden, &mut self.b_input, &mut self.b_hidden]
    }
}

impl<N: Clone> BoundGru<N> {
    /// Input projections `x W_i + b_i` for every row of `x`.
    pub fn project<'p, G: Graph<'p, Node = N>>(&self, g: &mut G, x: &N) -> N {
        let p = g.matmul(x, &self.w_input);
        g.add(&p, &self.b_input)
    }

    /// One step from precomputed input projections.
    pub fn step<'p, G: Graph<'p, Node = N>>(&self, g: &mut G, projected: &N, h: &N) -> N {
        let gh = g.matmul(h, &self.w_hidden);
        let gh = g.add(&gh, &self.b_hidden);
        g.gru_update(projected, &gh, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    Tanh,
    LeakyRelu { slope: f64 },
}

impl Activation {
    fn unary(self) -> Unary {
        match self {
            Activation::Tanh => Unary::Tanh,
            Activation::LeakyRelu { slope } => Unary::LeakyRelu(slope),
        }
    }

    fn first(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }

    fn second(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::LeakyRelu { .. } => 0.0,
        }
    }
}

/// Three fully connected layers ending in an unbounded scalar score.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub layers: [Linear; 3],
    pub activation: Activation,
}

/// Gradient penalty value with its gradients for `Critic::params` order.
#[derive(Debug, Clone)]
pub struct PenaltyGrad {
    pub value: f64,
    pub grads: Vec<Mat>,
}

impl Critic {
    pub fn new<R: Rng>(name: &str, input: usize, width: usize, activation: Activation, rng: &mut R) -> Self {
        Self {
            layers: [
                Linear::new(&format!("{name}.fc1"), input, width, rng),
                Linear::new(&format!("{name}.fc2"), width, width, rng),
                Linear::new(&format!("{name}.fc3"), width, 1, rng),
            ],
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    /// Scores flattened sequences, one per row; returns a `rows x 1` column.
    pub fn score_flat<'p, G: Graph<'p>>(&'p self, g: &mut G, x: &G::Node) -> G::Node {
        let act = self.activation.unary();
        let a1 = self.layers[0].forward(g, x);
        let h1 = g.unary(&a1, act);
        let a2 = self.layers[1].forward(g, &h1);
        let h2 = g.unary(&a2, act);
        self.layers[2].forward(g, &h2)
    }

    /// Scores a time-major list of `rows x d` frames.
    pub fn score<'p, G: Graph<'p>>(&'p self, g: &mut G, frames: &[G::Node]) -> G::Node {
        let x = g.concat_cols(frames);
        self.score_flat(g, &x)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(Linear::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(Linear::params_mut).collect()
    }

    fn hidden_pre(&self, x: &Mat) -> (Mat, Mat, Mat) {
        let [l1, l2, _] = &self.layers;
        let a1 = x.dot(&l1.weight.value) + &l1.bias.value.row(0);
        let h1 = a1.mapv(|v| self.activation.unary().apply(v));
        let a2 = h1.dot(&l2.weight.value) + &l2.bias.value.row(0);
        (a1, h1, a2)
    }

    /// Gradient of each row's score with respect to that row's input.
    pub fn input_gradient(&self, x: &Mat) -> Mat {
        let [l1, l2, l3] = &self.layers;
        let (a1, _, a2) = self.hidden_pre(x);
        let w3 = l3.weight.value.column(0);
        let u2 = Mat::from_shape_fn(a2.dim(), |(b, m)| self.activation.first(a2[[b, m]]) * w3[m]);
        let v1 = u2.dot(&l2.weight.value.t());
        let u1 = Mat::from_shape_fn(a1.dim(), |(b, k)| self.activation.first(a1[[b, k]]) * v1[[b, k]]);
        u1.dot(&l1.weight.value.t())
    }

    /// `mean_b (||grad_x D(x_b)|| - 1)^2` at `x_b = eps_b real_b + (1 - eps_b) fake_b`,
    /// with exact gradients with respect to every critic parameter.
    pub fn gradient_penalty(&self, real: &Mat, fake: &Mat, eps: &[f64]) -> PenaltyGrad {
        assert_eq!(real.dim(), fake.dim(), "gradient_penalty: real/fake shapes differ");
        assert_eq!(eps.len(), real.nrows(), "gradient_penalty: one eps per row");
        let act = self.activation;
        let [l1, l2, l3] = &self.layers;
        let batch = real.nrows() as f64;
        let x = Mat::from_shape_fn(real.dim(), |(b, i)| eps[b] * real[[b, i]] + (1.0 - eps[b]) * fake[[b, i]]);

        let (a1, h1, a2) = self.hidden_pre(&x);
        let w3 = l3.weight.value.column(0).to_owned();
        let d1 = a1.mapv(|v| act.first(v));
        let d2 = a2.mapv(|v| act.first(v));
        let u2 = &d2 * &w3;
        let v1 = u2.dot(&l2.weight.value.t());
        let u1 = &d1 * &v1;
        let grad_x = u1.dot(&l1.weight.value.t());

        let mut value = 0.0;
        let mut r = Mat::zeros(grad_x.dim());
        for (b, row) in grad_x.axis_iter(Axis(0)).enumerate() {
            let norm = row.dot(&row).sqrt();
            value += (norm - 1.0).powi(2) / batch;
            if norm > 0.0 {
                let coef = 2.0 * (norm - 1.0) / (norm * batch);
                r.row_mut(b).assign(&(&row * coef));
            }
        }

        // Reverse pass through grad_x = ((d1 * ((d2 * w3) W2^T)) W1^T).
        let mut g_w1 = r.t().dot(&u1);
        let du1 = r.dot(&l1.weight.value);
        let dv1 = &d1 * &du1;
        let mut da1 = Mat::from_shape_fn(a1.dim(), |(b, k)| act.second(a1[[b, k]]) * v1[[b, k]] * du1[[b, k]]);
        let mut g_w2 = dv1.t().dot(&u2);
        let du2 = dv1.dot(&l2.weight.value);
        let g_w3 = (&d2 * &du2).sum_axis(Axis(0)).insert_axis(Axis(1));
        let da2 = Mat::from_shape_fn(a2.dim(), |(b, m)| act.second(a2[[b, m]]) * w3[m] * du2[[b, m]]);

        // a2 = h1 W2 + b2, h1 = act(a1), a1 = x W1 + b1.
        g_w2 += &h1.t().dot(&da2);
        let g_b2 = da2.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dh1 = da2.dot(&l2.weight.value.t());
        da1 += &(&d1 * &dh1);
        g_w1 += &x.t().dot(&da1);
        let g_b1 = da1.sum_axis(Axis(0)).insert_axis(Axis(0));
        let g_b3 = Mat::zeros((1, 1));

        PenaltyGrad {
            value,
            grads: vec![g_w1, g_b1, g_w2, g_b2, g_w3, g_b3],
        }
    }
}
