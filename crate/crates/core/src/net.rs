//! Fully connected network with sine activations.
//!
//! Hidden layers compute `h = sin(ω₀ (W h_prev + b))`, the output layer is
//! linear with a single unit. Besides the output, the training loss needs the
//! gradient of the output with respect to the input, and then the parameter
//! gradient of a loss depending on both. Rather than a general tape, the
//! network propagates input tangents alongside the activations (forward mode)
//! and differentiates that augmented pass in reverse.
//!
//! For a per-sample loss `Φ(o, ∂o/∂z)` with adjoints `ō = ∂Φ/∂o` and
//! `ḡ = ∂Φ/∂(∂o/∂z)`, the parameter gradient equals that of the surrogate
//! `ō·o + ⟨ḡ, ∂o/∂z⟩`, and `⟨ḡ, ∂o/∂z⟩` is the directional derivative of `o`
//! along `ḡ`. The backward pass therefore carries two adjoints per layer: one
//! for the activations and one for their tangents along `ḡ`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, NdFloat};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_OMEGA0: f64 = 30.0;

/// Network weights. `weights[l]` has shape `(layer_sizes[l + 1], layer_sizes[l])`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub omega0: f64,
}

/// Output and input-gradient at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct NetEval {
    pub output: f64,
    pub input_grad: Vec<f64>,
}

/// Loss adjoints for one sample: `∂Φ/∂o` and `∂Φ/∂(∂o/∂z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjoint {
    pub output: f64,
    pub input_grad: Vec<f64>,
}

/// A parameter-shaped gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

fn check_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 3 {
        return Err(Error::config(
            "layer_sizes needs an input width, at least one hidden width and the output width",
        ));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::config("layer widths must be positive"));
    }
    if *layer_sizes.last().unwrap() != 1 {
        return Err(Error::config("the output layer must have width 1"));
    }
    Ok(())
}

impl NetParams {
    /// Sine-network initialization: the first layer uniform in `±1/d_in`, later
    /// layers uniform in `±√(6/d_in)/ω₀`, zero biases.
    pub fn init(seed: u64, layer_sizes: &[usize], omega0: f64) -> Result<Self> {
        check_sizes(layer_sizes)?;
        if !(omega0 > 0.0) || !omega0.is_finite() {
            return Err(Error::config("omega0 must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for (l, pair) in layer_sizes.windows(2).enumerate() {
            let (d_in, d_out) = (pair[0], pair[1]);
            let bound = if l == 0 {
                1.0 / d_in as f64
            } else {
                (6.0 / d_in as f64).sqrt() / omega0
            };
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            weights.push(Array2::from_shape_simple_fn((d_out, d_in), || {
                dist.sample(&mut rng)
            }));
            biases.push(Array1::zeros(d_out));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            omega0,
        })
    }

    /// All-zero parameters; the network output is identically zero.
    pub fn zeros(layer_sizes: &[usize], omega0: f64) -> Result<Self> {
        check_sizes(layer_sizes)?;
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights: layer_sizes
                .windows(2)
                .map(|p| Array2::zeros((p[1], p[0])))
                .collect(),
            biases: layer_sizes[1..].iter().map(|&d| Array1::zeros(d)).collect(),
            omega0,
        })
    }

    /// Rebuilds parameters from the flat layout used on disk: all weight
    /// matrices (row-major, layer order), then all bias vectors.
    pub fn from_flat(layer_sizes: &[usize], omega0: f64, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(layer_sizes, omega0)?;
        if flat.len() != p.num_params() {
            return Err(Error::dim("flat parameter vector", p.num_params(), flat.len()));
        }
        let mut it = flat.iter().copied();
        for w in &mut p.weights {
            w.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        for b in &mut p.biases {
            b.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        Ok(p)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for w in &self.weights {
            out.extend(w.iter());
        }
        for b in &self.biases {
            out.extend(b.iter());
        }
        out
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn weight_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    pub fn num_params(&self) -> usize {
        self.weight_count() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.input_dim() {
            return Err(Error::dim("network input", self.input_dim(), z.len()));
        }
        Ok(())
    }

    pub fn forward(&self, z: &[f64]) -> Result<f64> {
        self.check_input(z)?;
        let nh = self.weights.len() - 1;
        let mut h = z.to_vec();
        for l in 0..nh {
            h = self.hidden_primal(l, &h);
        }
        Ok(self.output_primal(&h))
    }

    /// Output and exact `∂o/∂z`. The output is computed by the same arithmetic
    /// as [`Self::forward`].
    pub fn forward_with_grad(&self, z: &[f64]) -> Result<NetEval> {
        self.check_input(z)?;
        let d0 = z.len();
        let nh = self.weights.len() - 1;
        let mut h = z.to_vec();
        // Jacobian of the current activations, row-major (width × d0).
        let mut jac: Vec<f64> = (0..d0 * d0)
            .map(|i| if i / d0 == i % d0 { 1.0 } else { 0.0 })
            .collect();
        for l in 0..nh {
            let w = &self.weights[l];
            let (d_out, d_in) = w.dim();
            let pre = self.hidden_pre(l, &h);
            let mut next_jac = vec![0.0; d_out * d0];
            let mut next_h = vec![0.0; d_out];
            for j in 0..d_out {
                let (s, c) = (self.omega0 * pre[j]).sin_cos();
                next_h[j] = s;
                let slope = self.omega0 * c;
                for k in 0..d0 {
                    let mut acc = 0.0;
                    for i in 0..d_in {
                        acc += w[[j, i]] * jac[i * d0 + k];
                    }
                    next_jac[j * d0 + k] = slope * acc;
                }
            }
            h = next_h;
            jac = next_jac;
        }
        let output = self.output_primal(&h);
        let w = &self.weights[nh];
        let input_grad = (0..d0)
            .map(|k| (0..h.len()).map(|i| w[[0, i]] * jac[i * d0 + k]).sum())
            .collect();
        Ok(NetEval { output, input_grad })
    }

    fn hidden_pre(&self, l: usize, h: &[f64]) -> Vec<f64> {
        let w = &self.weights[l];
        let b = &self.biases[l];
        (0..w.nrows())
            .map(|j| {
                let mut acc = b[j];
                for (i, hi) in h.iter().enumerate() {
                    acc += w[[j, i]] * hi;
                }
                acc
            })
            .collect()
    }

    fn hidden_primal(&self, l: usize, h: &[f64]) -> Vec<f64> {
        self.hidden_pre(l, h)
            .into_iter()
            .map(|a| (self.omega0 * a).sin())
            .collect()
    }

    fn output_primal(&self, h: &[f64]) -> f64 {
        let nh = self.weights.len() - 1;
        let w = &self.weights[nh];
        let mut acc = self.biases[nh][0];
        for (i, hi) in h.iter().enumerate() {
            acc += w[[0, i]] * hi;
        }
        acc
    }

    /// Outputs for a batch of inputs, one per row.
    pub fn forward_batch(&self, batch: &[Vec<f64>]) -> Result<Vec<f64>> {
        batch.iter().map(|z| self.forward(z)).collect()
    }

    /// Exact gradient of `Σᵢ Φ(oᵢ, ∂oᵢ/∂z)` with respect to every parameter,
    /// given the per-sample adjoints of `Φ`.
    pub fn param_gradient(&self, batch: &[Vec<f64>], adjoints: &[Adjoint]) -> Result<ParamGrad> {
        if adjoints.len() != batch.len() {
            return Err(Error::dim("adjoint batch", batch.len(), adjoints.len()));
        }
        let d0 = self.input_dim();
        let mut z = Array2::<f64>::zeros((d0, batch.len()));
        let mut out_adj = Array1::<f64>::zeros(batch.len());
        let mut grad_adj = Array2::<f64>::zeros((d0, batch.len()));
        for (b, (zb, adj)) in batch.iter().zip(adjoints).enumerate() {
            self.check_input(zb)?;
            if adj.input_grad.len() != d0 {
                return Err(Error::dim("input-gradient adjoint", d0, adj.input_grad.len()));
            }
            for k in 0..d0 {
                z[[k, b]] = zb[k];
                grad_adj[[k, b]] = adj.input_grad[k];
            }
            out_adj[b] = adj.output;
        }
        let layers = Layers::<f64>::from_params(self);
        let tape = layers.forward(z.view());
        Ok(layers.backward(&tape, out_adj.view(), grad_adj.view()))
    }
}

impl ParamGrad {
    pub fn zeros_like(params: &NetParams) -> Self {
        Self {
            weights: params.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: params.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .flat_map(|w| w.iter().copied())
            .chain(self.biases.iter().flat_map(|b| b.iter().copied()))
    }

    pub fn len(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add_scaled(&mut self, other: &ParamGrad, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.scaled_add(scale, b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.scaled_add(scale, b);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean_abs(&self) -> f64 {
        let n = self.len();
        if n == 0 {
            return 0.0;
        }
        self.values().map(f64::abs).sum::<f64>() / n as f64
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }
}

/// Parameters cast to the working precision of a batched pass.
#[derive(Debug, Clone)]
pub struct Layers<A> {
    weights: Vec<Array2<A>>,
    biases: Vec<Array1<A>>,
    omega: A,
}

/// Cached intermediates of a batched forward pass.
///
/// Column `b` of every matrix belongs to sample `b`. Tangents along input
/// coordinate `k` occupy the column block `[(k+1)·B, (k+2)·B)`, behind the
/// `B` primal columns.
#[derive(Debug, Clone)]
pub struct BatchTape<A> {
    batch: usize,
    input: Array2<A>,
    /// Per hidden layer: `[W h_prev | ∂(W h_prev)/∂z₀ | …]` (bias excluded).
    pres: Vec<Array2<A>>,
    /// Per hidden layer: `[h | ∂h/∂z₀ | … | ∂h/∂z_{d−1}]`.
    stacks: Vec<Array2<A>>,
    /// Per hidden layer: `ω cos(ω a)`.
    slopes: Vec<Array2<A>>,
    pub output: Array1<A>,
    /// `∂o/∂z`, shape `(d0, B)`.
    pub input_grad: Array2<A>,
}

impl<A> BatchTape<A> {
    pub fn len(&self) -> usize {
        self.batch
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }
}

fn row<A>(m: &Array2<A>, j: usize) -> &[A] {
    let n = m.ncols();
    &m.as_slice().expect("standard layout")[j * n..(j + 1) * n]
}

fn row_mut<A>(m: &mut Array2<A>, j: usize) -> &mut [A] {
    let n = m.ncols();
    &mut m.as_slice_mut().expect("standard layout")[j * n..(j + 1) * n]
}

impl<A: NdFloat> Layers<A> {
    pub fn from_params(params: &NetParams) -> Self {
        let cast = |v: f64| A::from(v).expect("finite parameter");
        Self {
            weights: params.weights.iter().map(|w| w.mapv(cast)).collect(),
            biases: params.biases.iter().map(|b| b.mapv(cast)).collect(),
            omega: cast(params.omega0),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    /// Batched forward pass with input tangents. `z` has shape `(d0, B)`.
    pub fn forward(&self, z: ArrayView2<A>) -> BatchTape<A> {
        let (d0, batch) = z.dim();
        let nh = self.weights.len() - 1;
        let cols = (1 + d0) * batch;
        let mut pres: Vec<Array2<A>> = Vec::with_capacity(nh);
        let mut stacks: Vec<Array2<A>> = Vec::with_capacity(nh);
        let mut slopes = Vec::with_capacity(nh);
        for l in 0..nh {
            let w = &self.weights[l];
            let width = w.nrows();
            let pre = if l == 0 {
                let mut p = Array2::<A>::zeros((width, cols));
                p.slice_mut(s![.., ..batch]).assign(&w.dot(&z));
                for k in 0..d0 {
                    p.slice_mut(s![.., (k + 1) * batch..(k + 2) * batch])
                        .assign(&w.column(k).insert_axis(Axis(1)));
                }
                p
            } else {
                w.dot(&stacks[l - 1])
            };
            let bias = &self.biases[l];
            let mut stack = Array2::<A>::zeros((width, cols));
            let mut slope = Array2::<A>::zeros((width, batch));
            for j in 0..width {
                let pr = row(&pre, j);
                let st = row_mut(&mut stack, j);
                let sl = row_mut(&mut slope, j);
                let bj = bias[j];
                let (head, tail) = st.split_at_mut(batch);
                for ((h, s), &a) in head.iter_mut().zip(sl.iter_mut()).zip(&pr[..batch]) {
                    let (sn, cs) = (self.omega * (a + bj)).sin_cos();
                    *h = sn;
                    *s = self.omega * cs;
                }
                for (out, tan) in tail.chunks_exact_mut(batch).zip(pr[batch..].chunks_exact(batch)) {
                    for ((o, &t), &s) in out.iter_mut().zip(tan).zip(sl.iter()) {
                        *o = s * t;
                    }
                }
            }
            pres.push(pre);
            stacks.push(stack);
            slopes.push(slope);
        }
        let p = self.weights[nh].dot(&stacks[nh - 1]);
        let bias = self.biases[nh][0];
        let output = p.slice(s![0, ..batch]).mapv(|v| v + bias);
        let input_grad = p
            .slice(s![0, batch..])
            .to_owned()
            .into_shape_with_order((d0, batch))
            .expect("contiguous tangent block");
        BatchTape {
            batch,
            input: z.to_owned(),
            pres,
            stacks,
            slopes,
            output,
            input_grad,
        }
    }

    /// Pre-activation and activation tangents of hidden layer `l` along `ḡ`.
    fn directional(&self, tape: &BatchTape<A>, l: usize, grad_adj: &Array2<A>) -> (Array2<A>, Array2<A>) {
        let batch = tape.batch;
        let pre = &tape.pres[l];
        let slope = &tape.slopes[l];
        let width = pre.nrows();
        let mut pre_dir = Array2::<A>::zeros((width, batch));
        let mut post_dir = Array2::<A>::zeros((width, batch));
        for j in 0..width {
            let pr = row(pre, j);
            let out = row_mut(&mut pre_dir, j);
            for (k, tan) in pr[batch..].chunks_exact(batch).enumerate() {
                for ((o, &t), &g) in out.iter_mut().zip(tan).zip(row(grad_adj, k)) {
                    *o += g * t;
                }
            }
            let po = row_mut(&mut post_dir, j);
            for ((p, &d), &s) in po.iter_mut().zip(row(&pre_dir, j)).zip(row(slope, j)) {
                *p = s * d;
            }
        }
        (pre_dir, post_dir)
    }

    /// Parameter gradient of `Σ_b ō_b o_b + ⟨ḡ_b, ∂o_b/∂z⟩`.
    pub fn backward(
        &self,
        tape: &BatchTape<A>,
        out_adj: ndarray::ArrayView1<A>,
        grad_adj: ArrayView2<A>,
    ) -> ParamGrad {
        let batch = tape.batch;
        let nh = self.weights.len() - 1;
        let omega_sq = self.omega * self.omega;
        let grad_adj = grad_adj.as_standard_layout().into_owned();
        let out_adj = out_adj.to_owned();

        let mut weights_grad: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); nh + 1];
        let mut biases_grad: Vec<Array1<f64>> = vec![Array1::zeros(0); nh + 1];

        // Output layer.
        let w_out = self.weights[nh].row(0);
        let h_last = tape.stacks[nh - 1].slice(s![.., ..batch]);
        let (mut dir_pre, last_dir) = self.directional(tape, nh - 1, &grad_adj);
        let dw_out = h_last.dot(&out_adj) + last_dir.sum_axis(Axis(1));
        weights_grad[nh] = dw_out.mapv(to_f64).insert_axis(Axis(0));
        biases_grad[nh] = Array1::from_elem(1, to_f64(out_adj.sum()));
        // [h̄ | ṫ̄]: adjoints of the activations and of their tangents along ḡ.
        let width = w_out.len();
        let mut adj = Array2::<A>::zeros((width, 2 * batch));
        for j in 0..width {
            let wj = w_out[j];
            let (hb, tb) = row_mut(&mut adj, j).split_at_mut(batch);
            for (h, &o) in hb.iter_mut().zip(out_adj.iter()) {
                *h = o * wj;
            }
            tb.fill(wj);
        }

        for l in (0..nh).rev() {
            let slope = &tape.slopes[l];
            let stack = &tape.stacks[l];
            let width = slope.nrows();
            // [ā | ǎ]: adjoints of pre-activations and of their tangents.
            let mut combined = Array2::<A>::zeros((width, 2 * batch));
            for j in 0..width {
                let sl = row(slope, j);
                let hr = &row(stack, j)[..batch];
                let (hb, tb) = row(&adj, j).split_at(batch);
                let pd = row(&dir_pre, j);
                let (ca, ct) = row_mut(&mut combined, j).split_at_mut(batch);
                for b in 0..batch {
                    ca[b] = hb[b] * sl[b] - tb[b] * pd[b] * omega_sq * hr[b];
                    ct[b] = tb[b] * sl[b];
                }
            }
            // Inputs of this layer and their tangents along ḡ.
            let prev_stack = if l == 0 {
                ndarray::concatenate![Axis(1), tape.input, grad_adj]
            } else {
                let (pre, post) = self.directional(tape, l - 1, &grad_adj);
                dir_pre = pre;
                ndarray::concatenate![Axis(1), tape.stacks[l - 1].slice(s![.., ..batch]), post]
            };
            let dw = combined.dot(&prev_stack.t());
            weights_grad[l] = dw.mapv(to_f64);
            biases_grad[l] = combined
                .slice(s![.., ..batch])
                .sum_axis(Axis(1))
                .mapv(to_f64);
            if l > 0 {
                adj = self.weights[l].t().dot(&combined);
            }
        }
        ParamGrad {
            weights: weights_grad,
            biases: biases_grad,
        }
    }
}

/// Intermediates of a batched pass without input tangents.
#[derive(Debug, Clone)]
pub struct OutputTape<A> {
    input: Array2<A>,
    hidden: Vec<Array2<A>>,
    slopes: Vec<Array2<A>>,
    pub output: Array1<A>,
}

impl<A: NdFloat> Layers<A> {
    /// Batched network output only. `z` has shape `(d0, B)`.
    pub fn forward_output(&self, z: ArrayView2<A>) -> OutputTape<A> {
        let nh = self.weights.len() - 1;
        let mut hidden: Vec<Array2<A>> = Vec::with_capacity(nh);
        let mut slopes = Vec::with_capacity(nh);
        for l in 0..nh {
            let mut a = if l == 0 {
                self.weights[0].dot(&z)
            } else {
                self.weights[l].dot(&hidden[l - 1])
            };
            let mut slope = Array2::<A>::zeros(a.dim());
            for j in 0..a.nrows() {
                let bj = self.biases[l][j];
                let sl = row_mut(&mut slope, j);
                for (v, s) in row_mut(&mut a, j).iter_mut().zip(sl.iter_mut()) {
                    let (sn, cs) = (self.omega * (*v + bj)).sin_cos();
                    *v = sn;
                    *s = self.omega * cs;
                }
            }
            hidden.push(a);
            slopes.push(slope);
        }
        let bias = self.biases[nh][0];
        let output = self.weights[nh]
            .row(0)
            .dot(&hidden[nh - 1])
            .mapv(|v| v + bias);
        OutputTape {
            input: z.to_owned(),
            hidden,
            slopes,
            output,
        }
    }

    /// Parameter gradient of `Σ_b ō_b o_b`.
    pub fn backward_output(&self, tape: &OutputTape<A>, out_adj: ndarray::ArrayView1<A>) -> ParamGrad {
        let nh = self.weights.len() - 1;
        let mut weights_grad: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); nh + 1];
        let mut biases_grad: Vec<Array1<f64>> = vec![Array1::zeros(0); nh + 1];
        weights_grad[nh] = tape.hidden[nh - 1]
            .dot(&out_adj)
            .mapv(to_f64)
            .insert_axis(Axis(0));
        biases_grad[nh] = Array1::from_elem(1, to_f64(out_adj.sum()));
        let mut adj = self.weights[nh]
            .t()
            .dot(&out_adj.insert_axis(Axis(0)));
        for l in (0..nh).rev() {
            adj *= &tape.slopes[l];
            let prev = if l == 0 { &tape.input } else { &tape.hidden[l - 1] };
            weights_grad[l] = adj.dot(&prev.t()).mapv(to_f64);
            biases_grad[l] = adj.sum_axis(Axis(1)).mapv(to_f64);
            if l > 0 {
                adj = self.weights[l].t().dot(&adj);
            }
        }
        ParamGrad {
            weights: weights_grad,
            biases: biases_grad,
        }
    }
}

fn to_f64<A: NdFloat>(v: A) -> f64 {
    v.to_f64().expect("float converts to f64")
}
