//! The image-to-word mapping network: three affine layers with a smooth
//! nonlinearity between them, `S* = L₃(σ(L₂(σ(L₁(v)))))`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// tanh approximation of GELU.
    #[default]
    Gelu,
    Tanh,
    /// Linear; for tests and closed-form checks.
    Identity,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Gelu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Gelu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Identity),
            _ => Err(Error::InvalidConfig(format!("unknown activation code {code}"))),
        }
    }
}

/// `y = W x + b` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Row-wise `X Wᵀ + b` for a batch `X` (`m × in`).
    fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.mul_transposed(&self.weight);
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        y
    }
}

/// Trainable parameters. Every mutable access bumps `generation`, which
/// invalidates forward caches taken earlier.
#[derive(Clone, Debug)]
pub struct MappingParams {
    layers: [Affine; 3],
    activation: Activation,
    generation: u64,
}

impl PartialEq for MappingParams {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.activation == other.activation
    }
}

/// Gradients with the same shapes as [`MappingParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct MappingGrads {
    pub layers: [Affine; 3],
}

impl MappingGrads {
    pub fn zeros_like(p: &MappingParams) -> Self {
        Self {
            layers: p.layers.clone().map(|l| Affine::zeros(l.input_dim(), l.output_dim())),
        }
    }

    /// Flattened in canonical order `W₁, b₁, W₂, b₂, W₃, b₃`.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn add_assign(&mut self, other: &MappingGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.as_mut_slice().iter_mut().zip(b.weight.as_slice()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.flat().iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

impl MappingParams {
    pub fn zeros(d: usize, hidden: usize, token_dim: usize, activation: Activation) -> Self {
        Self {
            layers: [
                Affine::zeros(d, hidden),
                Affine::zeros(hidden, hidden),
                Affine::zeros(hidden, token_dim),
            ],
            activation,
            generation: 0,
        }
    }

    pub fn from_layers(layers: [Affine; 3], activation: Activation) -> Result<Self> {
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::DimensionMismatch {
                    expected: w[0].output_dim(),
                    got: w[1].input_dim(),
                    context: if i == 0 { "layer 2 input" } else { "layer 3 input" },
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.output_dim() {
                return Err(Error::DimensionMismatch {
                    expected: l.output_dim(),
                    got: l.bias.len(),
                    context: "layer bias",
                });
            }
        }
        let p = Self {
            layers,
            activation,
            generation: 0,
        };
        if !p.is_finite() {
            return Err(Error::NonFinite("mapping parameters".into()));
        }
        Ok(p)
    }

    /// Weights uniform in `±sqrt(3 / fan_in)` (unit variance gain), biases zero.
    pub fn init<R: Rng + ?Sized>(
        d: usize,
        hidden: usize,
        token_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 || hidden == 0 || token_dim == 0 {
            return Err(Error::InvalidConfig("mapping dims must be >= 1".into()));
        }
        let mut p = Self::zeros(d, hidden, token_dim, activation);
        for l in &mut p.layers {
            let bound = (3.0 / l.input_dim() as f64).sqrt();
            for w in l.weight.as_mut_slice() {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn layers(&self) -> &[Affine; 3] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Affine; 3] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].output_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[2].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Parameter tensors in canonical order.
    pub fn tensors(&self) -> [&[f64]; 6] {
        let [a, b, c] = &self.layers;
        [
            a.weight.as_slice(),
            &a.bias,
            b.weight.as_slice(),
            &b.bias,
            c.weight.as_slice(),
            &c.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        self.generation += 1;
        let [a, b, c] = &mut self.layers;
        [
            a.weight.as_mut_slice(),
            &mut a.bias,
            b.weight.as_mut_slice(),
            &mut b.bias,
            c.weight.as_mut_slice(),
            &mut c.bias,
        ]
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                got: values.len(),
                context: "flat parameter vector",
            });
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&values[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }

    /// Adds `delta` to one coordinate of the canonical flat vector.
    pub fn perturb(&mut self, index: usize, delta: f64) {
        let mut off = index;
        for t in self.tensors_mut() {
            if off < t.len() {
                t[off] += delta;
                return;
            }
            off -= t.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update([self.activation.code()]);
        for t in self.tensors() {
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Hidden width equals `d`, activation GELU.
pub fn init_mapping<R: Rng + ?Sized>(d: usize, token_dim: usize, rng: &mut R) -> Result<MappingParams> {
    MappingParams::init(d, d, token_dim, Activation::Gelu, rng)
}

/// Intermediates of a batched forward pass.
#[derive(Clone, Debug)]
pub struct MapCache {
    generation: u64,
    input: Matrix,
    pre: [Matrix; 3],
    post: [Matrix; 2],
}

impl MapCache {
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
}

/// Maps each row of `inputs` (`m × d`) to a pseudo token (`m × token_dim`).
pub fn map_forward_batch(params: &MappingParams, inputs: &Matrix) -> Result<(Matrix, MapCache)> {
    if inputs.cols() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            got: inputs.cols(),
            context: "mapping input",
        });
    }
    let act = params.activation;
    let z1 = params.layers[0].forward(inputs);
    let h1 = apply(&z1, act);
    let z2 = params.layers[1].forward(&h1);
    let h2 = apply(&z2, act);
    let z3 = params.layers[2].forward(&h2);
    let out = z3.clone();
    Ok((
        out,
        MapCache {
            generation: params.generation,
            input: inputs.clone(),
            pre: [z1, z2, z3],
            post: [h1, h2],
        },
    ))
}

pub fn map_forward(params: &MappingParams, v_r: &[f64]) -> Result<(Vec<f64>, MapCache)> {
    let x = Matrix::from_vec(1, v_r.len(), v_r.to_vec())?;
    let (s, cache) = map_forward_batch(params, &x)?;
    Ok((s.row(0).to_vec(), cache))
}

fn apply(z: &Matrix, act: Activation) -> Matrix {
    let mut h = z.clone();
    h.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
    h
}

/// Backpropagates `d_out` (`m × token_dim`, gradient w.r.t. the pseudo tokens)
/// to the parameters.
pub fn map_backward(params: &MappingParams, cache: &MapCache, d_out: &Matrix) -> Result<MappingGrads> {
    if cache.generation != params.generation {
        return Err(Error::StaleCache {
            cache: cache.generation,
            params: params.generation,
        });
    }
    if d_out.rows() != cache.batch_size() || d_out.cols() != params.output_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.output_dim(),
            got: d_out.cols(),
            context: "pseudo-token gradient",
        });
    }
    let act = params.activation;
    let mut grads = MappingGrads::zeros_like(params);
    let inputs = [&cache.input, &cache.post[0], &cache.post[1]];
    let mut delta = d_out.clone();
    for layer in (0..3).rev() {
        // dW = δᵀ X, db = Σ_rows δ
        let g = &mut grads.layers[layer];
        g.weight = delta.transpose().matmul(inputs[layer]);
        for r in 0..delta.rows() {
            for (b, d) in g.bias.iter_mut().zip(delta.row(r)) {
                *b += d;
            }
        }
        if layer > 0 {
            let mut back = delta.matmul(&params.layers[layer].weight);
            let pre = &cache.pre[layer - 1];
            for (v, z) in back.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                *v *= act.derivative(*z);
            }
            delta = back;
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_seeded_and_shaped() {
        let a = init_mapping(8, 8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = init_mapping(8, 8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        for l in a.layers() {
            assert_eq!((l.weight.rows(), l.weight.cols()), (8, 8));
            assert!(l.bias.iter().all(|&x| x == 0.0));
        }
        assert_eq!(a.num_params(), 3 * (64 + 8));
    }

    #[test]
    fn fresh_output_norm_is_sane() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for d in [8, 16, 32, 768] {
            let p = init_mapping(d, d, &mut rng).unwrap();
            let mut v = vec![0.0; d];
            v[0] = 1.0;
            let (s, _) = map_forward(&p, &v).unwrap();
            let n = norm(&s);
            assert!((1e-6..=1e3).contains(&n), "d={d} norm={n}");
        }
    }

    #[test]
    fn zero_params_give_zero_output() {
        let p = MappingParams::zeros(4, 4, 4, Activation::Gelu);
        let (s, _) = map_forward(&p, &[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert!(s.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_layers_in_linear_mode_pass_through() {
        let eye = || Affine {
            weight: Matrix::identity(4),
            bias: vec![0.0; 4],
        };
        let p = MappingParams::from_layers([eye(), eye(), eye()], Activation::Identity).unwrap();
        let v = [0.25, -1.5, 3.0, 0.0];
        assert_eq!(map_forward(&p, &v).unwrap().0, v);
    }

    #[test]
    fn batched_forward_matches_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = MappingParams::init(6, 5, 4, Activation::Gelu, &mut rng).unwrap();
        let x = Matrix::gaussian(7, 6, 1.0, &mut rng);
        let (batch, _) = map_forward_batch(&p, &x).unwrap();
        for r in 0..7 {
            let (s, _) = map_forward(&p, x.row(r)).unwrap();
            for (a, b) in s.iter().zip(batch.row(r)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn wrong_input_dim_rejected() {
        let p = MappingParams::zeros(4, 4, 4, Activation::Gelu);
        assert!(matches!(
            map_forward(&p, &[1.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = init_mapping(4, 4, &mut rng).unwrap();
        let (_, cache) = map_forward(&p, &[1.0; 4]).unwrap();
        p.perturb(0, 1e-3);
        let d = Matrix::zeros(1, 4);
        assert!(matches!(map_backward(&p, &cache, &d), Err(Error::StaleCache { .. })));
    }

    #[test]
    fn activation_derivatives_match_differences() {
        for act in [Activation::Gelu, Activation::Tanh, Activation::Identity] {
            for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8, "{act:?} at {x}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_on_linear_readout() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = MappingParams::init(5, 6, 3, Activation::Gelu, &mut rng).unwrap();
        let x = Matrix::gaussian(4, 5, 1.0, &mut rng);
        let u = Matrix::gaussian(4, 3, 1.0, &mut rng);
        let f = |p: &MappingParams| {
            let (s, _) = map_forward_batch(p, &x).unwrap();
            crate::linalg::dot(s.as_slice(), u.as_slice())
        };
        let (_, cache) = map_forward_batch(&p, &x).unwrap();
        let g = map_backward(&p, &cache, &u).unwrap().flat();
        for (i, &gi) in g.iter().enumerate() {
            let h = 1e-6;
            let mut a = p.clone();
            a.perturb(i, h);
            let mut b = p.clone();
            b.perturb(i, -h);
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!((fd - gi).abs() < 1e-6 * (1.0 + gi.abs()), "coord {i}");
        }
    }
}
