//! Feed-forward encoder: tanh hidden layers, linear output layer.

/// One dense layer, `y = W x + b` with `W` stored `out × in` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|r| {
                self.bias[r]
                    + self.weights[r * self.in_dim..(r + 1) * self.in_dim]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect()
    }
}

/// Every layer but the last applies `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

impl MlpParams {
    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").out_dim
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    /// Layer shapes chain and every entry is finite.
    pub fn is_consistent(&self) -> bool {
        !self.layers.is_empty()
            && self.layers.windows(2).all(|w| w[0].out_dim == w[1].in_dim)
            && self.layers.iter().all(|l| {
                l.weights.len() == l.in_dim * l.out_dim
                    && l.bias.len() == l.out_dim
                    && l.weights.iter().chain(&l.bias).all(|x| x.is_finite())
            })
    }
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// `activations[0]` is the input; `activations[i + 1]` the output of layer `i`.
    pub activations: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("non-empty")
    }
}

pub fn mlp_forward_cached(input: Vec<f64>, p: &MlpParams) -> MlpCache {
    let last = p.layers.len() - 1;
    let mut activations = Vec::with_capacity(p.layers.len() + 1);
    activations.push(input);
    for (i, layer) in p.layers.iter().enumerate() {
        let mut z = layer.apply(activations.last().expect("input"));
        if i != last {
            z.iter_mut().for_each(|v| *v = v.tanh());
        }
        activations.push(z);
    }
    MlpCache { activations }
}

/// Backpropagates `grad_out` (on the output) and returns the input gradient.
pub fn mlp_backward(cache: &MlpCache, p: &MlpParams, grad_out: &[f64], grads: &mut MlpParams) -> Vec<f64> {
    let last = p.layers.len() - 1;
    let mut delta = grad_out.to_vec();
    for i in (0..p.layers.len()).rev() {
        let layer = &p.layers[i];
        let out = &cache.activations[i + 1];
        if i != last {
            for (d, y) in delta.iter_mut().zip(out) {
                *d *= 1.0 - y * y;
            }
        }
        let input = &cache.activations[i];
        let g = &mut grads.layers[i];
        let mut next = vec![0.0; layer.in_dim];
        for r in 0..layer.out_dim {
            let d = delta[r];
            g.bias[r] += d;
            let row = r * layer.in_dim;
            for c in 0..layer.in_dim {
                g.weights[row + c] += d * input[c];
                next[c] += d * layer.weights[row + c];
            }
        }
        delta = next;
    }
    delta
}

/// Encodes `[s̃, ṡ, g]` into the embedding `φ`.
pub fn mlp_forward(
    embedding: &[f64],
    sdot_norm: f64,
    g_norm: &[f64],
    p: &MlpParams,
) -> crate::Result<Vec<f64>> {
    let input = mlp_input(embedding, sdot_norm, g_norm);
    if input.len() != p.in_dim() {
        return Err(crate::Error::InvalidArgument(format!(
            "encoder expects {} inputs, got {}",
            p.in_dim(),
            input.len()
        )));
    }
    Ok(mlp_forward_cached(input, p).activations.pop().expect("output"))
}

pub(crate) fn mlp_input(embedding: &[f64], sdot_norm: f64, g_norm: &[f64]) -> Vec<f64> {
    let mut input = Vec::with_capacity(embedding.len() + 1 + g_norm.len());
    input.extend_from_slice(embedding);
    input.push(sdot_norm);
    input.extend_from_slice(g_norm);
    input
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mlp(rng: &mut ChaCha8Rng, dims: &[usize]) -> MlpParams {
        MlpParams {
            layers: dims
                .windows(2)
                .map(|w| Dense {
                    in_dim: w[0],
                    out_dim: w[1],
                    weights: (0..w[0] * w[1]).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    bias: (0..w[1]).map(|_| rng.random_range(-1.0..1.0)).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpParams {
            layers: vec![Dense::zeros(6, 8), Dense::zeros(8, 4)],
        };
        let phi = mlp_forward(&[0.3, -0.2, 0.1], 1.0, &[0.5, 0.5], &p).unwrap();
        assert_eq!(phi, vec![0.0; 4]);
    }

    #[test]
    fn identity_layer_reproduces_input() {
        let mut layer = Dense::zeros(4, 4);
        for i in 0..4 {
            layer.weights[i * 4 + i] = 1.0;
        }
        let p = MlpParams { layers: vec![layer] };
        let phi = mlp_forward(&[0.3, -0.2], 1.5, &[2.0], &p).unwrap();
        assert_eq!(phi, vec![0.3, -0.2, 1.5, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = MlpParams {
            layers: vec![Dense::zeros(5, 2)],
        };
        assert!(mlp_forward(&[0.0], 1.0, &[0.0], &p).is_err());
    }

    #[test]
    fn matches_direct_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = random_mlp(&mut rng, &[6, 5, 4, 3]);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = mlp_forward(&x[..3], x[3], &x[4..], &p).unwrap();

        let mut h = nalgebra::DVector::from_vec(x.clone());
        for (i, l) in p.layers.iter().enumerate() {
            let w = nalgebra::DMatrix::from_row_slice(l.out_dim, l.in_dim, &l.weights);
            h = w * h + nalgebra::DVector::from_vec(l.bias.clone());
            if i + 1 < p.layers.len() {
                h = h.map(f64::tanh);
            }
        }
        for (a, b) in got.iter().zip(h.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let p = random_mlp(&mut rng, &[4, 6, 3]);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up = [0.3, -0.8, 1.1];
        let loss = |p: &MlpParams, x: &[f64]| -> f64 {
            mlp_forward_cached(x.to_vec(), p)
                .output()
                .iter()
                .zip(&up)
                .map(|(a, b)| a * b)
                .sum()
        };
        let cache = mlp_forward_cached(x.clone(), &p);
        let mut g = p.zeros_like();
        let gx = mlp_backward(&cache, &p, &up, &mut g);
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h);
            assert!((gx[i] - fd).abs() < 1e-8);
        }
        for li in 0..p.layers.len() {
            for wi in 0..p.layers[li].weights.len() {
                let mut pp = p.clone();
                let mut pm = p.clone();
                pp.layers[li].weights[wi] += h;
                pm.layers[li].weights[wi] -= h;
                let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
                assert!((g.layers[li].weights[wi] - fd).abs() < 1e-8);
            }
        }
    }
}
