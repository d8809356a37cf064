//! Affine+ReLU stacks with a plain and a tape-recorded forward pass.

use super::matrix::Matrix;
use super::rng::Rng;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Weights and biases for a stack of affine+ReLU layers; final layer affine only.
#[derive(Debug, Clone)]
pub struct MlpParams {
    layers: Vec<(Matrix, Matrix)>, // (W: out×in, b: out×1)
}

/// Tape handles for one registered MLP.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

impl MlpParams {
    /// Seeded uniform(-0.1, 0.1) initialization over the dimension chain
    /// `dims[0] → dims[1] → …`.
    pub fn new(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(
                "mlp needs at least an input and an output dimension".into(),
            ));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("mlp layer dimensions must be positive".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for win in dims.windows(2) {
            let (d_in, d_out) = (win[0], win[1]);
            let w = Matrix::new(d_out, d_in, rng.uniform_vec(d_out * d_in, -0.1, 0.1))?;
            let b = Matrix::new(d_out, 1, rng.uniform_vec(d_out, -0.1, 0.1))?;
            layers.push((w, b));
        }
        Ok(Self { layers })
    }

    /// Builds an MLP from explicit layer matrices; dimensions must chain.
    pub fn from_layers(layers: Vec<(Matrix, Matrix)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("mlp needs at least one layer".into()));
        }
        for (i, (w, b)) in layers.iter().enumerate() {
            if b.rows() != w.rows() || b.cols() != 1 {
                return Err(Error::DimMismatch(format!(
                    "layer {i}: bias {}x{} does not match weight rows {}",
                    b.rows(),
                    b.cols(),
                    w.rows()
                )));
            }
            if i > 0 && layers[i - 1].0.rows() != w.cols() {
                return Err(Error::DimMismatch(format!(
                    "layer {i}: input {} does not chain from previous output {}",
                    w.cols(),
                    layers[i - 1].0.rows()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().0.rows()
    }

    pub fn layers(&self) -> &[(Matrix, Matrix)] {
        &self.layers
    }

    /// Plain affine+ReLU chain; ReLU after every layer except the last.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimMismatch(format!(
                "mlp input {} vs expected {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut h = Matrix::column(x.to_vec())?;
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = w.matmul(&h)?.add(b)?;
            if i < last {
                h = h.map(|v| v.max(0.0));
            }
        }
        Ok(h.data().to_vec())
    }

    /// Registers every weight and bias on the tape.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|(w, b)| {
                if trainable {
                    (tape.input(w.clone()), tape.input(b.clone()))
                } else {
                    (tape.constant(w.clone()), tape.constant(b.clone()))
                }
            })
            .collect();
        MlpVars { layers }
    }

    /// Tape forward for a column-vector input node.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        let last = vars.layers.len() - 1;
        let mut h = x;
        for (i, (w, b)) in vars.layers.iter().enumerate() {
            let wx = tape.matmul(*w, h)?;
            h = tape.add(wx, *b)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Flat list of parameter matrices, weights and biases interleaved.
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|(w, b)| [w, b]).collect()
    }

    /// Gradients of registered vars in `params_mut` order.
    pub fn grads(&self, tape: &Tape, vars: &MlpVars) -> Vec<Matrix> {
        vars.layers
            .iter()
            .flat_map(|(w, b)| [tape.grad(*w), tape.grad(*b)])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_single_layer() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Matrix::column(vec![0.0, 0.0]).unwrap();
        let mlp = MlpParams::from_layers(vec![(w, b)]).unwrap();
        assert_eq!(mlp.forward(&[1.0, -1.0]).unwrap(), vec![1.0, -1.0]);
    }

    #[test]
    fn dead_relu_layer_yields_final_bias() {
        // Hidden pre-activations all negative: output is exactly the last bias.
        let w1 = Matrix::from_rows(&[vec![-1.0, -1.0], vec![-2.0, -3.0]]).unwrap();
        let b1 = Matrix::column(vec![-1.0, -1.0]).unwrap();
        let w2 = Matrix::from_rows(&[vec![4.0, 5.0]]).unwrap();
        let b2 = Matrix::column(vec![0.25]).unwrap();
        let mlp = MlpParams::from_layers(vec![(w1, b1), (w2, b2)]).unwrap();
        assert_eq!(mlp.forward(&[1.0, 1.0]).unwrap(), vec![0.25]);
    }

    #[test]
    fn matches_hand_rolled_product_oracle() {
        let mut rng = Rng::new(99);
        let mlp = MlpParams::new(&[3, 4, 2], &mut rng).unwrap();
        let x = vec![0.3, -0.7, 1.1];
        let got = mlp.forward(&x).unwrap();

        // Oracle: explicit double loops over the same matrices.
        let (w1, b1) = &mlp.layers()[0];
        let (w2, b2) = &mlp.layers()[1];
        let mut h = vec![0.0; 4];
        for r in 0..4 {
            let mut acc = b1.get(r, 0);
            for c in 0..3 {
                acc += w1.get(r, c) * x[c];
            }
            h[r] = acc.max(0.0);
        }
        let mut out = vec![0.0; 2];
        for r in 0..2 {
            let mut acc = b2.get(r, 0);
            for c in 0..4 {
                acc += w2.get(r, c) * h[c];
            }
            out[r] = acc;
        }
        for (g, o) in got.iter().zip(out.iter()) {
            assert!((g - o).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let mut rng = Rng::new(1);
        let mlp = MlpParams::new(&[3, 2], &mut rng).unwrap();
        assert!(matches!(
            mlp.forward(&[1.0, 2.0]),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn tape_forward_matches_plain() {
        let mut rng = Rng::new(5);
        let mlp = MlpParams::new(&[3, 5, 2], &mut rng).unwrap();
        let x = vec![0.2, 0.4, -0.9];
        let plain = mlp.forward(&x).unwrap();

        let mut tape = Tape::new();
        let vars = mlp.register(&mut tape, true);
        let xv = tape.constant(Matrix::column(x).unwrap());
        let out = mlp.forward_tape(&mut tape, &vars, xv).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(plain.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
