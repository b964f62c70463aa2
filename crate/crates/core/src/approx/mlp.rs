use rand::Rng;
use serde::{Deserialize, Serialize};

use super::NetError;

/// Nonlinearity applied to the output layer. Hidden layers always use tanh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Tanh,
}

/// Fully connected network with flat parameter storage.
///
/// Layer `l` maps `sizes[l]` inputs to `sizes[l + 1]` outputs. Its weights are
/// stored row-major (`out x in`) followed by its biases, and the layers are
/// laid out back to back in `params`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
    output: OutputActivation,
    hidden_tanh: bool,
}

/// Activations recorded by [`Mlp::forward_tape`] for a later backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    batch: usize,
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape has at least the input")
    }
}

fn count_params(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// `C = alpha * A B + beta * C` on strided row/column layouts.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() >= (m - 1) * rsa.unsigned_abs() + (k - 1) * csa.unsigned_abs() + 1);
    debug_assert!(k == 0 || b.len() >= (k - 1) * rsb.unsigned_abs() + (n - 1) * csb.unsigned_abs() + 1);
    debug_assert!(c.len() >= (m - 1) * rsc.unsigned_abs() + (n - 1) * csc.unsigned_abs() + 1);
    // SAFETY: the debug assertions above spell out the extents; every caller
    // passes buffers sized exactly for the given shapes and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

impl Mlp {
    /// Uniform fan-in initialization: every weight and bias of a layer with
    /// `n` inputs is drawn from `U(-1/sqrt(n), 1/sqrt(n))`.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        output: OutputActivation,
        rng: &mut R,
    ) -> Result<Self, NetError> {
        let mut net = Self::zeros(sizes, output)?;
        let mut offset = 0;
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let len = w[0] * w[1] + w[1];
            for p in &mut net.params[offset..offset + len] {
                *p = rng.random_range(-bound..bound);
            }
            offset += len;
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], output: OutputActivation) -> Result<Self, NetError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NetError::Architecture(sizes.to_vec()));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; count_params(sizes)],
            output,
            hidden_tanh: true,
        })
    }

    pub fn from_params(
        sizes: &[usize],
        output: OutputActivation,
        params: Vec<f64>,
    ) -> Result<Self, NetError> {
        let mut net = Self::zeros(sizes, output)?;
        if params.len() != net.params.len() {
            return Err(NetError::ParamCount {
                expected: net.params.len(),
                got: params.len(),
            });
        }
        net.params = params;
        Ok(net)
    }

    /// Same network with identity hidden activations; a purely affine map.
    pub fn linear(mut self) -> Self {
        self.hidden_tanh = false;
        self
    }

    pub fn is_linear(&self) -> bool {
        !self.hidden_tanh
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.sizes == other.sizes
    }

    fn layer_offsets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.sizes.windows(2).map(move |w| {
            let start = offset;
            offset += w[0] * w[1] + w[1];
            (start, w[0], w[1])
        })
    }

    fn activates(&self, layer: usize) -> Option<OutputActivation> {
        let last = layer + 2 == self.sizes.len();
        match (last, self.output, self.hidden_tanh) {
            (true, OutputActivation::Tanh, _) => Some(OutputActivation::Tanh),
            (true, OutputActivation::Identity, _) => None,
            (false, _, true) => Some(OutputActivation::Tanh),
            (false, _, false) => None,
        }
    }

    fn check_input(&self, input: &[f64], batch: usize) -> Result<(), NetError> {
        if input.len() != batch * self.input_dim() {
            return Err(NetError::InputDim {
                expected: self.input_dim(),
                got: if batch == 0 { input.len() } else { input.len() / batch },
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NetError> {
        self.forward_batch(input, 1)
    }

    /// Row-major batch forward pass.
    pub fn forward_batch(&self, input: &[f64], batch: usize) -> Result<Vec<f64>, NetError> {
        self.check_input(input, batch)?;
        let mut x = input.to_vec();
        for (l, (off, n_in, n_out)) in self.layer_offsets().enumerate() {
            x = self.layer(l, off, n_in, n_out, &x, batch);
        }
        Ok(x)
    }

    fn layer(&self, l: usize, off: usize, n_in: usize, n_out: usize, x: &[f64], batch: usize) -> Vec<f64> {
        let w = &self.params[off..off + n_in * n_out];
        let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
        let mut z = Vec::with_capacity(batch * n_out);
        for _ in 0..batch {
            z.extend_from_slice(b);
        }
        // Z (batch x out) += X (batch x in) * W^T (in x out)
        gemm(
            batch,
            n_in,
            n_out,
            x,
            (n_in as isize, 1),
            w,
            (1, n_in as isize),
            1.0,
            &mut z,
            (n_out as isize, 1),
        );
        if self.activates(l).is_some() {
            for v in &mut z {
                *v = v.tanh();
            }
        }
        z
    }

    pub fn forward_tape(&self, input: &[f64], batch: usize) -> Result<Tape, NetError> {
        self.check_input(input, batch)?;
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(input.to_vec());
        for (l, (off, n_in, n_out)) in self.layer_offsets().enumerate() {
            let next = self.layer(l, off, n_in, n_out, &acts[l], batch);
            acts.push(next);
        }
        Ok(Tape { batch, acts })
    }

    /// Reverse pass. `d_output` is `dL/d(output)` per sample (row-major);
    /// parameter gradients are accumulated into `grad` and `dL/d(input)` is
    /// returned.
    pub fn backward(&self, tape: &Tape, d_output: &[f64], grad: &mut [f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer shape");
        self.backprop(tape, d_output, Some(grad))
    }

    /// `dL/d(input)` only; parameter gradients are skipped.
    pub fn backward_input(&self, tape: &Tape, d_output: &[f64]) -> Vec<f64> {
        self.backprop(tape, d_output, None)
    }

    fn backprop(&self, tape: &Tape, d_output: &[f64], mut grad: Option<&mut [f64]>) -> Vec<f64> {
        assert_eq!(d_output.len(), tape.batch * self.output_dim(), "output gradient shape");
        let batch = tape.batch;
        let layers: Vec<_> = self.layer_offsets().collect();
        let mut delta = d_output.to_vec();
        for (l, &(off, n_in, n_out)) in layers.iter().enumerate().rev() {
            if self.activates(l).is_some() {
                for (d, a) in delta.iter_mut().zip(&tape.acts[l + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            if let Some(grad) = grad.as_deref_mut() {
                let x = &tape.acts[l];
                let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                // dW (out x in) += delta^T (out x batch) * X (batch x in)
                gemm(
                    n_out,
                    batch,
                    n_in,
                    &delta,
                    (1, n_out as isize),
                    x,
                    (n_in as isize, 1),
                    1.0,
                    gw,
                    (n_in as isize, 1),
                );
                for row in delta.chunks_exact(n_out) {
                    for (g, d) in gb.iter_mut().zip(row) {
                        *g += d;
                    }
                }
            }
            // dX (batch x in) = delta (batch x out) * W (out x in)
            let w = &self.params[off..off + n_in * n_out];
            let mut dx = vec![0.0; batch * n_in];
            gemm(
                batch,
                n_out,
                n_in,
                &delta,
                (n_out as isize, 1),
                w,
                (n_in as isize, 1),
                0.0,
                &mut dx,
                (n_in as isize, 1),
            );
            delta = dx;
        }
        delta
    }

    /// Mean loss over a batch and its exact gradient.
    ///
    /// `loss` maps one output row (and its sample index) to the per-sample
    /// loss and `dloss/doutput`.
    pub fn gradient<F>(&self, input: &[f64], batch: usize, mut loss: F) -> Result<(f64, Vec<f64>), NetError>
    where
        F: FnMut(usize, &[f64]) -> (f64, Vec<f64>),
    {
        if batch == 0 {
            return Err(NetError::EmptyBatch);
        }
        let tape = self.forward_tape(input, batch)?;
        let out_dim = self.output_dim();
        let scale = 1.0 / batch as f64;
        let mut total = 0.0;
        let mut d_out = Vec::with_capacity(batch * out_dim);
        for (i, row) in tape.output().chunks_exact(out_dim).enumerate() {
            let (l, g) = loss(i, row);
            if !l.is_finite() {
                return Err(NetError::NonFiniteLoss {
                    sample: i,
                    loss: l,
                    output: row.to_vec(),
                });
            }
            total += l;
            d_out.extend(g.into_iter().map(|v| v * scale));
        }
        let mut grad = vec![0.0; self.params.len()];
        self.backward(&tape, &d_out, &mut grad);
        Ok((total * scale, grad))
    }
}

/// `target <- tau * online + (1 - tau) * target`, elementwise.
pub fn polyak_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<(), NetError> {
    if !target.same_shape(online) {
        return Err(NetError::ShapeMismatch {
            left: target.sizes.clone(),
            right: online.sizes.clone(),
        });
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(NetError::Tau(tau));
    }
    for (t, o) in target.params.iter_mut().zip(&online.params) {
        *t = tau * o + (1.0 - tau) * *t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backup::{asymmetric_loss, asymmetric_loss_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_weights_output_bias() {
        let mut net = Mlp::zeros(&[3, 4, 2], OutputActivation::Identity).unwrap();
        let n = net.num_params();
        net.params_mut()[n - 2] = 0.7;
        net.params_mut()[n - 1] = -1.5;
        assert_eq!(net.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.7, -1.5]);
    }

    #[test]
    fn identity_layer() {
        let params = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let net = Mlp::from_params(&[2, 2], OutputActivation::Identity, params).unwrap();
        assert_eq!(net.forward(&[0.25, -3.0]).unwrap(), vec![0.25, -3.0]);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = Mlp::new(&[4, 16, 16, 1], OutputActivation::Identity, &mut rng(3)).unwrap();
        let b = Mlp::new(&[4, 16, 16, 1], OutputActivation::Identity, &mut rng(3)).unwrap();
        let x = [0.1, -0.2, 0.3, 0.4];
        assert_eq!(a.forward(&x).unwrap().to_vec(), b.forward(&x).unwrap().to_vec());
        assert_eq!(a.num_params(), 4 * 16 + 16 + 16 * 16 + 16 + 16 + 1);
    }

    #[test]
    fn batch_rows_match_single_forward() {
        let net = Mlp::new(&[3, 8, 2], OutputActivation::Tanh, &mut rng(1)).unwrap();
        let xs = [0.1, 0.2, 0.3, -1.0, 0.5, 2.0];
        let batch = net.forward_batch(&xs, 2).unwrap();
        for i in 0..2 {
            let single = net.forward(&xs[i * 3..i * 3 + 3]).unwrap();
            for j in 0..2 {
                assert!((batch[i * 2 + j] - single[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = Mlp::zeros(&[3, 2], OutputActivation::Identity).unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(NetError::InputDim { expected: 3, .. })));
        assert!(Mlp::zeros(&[3], OutputActivation::Identity).is_err());
        assert!(Mlp::zeros(&[3, 0, 1], OutputActivation::Identity).is_err());
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let net = Mlp::new(&[2, 5, 1], OutputActivation::Identity, &mut rng(2)).unwrap();
        let (l, g) = net.gradient(&[0.3, 0.4, -0.1, 0.9], 2, |_, _| (3.0, vec![0.0])).unwrap();
        assert_eq!(l, 3.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn asymmetric_loss_gradient_vanishes_at_target() {
        let net = Mlp::new(&[2, 5, 1], OutputActivation::Identity, &mut rng(4)).unwrap();
        let x = [0.3, -0.7];
        let target = net.forward(&x).unwrap()[0];
        let (_, g) = net
            .gradient(&x, 1, |_, out| {
                (asymmetric_loss(out[0], target, 0.5), vec![asymmetric_loss_grad(out[0], target, 0.5)])
            })
            .unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let net = Mlp::new(&[1, 1], OutputActivation::Identity, &mut rng(0)).unwrap();
        let err = net.gradient(&[1.0], 1, |_, _| (f64::NAN, vec![0.0])).unwrap_err();
        assert!(matches!(err, NetError::NonFiniteLoss { sample: 0, .. }));
    }

    #[test]
    fn polyak_cases() {
        let online = Mlp::from_params(&[1, 1], OutputActivation::Identity, vec![1.0, 1.0]).unwrap();
        let mut target = Mlp::zeros(&[1, 1], OutputActivation::Identity).unwrap();
        polyak_update(&mut target, &online, 0.6).unwrap();
        assert_eq!(target.params(), &[0.6, 0.6]);
        polyak_update(&mut target, &online, 1.0).unwrap();
        assert_eq!(target.params(), online.params());

        let mut t = Mlp::zeros(&[1, 1], OutputActivation::Identity).unwrap();
        let mut gap = 1.0;
        for _ in 0..20 {
            polyak_update(&mut t, &online, 0.3).unwrap();
            let new_gap = (1.0 - t.params()[0]).abs();
            assert!((new_gap - 0.7 * gap).abs() < 1e-12);
            gap = new_gap;
        }

        let other = Mlp::zeros(&[2, 1], OutputActivation::Identity).unwrap();
        assert!(matches!(polyak_update(&mut t, &other, 0.5), Err(NetError::ShapeMismatch { .. })));
        assert!(matches!(polyak_update(&mut t, &online, 0.0), Err(NetError::Tau(_))));
    }
}
