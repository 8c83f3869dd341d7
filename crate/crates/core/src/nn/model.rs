//! Whole models and the sub-models produced by cutting them.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::OptimizerState;
use super::{Activation, Layer, NnError, Scalar, Tensor};

/// Per-layer parameter gradients, `(dW, db)` in layer order.
#[derive(Clone, Debug)]
pub struct ParamGrads<S: Scalar> {
    pub layers: Vec<(Tensor<S>, Tensor<S>)>,
}

#[derive(Clone, Debug)]
struct LayerCache<S: Scalar> {
    input: Tensor<S>,
    output: Tensor<S>,
}

fn forward_layers<S: Scalar>(
    layers: &[Layer<S>],
    x: &Tensor<S>,
) -> Result<(Vec<LayerCache<S>>, Tensor<S>), NnError> {
    let mut caches = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for layer in layers {
        let out = layer.forward(&cur)?;
        caches.push(LayerCache {
            input: cur,
            output: out.clone(),
        });
        cur = out;
    }
    Ok((caches, cur))
}

fn backward_layers<S: Scalar>(
    layers: &[Layer<S>],
    caches: &[LayerCache<S>],
    dy: &Tensor<S>,
) -> (Tensor<S>, ParamGrads<S>) {
    assert_eq!(layers.len(), caches.len());
    let mut grads = vec![None; layers.len()];
    let mut dcur = dy.clone();
    for i in (0..layers.len()).rev() {
        let cache = &caches[i];
        let (dx, dw, db) = layers[i].backward(&cache.input, &cache.output, &dcur);
        grads[i] = Some((dw, db));
        dcur = dx;
    }
    let grads = grads.into_iter().map(Option::unwrap).collect();
    (dcur, ParamGrads { layers: grads })
}

fn apply_sgd<S: Scalar>(
    layers: &mut [Layer<S>],
    states: &mut [OptimizerState<S>],
    grads: &ParamGrads<S>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    assert_eq!(layers.len(), states.len());
    assert_eq!(layers.len(), grads.layers.len());
    for i in 0..layers.len() {
        let (dw, db) = &grads.layers[i];
        super::sgd_step(
            &mut layers[i].weights,
            &mut states[i].weight_velocity,
            dw,
            lr,
            momentum,
            weight_decay,
        );
        // No decay on biases.
        super::sgd_step(
            &mut layers[i].bias,
            &mut states[i].bias_velocity,
            db,
            lr,
            momentum,
            0.0,
        );
    }
}

fn optimizer_states<S: Scalar>(layers: &[Layer<S>]) -> Vec<OptimizerState<S>> {
    layers
        .iter()
        .map(|l| OptimizerState::zeros(l.in_dim(), l.out_dim()))
        .collect()
}

/// A dense network described by its full dimension chain. ReLU everywhere
/// except the final layer, which emits raw logits.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalModel<S: Scalar> {
    pub layers: Vec<Layer<S>>,
}

impl<S: Scalar> GlobalModel<S> {
    /// Xavier-uniform weights (`±sqrt(6 / (fan_in + fan_out))`), zero biases.
    /// Parameters are drawn in f64 and cast so every scalar type sees the
    /// same random stream. Panics on a dimension chain shorter than 2.
    pub fn new(dims: &[usize], seed: u64) -> Self {
        assert!(dims.len() >= 2, "dimension chain needs at least 2 entries");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let (in_dim, out_dim) = (dims[i], dims[i + 1]);
            let activation = if i == dims.len() - 2 {
                Activation::Identity
            } else {
                Activation::Relu
            };
            let mut layer = Layer::zeros(in_dim, out_dim, activation);
            let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
            let dist = Uniform::new(-bound, bound);
            for w in layer.weights.data_mut() {
                *w = S::from_f64(dist.sample(&mut rng));
            }
            layers.push(layer);
        }
        GlobalModel { layers }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.in_dim()];
        dims.extend(self.layers.iter().map(Layer::out_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    /// One full forward/backward/update pass on a batch. Returns the loss.
    pub fn train_step(
        &mut self,
        states: &mut [OptimizerState<S>],
        x: &Tensor<S>,
        labels: &[u32],
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<S, NnError> {
        let (caches, logits) = forward_layers(&self.layers, x)?;
        let (loss, dlogits) = super::loss_and_grad(&logits, labels)?;
        let (_, grads) = backward_layers(&self.layers, &caches, &dlogits);
        apply_sgd(&mut self.layers, states, &grads, lr, momentum, weight_decay);
        Ok(loss)
    }

    pub fn optimizer_states(&self) -> Vec<OptimizerState<S>> {
        optimizer_states(&self.layers)
    }
}

/// A contiguous run of layers cut out of a [`GlobalModel`]. Holds its own
/// optimizer state; `forward` caches what `backward` needs, so training
/// must alternate the two calls.
#[derive(Clone, Debug)]
pub struct SubModel<S: Scalar> {
    pub layers: Vec<Layer<S>>,
    states: Vec<OptimizerState<S>>,
    cache: Option<Vec<LayerCache<S>>>,
}

impl<S: Scalar> SubModel<S> {
    pub fn from_layers(layers: Vec<Layer<S>>) -> Self {
        assert!(!layers.is_empty());
        let states = optimizer_states(&layers);
        SubModel {
            layers,
            states,
            cache: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// 2 * batch * in * out multiply-adds per dense layer.
    pub fn forward_flops(&self, batch: usize) -> f64 {
        self.layers
            .iter()
            .map(|l| 2.0 * batch as f64 * l.in_dim() as f64 * l.out_dim() as f64)
            .sum()
    }

    /// Backward costs the two matmuls of the forward (input grads and
    /// weight grads), so twice the forward count.
    pub fn backward_flops(&self, batch: usize) -> f64 {
        2.0 * self.forward_flops(batch)
    }

    /// Forward pass that records per-layer inputs for a later `backward`.
    pub fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        let (caches, out) = forward_layers(&self.layers, x)?;
        self.cache = Some(caches);
        Ok(out)
    }

    /// Inference-only forward; leaves any training cache untouched.
    pub fn forward_inference(&self, x: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Backpropagates `dy` through the cached forward pass, updates the
    /// local parameters, and returns the gradient with respect to the
    /// sub-model's input. Panics if no forward pass is cached.
    pub fn backward_and_update(
        &mut self,
        dy: &Tensor<S>,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Tensor<S> {
        let caches = self
            .cache
            .take()
            .expect("backward_and_update requires a preceding forward");
        let (dx, grads) = backward_layers(&self.layers, &caches, dy);
        apply_sgd(&mut self.layers, &mut self.states, &grads, lr, momentum, weight_decay);
        dx
    }

    /// Backward only, without touching parameters. Used by gradient checks.
    pub fn backward_grads(&mut self, dy: &Tensor<S>) -> (Tensor<S>, ParamGrads<S>) {
        let caches = self
            .cache
            .take()
            .expect("backward_grads requires a preceding forward");
        backward_layers(&self.layers, &caches, dy)
    }
}

/// Cuts a model after each layer index in `cuts` (1-based). `cuts` of
/// `(2, 10, 19)` on a 37-layer model yields sub-models of 2, 8, 9, and 18
/// layers. Cut positions must be strictly ascending and inside `1..L`.
pub fn split_model<S: Scalar>(
    model: &GlobalModel<S>,
    cuts: &[usize],
) -> Result<Vec<SubModel<S>>, NnError> {
    let num_layers = model.num_layers();
    let mut prev = 0usize;
    for &c in cuts {
        if c <= prev || c >= num_layers {
            return Err(NnError::BadCuts {
                cuts: cuts.to_vec(),
                layers: num_layers,
            });
        }
        prev = c;
    }
    let mut bounds = Vec::with_capacity(cuts.len() + 2);
    bounds.push(0);
    bounds.extend_from_slice(cuts);
    bounds.push(num_layers);
    let subs = bounds
        .windows(2)
        .map(|w| SubModel::from_layers(model.layers[w[0]..w[1]].to_vec()))
        .collect();
    Ok(subs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(dims: &[usize], seed: u64) -> GlobalModel<f64> {
        GlobalModel::new(dims, seed)
    }

    #[test]
    fn split_layer_counts() {
        let dims37: Vec<usize> = std::iter::repeat(16).take(38).collect();
        let m = model(&dims37, 1);
        let subs = split_model(&m, &[2, 10, 19]).unwrap();
        let counts: Vec<usize> = subs.iter().map(SubModel::num_layers).collect();
        assert_eq!(counts, vec![2, 8, 9, 18]);

        let dims7: Vec<usize> = std::iter::repeat(8).take(8).collect();
        let m = model(&dims7, 1);
        let subs = split_model(&m, &[2, 4, 5]).unwrap();
        let counts: Vec<usize> = subs.iter().map(SubModel::num_layers).collect();
        assert_eq!(counts, vec![2, 2, 1, 2]);
    }

    #[test]
    fn split_rejects_bad_cuts() {
        let dims: Vec<usize> = std::iter::repeat(4).take(8).collect();
        let m = model(&dims, 1);
        assert!(split_model(&m, &[0]).is_err());
        assert!(split_model(&m, &[7]).is_err());
        assert!(split_model(&m, &[3, 3]).is_err());
        assert!(split_model(&m, &[4, 2]).is_err());
        assert_eq!(split_model(&m, &[]).unwrap().len(), 1);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let dims = [6, 5, 4];
        let a = model(&dims, 42);
        let b = model(&dims, 42);
        assert_eq!(a, b);
        let c = model(&dims, 43);
        assert_ne!(a, c);
        // Bounded by the Xavier limit of the widest fan.
        let bound = (6.0 / 11.0f64).sqrt();
        assert!(a.layers[0].weights.data().iter().all(|w| w.abs() < bound));
        assert!(a.layers[0].bias.data().iter().all(|&b| b == 0.0));
        assert_eq!(a.layers[0].activation, Activation::Relu);
        assert_eq!(a.layers[1].activation, Activation::Identity);
    }

    #[test]
    fn f32_init_casts_the_same_stream() {
        let dims = [6, 5, 4];
        let a = model(&dims, 42);
        let b = GlobalModel::<f32>::new(&dims, 42);
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            for (wa, wb) in la.weights.data().iter().zip(lb.weights.data()) {
                assert_eq!(*wa as f32, *wb);
            }
        }
    }

    #[test]
    fn chained_forward_matches_global_bitwise() {
        let dims = [12, 10, 9, 8, 7, 6];
        let m = GlobalModel::<f32>::new(&dims, 7);
        let mut subs = split_model(&m, &[1, 3]).unwrap();
        let x = sample_input::<f32>(&[4, 12], 99);
        let global = m.forward(&x).unwrap();
        let mut cur = x;
        for sub in &mut subs {
            cur = sub.forward(&cur).unwrap();
        }
        assert_eq!(global.data(), cur.data());
    }

    #[test]
    fn chained_training_matches_global_bitwise() {
        let dims = [10, 8, 8, 6, 5];
        let mut global = GlobalModel::<f32>::new(&dims, 3);
        let mut states = global.optimizer_states();
        let mut subs = split_model(&global, &[2, 3]).unwrap();
        let (lr, momentum, wd) = (0.05, 0.9, 5e-4);

        for step in 0..5 {
            let x = sample_input::<f32>(&[3, 10], 100 + step);
            let labels = [step as u32 % 5, 1, 4];

            let loss_global = global
                .train_step(&mut states, &x, &labels, lr, momentum, wd)
                .unwrap();

            let mut cur = x.clone();
            for sub in &mut subs {
                cur = sub.forward(&cur).unwrap();
            }
            let (loss_chain, dlogits) = crate::nn::loss_and_grad(&cur, &labels).unwrap();
            let mut dcur = dlogits;
            for sub in subs.iter_mut().rev() {
                dcur = sub.backward_and_update(&dcur, lr, momentum, wd);
            }

            assert_eq!(loss_global, loss_chain);
        }
        let rebuilt: Vec<Layer<f32>> = subs.into_iter().flat_map(|s| s.layers).collect();
        for (a, b) in global.layers.iter().zip(&rebuilt) {
            assert_eq!(a.weights.data(), b.weights.data());
            assert_eq!(a.bias.data(), b.bias.data());
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let dims = [5, 6, 4];
        let m = GlobalModel::<f64>::new(&dims, 11);
        let mut sub = SubModel::from_layers(m.layers.clone());
        let x = sample_input::<f64>(&[2, 5], 55);
        let labels = [1u32, 3];

        let logits = sub.forward(&x).unwrap();
        let (_, dlogits) = crate::nn::loss_and_grad(&logits, &labels).unwrap();
        let (dx, grads) = sub.backward_grads(&dlogits);

        let h = 1e-6;
        let loss_at = |model: &GlobalModel<f64>, input: &Tensor<f64>| -> f64 {
            let logits = model.forward(input).unwrap();
            crate::nn::loss_and_grad(&logits, &labels).unwrap().0
        };

        // Weight gradients, spot-checked across both layers.
        for (li, wi) in [(0usize, 0usize), (0, 13), (1, 5), (1, 23)] {
            let mut plus = m.clone();
            plus.layers[li].weights.data_mut()[wi] += h;
            let mut minus = m.clone();
            minus.layers[li].weights.data_mut()[wi] -= h;
            let fd = (loss_at(&plus, &x) - loss_at(&minus, &x)) / (2.0 * h);
            let analytic = grads.layers[li].0.data()[wi];
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
            assert!(rel < 1e-4, "layer {li} w[{wi}]: fd={fd} analytic={analytic}");
        }

        // Input gradient, which is what crosses a cut on the return path.
        for xi in [0usize, 4, 7] {
            let mut plus = x.clone();
            plus.data_mut()[xi] += h;
            let mut minus = x.clone();
            minus.data_mut()[xi] -= h;
            let fd = (loss_at(&m, &plus) - loss_at(&m, &minus)) / (2.0 * h);
            let analytic = dx.data()[xi];
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
            assert!(rel < 1e-4, "x[{xi}]: fd={fd} analytic={analytic}");
        }
    }

    fn sample_input<S: Scalar>(shape: &[usize], seed: u64) -> Tensor<S> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64(rng.gen_range(-1.0..1.0)))
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }
}
