//! Dense feed-forward network with exact reverse-mode gradients and AdamW.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

/// Affine layer computing `x · weights + biases` for row-vector inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Shape `(fan_in, fan_out)`.
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Layer {
        Layer {
            weights: Array2::zeros(self.weights.raw_dim()),
            biases: Array1::zeros(self.biases.raw_dim()),
        }
    }
}

pub enum Mode<'a> {
    Inference,
    /// Dropout masks are drawn from the supplied generator.
    Train(&'a mut dyn RngCore),
}

/// ReLU between hidden layers, identity output, optional inverted dropout
/// after every hidden activation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    dims: Vec<usize>,
    layers: Vec<Layer>,
    dropout: f64,
}

/// Output of [`DenseNet::backward_weighted`].
#[derive(Debug, Clone)]
pub struct Backward {
    pub loss: f64,
    /// Per-row squared error `‖ŷ − y‖²` before weighting.
    pub row_errors: Vec<f64>,
    pub grads: Vec<Layer>,
}

impl DenseNet {
    /// Weights uniform in `±sqrt(6 / fan_in)`, zero biases.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], dropout: f64, rng: &mut R) -> Result<DenseNet> {
        validate_dims(dims)?;
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::invalid(format!("dropout {dropout} outside [0, 1)")));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                Layer {
                    weights: Array2::from_shape_fn((w[0], w[1]), |_| rng.random_range(-bound..=bound)),
                    biases: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(DenseNet {
            dims: dims.to_vec(),
            layers,
            dropout,
        })
    }

    pub fn init_seeded(dims: &[usize], dropout: f64, seed: u64) -> Result<DenseNet> {
        Self::init(dims, dropout, &mut stream(seed, Stream::Init, 0))
    }

    pub fn from_layers(layers: Vec<Layer>, dropout: f64) -> Result<DenseNet> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        let mut dims = vec![layers[0].weights.nrows()];
        for (i, l) in layers.iter().enumerate() {
            if l.weights.nrows() != *dims.last().unwrap() || l.biases.len() != l.weights.ncols() {
                return Err(Error::invalid(format!("layer {i}: incompatible shapes")));
            }
            dims.push(l.weights.ncols());
        }
        validate_dims(&dims)?;
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::invalid(format!("dropout {dropout} outside [0, 1)")));
        }
        Ok(DenseNet {
            dims,
            layers,
            dropout,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn forward(&self, input: &[f64], mode: Mode<'_>) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::invalid(e.to_string()))?;
        Ok(self.forward_batch(x, mode)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, f64>, mode: Mode<'_>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let (out, _) = self.run(x, mode);
        Ok(out)
    }

    /// Weighted squared-error loss `Σ_r w_r ‖ŷ_r − y_r‖²` and its gradient.
    pub fn backward_weighted(
        &self,
        x: ArrayView2<'_, f64>,
        y: ArrayView2<'_, f64>,
        row_weights: &[f64],
        mode: Mode<'_>,
    ) -> Result<Backward> {
        self.check_input(x.ncols())?;
        if y.ncols() != self.output_dim() || y.nrows() != x.nrows() || row_weights.len() != x.nrows()
        {
            return Err(Error::invalid(format!(
                "targets {:?} / weights {} do not match inputs {:?}",
                y.dim(),
                row_weights.len(),
                x.dim()
            )));
        }
        let (out, cache) = self.run(x, mode);
        let diff = &out - &y;
        let row_errors: Vec<f64> = diff.rows().into_iter().map(|r| r.dot(&r)).collect();
        let loss = row_errors.iter().zip(row_weights).map(|(e, w)| e * w).sum();

        let coef = Array1::from_iter(row_weights.iter().map(|w| 2.0 * w));
        let mut delta = diff * &coef.insert_axis(Axis(1));
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let a_in = if l == 0 { x } else { cache.activations[l - 1].view() };
            let gw = a_in.t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            if l > 0 {
                delta = delta.dot(&self.layers[l].weights.t()) * &cache.derivs[l - 1];
            }
            grads.push(Layer {
                weights: gw,
                biases: gb,
            });
        }
        grads.reverse();
        Ok(Backward {
            loss,
            row_errors,
            grads,
        })
    }

    /// Mean over rows of `‖ŷ − y‖²`.
    pub fn backward(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, mode: Mode<'_>) -> Result<Backward> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        self.backward_weighted(x, y, &vec![1.0 / n as f64; n], mode)
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::invalid(format!(
                "input dimension {cols} does not match network input {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn run(&self, x: ArrayView2<'_, f64>, mut mode: Mode<'_>) -> (Array2<f64>, Cache) {
        let last = self.layers.len() - 1;
        let mut cache = Cache {
            activations: Vec::with_capacity(last),
            derivs: Vec::with_capacity(last),
        };
        let keep = 1.0 - self.dropout;
        let mut out = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let input = if l == 0 { x } else { cache.activations[l - 1].view() };
            let mut z = input.dot(&layer.weights);
            z += &layer.biases;
            if l == last {
                out = Some(z);
                break;
            }
            let mut deriv = z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            if let Mode::Train(rng) = &mut mode {
                if self.dropout > 0.0 {
                    deriv.mapv_inplace(|d| if rng.random::<f64>() < keep { d / keep } else { 0.0 });
                }
            }
            z.zip_mut_with(&deriv, |v, d| *v = if *v > 0.0 { *v * d } else { 0.0 });
            cache.activations.push(z);
            cache.derivs.push(deriv);
        }
        (out.expect("at least one layer"), cache)
    }

    /// Parameters flattened layer by layer: row-major weights then biases.
    pub fn params_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            l.weights.iter_mut().zip(&mut it).for_each(|(w, v)| *w = *v);
            l.biases.iter_mut().zip(&mut it).for_each(|(b, v)| *b = *v);
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, fingerprint: Option<String>) -> NetCheckpoint {
        NetCheckpoint {
            dims: self.dims.clone(),
            dropout: self.dropout,
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    weights: l.weights.iter().copied().collect(),
                    biases: l.biases.to_vec(),
                })
                .collect(),
            fingerprint,
        }
    }

    pub fn from_checkpoint(ckpt: &NetCheckpoint) -> Result<DenseNet> {
        validate_dims(&ckpt.dims)?;
        if ckpt.layers.len() != ckpt.dims.len() - 1 {
            return Err(Error::parse("checkpoint", "layer count does not match dims"));
        }
        let layers = ckpt
            .dims
            .windows(2)
            .zip(&ckpt.layers)
            .enumerate()
            .map(|(i, (w, rec))| {
                if rec.biases.len() != w[1] || rec.weights.len() != w[0] * w[1] {
                    return Err(Error::parse("checkpoint", format!("layer {i}: wrong size")));
                }
                if rec.weights.iter().chain(&rec.biases).any(|v| !v.is_finite()) {
                    return Err(Error::parse("checkpoint", format!("layer {i}: non-finite value")));
                }
                Ok(Layer {
                    weights: Array2::from_shape_vec((w[0], w[1]), rec.weights.clone())
                        .map_err(|e| Error::parse("checkpoint", e.to_string()))?,
                    biases: Array1::from(rec.biases.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        DenseNet::from_layers(layers, ckpt.dropout).map_err(|e| Error::parse("checkpoint", e.to_string()))
    }
}

struct Cache {
    /// Post-activation (and post-dropout) output of each hidden layer.
    activations: Vec<Array2<f64>>,
    /// `relu'(z) * mask / keep` for each hidden layer.
    derivs: Vec<Array2<f64>>,
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::invalid(format!(
            "layer dimensions {dims:?} need at least two positive entries"
        )));
    }
    Ok(())
}

pub fn flatten(layers: &[Layer]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub dims: Vec<usize>,
    pub dropout: f64,
    pub layers: Vec<LayerRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Bias-corrected Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Layer>,
    second: Vec<Layer>,
    step: u64,
}

impl AdamState {
    pub fn new(net: &DenseNet, config: AdamConfig) -> AdamState {
        let zeros: Vec<Layer> = net.layers.iter().map(Layer::zeros_like).collect();
        AdamState {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, net: &mut DenseNet, grads: &[Layer]) -> Result<()> {
        if grads.len() != net.layers.len()
            || grads
                .iter()
                .zip(&net.layers)
                .any(|(g, l)| g.weights.dim() != l.weights.dim() || g.biases.dim() != l.biases.dim())
        {
            return Err(Error::invalid("gradient shapes do not match parameters"));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
            weight_decay: wd,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
        };
        for (((layer, g), m), v) in net
            .layers
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            ndarray::Zip::from(&mut layer.weights)
                .and(&g.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut layer.biases)
                .and(&g.biases)
                .and(&mut m.biases)
                .and(&mut v.biases)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
        Ok(())
    }
}
