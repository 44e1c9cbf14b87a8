//! Learned shape model: a small regressor from bending angle to the 100 sampled points.

use super::shape::{bend_shape, CatheterShape, Frame, SHAPE_POINTS};
use crate::nn::{Activation, Adam, Gradients, Mlp, MlpDoc};
use crate::WEIGHTS_FORMAT_VERSION;
use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const OUTPUTS: usize = SHAPE_POINTS * 3;
/// Smoothing of the Euclidean loss at zero distance, mm.
const LOSS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ShapeModelError {
    #[error("dataset needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("bending range must be non-empty, got [{0}, {1}]")]
    EmptyRange(f64, f64),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid shape model document: {0}")]
    BadDocument(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSample {
    pub bending: f64,
    pub shape: CatheterShape,
}

/// Ground-truth shapes at `n` bending angles drawn uniformly from `range`.
pub fn generate_shape_dataset(
    n: usize,
    seed: u64,
    range: (f64, f64),
    active_length: f64,
) -> Result<Vec<ShapeSample>, ShapeModelError> {
    if n < 2 {
        return Err(ShapeModelError::TooFewSamples { needed: 2, got: n });
    }
    if !(range.0 < range.1) {
        return Err(ShapeModelError::EmptyRange(range.0, range.1));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let bending = rng.random_range(range.0..=range.1);
            ShapeSample {
                bending,
                shape: bend_shape(bending, active_length),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeFitConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Final learning rate as a fraction of the initial one (cosine schedule).
    pub final_lr_fraction: f64,
    pub validation_fraction: f64,
    pub seed: u64,
    /// Bending range used to normalise the network input, degrees.
    pub input_range: (f64, f64),
}

impl Default for ShapeFitConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 3000,
            learning_rate: 3e-3,
            final_lr_fraction: 0.01,
            validation_fraction: 0.2,
            seed: 0,
            input_range: (0.0, 160.0),
        }
    }
}

/// Held-out error statistics in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub train_mean_error: f64,
    pub validation_mean_error: f64,
    pub validation_max_error: f64,
    /// Mean held-out error of each of the 100 points, base to tip.
    pub validation_point_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeModel {
    pub net: Mlp,
    pub input_range: (f64, f64),
    /// Per-coordinate output standardisation, mm.
    pub output_mean: Vec<f64>,
    pub output_std: Vec<f64>,
    pub fit_report: FitReport,
}

/// Raw network output plus the same curve resampled at equal arc length.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapePrediction {
    pub raw: CatheterShape,
    pub equal_arc: CatheterShape,
}

impl ShapeModel {
    fn encode_inputs(&self, bendings: &[f64]) -> Array2<f64> {
        let (lo, hi) = self.input_range;
        Array2::from_shape_fn((bendings.len(), 1), |(i, _)| {
            2.0 * (bendings[i] - lo) / (hi - lo) - 1.0
        })
    }

    /// Predicted coordinates in mm, one row of 300 per input.
    pub fn predict_batch(&self, bendings: &[f64]) -> Array2<f64> {
        let mut out = self.net.forward(&self.encode_inputs(bendings));
        for mut row in out.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.output_mean[c] + self.output_std[c] * *v;
            }
        }
        out
    }

    pub fn predict_points(&self, bending: f64) -> Vec<Vector3<f64>> {
        let row = self.predict_batch(&[bending]);
        (0..SHAPE_POINTS)
            .map(|k| Vector3::new(row[[0, 3 * k]], row[[0, 3 * k + 1]], row[[0, 3 * k + 2]]))
            .collect()
    }

    /// Mean Euclidean per-point loss and its parameter gradient on a batch.
    pub fn loss_and_gradient(&self, bendings: &[f64], targets: &Array2<f64>) -> (f64, Gradients) {
        let (out, cache) = self.net.forward_cached(&self.encode_inputs(bendings));
        let n = bendings.len();
        let norm = 1.0 / (n * SHAPE_POINTS) as f64;
        let mut grad = Array2::zeros(out.raw_dim());
        let mut total = 0.0;
        for i in 0..n {
            for k in 0..SHAPE_POINTS {
                let mut d = [0.0; 3];
                for (a, dv) in d.iter_mut().enumerate() {
                    let c = 3 * k + a;
                    *dv = self.output_mean[c] + self.output_std[c] * out[[i, c]] - targets[[i, c]];
                }
                let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + LOSS_EPS * LOSS_EPS).sqrt();
                total += dist;
                for (a, dv) in d.iter().enumerate() {
                    let c = 3 * k + a;
                    grad[[i, c]] = norm * self.output_std[c] * dv / dist;
                }
            }
        }
        let (g, _) = self.net.backward(&cache, &grad);
        (total * norm, g)
    }

    pub fn to_doc(&self) -> ShapeModelDoc {
        ShapeModelDoc {
            format_version: WEIGHTS_FORMAT_VERSION,
            kind: "shape_model".into(),
            net: self.net.to_doc(),
            input_range: self.input_range,
            output_mean: self.output_mean.clone(),
            output_std: self.output_std.clone(),
            fit_report: self.fit_report.clone(),
        }
    }

    pub fn from_doc(doc: &ShapeModelDoc) -> Result<Self, ShapeModelError> {
        if doc.format_version != WEIGHTS_FORMAT_VERSION || doc.kind != "shape_model" {
            return Err(ShapeModelError::BadDocument(format!(
                "expected shape_model v{WEIGHTS_FORMAT_VERSION}, got {} v{}",
                doc.kind, doc.format_version
            )));
        }
        let net = Mlp::from_doc(&doc.net).map_err(ShapeModelError::BadDocument)?;
        if net.input_size() != 1
            || net.output_size() != OUTPUTS
            || doc.output_mean.len() != OUTPUTS
            || doc.output_std.len() != OUTPUTS
        {
            return Err(ShapeModelError::BadDocument(
                "network must map 1 input to 300 outputs".into(),
            ));
        }
        Ok(Self {
            net,
            input_range: doc.input_range,
            output_mean: doc.output_mean.clone(),
            output_std: doc.output_std.clone(),
            fit_report: doc.fit_report.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeModelDoc {
    pub format_version: u32,
    pub kind: String,
    pub net: MlpDoc,
    pub input_range: (f64, f64),
    pub output_mean: Vec<f64>,
    pub output_std: Vec<f64>,
    pub fit_report: FitReport,
}

fn targets_of(samples: &[&ShapeSample]) -> Array2<f64> {
    Array2::from_shape_fn((samples.len(), OUTPUTS), |(i, c)| {
        samples[i].shape.points[c / 3][c % 3]
    })
}

/// Per-point Euclidean errors of `model` on `samples`, `(sample, point)`.
fn point_errors(model: &ShapeModel, samples: &[&ShapeSample]) -> Array2<f64> {
    let bendings: Vec<f64> = samples.iter().map(|s| s.bending).collect();
    let pred = model.predict_batch(&bendings);
    Array2::from_shape_fn((samples.len(), SHAPE_POINTS), |(i, k)| {
        let p = &samples[i].shape.points[k];
        let d = Vector3::new(
            pred[[i, 3 * k]] - p.x,
            pred[[i, 3 * k + 1]] - p.y,
            pred[[i, 3 * k + 2]] - p.z,
        );
        d.norm()
    })
}

/// Train the regressor by full-batch Adam on the mean per-point Euclidean error.
///
/// The dataset is shuffled with `cfg.seed` and split into disjoint training and held-out
/// parts; the report is computed on the held-out part (or on the training part when the
/// dataset is too small to hold anything out).
pub fn fit_shape_model(
    dataset: &[ShapeSample],
    cfg: &ShapeFitConfig,
) -> Result<ShapeModel, ShapeModelError> {
    if dataset.is_empty() {
        return Err(ShapeModelError::TooFewSamples { needed: 1, got: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((dataset.len() as f64) * cfg.validation_fraction).round() as usize;
    let n_val = n_val.min(dataset.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let train: Vec<&ShapeSample> = train_idx.iter().map(|&i| &dataset[i]).collect();
    let val: Vec<&ShapeSample> = if val_idx.is_empty() {
        train.clone()
    } else {
        val_idx.iter().map(|&i| &dataset[i]).collect()
    };

    let targets = targets_of(&train);
    let mut output_mean = vec![0.0; OUTPUTS];
    let mut output_std = vec![1.0; OUTPUTS];
    let nt = train.len() as f64;
    for c in 0..OUTPUTS {
        let col = targets.column(c);
        let mean = col.sum() / nt;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nt;
        output_mean[c] = mean;
        // flat coordinates keep unit scale
        output_std[c] = if var.sqrt() > 1e-6 { var.sqrt() } else { 1.0 };
    }

    let mut sizes = vec![1];
    sizes.extend(&cfg.hidden);
    sizes.push(OUTPUTS);
    let net = Mlp::new(&sizes, Activation::Tanh, &mut rng);
    let mut model = ShapeModel {
        net,
        input_range: cfg.input_range,
        output_mean,
        output_std,
        fit_report: FitReport {
            epochs: 0,
            n_train: train.len(),
            n_validation: val.len(),
            train_mean_error: 0.0,
            validation_mean_error: 0.0,
            validation_max_error: 0.0,
            validation_point_mean: vec![],
        },
    };

    let bendings: Vec<f64> = train.iter().map(|s| s.bending).collect();
    let mut opt = Adam::new(&model.net, cfg.learning_rate);
    for epoch in 0..cfg.epochs {
        let progress = epoch as f64 / cfg.epochs.max(1) as f64;
        let floor = cfg.final_lr_fraction;
        opt.lr = cfg.learning_rate
            * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let (loss, grads) = model.loss_and_gradient(&bendings, &targets);
        if !loss.is_finite() || !grads.is_finite() {
            return Err(ShapeModelError::NonFiniteLoss { epoch });
        }
        opt.step(&mut model.net, &grads);
    }

    let train_err = point_errors(&model, &train);
    let val_err = point_errors(&model, &val);
    let nv = val.len() as f64;
    model.fit_report = FitReport {
        epochs: cfg.epochs,
        n_train: train.len(),
        n_validation: val.len(),
        train_mean_error: train_err.mean().unwrap_or(0.0),
        validation_mean_error: val_err.mean().unwrap_or(0.0),
        validation_max_error: val_err.iter().copied().fold(0.0, f64::max),
        validation_point_mean: (0..SHAPE_POINTS)
            .map(|k| val_err.column(k).sum() / nv)
            .collect(),
    };
    Ok(model)
}

fn frame_from_tangent(tip: Vector3<f64>, tangent: Vector3<f64>) -> Frame {
    let z = tangent.normalize();
    let mut x = Vector3::x() - z * z.x;
    if x.norm() < 1e-9 {
        x = Vector3::y() - z * z.y;
    }
    let x = x.normalize();
    let y = z.cross(&x);
    Frame {
        position: tip,
        rotation: Matrix3::from_columns(&[x, y, z]),
    }
}

fn shape_from_points(points: Vec<Vector3<f64>>) -> CatheterShape {
    let n = points.len();
    let tangent = points[n - 1] - points[n - 2];
    let tangent = if tangent.norm() > 0.0 { tangent } else { Vector3::z() };
    CatheterShape {
        tip_frame: frame_from_tangent(points[n - 1], tangent),
        points,
    }
}

/// Resample a polyline at `n` points equally spaced in arc length, keeping both ends.
pub fn resample_equal_arc(points: &[Vector3<f64>], n: usize) -> Vec<Vector3<f64>> {
    let mut cum = vec![0.0];
    for w in points.windows(2) {
        let last = *cum.last().unwrap();
        cum.push(last + (w[1] - w[0]).norm());
    }
    let total = *cum.last().unwrap();
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for i in 0..n {
        let s = total * i as f64 / (n - 1) as f64;
        while seg + 2 < cum.len() && cum[seg + 1] < s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { ((s - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        out.push(points[seg] + (points[seg + 1] - points[seg]) * t);
    }
    out
}

/// Shape predicted at `bending`, in the local frame of the bendable segment.
pub fn predict_shape(model: &ShapeModel, bending: f64) -> ShapePrediction {
    let raw = model.predict_points(bending);
    let equal = resample_equal_arc(&raw, SHAPE_POINTS);
    ShapePrediction {
        raw: shape_from_points(raw),
        equal_arc: shape_from_points(equal),
    }
}
