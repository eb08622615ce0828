//! Utility and privacy measurements for released representations.
//!
//! Utility is the test accuracy of a softmax classifier trained on the
//! flattened representations. Privacy loss is the mean PSNR of images
//! reconstructed by a linear ridge map fitted on the training split. Both
//! models are small stand-ins for the deep networks a real cloud service or
//! attacker would train, so the reported PSNR bounds attack power from below.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, SplitDataset};
use crate::error::{Error, Result};
use crate::fen::Fen;
use crate::linalg::{Cholesky, Matrix};
use crate::seed::rng_for;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub rate: f64,
    pub batch: usize,
    pub seed: u64,
    /// Width of an optional relu hidden layer.
    #[serde(default)]
    pub hidden: Option<usize>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 60,
            rate: 0.5,
            batch: 32,
            seed: 0,
            hidden: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalHyper {
    pub train: TrainHyper,
    /// Ridge penalty of the reconstructor.
    pub lambda: f64,
    pub psnr_cap: f64,
    pub peak: f64,
}

impl Default for EvalHyper {
    fn default() -> Self {
        EvalHyper {
            train: TrainHyper::default(),
            lambda: 1e-3,
            psnr_cap: DEFAULT_PSNR_CAP,
            peak: 1.0,
        }
    }
}

pub const DEFAULT_PSNR_CAP: f64 = 60.0;

const MIN_RATE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Softmax classifier on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub hidden: Option<HiddenLayer>,
    /// `(hidden width or feature dim) x K`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub num_classes: usize,
    pub hyper: TrainHyper,
    pub final_rate: f64,
    /// Full-training-set loss before training and after every epoch.
    pub loss_history: Vec<f64>,
}

impl ClassifierModel {
    pub fn final_loss(&self) -> f64 {
        *self.loss_history.last().expect("history has the initial loss")
    }

    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.feature_mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} features, model expects {}",
                features.cols(),
                self.feature_mean.len()
            )));
        }
        let z = standardize(features, &self.feature_mean, &self.feature_scale);
        Ok(forward(&z, self.hidden.as_ref(), &self.weights, &self.bias).1)
    }

    /// Arg-max class per row, ties to the lowest index.
    pub fn predict(&self, features: &Matrix) -> Result<Vec<usize>> {
        let logits = self.logits(features)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn standardize(x: &Matrix, mean: &[f64], scale: &[f64]) -> Matrix {
    let mut z = x.clone();
    for i in 0..z.rows() {
        for ((v, m), s) in z.row_mut(i).iter_mut().zip(mean).zip(scale) {
            *v = (*v - m) / s;
        }
    }
    z
}

fn column_stats(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    let mut mean = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

fn relu_inplace(m: &mut Matrix) {
    for i in 0..m.rows() {
        m.row_mut(i).iter_mut().for_each(|v| *v = v.max(0.0));
    }
}

fn add_bias(m: &mut Matrix, b: &[f64]) {
    for i in 0..m.rows() {
        m.row_mut(i).iter_mut().zip(b).for_each(|(v, b)| *v += b);
    }
}

/// Returns `(hidden activations or z, logits)`.
fn forward(z: &Matrix, hidden: Option<&HiddenLayer>, w: &Matrix, b: &[f64]) -> (Matrix, Matrix) {
    let h = match hidden {
        Some(hl) => {
            let mut h = z.matmul(&hl.weights).expect("conforming");
            add_bias(&mut h, &hl.bias);
            relu_inplace(&mut h);
            h
        }
        None => z.clone(),
    };
    let mut logits = h.matmul(w).expect("conforming");
    add_bias(&mut logits, b);
    (h, logits)
}

/// Softmax in place; returns the summed cross-entropy against `labels`.
fn softmax_xent(logits: &mut Matrix, labels: &[usize]) -> f64 {
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
        loss -= row[y].max(f64::MIN_POSITIVE).ln();
    }
    loss
}

fn select_rows(x: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), x.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(x.row(i));
    }
    out
}

struct Params {
    hidden: Option<HiddenLayer>,
    w: Matrix,
    b: Vec<f64>,
}

impl Params {
    fn loss(&self, z: &Matrix, labels: &[usize]) -> f64 {
        let (_, mut logits) = forward(z, self.hidden.as_ref(), &self.w, &self.b);
        softmax_xent(&mut logits, labels) / labels.len() as f64
    }

    fn step(&mut self, z: &Matrix, labels: &[usize], rate: f64) {
        let (h, mut g) = forward(z, self.hidden.as_ref(), &self.w, &self.b);
        softmax_xent(&mut g, labels);
        let inv = 1.0 / labels.len() as f64;
        for (i, &y) in labels.iter().enumerate() {
            g[(i, y)] -= 1.0;
            g.row_mut(i).iter_mut().for_each(|v| *v *= inv);
        }
        let dw = h.transpose().matmul(&g).expect("conforming");
        let db = column_sums(&g);
        if let Some(hl) = self.hidden.as_mut() {
            let mut dh = g.matmul(&self.w.transpose()).expect("conforming");
            for i in 0..dh.rows() {
                for (d, a) in dh.row_mut(i).iter_mut().zip(h.row(i)) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let dw1 = z.transpose().matmul(&dh).expect("conforming");
            let db1 = column_sums(&dh);
            hl.weights = hl.weights.sub(&dw1.scale(rate)).expect("same shape");
            hl.bias.iter_mut().zip(&db1).for_each(|(b, d)| *b -= rate * d);
        }
        self.w = self.w.sub(&dw.scale(rate)).expect("same shape");
        self.b.iter_mut().zip(&db).for_each(|(b, d)| *b -= rate * d);
    }

    fn is_finite(&self) -> bool {
        let hidden_ok = self.hidden.as_ref().is_none_or(|h| {
            h.weights.data().iter().chain(&h.bias).all(|v| v.is_finite())
        });
        hidden_ok && self.w.data().iter().chain(&self.b).all(|v| v.is_finite())
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        s.iter_mut().zip(m.row(i)).for_each(|(a, v)| *a += v);
    }
    s
}

/// Seeded mini-batch gradient descent on the mean cross-entropy.
///
/// After every epoch the full training loss is compared with the last
/// checkpoint; if it went up (or is not finite) the epoch is undone and the
/// rate halved, so the recorded loss history never increases.
pub fn train_classifier(
    features: &Matrix,
    labels: &[usize],
    num_classes: usize,
    hyper: &TrainHyper,
) -> Result<ClassifierModel> {
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!("{n} feature rows, {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    if num_classes < 2 || labels.iter().any(|&l| l >= num_classes) {
        return Err(Error::InvalidArgument(format!(
            "labels must lie in 0..{num_classes} with at least 2 classes"
        )));
    }
    if features.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("classifier features".into()));
    }
    if hyper.batch == 0 || !(hyper.rate > 0.0) {
        return Err(Error::InvalidArgument("batch and rate must be positive".into()));
    }
    let (mean, scale) = column_stats(features);
    let z = standardize(features, &mean, &scale);
    let p = features.cols();
    let hidden = match hyper.hidden {
        Some(0) => return Err(Error::InvalidArgument("hidden width must be >= 1".into())),
        Some(h) => {
            let mut rng = rng_for(hyper.seed, "classifier/init", 0);
            let normal = Normal::new(0.0, (2.0 / p.max(1) as f64).sqrt()).expect("positive std");
            let w = (0..p * h).map(|_| normal.sample(&mut rng)).collect();
            Some(HiddenLayer {
                weights: Matrix::from_vec(p, h, w)?,
                bias: vec![0.0; h],
            })
        }
        None => None,
    };
    let width = hyper.hidden.unwrap_or(p);
    let mut params = Params {
        hidden,
        w: Matrix::zeros(width, num_classes),
        b: vec![0.0; num_classes],
    };
    let mut best = params.loss(&z, labels);
    if !best.is_finite() {
        return Err(Error::Divergence(format!("initial loss {best}")));
    }
    let mut history = vec![best];
    let mut rate = hyper.rate;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..hyper.epochs {
        let checkpoint = (params.hidden.clone(), params.w.clone(), params.b.clone());
        order.shuffle(&mut rng_for(hyper.seed, "classifier/epoch", epoch as u64));
        for chunk in order.chunks(hyper.batch) {
            let zb = select_rows(&z, chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            params.step(&zb, &yb, rate);
        }
        let loss = params.loss(&z, labels);
        if params.is_finite() && loss <= best {
            best = loss;
        } else {
            (params.hidden, params.w, params.b) = checkpoint;
            rate *= 0.5;
            if rate < MIN_RATE {
                if params.is_finite() && loss.is_finite() {
                    // No finite step improves the loss: converged.
                    history.push(best);
                    break;
                }
                return Err(Error::Divergence(format!(
                    "loss {loss} at epoch {epoch} (best {best}) is not finite even at rate {rate:e}"
                )));
            }
        }
        history.push(best);
    }
    Ok(ClassifierModel {
        feature_mean: mean,
        feature_scale: scale,
        hidden: params.hidden,
        weights: params.w,
        bias: params.b,
        num_classes,
        hyper: hyper.clone(),
        final_rate: rate,
        loss_history: history,
    })
}

/// Fraction of rows whose predicted class equals the label.
pub fn utility(model: &ClassifierModel, features: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != features.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows, {} labels",
            features.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no samples to score".into()));
    }
    let pred = model.predict(features)?;
    let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Linear map with intercept from features to pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructorModel {
    /// `features x pixels`.
    pub map: Matrix,
    pub intercept: Vec<f64>,
    pub lambda: f64,
    /// Training sum of squared reconstruction errors.
    pub residual: f64,
}

impl ReconstructorModel {
    pub fn predict(&self, features: &Matrix) -> Result<Matrix> {
        let mut out = features.matmul(&self.map)?;
        add_bias(&mut out, &self.intercept);
        Ok(out)
    }

    /// `Σ‖G·x_i + b − y_i‖² + λ‖G‖_F²`.
    pub fn objective(&self, features: &Matrix, images: &Matrix) -> Result<f64> {
        Ok(sum_sq_diff(&self.predict(features)?, images)?
            + self.lambda * self.map.frobenius_norm().powi(2))
    }
}

fn sum_sq_diff(a: &Matrix, b: &Matrix) -> Result<f64> {
    if (a.rows(), a.cols()) != (b.rows(), b.cols()) {
        return Err(Error::DimensionMismatch("prediction and target shapes differ".into()));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum())
}

fn center(x: &Matrix) -> (Matrix, Vec<f64>) {
    let n = x.rows() as f64;
    let mean: Vec<f64> = column_sums(x).into_iter().map(|s| s / n).collect();
    let mut c = x.clone();
    for i in 0..c.rows() {
        c.row_mut(i).iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
    }
    (c, mean)
}

/// Closed-form ridge regression with an unpenalized intercept.
///
/// Uses the `features x features` normal equations when there are at least
/// as many samples as features and the equivalent `samples x samples` kernel
/// form otherwise.
pub fn fit_reconstructor(features: &Matrix, images: &Matrix, lambda: f64) -> Result<ReconstructorModel> {
    let (n, p) = (features.rows(), features.cols());
    if images.rows() != n {
        return Err(Error::DimensionMismatch(format!("{n} feature rows, {} image rows", images.rows())));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    if features.data().iter().chain(images.data()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("reconstructor inputs".into()));
    }
    let (xc, x_mean) = center(features);
    let (yc, y_mean) = center(images);
    let singular = |e: Error| match e {
        Error::NotPositiveDefinite { pivot, value, .. } => Error::NotPositiveDefinite {
            pivot,
            value,
            hint: format!("normal equations are singular at lambda {lambda:e}; use lambda > 0"),
        },
        other => other,
    };
    let xt = xc.transpose();
    let map = if p <= n {
        let mut a = xc.gram();
        a.add_diagonal(lambda);
        Cholesky::factor(&a).map_err(singular)?.solve(&xt.matmul(&yc)?)?
    } else {
        let mut k = xt.gram();
        k.add_diagonal(lambda);
        let alpha = Cholesky::factor(&k).map_err(singular)?.solve(&yc)?;
        xt.matmul(&alpha)?
    };
    let shift = map.transpose().mat_vec(&x_mean);
    let intercept: Vec<f64> = y_mean.iter().zip(&shift).map(|(y, s)| y - s).collect();
    let mut model = ReconstructorModel {
        map,
        intercept,
        lambda,
        residual: 0.0,
    };
    model.residual = sum_sq_diff(&model.predict(features)?, images)?;
    if !model.residual.is_finite() {
        return Err(Error::NonFinite("reconstructor residual".into()));
    }
    Ok(model)
}

/// `10·log10(peak²/mse)`, capped; zero error gives the cap.
pub fn psnr_from_mse(mse: f64, peak: f64, cap: f64) -> f64 {
    if mse <= 0.0 {
        cap
    } else {
        (10.0 * (peak * peak / mse).log10()).min(cap)
    }
}

/// Per-image PSNR after clamping `reconstructed` to `[0, peak]`.
pub fn psnr(reconstructed: &Tensor, original: &Tensor, peak: f64, cap: f64) -> Result<Vec<f64>> {
    if reconstructed.dims() != original.dims() {
        return Err(Error::DimensionMismatch(format!(
            "reconstruction {:?} vs original {:?}",
            reconstructed.dims(),
            original.dims()
        )));
    }
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument("peak must be positive".into()));
    }
    Ok((0..original.n())
        .map(|i| {
            let r = reconstructed.sample(i);
            let o = original.sample(i);
            let mse = r
                .iter()
                .zip(o)
                .map(|(a, b)| (a.clamp(0.0, peak) - b).powi(2))
                .sum::<f64>()
                / o.len() as f64;
            psnr_from_mse(mse, peak, cap)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Test accuracy.
    pub utility: f64,
    /// Mean test PSNR in dB.
    pub privacy: f64,
}

/// Trains both models on the training representations and scores them on
/// the test split.
pub fn evaluate_representations(
    train_reps: &Tensor,
    test_reps: &Tensor,
    dataset: &SplitDataset,
    hyper: &EvalHyper,
) -> Result<Evaluation> {
    check_pairing(train_reps, &dataset.train)?;
    check_pairing(test_reps, &dataset.test)?;
    let (xtr, xte) = (train_reps.to_rows(), test_reps.to_rows());
    let clf = train_classifier(&xtr, &dataset.train.labels, dataset.train.num_classes, &hyper.train)?;
    let acc = utility(&clf, &xte, &dataset.test.labels)?;
    let rec = fit_reconstructor(&xtr, &dataset.train.images.to_rows(), hyper.lambda)?;
    let pred = rec.predict(&xte)?;
    let (n, c, h, w) = dataset.test.images.dims();
    let pred = Tensor::from_vec(n, c, h, w, pred.data().to_vec())?;
    let per_image = psnr(&pred, &dataset.test.images, hyper.peak, hyper.psnr_cap)?;
    Ok(Evaluation {
        utility: acc,
        privacy: per_image.iter().sum::<f64>() / per_image.len() as f64,
    })
}

fn check_pairing(reps: &Tensor, split: &LabeledDataset) -> Result<()> {
    if reps.n() != split.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} representations for {} samples",
            reps.n(),
            split.len()
        )));
    }
    if split.is_empty() {
        return Err(Error::InvalidArgument("empty split".into()));
    }
    Ok(())
}

pub fn evaluate_fen(fen: &Fen, dataset: &SplitDataset, hyper: &EvalHyper) -> Result<Evaluation> {
    let train = fen.forward(&dataset.train.images)?;
    let test = fen.forward(&dataset.test.images)?;
    evaluate_representations(&train, &test, dataset, hyper)
}
