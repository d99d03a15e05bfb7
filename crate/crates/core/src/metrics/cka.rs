use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{check_dim, Error, Result};
use crate::nn::MlpModel;
use crate::stream::{to_batch, BiasedSample};

fn centered(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    &x - &mean
}

fn frobenius_sq(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Linear centered kernel alignment between two representations of the same
/// `n` inputs (rows aligned). Columns are centered internally.
pub fn cka_linear(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<f64> {
    check_dim("cka rows", x.nrows(), y.nrows())?;
    if x.nrows() < 2 {
        return Err(Error::Empty("cka needs at least two rows".into()));
    }
    let xc = centered(x);
    let yc = centered(y);
    let cross = frobenius_sq(&yc.t().dot(&xc));
    let xx = frobenius_sq(&xc.t().dot(&xc)).sqrt();
    let yy = frobenius_sq(&yc.t().dot(&yc)).sqrt();
    let denom = xx * yy;
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::ZeroVariance);
    }
    Ok((cross / denom).clamp(0.0, 1.0))
}

/// CKA between penultimate features of original and bias-flipped samples.
pub fn cka_bias_probe(model: &MlpModel, pairs: &[(&BiasedSample, &BiasedSample)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Missing("cka probe pairs".into()));
    }
    let originals: Vec<&BiasedSample> = pairs.iter().map(|p| p.0).collect();
    let flipped: Vec<&BiasedSample> = pairs.iter().map(|p| p.1).collect();
    let fx = model.extract_features(to_batch(&originals)?.inputs.view())?;
    let fy = model.extract_features(to_batch(&flipped)?.inputs.view())?;
    cka_linear(fx.view(), fy.view())
}
