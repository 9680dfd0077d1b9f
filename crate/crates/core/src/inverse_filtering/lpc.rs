use crate::error::{Error, Result};

/// All-pole predictor in prediction form: `x̂[n] = Σ a_k x[n-k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LpcModel {
    pub coefficients: Vec<f64>,
    pub reflection: Vec<f64>,
    pub gain: f64,
}

impl LpcModel {
    pub fn order(&self) -> usize {
        self.coefficients.len()
    }

    /// A predictor that predicts nothing; inverse filtering with it is the identity.
    pub fn identity() -> Self {
        LpcModel {
            coefficients: Vec::new(),
            reflection: Vec::new(),
            gain: 1.0,
        }
    }
}

/// `r_k = Σ_n x[n] x[n+k]` for `k = 0..=max_lag`.
pub fn autocorrelate(x: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    if max_lag >= x.len() {
        return Err(Error::InvalidArgument(format!(
            "max_lag {max_lag} must be below frame length {}",
            x.len()
        )));
    }
    Ok((0..=max_lag)
        .map(|k| x[..x.len() - k].iter().zip(&x[k..]).map(|(a, b)| a * b).sum())
        .collect())
}

/// Solves the Toeplitz normal equations for an order-`order` predictor.
pub fn levinson_durbin(autocorr: &[f64], order: usize) -> Result<LpcModel> {
    if autocorr.len() < order + 1 {
        return Err(Error::InvalidArgument(format!(
            "order {order} needs {} autocorrelation lags, got {}",
            order + 1,
            autocorr.len()
        )));
    }
    let r0 = autocorr[0];
    if !(r0 > 0.0) {
        return Err(Error::NonPositiveEnergy(r0));
    }
    let mut a = vec![0.0; order];
    let mut prev = vec![0.0; order];
    let mut reflection = Vec::with_capacity(order);
    let mut err = r0;
    for i in 0..order {
        let acc = autocorr[i + 1] - (0..i).map(|j| a[j] * autocorr[i - j]).sum::<f64>();
        let k = acc / err;
        prev[..i].copy_from_slice(&a[..i]);
        for j in 0..i {
            a[j] = prev[j] - k * prev[i - 1 - j];
        }
        a[i] = k;
        reflection.push(k);
        err *= 1.0 - k * k;
        if !(err > 0.0) || !k.is_finite() {
            return Err(Error::DegenerateLpc {
                order: i + 1,
                error: err,
            });
        }
    }
    Ok(LpcModel {
        coefficients: a,
        reflection,
        gain: err.sqrt(),
    })
}

/// FIR inverse filter `y[n] = x[n] - Σ a_k x[n-k]` with zero history.
pub fn inverse_filter(x: &[f64], lpc: &LpcModel) -> Vec<f64> {
    let a = &lpc.coefficients;
    (0..x.len())
        .map(|n| {
            let pred: f64 = a
                .iter()
                .enumerate()
                .take_while(|(k, _)| *k < n)
                .map(|(k, ak)| ak * x[n - k - 1])
                .sum();
            x[n] - pred
        })
        .collect()
}

/// All-pole synthesis `y[n] = e[n] + Σ a_k y[n-k]`, the inverse of [`inverse_filter`].
pub fn synthesize(excitation: &[f64], lpc: &LpcModel) -> Vec<f64> {
    let a = &lpc.coefficients;
    let mut y = Vec::with_capacity(excitation.len());
    for (n, &e) in excitation.iter().enumerate() {
        let fb: f64 = a
            .iter()
            .enumerate()
            .take_while(|(k, _)| *k < n)
            .map(|(k, ak)| ak * y[n - k - 1])
            .sum();
        y.push(e + fb);
    }
    y
}

/// `y[n] = x[n] + leak * y[n-1]`.
pub fn leaky_integrate(x: &[f64], leak: f64) -> Vec<f64> {
    let mut acc = 0.0;
    x.iter()
        .map(|&v| {
            acc = v + leak * acc;
            acc
        })
        .collect()
}

/// Symmetric Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}
