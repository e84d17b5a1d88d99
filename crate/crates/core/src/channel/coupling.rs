use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::CouplingModel;
use crate::rng::{Domain, RandomSource};
use crate::{Error, Result};

/// Stationary log-normal coupling process with exponential autocorrelation.
///
/// The log-space state is an Ornstein-Uhlenbeck process sampled exactly at
/// fixed steps, `x' = a x + sqrt(1 - a^2) n` with `a = exp(-dt / tau)`.
#[derive(Debug, Clone)]
pub struct CouplingProcess<R> {
    model: CouplingModel,
    a: f64,
    b: f64,
    x: f64,
    rng: R,
}

impl<R: Rng> CouplingProcess<R> {
    pub fn new(model: CouplingModel, dt_s: f64, mut rng: R) -> Result<Self> {
        model.validate()?;
        if !(dt_s > 0.0) {
            return Err(Error::invalid("coupling step must be positive"));
        }
        if dt_s > model.correlation_time_s / 10.0 * (1.0 + 1e-12) {
            return Err(Error::invalid(format!(
                "coupling step {dt_s} s exceeds a tenth of the correlation time"
            )));
        }
        let a = (-dt_s / model.correlation_time_s).exp();
        let x = StandardNormal.sample(&mut rng);
        Ok(Self {
            model,
            a,
            b: (1.0 - a * a).sqrt(),
            x,
            rng,
        })
    }

    pub fn model(&self) -> &CouplingModel {
        &self.model
    }

    /// Efficiency for the current step at the given mean, then advances.
    pub fn next_at(&mut self, mean: f64) -> f64 {
        let eta = self.model.efficiency(mean, self.x);
        let n: f64 = StandardNormal.sample(&mut self.rng);
        self.x = self.a * self.x + self.b * n;
        eta
    }
}

/// Coupling efficiency sampled every `dt_s` over `duration_s`.
pub fn sample_coupling_series(
    duration_s: f64,
    dt_s: f64,
    model: &CouplingModel,
    rng: &RandomSource,
) -> Result<Vec<f64>> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::invalid(format!("duration {duration_s} s must be positive")));
    }
    let mut p = CouplingProcess::new(*model, dt_s, rng.stream(Domain::Coupling, 0))?;
    let n = (duration_s / dt_s).ceil() as usize;
    Ok((0..n).map(|_| p.next_at(model.mean_efficiency)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(xs: &[f64]) -> f64 {
        xs.iter().sum::<f64>() / xs.len() as f64
    }

    #[test]
    fn corrected_mean_near_four_percent() {
        let m = CouplingModel { mean_efficiency: 0.04, ..CouplingModel::corrected() };
        let xs = sample_coupling_series(600.0, 1e-3, &m, &RandomSource::new(5)).unwrap();
        assert_eq!(xs.len(), 600_000);
        let mu = mean(&xs);
        assert!((0.035..=0.045).contains(&mu), "{mu}");
        assert!(xs.iter().all(|&x| x > 0.0 && x <= 1.0));
    }

    #[test]
    fn uncorrected_mean_near_one_percent() {
        let xs = sample_coupling_series(600.0, 1e-3, &CouplingModel::uncorrected(), &RandomSource::new(6)).unwrap();
        let mu = mean(&xs);
        assert!((0.008..=0.012).contains(&mu), "{mu}");
    }

    #[test]
    fn zero_sigma_is_constant() {
        let m = CouplingModel { lognormal_sigma: 0.0, ..CouplingModel::corrected() };
        let xs = sample_coupling_series(1.0, 1e-3, &m, &RandomSource::new(1)).unwrap();
        assert!(xs.iter().all(|&x| x == m.mean_efficiency));
    }

    #[test]
    fn autocorrelation_is_exponential() {
        let m = CouplingModel::corrected();
        let xs = sample_coupling_series(2000.0, 1e-3, &m, &RandomSource::new(9)).unwrap();
        let logs: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
        let mu = mean(&logs);
        let var = logs.iter().map(|l| (l - mu).powi(2)).sum::<f64>() / logs.len() as f64;
        assert!((var.sqrt() - m.lognormal_sigma).abs() < 0.01);
        for lag in [5usize, 10, 20] {
            let c = logs.iter().zip(&logs[lag..]).map(|(a, b)| (a - mu) * (b - mu)).sum::<f64>()
                / (logs.len() - lag) as f64
                / var;
            let expected = (-(lag as f64) * 1e-3 / m.correlation_time_s).exp();
            assert!((c - expected).abs() < 0.03, "lag {lag}: {c} vs {expected}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = CouplingModel::corrected();
        let src = RandomSource::new(0);
        assert!(sample_coupling_series(0.0, 1e-3, &m, &src).is_err());
        assert!(sample_coupling_series(-1.0, 1e-3, &m, &src).is_err());
        assert!(sample_coupling_series(1.0, 5e-3, &m, &src).is_err());
    }
}
