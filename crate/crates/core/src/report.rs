use serde::Serialize;

/// A bound value broken down into the terms it is assembled from.
///
/// `total = likelihood_term - Σ kl_terms - Σ compression_terms - Σ propagation_terms`.
///
/// `likelihood_term` is the expected log-likelihood of the targets under the
/// output layer's `q(u)`. It splits as `likelihood_fit - likelihood_trace`: the
/// Gaussian log-density at the predicted mean and the penalty
/// `D/(2σ²) tr(S K⁻¹ΨᵀΨK⁻¹)` for the spread of `q(u)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub total: f64,
    pub likelihood_term: f64,
    pub likelihood_fit: f64,
    pub likelihood_trace: f64,
    pub kl_terms: Vec<f64>,
    /// Layer 1 holds the deterministic-input TCV; later layers hold `ψ - tr(ΦK⁻¹)`.
    pub compression_terms: Vec<f64>,
    /// One entry per layer after the first.
    pub propagation_terms: Vec<f64>,
    /// Data-dependent part of the bound, one entry per datum evaluated.
    pub per_datum_partials: Vec<f64>,
    /// Message variances that hit the floor during the forward pass.
    pub clamp_events: usize,
}

impl BoundReport {
    /// Recomputes the total from its parts.
    pub fn sum_of_terms(&self) -> f64 {
        self.likelihood_term
            - self.kl_terms.iter().sum::<f64>()
            - self.compression_terms.iter().sum::<f64>()
            - self.propagation_terms.iter().sum::<f64>()
    }

    /// Everything except the KL terms.
    pub fn data_part(&self) -> f64 {
        self.total + self.kl_terms.iter().sum::<f64>()
    }

    /// Rows of `(name, value)` for printing.
    pub fn term_table(&self) -> Vec<(String, f64)> {
        let mut rows = vec![
            ("likelihood".to_string(), self.likelihood_term),
            ("  fit".to_string(), self.likelihood_fit),
            ("  trace".to_string(), -self.likelihood_trace),
        ];
        for (i, v) in self.kl_terms.iter().enumerate() {
            rows.push((format!("kl[{}]", i + 1), -v));
        }
        for (i, v) in self.compression_terms.iter().enumerate() {
            rows.push((format!("compression[{}]", i + 1), -v));
        }
        for (i, v) in self.propagation_terms.iter().enumerate() {
            rows.push((format!("propagation[{}]", i + 2), -v));
        }
        rows.push(("total".to_string(), self.total));
        rows
    }
}
