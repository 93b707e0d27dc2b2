//! Squeezing-level algebra and campaign statistics.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("loss is undefined when squeezing and anti-squeezing are both at the shot-noise level")]
    DegenerateLevels,
    #[error("non-finite input")]
    NonFinite,
    #[error("variance must be positive (got {0})")]
    NonPositiveVariance(f64),
    #[error("need at least 2 non-outlier records, got {0}")]
    TooFewRecords(usize),
}

/// Why a measurement was excluded from statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutlierReason {
    /// A phase loop was relocking during the variance acquisition.
    RelockOverlap,
    /// The homodyne DC monitor clipped.
    Saturated,
    /// A lock could not be established.
    LockFailed,
}

impl OutlierReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            OutlierReason::RelockOverlap => "relock_overlap",
            OutlierReason::Saturated => "saturated",
            OutlierReason::LockFailed => "lock_failed",
        }
    }
}

/// One squeezing measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRecord {
    /// Nominal campaign time of the measurement start, in seconds.
    pub t_s: f64,
    pub sq_db: f64,
    pub asq_db: f64,
    /// Mean shot-noise variance used as reference.
    pub shot_ref: f64,
    /// Loss inferred from the two levels; `None` for outliers.
    pub loss_est: Option<f64>,
    pub outlier: bool,
    pub reason: Option<OutlierReason>,
}

fn db_to_lin(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Expected squeezing and anti-squeezing levels (dB relative to shot noise)
/// for squeeze parameter `r` and total loss `loss`.
pub fn levels_from_r_l(r: f64, loss: f64) -> (f64, f64) {
    let sq = loss + (1.0 - loss) * (-2.0 * r).exp();
    let asq = loss + (1.0 - loss) * (2.0 * r).exp();
    (10.0 * sq.log10(), 10.0 * asq.log10())
}

/// Total loss inferred from measured squeezing and anti-squeezing levels.
pub fn loss_from_levels(sq_db: f64, asq_db: f64) -> Result<f64, AnalysisError> {
    if !sq_db.is_finite() || !asq_db.is_finite() {
        return Err(AnalysisError::NonFinite);
    }
    let s = db_to_lin(sq_db);
    let a = db_to_lin(asq_db);
    let den = 2.0 - s - a;
    if den.abs() < 1e-12 {
        return Err(AnalysisError::DegenerateLevels);
    }
    Ok((1.0 - s * a) / den)
}

/// Squeeze parameter reproducing `sq_db` at total loss `loss`.
pub fn r_from_squeezing(sq_db: f64, loss: f64) -> Option<f64> {
    let x = (db_to_lin(sq_db) - loss) / (1.0 - loss);
    if x > 0.0 && x <= 1.0 {
        Some(-0.5 * x.ln())
    } else {
        None
    }
}

pub fn level_from_variances(v: f64, v_shot: f64) -> Result<f64, AnalysisError> {
    if !v.is_finite() || !v_shot.is_finite() {
        return Err(AnalysisError::NonFinite);
    }
    if v_shot <= 0.0 {
        return Err(AnalysisError::NonPositiveVariance(v_shot));
    }
    if v <= 0.0 {
        return Err(AnalysisError::NonPositiveVariance(v));
    }
    Ok(10.0 * (v / v_shot).log10())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl SeriesStats {
    pub fn from_slice(x: &[f64]) -> Option<Self> {
        if x.is_empty() {
            return None;
        }
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let min = x.iter().copied().fold(f64::INFINITY, f64::min);
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(Self { mean, std: var.sqrt(), min, max })
    }

    pub fn excursion(&self) -> f64 {
        self.max - self.min
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignStats {
    pub used: usize,
    pub outliers: usize,
    pub sq_db: SeriesStats,
    pub asq_db: SeriesStats,
    pub loss: SeriesStats,
}

/// Statistics over non-outlier records.
pub fn summarize(records: &[MeasurementRecord]) -> Result<CampaignStats, AnalysisError> {
    let used: Vec<&MeasurementRecord> = records.iter().filter(|r| !r.outlier).collect();
    if used.len() < 2 {
        return Err(AnalysisError::TooFewRecords(used.len()));
    }
    let sq: Vec<f64> = used.iter().map(|r| r.sq_db).collect();
    let asq: Vec<f64> = used.iter().map(|r| r.asq_db).collect();
    // recompute rather than trust the stored estimate
    let loss = used
        .iter()
        .map(|r| loss_from_levels(r.sq_db, r.asq_db))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(CampaignStats {
        used: used.len(),
        outliers: records.len() - used.len(),
        sq_db: SeriesStats::from_slice(&sq).expect("non-empty"),
        asq_db: SeriesStats::from_slice(&asq).expect("non-empty"),
        loss: SeriesStats::from_slice(&loss).expect("non-empty"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_levels_rejected() {
        assert_eq!(loss_from_levels(0.0, 0.0), Err(AnalysisError::DegenerateLevels));
    }

    #[test]
    fn loss_round_trip_at_measured_levels() {
        let l = loss_from_levels(-4.42, 7.85).unwrap();
        let r = r_from_squeezing(-4.42, l).unwrap();
        let (sq, asq) = levels_from_r_l(r, l);
        assert!((sq + 4.42).abs() < 1e-9);
        assert!((asq - 7.85).abs() < 1e-9);
    }

    #[test]
    fn shot_level_is_zero_db() {
        assert_eq!(level_from_variances(2.0, 2.0).unwrap(), 0.0);
        assert!(level_from_variances(1.0, 0.0).is_err());
    }

    fn rec(sq: f64, asq: f64, outlier: bool) -> MeasurementRecord {
        MeasurementRecord {
            t_s: 0.0,
            sq_db: sq,
            asq_db: asq,
            shot_ref: 1.0,
            loss_est: None,
            outlier,
            reason: None,
        }
    }

    #[test]
    fn summarize_needs_two_clean_records() {
        let recs = vec![rec(-4.4, 7.8, false), rec(-40.0, 7.8, true)];
        assert_eq!(summarize(&recs), Err(AnalysisError::TooFewRecords(1)));
    }

    #[test]
    fn summarize_uses_population_std_and_skips_outliers() {
        let recs = vec![rec(-4.0, 8.0, false), rec(-5.0, 8.0, false), rec(-50.0, 1.0, true)];
        let s = summarize(&recs).unwrap();
        assert_eq!(s.used, 2);
        assert_eq!(s.outliers, 1);
        assert!((s.sq_db.mean + 4.5).abs() < 1e-12);
        assert!((s.sq_db.std - 0.5).abs() < 1e-12);
    }
}
