use crate::error::{Error, Result};

/// MSD values on a lag-time grid, optionally bracketed by 95% bounds.
///
/// Units follow the data: lags in seconds, MSD in squared micrometers for
/// analyzed stacks (squared pixels for raw simulations with unit pixel size).
#[derive(Debug, Clone, PartialEq)]
pub struct MsdCurve {
    pub lags: Vec<f64>,
    pub msd: Vec<f64>,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

impl MsdCurve {
    pub fn new(lags: Vec<f64>, msd: Vec<f64>) -> Result<Self> {
        if lags.len() != msd.len() {
            return Err(Error::validation(format!(
                "lag count {} does not match msd count {}",
                lags.len(),
                msd.len()
            )));
        }
        Ok(MsdCurve { lags, msd, lower: None, upper: None })
    }

    pub fn with_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != self.len() || upper.len() != self.len() {
            return Err(Error::validation("bound length does not match curve length"));
        }
        self.lower = Some(lower);
        self.upper = Some(upper);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.lags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lags.is_empty()
    }

    pub fn has_bounds(&self) -> bool {
        self.lower.is_some() && self.upper.is_some()
    }

    /// Checks that lags are positive and strictly increasing and MSD is positive.
    pub fn validate_positive(&self) -> Result<()> {
        if self.lags.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(Error::validation("lag times must be positive and finite"));
        }
        if self.lags.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation("lag times must be strictly increasing"));
        }
        if let Some(k) = self.msd.iter().position(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(Error::validation(format!(
                "msd must be positive and finite (index {k}, value {})",
                self.msd[k]
            )));
        }
        Ok(())
    }

    /// Scales MSD values and bounds by `factor`, e.g. 1e-12 for µm² → m².
    pub fn scaled(&self, factor: f64) -> MsdCurve {
        let scale = |v: &Vec<f64>| v.iter().map(|x| x * factor).collect::<Vec<_>>();
        MsdCurve {
            lags: self.lags.clone(),
            msd: scale(&self.msd),
            lower: self.lower.as_ref().map(scale),
            upper: self.upper.as_ref().map(scale),
        }
    }
}
