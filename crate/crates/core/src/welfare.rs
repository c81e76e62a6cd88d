//! Generalized p-means and the analytic quantities derived from them.
//!
//! For a strictly positive vector `x` of length `N` the p-mean is
//! `((1/N) Σ xᵢᵖ)^(1/p)`, with the limits `min x` at `p = −∞` and the geometric
//! mean at `p = 0`. Every evaluation runs in log space: the value returned by
//! [`p_mean`] is `exp` of [`log_p_mean`].

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Below this magnitude a finite `p` is evaluated through the geometric-mean branch.
pub const NEAR_ZERO_P: f64 = 1e-8;

/// A point of the extended line `[−∞, 1]` selecting one welfare function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PValue {
    NegInfinity,
    Finite(f64),
}

impl PValue {
    pub const ONE: PValue = PValue::Finite(1.0);

    /// Builds a finite p, rejecting NaN, infinities and values above 1.
    pub fn finite(value: f64) -> Result<Self> {
        if !value.is_finite() || value > 1.0 {
            return Err(Error::Domain(format!("p must be a finite real ≤ 1, got {value}")));
        }
        Ok(PValue::Finite(value))
    }

    pub fn is_neg_infinity(self) -> bool {
        matches!(self, PValue::NegInfinity)
    }

    /// The finite value, if any.
    pub fn value(self) -> Option<f64> {
        match self {
            PValue::NegInfinity => None,
            PValue::Finite(v) => Some(v),
        }
    }

    /// The value as an `f64`, mapping the tag to `f64::NEG_INFINITY`. Intended for display and plotting only.
    pub fn as_f64(self) -> f64 {
        self.value().unwrap_or(f64::NEG_INFINITY)
    }

    /// Canonical cache key: `-0.0` and `0.0` collapse and `−∞` gets its own key.
    pub fn key(self) -> PKey {
        match self {
            PValue::NegInfinity => PKey(None),
            PValue::Finite(v) => PKey(Some(if v == 0.0 { 0.0f64.to_bits() } else { v.to_bits() })),
        }
    }

    fn validate(self) -> Result<()> {
        match self {
            PValue::NegInfinity => Ok(()),
            PValue::Finite(v) if v.is_finite() && v <= 1.0 => Ok(()),
            PValue::Finite(v) => Err(Error::Domain(format!("p must be ≤ 1, got {v}"))),
        }
    }
}

impl Eq for PValue {}

impl Ord for PValue {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (PValue::NegInfinity, PValue::NegInfinity) => Ordering::Equal,
            (PValue::NegInfinity, PValue::Finite(_)) => Ordering::Less,
            (PValue::Finite(_), PValue::NegInfinity) => Ordering::Greater,
            (PValue::Finite(a), PValue::Finite(b)) => a.total_cmp(b),
        }
    }
}

impl PartialOrd for PValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for PValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PValue::NegInfinity => f.write_str("-inf"),
            PValue::Finite(v) => write!(f, "{v}"),
        }
    }
}

impl Serialize for PValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PValue::NegInfinity => serializer.serialize_str("-inf"),
            PValue::Finite(v) => serializer.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for PValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        let p = match Raw::deserialize(deserializer)? {
            Raw::Num(v) => PValue::Finite(v),
            Raw::Text(s) if s == "-inf" => PValue::NegInfinity,
            Raw::Text(s) => {
                return Err(serde::de::Error::custom(format!("expected a number or \"-inf\", got {s:?}")))
            }
        };
        p.validate().map_err(serde::de::Error::custom)?;
        Ok(p)
    }
}

/// Hashable form of a [`PValue`]; see [`PValue::key`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PKey(Option<u64>);

/// A vector of strictly positive utilities, one per stakeholder.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityVector(Vec<f64>);

impl UtilityVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        check_entries(&entries)?;
        Ok(UtilityVector(entries))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn p_mean(&self, p: PValue) -> Result<f64> {
        p.validate()?;
        Ok(p_mean_unchecked(&self.0, p))
    }

    pub fn log_p_mean(&self, p: PValue) -> Result<f64> {
        p.validate()?;
        Ok(log_p_mean_unchecked(&self.0, p))
    }
}

fn check_entries(x: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Domain("utility vector must have at least one entry".into()));
    }
    if let Some((i, v)) = x.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::Domain(format!("utility entry {i} must be a positive finite real, got {v}")));
    }
    Ok(())
}

/// The generalized p-mean `f(x, p)`.
pub fn p_mean(x: &[f64], p: PValue) -> Result<f64> {
    check_entries(x)?;
    p.validate()?;
    Ok(p_mean_unchecked(x, p))
}

/// `ln f(x, p)`, accurate for entries spanning hundreds of orders of magnitude.
pub fn log_p_mean(x: &[f64], p: PValue) -> Result<f64> {
    check_entries(x)?;
    p.validate()?;
    Ok(log_p_mean_unchecked(x, p))
}

/// [`p_mean`] without input validation. The result is clamped into `[min x, max x]` so that
/// rounding in `exp` cannot leave the range.
pub(crate) fn p_mean_unchecked(x: &[f64], p: PValue) -> f64 {
    let (lo, hi) = min_max(x);
    if lo == hi {
        return lo;
    }
    log_p_mean_unchecked(x, p).exp().clamp(lo, hi)
}

fn min_max(x: &[f64]) -> (f64, f64) {
    x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// [`log_p_mean`] without input validation. Callers guarantee positive entries and `p ≤ 1`.
pub(crate) fn log_p_mean_unchecked(x: &[f64], p: PValue) -> f64 {
    let (lo, hi) = min_max(x);
    let (log_lo, log_hi) = (lo.ln(), hi.ln());
    if lo == hi {
        return log_lo;
    }
    let raw = match p {
        PValue::NegInfinity => return log_lo,
        PValue::Finite(p) if p.abs() < NEAR_ZERO_P => mean_log(x),
        PValue::Finite(p) => log_mean_exp(x.iter().map(|v| p * v.ln()), x.len()) / p,
    };
    raw.clamp(log_lo, log_hi)
}

fn mean_log(x: &[f64]) -> f64 {
    x.iter().map(|v| v.ln()).sum::<f64>() / x.len() as f64
}

/// `ln((1/n) Σ exp(zᵢ))`.
///
/// When every `|zᵢ| ≤ 1` the sum is formed from `expm1` terms and closed with `ln_1p`, which keeps
/// full relative precision as `p → 0` where the result is itself of order `p`.
fn log_mean_exp(z: impl Iterator<Item = f64> + Clone, n: usize) -> f64 {
    let n_f = n as f64;
    let max = z.clone().fold(f64::NEG_INFINITY, f64::max);
    let min = z.clone().fold(f64::INFINITY, f64::min);
    if max <= 1.0 && min >= -1.0 {
        let mean_expm1 = z.map(f64::exp_m1).sum::<f64>() / n_f;
        return mean_expm1.ln_1p();
    }
    let scaled = z.map(|v| (v - max).exp()).sum::<f64>();
    max + scaled.ln() - n_f.ln()
}

/// `p₀ = −ln n / ln(1/α)`: below this p the egalitarian optimum is already α-approximate.
pub fn p_floor(n: usize, alpha: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Domain("stakeholder count must be at least 1".into()));
    }
    check_alpha(alpha)?;
    if n == 1 {
        return Ok(0.0);
    }
    Ok(-(n as f64).ln() / (1.0 / alpha).ln())
}

/// Upper bound `κ ln κ` on `d ln f(x, p) / dp` for vectors whose max/min ratio is at most `κ`.
pub fn slope_bound(kappa: f64) -> Result<f64> {
    if !(kappa >= 1.0) || !kappa.is_finite() {
        return Err(Error::Domain(format!("condition number must be a finite real ≥ 1, got {kappa}")));
    }
    Ok(kappa * kappa.ln())
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("approximation factor must lie in (0, 1), got {alpha}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fin(p: f64) -> PValue {
        PValue::Finite(p)
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs())
    }

    #[test]
    fn constant_vector_is_fixed_point() {
        let x = [3.5; 7];
        for p in [PValue::NegInfinity, fin(-40.0), fin(-1.0), fin(0.0), fin(1e-9), fin(0.3), fin(1.0)] {
            assert!(close(p_mean(&x, p).unwrap(), 3.5, 1e-15), "p = {p}");
        }
    }

    #[test]
    fn named_means() {
        assert!(close(p_mean(&[1.0, 4.0], fin(0.0)).unwrap(), 2.0, 1e-15));
        assert!(close(p_mean(&[1.0, 2.0, 3.0, 4.0], fin(1.0)).unwrap(), 2.5, 1e-15));
        assert_eq!(p_mean(&[1.0, 4.0], PValue::NegInfinity).unwrap(), 1.0);
        // harmonic mean of 1 and 4
        assert!(close(p_mean(&[1.0, 4.0], fin(-1.0)).unwrap(), 1.6, 1e-14));
    }

    #[test]
    fn log_p_mean_values() {
        let e = std::f64::consts::E;
        for p in [PValue::NegInfinity, fin(-3.0), fin(0.0), fin(1.0)] {
            assert!(close(log_p_mean(&[e, e], p).unwrap(), 1.0, 1e-15));
        }
        assert!(close(log_p_mean(&[1.0, 4.0], fin(0.0)).unwrap(), 2f64.ln(), 1e-15));
    }

    #[test]
    fn log_p_mean_extreme_range() {
        // ln((1e-150 + 1e150) / 2), evaluated with 50-digit arithmetic
        let reference = 344.694_616_768_546_907_293_281_486_081_196_454_572;
        let got = log_p_mean(&[1e-150, 1e150], fin(1.0)).unwrap();
        assert!(close(got, reference, 1e-14), "{got}");
        let geo = log_p_mean(&[1e-150, 1e150], fin(0.0)).unwrap();
        assert!(geo.abs() < 1e-12);
        let neg = log_p_mean(&[1e-300, 1e300], fin(-2.0)).unwrap();
        assert!(close(neg, (1e-300f64).ln() + 0.5 * 2f64.ln(), 1e-14), "{neg}");
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(p_mean(&[1.0, 0.0], fin(0.5)), Err(Error::Domain(_))));
        assert!(matches!(p_mean(&[1.0, -2.0], fin(0.5)), Err(Error::Domain(_))));
        assert!(matches!(p_mean(&[], fin(0.5)), Err(Error::Domain(_))));
        assert!(matches!(p_mean(&[1.0, 2.0], fin(1.5)), Err(Error::Domain(_))));
        assert!(PValue::finite(1.0 + 1e-12).is_err());
        assert!(PValue::finite(f64::NAN).is_err());
        assert!(UtilityVector::new(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn p_floor_values() {
        assert!(close(p_floor(4, 0.5).unwrap(), -2.0, 1e-15));
        assert_eq!(p_floor(1, 0.3).unwrap(), 0.0);
        // −ln 12 / ln(1/0.9) to 50 digits
        assert!(close(p_floor(12, 0.9).unwrap(), -23.584_799_621_312_583_847, 1e-14));
        assert!(p_floor(3, 0.0).is_err());
        assert!(p_floor(3, 1.0).is_err());
        assert!(p_floor(0, 0.5).is_err());
    }

    #[test]
    fn slope_bound_values() {
        assert_eq!(slope_bound(1.0).unwrap(), 0.0);
        let e = std::f64::consts::E;
        assert!(close(slope_bound(e).unwrap(), e, 1e-15));
        assert!(close(slope_bound(10.0).unwrap(), 23.025_850_929_940_456_840, 1e-15));
        assert!(slope_bound(0.99).is_err());
    }

    #[test]
    fn near_zero_switch_is_continuous() {
        let x = [1e-3, 0.5, 7.0, 1e3];
        let g = p_mean(&x, fin(0.0)).unwrap();
        for eps in [1e-9, -1e-9, 2e-8, -2e-8] {
            let v = p_mean(&x, fin(eps)).unwrap();
            assert!(close(v, g, 1e-6), "eps = {eps}");
        }
        // across the branch switch the ordering still holds
        let below = p_mean(&x, fin(-1.5e-8)).unwrap();
        let above = p_mean(&x, fin(1.5e-8)).unwrap();
        assert!(below <= g && g <= above);
    }

    #[test]
    fn pvalue_order_and_serde() {
        assert!(PValue::NegInfinity < fin(-1e300));
        assert!(fin(-2.0) < fin(0.5));
        assert_eq!(fin(0.0).key(), fin(-0.0).key());
        assert_ne!(PValue::NegInfinity.key(), fin(f64::MIN).key());
        assert_eq!(serde_json::to_string(&PValue::NegInfinity).unwrap(), "\"-inf\"");
        let back: Vec<PValue> = serde_json::from_str("[\"-inf\", -2.5, 1]").unwrap();
        assert_eq!(back, vec![PValue::NegInfinity, fin(-2.5), fin(1.0)]);
        assert!(serde_json::from_str::<PValue>("2.0").is_err());
        assert!(serde_json::from_str::<PValue>("\"inf\"").is_err());
    }

    fn vector() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(1e-3f64..1e3, 1..12)
    }

    proptest! {
        #[test]
        fn scale_equivariance(x in vector(), beta in 1e-3f64..1e3, p in -30f64..1.0) {
            let scaled: Vec<f64> = x.iter().map(|v| v * beta).collect();
            let lhs = p_mean(&scaled, fin(p)).unwrap();
            let rhs = beta * p_mean(&x, fin(p)).unwrap();
            prop_assert!(close(lhs, rhs, 1e-12));
        }

        #[test]
        fn stays_within_entry_range(x in vector(), p in -200f64..1.0) {
            let v = p_mean(&x, fin(p)).unwrap();
            let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = x.iter().cloned().fold(0.0, f64::max);
            prop_assert!(lo <= v && v <= hi);
        }
    }
}
