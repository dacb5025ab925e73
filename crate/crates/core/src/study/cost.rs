//! Exact cost arithmetic: mixture counts, modular vs naive training cost.

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn binomial(n: u64, k: u64) -> Result<BigUint> {
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds n = {n}")));
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    Ok(acc)
}

pub fn count_mixtures(n: u64, k: u64) -> Result<BigUint> {
    binomial(n, k)
}

pub fn count_all(n: u64) -> BigUint {
    BigUint::one() << n
}

/// Parses a non-negative decimal such as `5`, `2.5` or `0.125` exactly.
pub fn parse_decimal(s: &str) -> Result<BigRational> {
    let bad = || Error::invalid(format!("not a non-negative decimal: {s:?}"));
    let s = s.trim();
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if int.is_empty() && frac.is_empty() || !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
        return Err(bad());
    }
    let digits: BigUint = format!("{int}{frac}").trim_start_matches('0').parse().unwrap_or_default();
    let denom = num_traits::pow(BigUint::from(10u32), frac.len());
    Ok(BigRational::new(digits.into(), denom.into()))
}

/// Integer when whole, terminating decimal when possible, else `p/q`.
pub fn format_rational(r: &BigRational) -> String {
    if r.is_integer() {
        return r.numer().to_string();
    }
    let mut d = r.denom().clone();
    let (two, five) = (BigInt::from(2), BigInt::from(5));
    let mut twos = 0usize;
    let mut fives = 0usize;
    while (&d % &two).is_zero() {
        d /= &two;
        twos += 1;
    }
    while (&d % &five).is_zero() {
        d /= &five;
        fives += 1;
    }
    if !d.is_one() {
        return format!("{}/{}", r.numer(), r.denom());
    }
    let places = twos.max(fives);
    let scaled = r * BigRational::from_integer(num_traits::pow(BigUint::from(10u32), places).into());
    let digits = scaled.to_integer().to_string();
    let (sign, digits) = digits.strip_prefix('-').map_or(("", digits.as_str()), |d| ("-", d));
    let padded = format!("{digits:0>width$}", width = places + 1);
    let (i, f) = padded.split_at(padded.len() - places);
    format!("{sign}{i}.{f}")
}

fn hours(units: &BigUint, per_unit: &BigRational) -> BigRational {
    BigRational::from_integer(units.clone().into()) * per_unit
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostInputs {
    pub hours_per_unit: BigRational,
    /// Unit-budgets spent on proxy models (base units plus any whole-partition models).
    pub modular_unit_budgets: u64,
    /// Distinct base units already trained.
    pub units_trained: u64,
    pub mixtures_evaluated: u64,
    /// Σ over evaluated mixtures of their unit counts: the cost of training each one directly.
    pub naive_unit_budgets: u64,
    /// Base-unit count of every partition, for full-sweep figures.
    pub partition_unit_counts: Vec<u64>,
    pub sweep_ks: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullSweep {
    pub k: u64,
    pub mixtures: String,
    pub naive_unit_budgets: String,
    pub naive_hours: String,
}

/// Exact figures, rendered as decimal strings so they survive any size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub hours_per_unit: String,
    pub mixtures_evaluated: u64,
    pub modular_unit_budgets: u64,
    pub modular_hours: String,
    pub naive_unit_budgets: u64,
    pub naive_hours: String,
    pub total_units: u64,
    pub remaining_units: u64,
    pub incremental_hours_for_full_sweep: String,
    pub full_sweep_modular_hours: String,
    pub full_sweeps: Vec<FullSweep>,
}

/// Naive full sweep: each of the C(n,k) mixtures trained directly. Every
/// partition appears in C(n−1,k−1) of them, so the budget is C(n−1,k−1)·Σmᵢ.
pub fn naive_full_sweep(partition_unit_counts: &[u64], k: u64) -> Result<(BigUint, BigUint)> {
    let n = partition_unit_counts.len() as u64;
    if k == 0 || k > n {
        return Err(Error::invalid(format!("full sweep needs 1 <= k <= n, got k = {k}, n = {n}")));
    }
    let mixtures = count_mixtures(n, k)?;
    let total: u64 = partition_unit_counts.iter().sum();
    Ok((mixtures, binomial(n - 1, k - 1)? * BigUint::from(total)))
}

pub fn cost_model(inputs: &CostInputs) -> Result<CostLedger> {
    let h = &inputs.hours_per_unit;
    if h < &BigRational::zero() {
        return Err(Error::invalid("hours_per_unit must be non-negative"));
    }
    let total_units: u64 = inputs.partition_unit_counts.iter().sum();
    let remaining = total_units.saturating_sub(inputs.units_trained);
    let modular = hours(&inputs.modular_unit_budgets.into(), h);
    let incremental = hours(&remaining.into(), h);
    let mut full_sweeps = Vec::new();
    for &k in &inputs.sweep_ks {
        let (mixtures, budgets) = naive_full_sweep(&inputs.partition_unit_counts, k)?;
        full_sweeps.push(FullSweep {
            k,
            mixtures: mixtures.to_string(),
            naive_hours: format_rational(&hours(&budgets, h)),
            naive_unit_budgets: budgets.to_string(),
        });
    }
    Ok(CostLedger {
        hours_per_unit: format_rational(h),
        mixtures_evaluated: inputs.mixtures_evaluated,
        modular_unit_budgets: inputs.modular_unit_budgets,
        modular_hours: format_rational(&modular),
        naive_unit_budgets: inputs.naive_unit_budgets,
        naive_hours: format_rational(&hours(&inputs.naive_unit_budgets.into(), h)),
        total_units,
        remaining_units: remaining,
        incremental_hours_for_full_sweep: format_rational(&incremental),
        full_sweep_modular_hours: format_rational(&(modular + incremental)),
        full_sweeps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityPoint {
    pub n: u64,
    pub modular: u64,
    pub naive: u64,
}

/// Training cost in partition-trainings with unit-sized partitions:
/// modular `n`, naive `C(n,k)·k`.
pub fn complexity_curve(ns: impl IntoIterator<Item = u64>, k: u64) -> Result<Vec<ComplexityPoint>> {
    ns.into_iter()
        .map(|n| {
            let naive = count_mixtures(n, k)? * BigUint::from(k);
            let naive = naive.to_u64().ok_or_else(|| Error::invalid(format!("naive cost overflows at n = {n}")))?;
            Ok(ComplexityPoint { n, modular: n, naive })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        assert_eq!(count_mixtures(128, 2).unwrap(), 8128u32.into());
        assert_eq!(count_mixtures(128, 3).unwrap(), 341_376u32.into());
        assert_eq!(count_all(3), 8u32.into());
        assert!(count_mixtures(2, 3).is_err());
        assert_eq!(count_mixtures(200, 100).unwrap().to_string().len(), 59);
    }

    #[test]
    fn decimals_are_exact() {
        assert_eq!(format_rational(&parse_decimal("5").unwrap()), "5");
        assert_eq!(format_rational(&parse_decimal("2.50").unwrap()), "2.5");
        assert_eq!(format_rational(&parse_decimal("0.125").unwrap()), "0.125");
        assert_eq!(format_rational(&(parse_decimal("1").unwrap() / parse_decimal("3").unwrap())), "1/3");
        assert!(parse_decimal("-1").is_err());
        assert!(parse_decimal("1e3").is_err());
        assert!(parse_decimal(".").is_err());
    }

    #[test]
    fn fos_pair_sweep_is_unit_budgets_not_hours() {
        // 22 fields of study holding 128 base units between them
        let mut counts = vec![5u64; 22];
        counts[0] = 23;
        assert_eq!(counts.iter().sum::<u64>(), 128);
        let (mixtures, budgets) = naive_full_sweep(&counts, 2).unwrap();
        assert_eq!(mixtures, 231u32.into());
        assert_eq!(budgets, 2688u32.into());
        let l = cost_model(&CostInputs {
            hours_per_unit: parse_decimal("5").unwrap(),
            modular_unit_budgets: 0,
            units_trained: 0,
            mixtures_evaluated: 0,
            naive_unit_budgets: 0,
            partition_unit_counts: counts,
            sweep_ks: vec![2],
        })
        .unwrap();
        assert_eq!(l.full_sweeps[0].naive_hours, "13440");
    }

    #[test]
    fn complexity_shapes() {
        let c = complexity_curve([10, 20, 40], 2).unwrap();
        assert_eq!(c[0], ComplexityPoint { n: 10, modular: 10, naive: 90 });
        assert!(c.iter().all(|p| p.modular == p.n));
        let ratio = c[2].naive as f64 / c[1].naive as f64;
        assert!((ratio - 4.0).abs() < 0.2);
    }
}
