//! Exposure shifts: deterministic maps from observed exposure `A` to a
//! counterfactual exposure, plus the textual grammar used by configs.
//!
//! Grammar (comma-separated lists are accepted by [`ShiftFamily::from_str`]):
//!
//! ```text
//! percent:0.30             A -> (1 - 0.30) A
//! cutoff:9.0               A -> min(A, 9.0)
//! pairwise:cut9            A -> column a_tilde_cut9 of the dataset
//! grid:percent:0:0.5:20    20 equally spaced percent shifts on [0, 0.5]
//! ```

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftKind {
    Percent,
    Cutoff,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ShiftSpec {
    /// Multiplies exposure by `1 - c`, with `0 <= c < 1`.
    Percent(f64),
    /// Caps exposure at `c`.
    Cutoff(f64),
    /// Reads a precomputed shifted exposure column.
    Pairwise(String),
}

impl ShiftSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ShiftSpec::Percent(_) => "percent",
            ShiftSpec::Cutoff(_) => "cutoff",
            ShiftSpec::Pairwise(_) => "pairwise",
        }
    }

    /// The parameter as written in output tables.
    pub fn param_label(&self) -> String {
        match self {
            ShiftSpec::Percent(c) | ShiftSpec::Cutoff(c) => c.to_string(),
            ShiftSpec::Pairwise(name) => name.clone(),
        }
    }

    pub fn param(&self) -> Option<f64> {
        match self {
            ShiftSpec::Percent(c) | ShiftSpec::Cutoff(c) => Some(*c),
            ShiftSpec::Pairwise(_) => None,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, ShiftSpec::Percent(c) if *c == 0.0)
            || matches!(self, ShiftSpec::Cutoff(c) if *c == f64::INFINITY)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ShiftSpec::Percent(c) if !(0.0..1.0).contains(c) => Err(Error::InvalidParameter(format!(
                "percent reduction {c} must lie in [0, 1)"
            ))),
            ShiftSpec::Cutoff(c) if c.is_nan() || *c == f64::NEG_INFINITY => {
                Err(Error::InvalidParameter(format!("cutoff {c} is not usable")))
            }
            ShiftSpec::Pairwise(name) if name.is_empty() => {
                Err(Error::InvalidParameter("pairwise shift needs a column name".into()))
            }
            _ => Ok(()),
        }
    }

    /// Shifted exposures. `source` must be given exactly for pairwise shifts.
    pub fn apply(&self, a: &[f64], source: Option<&[f64]>) -> Result<Vec<f64>> {
        self.validate()?;
        match (self, source) {
            (ShiftSpec::Percent(c), None) => Ok(a.iter().map(|&v| (1.0 - c) * v).collect()),
            (ShiftSpec::Cutoff(c), None) => Ok(a.iter().map(|&v| v.min(*c)).collect()),
            (ShiftSpec::Pairwise(name), None) => Err(Error::MissingPairwiseColumn(name.clone())),
            (ShiftSpec::Pairwise(name), Some(col)) => {
                if col.len() != a.len() {
                    return Err(Error::IndexMismatch(format!(
                        "pairwise column `{name}` has {} rows, exposure has {}",
                        col.len(),
                        a.len()
                    )));
                }
                Ok(col.to_vec())
            }
            (_, Some(_)) => Err(Error::InvalidParameter(format!(
                "{} shift does not take a pairwise column",
                self.kind_name()
            ))),
        }
    }
}

impl fmt::Display for ShiftSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind_name(), self.param_label())
    }
}

fn parse_real(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::InvalidParameter(format!("{what} `{s}` is not a number")))
}

impl FromStr for ShiftSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidParameter(format!("shift `{s}` is missing `kind:`")))?;
        let spec = match kind.trim() {
            "percent" => ShiftSpec::Percent(parse_real(rest, "percent reduction")?),
            "cutoff" => ShiftSpec::Cutoff(parse_real(rest, "cutoff")?),
            "pairwise" => ShiftSpec::Pairwise(rest.trim().to_string()),
            other => return Err(Error::InvalidParameter(format!("unknown shift kind `{other}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Non-empty ordered list of distinct shifts.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftFamily {
    specs: Vec<ShiftSpec>,
}

impl ShiftFamily {
    pub fn new(specs: Vec<ShiftSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidParameter("shift family is empty".into()));
        }
        for (i, s) in specs.iter().enumerate() {
            s.validate()?;
            if specs[..i].contains(s) {
                return Err(Error::InvalidParameter(format!("shift `{s}` is listed twice")));
            }
        }
        Ok(Self { specs })
    }

    pub fn single(spec: ShiftSpec) -> Result<Self> {
        Self::new(vec![spec])
    }

    pub fn specs(&self) -> &[ShiftSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ShiftSpec> {
        self.specs.iter()
    }

    pub fn identity_index(&self) -> Option<usize> {
        self.specs.iter().position(ShiftSpec::is_identity)
    }
}

impl<'a> IntoIterator for &'a ShiftFamily {
    type Item = &'a ShiftSpec;
    type IntoIter = std::slice::Iter<'a, ShiftSpec>;
    fn into_iter(self) -> Self::IntoIter {
        self.specs.iter()
    }
}

impl fmt::Display for ShiftFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.specs.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

impl FromStr for ShiftFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut specs = Vec::new();
        for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            if let Some(rest) = item.strip_prefix("grid:") {
                let parts: Vec<&str> = rest.split(':').collect();
                let [kind, lo, hi, k] = parts[..] else {
                    return Err(Error::InvalidParameter(format!(
                        "grid `{item}` must look like grid:<kind>:<lo>:<hi>:<count>"
                    )));
                };
                let kind = match kind.trim() {
                    "percent" => ShiftKind::Percent,
                    "cutoff" => ShiftKind::Cutoff,
                    other => return Err(Error::InvalidParameter(format!("cannot grid over `{other}` shifts"))),
                };
                let k = k
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidParameter(format!("grid count `{k}` is not an integer")))?;
                let grid = shift_grid(kind, parse_real(lo, "grid start")?, parse_real(hi, "grid end")?, k)?;
                specs.extend(grid.specs);
            } else {
                specs.push(item.parse()?);
            }
        }
        Self::new(specs)
    }
}

/// `k` shifts with parameters equally spaced on `[lo, hi]`, endpoints included.
pub fn shift_grid(kind: ShiftKind, lo: f64, hi: f64, k: usize) -> Result<ShiftFamily> {
    if k == 0 {
        return Err(Error::InvalidParameter("shift grid needs at least one point".into()));
    }
    if !(lo <= hi) {
        return Err(Error::InvalidParameter(format!(
            "grid bounds [{lo}, {hi}] are reversed"
        )));
    }
    let params: Vec<f64> = (0..k)
        .map(|i| {
            if i + 1 == k && k > 1 {
                hi
            } else if k == 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (k - 1) as f64
            }
        })
        .collect();
    let specs = params
        .into_iter()
        .map(|c| match kind {
            ShiftKind::Percent => ShiftSpec::Percent(c),
            ShiftKind::Cutoff => ShiftSpec::Cutoff(c),
        })
        .collect();
    ShiftFamily::new(specs)
}

/// Closed-form log density ratio of a percent shift when `A | X ~ N(m, s²)`.
pub fn oracle_log_ratio_percent(c: f64, m: f64, s: f64, a: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&c) {
        return Err(Error::InvalidParameter(format!(
            "percent reduction {c} must lie in [0, 1)"
        )));
    }
    if !(s > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "standard deviation {s} must be positive"
        )));
    }
    let k = 1.0 - c;
    let z_shift = (a / k - m) / s;
    let z_obs = (a - m) / s;
    Ok(-0.5 * (z_shift * z_shift - z_obs * z_obs) - k.ln())
}

/// Number of shifted exposures outside the observed range padded by 5% on
/// each side. Logs a warning when any are found.
pub fn screen_positivity(label: &str, observed: &[f64], shifted: &[f64]) -> usize {
    let (lo, hi) = observed
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let pad = 0.05 * (hi - lo);
    let outside = shifted.iter().filter(|&&v| v < lo - pad || v > hi + pad).count();
    if outside > 0 {
        log::warn!(
            "shift {label}: {outside} of {} shifted exposures fall outside the observed support [{:.4}, {:.4}]",
            shifted.len(),
            lo - pad,
            hi + pad
        );
    }
    outside
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn apply_examples() {
        let a = [3.0, -1.5, 8.25];
        assert_eq!(ShiftSpec::Percent(0.0).apply(&a, None).unwrap(), a);
        assert_eq!(
            ShiftSpec::Cutoff(12.0).apply(&[8.0, 14.0, 12.0], None).unwrap(),
            [8.0, 12.0, 12.0]
        );
        let p = ShiftSpec::Percent(0.3).apply(&[10.0, 20.0], None).unwrap();
        assert!((p[0] - 7.0).abs() < 1e-12 && (p[1] - 14.0).abs() < 1e-12);
        let col = [1.0, 2.0, 3.0];
        assert_eq!(ShiftSpec::Pairwise("z".into()).apply(&a, Some(&col)).unwrap(), col);
    }

    #[test]
    fn apply_errors() {
        assert!(matches!(
            ShiftSpec::Pairwise("cut9".into()).apply(&[1.0], None),
            Err(Error::MissingPairwiseColumn(_))
        ));
        assert!(ShiftSpec::Percent(1.0).apply(&[1.0], None).is_err());
        assert!(ShiftSpec::Percent(-0.1).apply(&[1.0], None).is_err());
        assert!(ShiftSpec::Cutoff(f64::NAN).apply(&[1.0], None).is_err());
        assert!(ShiftSpec::Percent(0.2).apply(&[1.0], Some(&[1.0])).is_err());
    }

    #[test]
    fn grids() {
        let g = shift_grid(ShiftKind::Percent, 0.0, 0.5, 20).unwrap();
        assert_eq!(g.len(), 20);
        assert_eq!(g.specs()[0], ShiftSpec::Percent(0.0));
        assert_eq!(g.specs()[19], ShiftSpec::Percent(0.5));
        let g = shift_grid(ShiftKind::Cutoff, 6.0, 16.0, 11).unwrap();
        let cut: Vec<f64> = g.iter().map(|s| s.param().unwrap()).collect();
        assert_eq!(cut, (6..=16).map(f64::from).collect::<Vec<_>>());
        let g = shift_grid(ShiftKind::Percent, 0.2, 0.2, 1).unwrap();
        assert_eq!(g.specs(), &[ShiftSpec::Percent(0.2)]);
        assert!(shift_grid(ShiftKind::Percent, 0.0, 0.5, 0).is_err());
        assert!(shift_grid(ShiftKind::Percent, 0.2, 0.2, 2).is_err());
    }

    #[test]
    fn grammar_round_trip() {
        let fam: ShiftFamily = "percent:0.30, cutoff:9.0,pairwise:cut9,grid:percent:0:0.5:3"
            .parse()
            .unwrap();
        assert_eq!(fam.len(), 6);
        assert_eq!(fam.specs()[0], ShiftSpec::Percent(0.3));
        assert_eq!(fam.specs()[2], ShiftSpec::Pairwise("cut9".into()));
        assert_eq!(fam.identity_index(), Some(3));
        let again: ShiftFamily = fam.to_string().parse().unwrap();
        assert_eq!(again, fam);
        assert!("percent:0.3,percent:0.3".parse::<ShiftFamily>().is_err());
        assert!("".parse::<ShiftFamily>().is_err());
        assert!("shrink:0.2".parse::<ShiftFamily>().is_err());
        assert!("grid:percent:0:1".parse::<ShiftFamily>().is_err());
    }

    #[test]
    fn oracle_ratio_examples() {
        assert_eq!(oracle_log_ratio_percent(0.0, 0.3, 1.2, -0.7).unwrap(), 0.0);
        let v = oracle_log_ratio_percent(0.5, 0.0, 1.0, 0.0).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        assert!(oracle_log_ratio_percent(1.0, 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn positivity_counts_out_of_range() {
        let obs = [0.0, 1.0, 2.0, 10.0];
        assert_eq!(screen_positivity("t", &obs, &[-0.4, 10.4]), 0);
        assert_eq!(screen_positivity("t", &obs, &[-0.6, 5.0, 10.6]), 2);
    }

    proptest! {
        #[test]
        fn cutoff_bounds(a in prop::collection::vec(-50.0f64..50.0, 1..40), c in -20.0f64..20.0) {
            let out = ShiftSpec::Cutoff(c).apply(&a, None).unwrap();
            for (o, x) in out.iter().zip(&a) {
                prop_assert!(*o <= c && o <= x);
            }
            prop_assert_eq!(ShiftSpec::Cutoff(1e300).apply(&a, None).unwrap(), a.clone());
        }

        #[test]
        fn percent_preserves_order(mut a in prop::collection::vec(-50.0f64..50.0, 2..40), c in 0.0f64..0.99) {
            a.sort_by(f64::total_cmp);
            let out = ShiftSpec::Percent(c).apply(&a, None).unwrap();
            prop_assert!(out.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(out.iter().all(|v| v.is_finite()));
        }

        #[test]
        fn zero_shift_ratio_is_zero(m in -5.0f64..5.0, s in 0.1f64..5.0, a in -10.0f64..10.0) {
            prop_assert_eq!(oracle_log_ratio_percent(0.0, m, s, a).unwrap(), 0.0);
        }
    }
}
