//! Regression from cell conditions to fitted KPI distribution parameters.
//!
//! Features are the sweep axes, standardised to `[0, 1]` over the training
//! domain. Axes that take a single value in the training table carry no
//! information and are dropped from the regression. Strictly positive
//! parameters are regressed in the log domain by the polynomial regressor;
//! multilinear interpolation is a convex combination of knot values and works
//! on the parameters directly, which keeps it exact at the knots.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cellsim::{Axis, CellConditions};
use crate::distfit::{DistributionTable, Family, Kpi, KpiDistribution, TableRow};
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "vertisim-surrogate/1";

/// Floor applied to positive parameters on prediction.
pub const SCALE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegressorKind {
    #[default]
    MultilinearInterp,
    PolynomialRidge { degree: u32, ridge: f64 },
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regressor {
    /// Rectilinear grid over the active axes; `values` row-major, last axis fastest.
    Multilinear { knots: Vec<Vec<f64>>, values: Vec<f64> },
    /// `sum_j coeffs[j] * prod_i z_i^exponents[j][i]`
    Polynomial {
        exponents: Vec<Vec<u32>>,
        coeffs: Vec<f64>,
    },
}

impl Regressor {
    fn eval(&self, z: &[f64]) -> f64 {
        match self {
            Regressor::Multilinear { knots, values } => multilinear(knots, values, z),
            Regressor::Polynomial { exponents, coeffs } => exponents
                .iter()
                .zip(coeffs)
                .map(|(e, c)| c * monomial(e, z))
                .sum(),
        }
    }
}

fn monomial(exps: &[u32], z: &[f64]) -> f64 {
    exps.iter().zip(z).map(|(&e, &x)| x.powi(e as i32)).product()
}

fn multilinear(knots: &[Vec<f64>], values: &[f64], z: &[f64]) -> f64 {
    // lower cell index and weight of the upper neighbour on every axis
    let mut cell = Vec::with_capacity(knots.len());
    for (k, &x) in knots.iter().zip(z) {
        if k.len() == 1 {
            cell.push((0, 0.0));
            continue;
        }
        let x = x.clamp(k[0], k[k.len() - 1]);
        let i = k.partition_point(|&v| v <= x).saturating_sub(1).min(k.len() - 2);
        cell.push((i, (x - k[i]) / (k[i + 1] - k[i])));
    }
    let mut acc = 0.0;
    for corner in 0..(1usize << knots.len()) {
        let mut weight = 1.0;
        let mut flat = 0;
        for (axis, (k, &(i, t))) in knots.iter().zip(&cell).enumerate() {
            let up = corner >> (knots.len() - 1 - axis) & 1 == 1;
            if up && k.len() == 1 {
                weight = 0.0;
                break;
            }
            weight *= if up { t } else { 1.0 - t };
            flat = flat * k.len() + i + usize::from(up);
        }
        if weight != 0.0 {
            acc += weight * values[flat];
        }
    }
    acc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRegressor {
    pub param: usize,
    pub log_domain: bool,
    pub regressor: Regressor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub kpi: Kpi,
    pub family: Family,
    pub kind: RegressorKind,
    pub axes: Vec<Axis>,
    /// Per-axis `[min, max]` of the training table.
    pub domain: Vec<[f64; 2]>,
    pub regressors: Vec<ParamRegressor>,
    /// Per-parameter RMSE over the training rows.
    pub training_error: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub dist: KpiDistribution,
    /// Set when the query had to be clamped into the training domain.
    pub extrapolation_warning: Option<String>,
}

impl SurrogateModel {
    fn active_axes(&self) -> Vec<usize> {
        self.domain
            .iter()
            .enumerate()
            .filter(|(_, d)| d[1] > d[0])
            .map(|(i, _)| i)
            .collect()
    }

    fn standardize(&self, raw: &[f64]) -> Vec<f64> {
        self.active_axes()
            .into_iter()
            .map(|i| {
                let [lo, hi] = self.domain[i];
                (raw[i].clamp(lo, hi) - lo) / (hi - lo)
            })
            .collect()
    }

    pub fn features(&self, cond: &CellConditions) -> Vec<f64> {
        self.axes.iter().map(|a| a.extract(cond)).collect()
    }

    pub fn predict(&self, cond: &CellConditions) -> Result<Prediction> {
        self.predict_raw(&self.features(cond))
    }

    /// Prediction at raw (unstandardised) axis values.
    pub fn predict_raw(&self, raw: &[f64]) -> Result<Prediction> {
        if raw.len() != self.axes.len() {
            return Err(Error::Structure(format!(
                "expected {} condition values, got {}",
                self.axes.len(),
                raw.len()
            )));
        }
        let mut outside = Vec::new();
        for ((a, &v), [lo, hi]) in self.axes.iter().zip(raw).zip(&self.domain) {
            if v.is_nan() {
                return Err(Error::Structure(format!("condition {a} is undefined")));
            }
            if v < *lo || v > *hi {
                outside.push(format!("{a}={v} outside [{lo}, {hi}]"));
            }
        }
        let z = self.standardize(raw);
        let mut params = vec![0.0; self.family.param_count()];
        for r in &self.regressors {
            let y = r.regressor.eval(&z);
            params[r.param] = if r.log_domain { y.exp() } else { y };
        }
        for (i, p) in params.iter_mut().enumerate() {
            if self.family == Family::Bernoulli {
                *p = p.clamp(0.0, 1.0);
            } else if self.family.is_positive_param(i) {
                *p = if p.is_finite() { p.max(SCALE_FLOOR) } else { f64::MAX };
            }
        }
        let dist = KpiDistribution::new(self.kpi, self.family, params)?;
        Ok(Prediction {
            dist,
            extrapolation_warning: (!outside.is_empty())
                .then(|| format!("clamped to training domain: {}", outside.join("; "))),
        })
    }
}

fn polynomial_exponents(dims: usize, degree: u32) -> Vec<Vec<u32>> {
    fn rec(dims: usize, left: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == dims {
            out.push(prefix.clone());
            return;
        }
        for e in 0..=left {
            prefix.push(e);
            rec(dims, left - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(dims, degree, &mut Vec::new(), &mut out);
    out.sort_by_key(|e| (e.iter().sum::<u32>(), std::cmp::Reverse(e.clone())));
    out
}

fn fit_multilinear(zs: &[Vec<f64>], ys: &[f64]) -> Result<Regressor> {
    let dims = zs.first().map_or(0, Vec::len);
    let mut knots: Vec<Vec<f64>> = vec![Vec::new(); dims];
    for z in zs {
        for (k, &v) in knots.iter_mut().zip(z) {
            k.push(v);
        }
    }
    for k in &mut knots {
        k.sort_by(f64::total_cmp);
        k.dedup();
    }
    let size: usize = knots.iter().map(Vec::len).product();
    if size != zs.len() {
        return Err(Error::Structure(format!(
            "multilinear interpolation needs a full grid: {} knots combinations, {} table rows",
            size,
            zs.len()
        )));
    }
    let mut values = vec![f64::NAN; size];
    for (z, &y) in zs.iter().zip(ys) {
        let mut flat = 0;
        for (k, v) in knots.iter().zip(z) {
            flat = flat * k.len() + k.partition_point(|x| x < v);
        }
        if !values[flat].is_nan() {
            return Err(Error::Structure("duplicate grid point in table".into()));
        }
        values[flat] = y;
    }
    Ok(Regressor::Multilinear { knots, values })
}

fn fit_polynomial(zs: &[Vec<f64>], ys: &[f64], degree: u32, ridge: f64) -> Result<Regressor> {
    let dims = zs.first().map_or(0, Vec::len);
    let exponents = polynomial_exponents(dims, degree);
    let terms = exponents.len();
    if zs.len() < terms + 1 {
        return Err(Error::Conditioning(format!(
            "degree-{degree} polynomial has {terms} terms, needs at least {} points, got {}",
            terms + 1,
            zs.len()
        )));
    }
    let x = DMatrix::from_fn(zs.len(), terms, |r, c| monomial(&exponents[c], &zs[r]));
    let y = DVector::from_column_slice(ys);
    let gram = x.transpose() * &x;
    let eig = gram.clone().symmetric_eigenvalues();
    let (min, max) = eig.iter().fold((f64::INFINITY, 0f64), |(a, b), &v| (a.min(v), b.max(v)));
    if !(min > 1e-12 * max) {
        return Err(Error::Conditioning(format!(
            "rank-deficient design (eigenvalue ratio {:.3e})",
            min / max
        )));
    }
    let mut a = gram;
    // the intercept (first term) is not penalised
    for i in 1..terms {
        a[(i, i)] += ridge;
    }
    let coeffs = a
        .cholesky()
        .ok_or_else(|| Error::Conditioning("normal equations not positive definite".into()))?
        .solve(&(x.transpose() * y));
    Ok(Regressor::Polynomial {
        exponents,
        coeffs: coeffs.iter().copied().collect(),
    })
}

/// Trains one regressor per distribution parameter of `kpi`.
pub fn train(table: &DistributionTable, kpi: Kpi, kind: RegressorKind) -> Result<SurrogateModel> {
    let rows: Vec<&TableRow> = table.rows_for(kpi).collect();
    let first = rows
        .first()
        .ok_or_else(|| Error::Structure(format!("table has no rows for {kpi}")))?;
    let family = first.dist.family;
    if rows.iter().any(|r| r.dist.family != family) {
        return Err(Error::Structure(format!("{kpi} rows mix distribution families")));
    }
    if let RegressorKind::PolynomialRidge { degree, ridge } = kind {
        if degree == 0 || degree > 2 || !(ridge >= 0.0) {
            return Err(Error::Config("polynomial degree must be 1 or 2 and ridge >= 0".into()));
        }
    }
    let naxes = table.axes.len();
    if rows.iter().any(|r| r.values.len() != naxes) {
        return Err(Error::Structure("table row has wrong number of condition values".into()));
    }
    let domain: Vec<[f64; 2]> = (0..naxes)
        .map(|i| {
            rows.iter().fold([f64::INFINITY, f64::NEG_INFINITY], |[lo, hi], r| {
                [lo.min(r.values[i]), hi.max(r.values[i])]
            })
        })
        .collect();
    let mut model = SurrogateModel {
        kpi,
        family,
        kind,
        axes: table.axes.clone(),
        domain,
        regressors: Vec::new(),
        training_error: Vec::new(),
    };
    let zs: Vec<Vec<f64>> = rows.iter().map(|r| model.standardize(&r.values)).collect();
    for param in 0..family.param_count() {
        let log_domain =
            family.is_positive_param(param) && matches!(kind, RegressorKind::PolynomialRidge { .. });
        let ys: Vec<f64> = rows
            .iter()
            .map(|r| {
                let v = r.dist.params[param];
                if log_domain {
                    v.ln()
                } else {
                    v
                }
            })
            .collect();
        let regressor = match kind {
            RegressorKind::MultilinearInterp => fit_multilinear(&zs, &ys)?,
            RegressorKind::PolynomialRidge { degree, ridge } => fit_polynomial(&zs, &ys, degree, ridge)?,
        };
        model.regressors.push(ParamRegressor { param, log_domain, regressor });
    }
    for param in 0..family.param_count() {
        let mut sse = 0.0;
        for r in &rows {
            let p = model.predict_raw(&r.values)?.dist.params[param];
            sse += (p - r.dist.params[param]).powi(2);
        }
        model.training_error.push((sse / rows.len() as f64).sqrt());
    }
    Ok(model)
}

/// The persisted set of per-KPI models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSet {
    pub format: String,
    pub models: Vec<SurrogateModel>,
}

impl SurrogateSet {
    pub fn new(models: Vec<SurrogateModel>) -> Self {
        SurrogateSet {
            format: MODEL_FORMAT.to_string(),
            models,
        }
    }

    /// Trains every KPI present in the table.
    pub fn train_all(table: &DistributionTable, kind: RegressorKind) -> Result<Self> {
        let mut models = Vec::new();
        for kpi in Kpi::ALL {
            if table.rows_for(kpi).next().is_some() {
                models.push(train(table, kpi, kind)?);
            }
        }
        Ok(SurrogateSet::new(models))
    }

    pub fn get(&self, kpi: Kpi) -> Option<&SurrogateModel> {
        self.models.iter().find(|m| m.kpi == kpi)
    }

    /// Errors unless every KPI has a model.
    pub fn require_all(&self) -> Result<()> {
        for kpi in Kpi::ALL {
            if self.get(kpi).is_none() {
                return Err(Error::Config(format!("surrogate set has no model for {kpi}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Structure(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: SurrogateSet = serde_json::from_str(text).map_err(|e| Error::Parse {
            location: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        if set.format != MODEL_FORMAT {
            return Err(Error::Config(format!(
                "unsupported model format {:?}, expected {MODEL_FORMAT:?}",
                set.format
            )));
        }
        Ok(set)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
