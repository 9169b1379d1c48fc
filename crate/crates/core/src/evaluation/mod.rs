//! Per-subcategory counting metrics.
//!
//! Every metric is a two-level average: first over the images containing a
//! subcategory, then over subcategories, so a subcategory seen once weighs as
//! much as one seen five hundred times.

mod dataset;
mod plot;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dataset::{
    convert_fsc147, load_dataset, AnnotatedImage, ItemError, ItemErrorKind, LoadedDataset,
    PointLabel, OTHER,
};
pub use plot::{bar_chart, line_chart};
pub use report::{
    collect_records, write_report, Collected, Comparison, MetricDelta, Report, SweepPoint,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed annotations in {path}: {message}")]
    Malformed { path: String, message: String },
    #[error("dataset item {0}")]
    Item(ItemError),
    #[error("no records to evaluate")]
    Empty,
    #[error("non-finite or negative count in record for {image_id}/{subcategory}")]
    BadRecord {
        image_id: String,
        subcategory: String,
    },
    #[error("relative error undefined for {image_id}/{subcategory}: true count is 0 but prediction is {y_hat}")]
    ZeroTruth {
        image_id: String,
        subcategory: String,
        y_hat: f64,
    },
}

/// One (image, subcategory) observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub subcategory: String,
    pub parent: String,
    pub y: f64,
    pub y_hat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorFn {
    /// `|y - y_hat|`
    Abs,
    /// `(y - y_hat)^2`, square-rooted according to [`RmseMode`].
    Sq,
    /// `|y - y_hat| / y`
    RelAbs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RmseMode {
    /// Root of each subcategory's mean squared error, then averaged.
    #[default]
    PerSubcategory,
    /// Root of the subcategory-averaged mean squared error.
    SqrtOfAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ZeroPolicy {
    /// A zero true count with a non-zero prediction is an error.
    #[default]
    Strict,
    /// Use `max(y, 1)` as the denominator and count the substitution.
    Lenient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct MetricOptions {
    pub rmse: RmseMode,
    pub zero: ZeroPolicy,
}

fn check(records: &[EvalRecord]) -> Result<(), EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    for r in records {
        if !(r.y.is_finite() && r.y_hat.is_finite() && r.y >= 0.0 && r.y_hat >= 0.0) {
            return Err(EvalError::BadRecord {
                image_id: r.image_id.clone(),
                subcategory: r.subcategory.clone(),
            });
        }
    }
    Ok(())
}

fn by_subcategory(records: &[EvalRecord]) -> BTreeMap<&str, Vec<&EvalRecord>> {
    let mut groups: BTreeMap<&str, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.subcategory.as_str()).or_default().push(r);
    }
    groups
}

fn relative(r: &EvalRecord, zero: ZeroPolicy) -> Result<(f64, bool), EvalError> {
    let diff = (r.y - r.y_hat).abs();
    if r.y > 0.0 {
        return Ok((diff / r.y, false));
    }
    if diff == 0.0 {
        return Ok((0.0, false));
    }
    match zero {
        ZeroPolicy::Strict => Err(EvalError::ZeroTruth {
            image_id: r.image_id.clone(),
            subcategory: r.subcategory.clone(),
            y_hat: r.y_hat,
        }),
        ZeroPolicy::Lenient => Ok((diff, true)),
    }
}

/// `(1/C) sum_c (1/|I_c|) sum_{i in I_c} E(y_i, y_hat_i)`.
pub fn metric(
    records: &[EvalRecord],
    error_fn: ErrorFn,
    opts: &MetricOptions,
) -> Result<f64, EvalError> {
    check(records)?;
    let groups = by_subcategory(records);
    let mut total = 0.0;
    for group in groups.values() {
        let mut sum = 0.0;
        for r in group {
            sum += match error_fn {
                ErrorFn::Abs => (r.y - r.y_hat).abs(),
                ErrorFn::Sq => (r.y - r.y_hat).powi(2),
                ErrorFn::RelAbs => relative(r, opts.zero)?.0,
            };
        }
        let mean = sum / group.len() as f64;
        total += match (error_fn, opts.rmse) {
            (ErrorFn::Sq, RmseMode::PerSubcategory) => mean.sqrt(),
            _ => mean,
        };
    }
    let avg = total / groups.len() as f64;
    Ok(match (error_fn, opts.rmse) {
        (ErrorFn::Sq, RmseMode::SqrtOfAverage) => avg.sqrt(),
        _ => avg,
    })
}

/// MAE, RMSE and MRAE of one record set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mae: f64,
    pub rmse: f64,
    pub mrae: f64,
    /// Number of distinct subcategories.
    pub subcategories: usize,
    pub records: usize,
    /// Records whose relative error used the `max(y, 1)` denominator.
    pub zero_substitutions: usize,
}

pub fn summarize(records: &[EvalRecord], opts: &MetricOptions) -> Result<MetricSummary, EvalError> {
    let mut zero_substitutions = 0;
    for r in records {
        if relative(r, opts.zero)?.1 {
            zero_substitutions += 1;
        }
    }
    Ok(MetricSummary {
        mae: metric(records, ErrorFn::Abs, opts)?,
        rmse: metric(records, ErrorFn::Sq, opts)?,
        mrae: metric(records, ErrorFn::RelAbs, opts)?,
        subcategories: by_subcategory(records).len(),
        records: records.len(),
        zero_substitutions,
    })
}
