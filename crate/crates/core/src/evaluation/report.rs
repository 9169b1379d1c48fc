use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::plot::{bar_chart, line_chart};
use super::{summarize, AnnotatedImage, EvalError, EvalRecord, MetricOptions, MetricSummary};

/// Specialized minus baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub mae: f64,
    pub rmse: f64,
    pub mrae: f64,
}

impl MetricDelta {
    fn between(specialized: &MetricSummary, baseline: &MetricSummary) -> Self {
        Self {
            mae: specialized.mae - baseline.mae,
            rmse: specialized.rmse - baseline.rmse,
            mrae: specialized.mrae - baseline.mrae,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: MetricSummary,
    pub delta: MetricDelta,
    pub per_subcategory: BTreeMap<String, MetricDelta>,
}

/// Metrics of a run tuned on `n_images` synthetic pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n_images: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mrae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub options: MetricOptions,
    pub overall: MetricSummary,
    pub per_parent: BTreeMap<String, MetricSummary>,
    pub per_subcategory: BTreeMap<String, MetricSummary>,
    /// Subcategories without a tuned embedding.
    pub skipped: Vec<String>,
    /// Per-image failures (lenient mode).
    pub errors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

fn group_summaries(
    records: &[EvalRecord],
    key: impl Fn(&EvalRecord) -> &str,
    opts: &MetricOptions,
) -> Result<BTreeMap<String, MetricSummary>, EvalError> {
    let mut groups: BTreeMap<String, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry(key(r).to_string())
            .or_default()
            .push(r.clone());
    }
    groups
        .into_iter()
        .map(|(k, rs)| Ok((k, summarize(&rs, opts)?)))
        .collect()
}

impl Report {
    pub fn build(
        records: &[EvalRecord],
        baseline: Option<&[EvalRecord]>,
        opts: &MetricOptions,
    ) -> Result<Self, EvalError> {
        let overall = summarize(records, opts)?;
        let per_subcategory = group_summaries(records, |r| &r.subcategory, opts)?;
        let comparison = match baseline {
            Some(base) => {
                let base_summary = summarize(base, opts)?;
                let base_subs = group_summaries(base, |r| &r.subcategory, opts)?;
                let per_subcategory = per_subcategory
                    .iter()
                    .filter_map(|(k, s)| {
                        base_subs
                            .get(k)
                            .map(|b| (k.clone(), MetricDelta::between(s, b)))
                    })
                    .collect();
                Some(Comparison {
                    delta: MetricDelta::between(&overall, &base_summary),
                    baseline: base_summary,
                    per_subcategory,
                })
            }
            None => None,
        };
        Ok(Self {
            options: *opts,
            overall,
            per_parent: group_summaries(records, |r| &r.parent, opts)?,
            per_subcategory,
            skipped: Vec::new(),
            errors: Vec::new(),
            comparison,
            sweep: Vec::new(),
            config_hash: None,
        })
    }

    pub fn to_markdown(&self) -> String {
        let row = |name: &str, s: &MetricSummary| {
            format!(
                "| {name} | {:.3} | {:.3} | {:.3} | {} |\n",
                s.mae, s.rmse, s.mrae, s.records
            )
        };
        let mut md = String::from(
            "# Counting report\n\n| scope | MAE | RMSE | MRAE | records |\n|---|---|---|---|---|\n",
        );
        md += &row("overall", &self.overall);
        for (k, s) in &self.per_parent {
            md += &row(&format!("parent: {k}"), s);
        }
        for (k, s) in &self.per_subcategory {
            md += &row(k, s);
        }
        if let Some(c) = &self.comparison {
            md += "\n## Against baseline\n\n| scope | MAE | RMSE | MRAE |\n|---|---|---|---|\n";
            md += &format!(
                "| baseline | {:.3} | {:.3} | {:.3} |\n| delta | {:+.3} | {:+.3} | {:+.3} |\n",
                c.baseline.mae,
                c.baseline.rmse,
                c.baseline.mrae,
                c.delta.mae,
                c.delta.rmse,
                c.delta.mrae
            );
            for (k, d) in &c.per_subcategory {
                md += &format!(
                    "| delta {k} | {:+.3} | {:+.3} | {:+.3} |\n",
                    d.mae, d.rmse, d.mrae
                );
            }
        }
        if !self.sweep.is_empty() {
            md +=
                "\n## Synthetic image count\n\n| images | MAE | RMSE | MRAE |\n|---|---|---|---|\n";
            for p in &self.sweep {
                md += &format!(
                    "| {} | {:.3} | {:.3} | {:.3} |\n",
                    p.n_images, p.mae, p.rmse, p.mrae
                );
            }
        }
        if self.overall.zero_substitutions > 0 {
            md += &format!(
                "\nMRAE used max(y, 1) as denominator for {} record(s).\n",
                self.overall.zero_substitutions
            );
        }
        if !self.skipped.is_empty() {
            md += &format!("\nSkipped (no embedding): {}\n", self.skipped.join(", "));
        }
        if !self.errors.is_empty() {
            md += "\nErrors:\n\n";
            for e in &self.errors {
                md += &format!("- {e}\n");
            }
        }
        md
    }
}

/// Output of [`collect_records`].
#[derive(Debug, Clone, Default)]
pub struct Collected {
    pub records: Vec<EvalRecord>,
    pub skipped: Vec<String>,
    pub errors: Vec<String>,
}

/// Runs `predict(image, subcategory)` for every subcategory present in every
/// image. `Ok(None)` marks a subcategory the pipeline cannot handle (it is
/// skipped and listed); `Err` is a per-item failure. Records come back in
/// image order, subcategories sorted within an image.
pub fn collect_records<F>(images: &[AnnotatedImage], predict: F, jobs: usize) -> Collected
where
    F: Fn(&AnnotatedImage, &str) -> Result<Option<f64>, String> + Sync,
{
    type Item = (EvalRecord, Result<Option<f64>, String>);
    let run_one = |img: &AnnotatedImage| -> Vec<Item> {
        img.counts()
            .into_iter()
            .map(|(sub, y)| {
                let rec = EvalRecord {
                    image_id: img.id.clone(),
                    subcategory: sub.clone(),
                    parent: img.parent.clone(),
                    y: y as f64,
                    y_hat: 0.0,
                };
                let out = predict(img, &sub);
                (rec, out)
            })
            .collect()
    };
    let results: Vec<Vec<Item>> = if jobs > 1 {
        match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            Ok(pool) => pool.install(|| images.par_iter().map(run_one).collect()),
            Err(_) => images.iter().map(run_one).collect(),
        }
    } else {
        images.iter().map(run_one).collect()
    };
    let mut out = Collected::default();
    let mut skipped = BTreeSet::new();
    for (mut rec, res) in results.into_iter().flatten() {
        match res {
            Ok(Some(y_hat)) => {
                rec.y_hat = y_hat;
                out.records.push(rec);
            }
            Ok(None) => {
                skipped.insert(rec.subcategory);
            }
            Err(e) => out
                .errors
                .push(format!("{}/{}: {e}", rec.image_id, rec.subcategory)),
        }
    }
    out.skipped = skipped.into_iter().collect();
    out
}

/// Writes `report.json`, `report.md` and PNG charts into `dir`.
pub fn write_report(dir: &Path, report: &Report) -> Result<Vec<PathBuf>, EvalError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| EvalError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut written = Vec::new();
    let json = dir.join("report.json");
    fs::write(
        &json,
        serde_json::to_string_pretty(report).expect("serializable") + "\n",
    )
    .map_err(io(&json))?;
    written.push(json);
    let md = dir.join("report.md");
    fs::write(&md, report.to_markdown()).map_err(io(&md))?;
    written.push(md);

    let bars: Vec<Vec<f64>> = report
        .per_subcategory
        .iter()
        .map(|(k, s)| {
            let mut v = vec![s.mae];
            if let Some(c) = &report.comparison {
                if let Some(d) = c.per_subcategory.get(k) {
                    v.push(s.mae - d.mae);
                }
            }
            v
        })
        .collect();
    let save = |img: image::RgbImage, path: PathBuf| -> Result<PathBuf, EvalError> {
        img.save(&path).map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
        Ok(path)
    };
    written.push(save(bar_chart(&bars), dir.join("per_subcategory_mae.png"))?);
    if !report.sweep.is_empty() {
        let line: Vec<(f64, f64)> = report
            .sweep
            .iter()
            .map(|p| (p.n_images as f64, p.mae))
            .collect();
        written.push(save(line_chart(&[line]), dir.join("mae_vs_images.png"))?);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(img: &str, sub: &str, parent: &str, y: f64, y_hat: f64) -> EvalRecord {
        EvalRecord {
            image_id: img.into(),
            subcategory: sub.into(),
            parent: parent.into(),
            y,
            y_hat,
        }
    }

    #[test]
    fn identical_runs_have_zero_delta() {
        let records = vec![rec("1", "a", "p", 3.0, 5.0), rec("2", "b", "q", 2.0, 2.5)];
        let report = Report::build(&records, Some(&records), &MetricOptions::default()).unwrap();
        let c = report.comparison.unwrap();
        assert_eq!((c.delta.mae, c.delta.rmse, c.delta.mrae), (0.0, 0.0, 0.0));
        assert!(c.per_subcategory.values().all(|d| d.mae == 0.0));
        assert_eq!(report.overall.subcategories, 2);
        assert_eq!(report.per_parent.len(), 2);
    }

    #[test]
    fn writes_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![rec("1", "a", "p", 3.0, 5.0)];
        let mut report = Report::build(&records, None, &MetricOptions::default()).unwrap();
        report.sweep = vec![
            SweepPoint {
                n_images: 0,
                mae: 2.0,
                rmse: 2.0,
                mrae: 0.5,
            },
            SweepPoint {
                n_images: 10,
                mae: 1.0,
                rmse: 1.0,
                mrae: 0.3,
            },
        ];
        let files = write_report(dir.path(), &report).unwrap();
        assert_eq!(files.len(), 4);
        let back: Report = serde_json::from_str(&fs::read_to_string(&files[0]).unwrap()).unwrap();
        assert_eq!(back, report);
        assert!(report.to_markdown().contains("| overall | 2.000 |"));
    }
}
