use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PipelineError, RunConfig};
use crate::counting::{count_fine_grained, count_raw, overlay, Diagnostics};
use crate::evaluation::{
    collect_records, load_dataset, write_report, AnnotatedImage, Report, SweepPoint,
};
use crate::specializer::{concept_path, load_concept, tune, write_concept, ConceptFile};
use crate::synthesis::{
    load_pairs, synthesize_dataset, write_pair, Polarity, SynthesisFailure, SynthesisOptions,
};
use crate::taxonomy::{expand_prompts, source_negatives, CategorySpec, NegativeSource};
use crate::util::slug;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(PipelineError::io(path))
}

fn pool(jobs: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub category: String,
    pub negatives: Vec<String>,
    pub positives_written: usize,
    pub negatives_written: usize,
    pub failures: usize,
}

#[derive(Serialize)]
struct SpecRecord<'a> {
    spec: &'a CategorySpec,
    config_hash: &'a str,
    failures: &'a [SynthesisFailure],
}

/// Resolves negatives, expands prompts and writes the synthetic set of every
/// configured category. Existing data for a category is replaced.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Vec<SynthSummary>, PipelineError> {
    cfg.validate()?;
    let hash = cfg.hash();
    let generator = cfg.generator()?;
    let needs_llm = cfg
        .categories
        .iter()
        .any(|c| c.negative_source == NegativeSource::LlmGenerated);
    let suggester = if needs_llm {
        Some(cfg.suggester()?)
    } else {
        None
    };
    let mut summaries = Vec::new();
    for spec in &cfg.categories {
        let err = |source| PipelineError::Taxonomy {
            category: spec.name.clone(),
            source,
        };
        let resolved =
            source_negatives(spec, cfg.synthesis.n_negatives, suggester.as_deref()).map_err(err)?;
        let per_negative = cfg
            .synthesis
            .n_neg_total
            .div_ceil(resolved.negatives.len().max(1));
        let n_prompts = cfg.synthesis.n_pos.max(per_negative).max(1);
        let bundle = expand_prompts(&resolved, n_prompts, cfg.seed).map_err(err)?;
        let opts = SynthesisOptions {
            n_pos: cfg.synthesis.n_pos,
            n_neg_total: cfg.synthesis.n_neg_total,
            seed: cfg.seed,
            tau: cfg.synthesis.tau,
            block_subset: cfg.synthesis.block_subset.clone(),
            jobs: cfg.jobs,
        };
        let output = synthesize_dataset(&resolved, &bundle, generator.as_ref(), &opts).map_err(
            |source| PipelineError::Synthesis {
                category: spec.name.clone(),
                source,
            },
        )?;

        let dir = cfg.out.join("synth").join(slug(&spec.name));
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(PipelineError::io(&dir))?;
        }
        let mut counts = [0usize; 2];
        for pair in &output.pairs {
            let slot = usize::from(pair.polarity == Polarity::Negative);
            write_pair(&cfg.out, &spec.name, counts[slot], pair, &hash).map_err(|source| {
                PipelineError::Synthesis {
                    category: spec.name.clone(),
                    source,
                }
            })?;
            counts[slot] += 1;
        }
        write_json(
            &dir.join("spec.json"),
            &SpecRecord {
                spec: &resolved,
                config_hash: &hash,
                failures: &output.failures,
            },
        )?;
        tracing::info!(
            category = %spec.name,
            positives = counts[0],
            negatives = counts[1],
            failures = output.failures.len(),
            "synthetic set written"
        );
        summaries.push(SynthSummary {
            category: spec.name.clone(),
            negatives: resolved.negatives.clone(),
            positives_written: counts[0],
            negatives_written: counts[1],
            failures: output.failures.len(),
        });
    }
    Ok(summaries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneSummary {
    pub category: String,
    pub path: PathBuf,
    pub selected_epoch: usize,
    pub val_loss: f64,
}

/// Tunes one concept per configured category from the stored synthetic
/// sets. Categories run in parallel, bounded by `jobs`; the run seed drives
/// tuning.
pub fn cmd_tune(cfg: &RunConfig) -> Result<Vec<TuneSummary>, PipelineError> {
    cfg.validate()?;
    let hash = cfg.hash();
    let segmenter = cfg.segmenter();
    let mut tuning = cfg.tuning.clone();
    tuning.seed = cfg.seed;
    let run = |spec: &CategorySpec| -> Result<TuneSummary, PipelineError> {
        let dir = cfg.out.join("synth").join(slug(&spec.name));
        if !dir.is_dir() {
            return Err(PipelineError::MissingSynth {
                category: spec.name.clone(),
                path: dir.display().to_string(),
            });
        }
        let pairs =
            load_pairs(&cfg.out, &spec.name).map_err(|source| PipelineError::Synthesis {
                category: spec.name.clone(),
                source,
            })?;
        let before = segmenter.parameter_checksum();
        let concept = tune(segmenter.as_ref(), &spec.name, &pairs, &tuning).map_err(|source| {
            PipelineError::Tuning {
                category: spec.name.clone(),
                source,
            }
        })?;
        let checksum = segmenter.parameter_checksum();
        assert_eq!(
            before, checksum,
            "segmenter parameters changed during tuning"
        );
        let val_loss = concept.history[concept.selected_epoch - 1].val_loss;
        let file = ConceptFile {
            category: concept.category,
            init: concept.init,
            selected_epoch: concept.selected_epoch,
            segmenter: segmenter.name().to_string(),
            segmenter_checksum: checksum,
            config_hash: hash.clone(),
            history: concept.history,
            z: concept.z,
        };
        let path = write_concept(&cfg.out, &file).map_err(|source| PipelineError::Tuning {
            category: spec.name.clone(),
            source,
        })?;
        tracing::info!(category = %spec.name, epoch = file.selected_epoch, val_loss, "concept written");
        Ok(TuneSummary {
            category: spec.name.clone(),
            path,
            selected_epoch: file.selected_epoch,
            val_loss,
        })
    };
    if cfg.jobs > 1 && segmenter.concurrent() {
        pool(cfg.jobs).install(|| cfg.categories.par_iter().map(run).collect())
    } else {
        cfg.categories.iter().map(run).collect()
    }
}

fn load_z(cfg: &RunConfig, category: &str) -> Result<Vec<f64>, PipelineError> {
    let path = concept_path(&cfg.out, category);
    if !path.is_file() {
        return Err(PipelineError::MissingConcept {
            category: category.to_string(),
            path: path.display().to_string(),
        });
    }
    load_concept(&path)
        .map(|f| f.z)
        .map_err(|source| PipelineError::Tuning {
            category: category.to_string(),
            source,
        })
}

fn open_rgb(path: &Path) -> Result<image::RgbImage, String> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountOutput {
    pub image: PathBuf,
    pub category: String,
    pub prompt: String,
    pub config_hash: String,
    #[serde(flatten)]
    pub diagnostics: Diagnostics,
}

/// Counts every configured category in each input image (directories are
/// expanded to the PNG and JPEG files they contain) and writes diagnostics, plus
/// overlays when enabled.
pub fn cmd_count(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<Vec<CountOutput>, PipelineError> {
    cfg.validate()?;
    let hash = cfg.hash();
    let mut images = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .map_err(PipelineError::io(input))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension().and_then(|x| x.to_str()).is_some_and(|x| {
                        ["png", "jpg", "jpeg"]
                            .iter()
                            .any(|e| x.eq_ignore_ascii_case(e))
                    })
                })
                .collect();
            found.sort();
            images.extend(found);
        } else {
            images.push(input.clone());
        }
    }
    let concepts: Vec<(&CategorySpec, Vec<f64>)> = cfg
        .categories
        .iter()
        .map(|c| Ok((c, load_z(cfg, &c.name)?)))
        .collect::<Result<_, PipelineError>>()?;
    let segmenter = cfg.segmenter();
    let counter = cfg.counter();

    let mut outputs = Vec::new();
    for path in &images {
        let image = open_rgb(path).map_err(|message| PipelineError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(message),
        })?;
        let stem = path
            .file_stem()
            .map_or("image".into(), |s| s.to_string_lossy().into_owned());
        for (spec, z) in &concepts {
            let prompt = cfg
                .count
                .broad_prompt
                .clone()
                .unwrap_or_else(|| spec.broad_prompt().to_string());
            let result = count_fine_grained(
                segmenter.as_ref(),
                counter.as_ref(),
                &image,
                &prompt,
                z,
                cfg.count.point_tau,
            )
            .map_err(|source| PipelineError::Counting {
                image: path.display().to_string(),
                source,
            })?;
            let out = CountOutput {
                image: path.clone(),
                category: spec.name.clone(),
                prompt,
                config_hash: hash.clone(),
                diagnostics: result.diagnostics(),
            };
            let dir = cfg.out.join("counts").join(&stem);
            write_json(&dir.join(format!("{}.json", slug(&spec.name))), &out)?;
            if cfg.count.overlays {
                let png = dir.join(format!("{}.overlay.png", slug(&spec.name)));
                overlay(&image, &result)
                    .save(&png)
                    .map_err(|e| PipelineError::Io {
                        path: png.display().to_string(),
                        source: std::io::Error::other(e.to_string()),
                    })?;
            }
            outputs.push(out);
        }
    }
    Ok(outputs)
}

/// Evaluates the stored concepts on a point-annotated dataset, alongside the
/// counter prompted with each image's parent category as baseline, and
/// writes the report under `<out>/eval`. In strict mode any per-image error
/// aborts.
pub fn cmd_eval(cfg: &RunConfig, dataset: &Path, strict: bool) -> Result<Report, PipelineError> {
    let loaded = load_dataset(dataset, strict)?;
    let segmenter = cfg.segmenter();
    let counter = cfg.counter();
    let mut subs: Vec<String> = loaded
        .images
        .iter()
        .flat_map(|i| i.counts().into_keys())
        .collect();
    subs.sort();
    subs.dedup();
    let concepts: BTreeMap<String, Vec<f64>> = subs
        .iter()
        .filter_map(|s| match load_z(cfg, s) {
            Ok(z) => Some(Ok((s.clone(), z))),
            Err(PipelineError::MissingConcept { .. }) => None,
            Err(e) => Some(Err(e)),
        })
        .collect::<Result<_, _>>()?;

    let specialized = collect_records(
        &loaded.images,
        |img: &AnnotatedImage, sub: &str| {
            let Some(z) = concepts.get(sub) else {
                return Ok(None);
            };
            let image = open_rgb(&img.path)?;
            count_fine_grained(
                segmenter.as_ref(),
                counter.as_ref(),
                &image,
                &img.parent,
                z,
                cfg.count.point_tau,
            )
            .map(|r| Some(r.count()))
            .map_err(|e| e.to_string())
        },
        cfg.jobs,
    );
    let baseline = collect_records(
        &loaded.images,
        |img: &AnnotatedImage, sub: &str| {
            if !concepts.contains_key(sub) {
                return Ok(None);
            }
            let image = open_rgb(&img.path)?;
            count_raw(counter.as_ref(), &image, &img.parent)
                .map(Some)
                .map_err(|e| e.to_string())
        },
        cfg.jobs,
    );
    let mut errors: Vec<String> = loaded.errors.iter().map(|e| e.to_string()).collect();
    errors.extend(specialized.errors.iter().cloned());
    if strict && !errors.is_empty() {
        return Err(PipelineError::Eval(
            crate::evaluation::EvalError::Malformed {
                path: dataset.display().to_string(),
                message: errors.join("; "),
            },
        ));
    }
    let mut report = Report::build(&specialized.records, Some(&baseline.records), &cfg.eval)?;
    report.skipped = specialized.skipped;
    report.errors = errors;
    report.config_hash = Some(cfg.hash());
    write_report(&cfg.out.join("eval"), &report)?;
    Ok(report)
}

/// Re-renders `<out>/eval` from its `report.json`, optionally attaching a
/// synthetic-image-count sweep (a JSON list of [`SweepPoint`]).
pub fn cmd_report(cfg: &RunConfig, sweep: Option<&Path>) -> Result<Vec<PathBuf>, PipelineError> {
    let dir = cfg.out.join("eval");
    let path = dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(PipelineError::io(&path))?;
    let malformed = |path: &Path, e: serde_json::Error| {
        PipelineError::Eval(crate::evaluation::EvalError::Malformed {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    };
    let mut report: Report = serde_json::from_str(&text).map_err(|e| malformed(&path, e))?;
    if let Some(sweep) = sweep {
        let text = fs::read_to_string(sweep).map_err(PipelineError::io(sweep))?;
        let mut points: Vec<SweepPoint> =
            serde_json::from_str(&text).map_err(|e| malformed(sweep, e))?;
        points.sort_by_key(|p| p.n_images);
        report.sweep = points;
    }
    Ok(write_report(&dir, &report)?)
}
