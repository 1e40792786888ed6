// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    classify_heads, head_reports, write_head_reports_csv, AnalysisReport, Setting,
};
use crate::cma::{
    head_sweep, knockout, module_sweep, noise_curve, read_records_csv, write_records_csv,
    KnockoutResult, NoisePoint, SweepKind, SweepResult,
};
use crate::corruption::CorruptionMode;
use crate::error::{Error, Result};
use crate::model::{build_planted_model, load_model, save_model, HeadSite, VlmModel};
use crate::numerics::Rng;
use crate::vocab::AttributeKind;
use crate::worldgen::{generate_dataset, save_dataset, OptionPosition, TaskVariant, VqaSample};

use super::{render_bar_chart, render_heatmap, ExperimentConfig, Provenance};

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text.as_bytes())
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    #[serde(flatten)]
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: &'a T,
}

fn stamped_json<T: Serialize>(path: &Path, provenance: &Provenance, body: &T) -> Result<()> {
    write_json(path, &Stamped { provenance, body })
}

fn task_seed(seed: u64, task: TaskVariant) -> u64 {
    let stream = TaskVariant::ALL
        .iter()
        .position(|&t| t == task)
        .expect("known task") as u64;
    Rng::with_stream(seed, 1 + stream).next_u64()
}

fn datasets(config: &ExperimentConfig) -> Result<Vec<(TaskVariant, Vec<VqaSample>)>> {
    config
        .dataset
        .tasks
        .iter()
        .map(|&t| {
            let d = generate_dataset(
                config.dataset.n,
                task_seed(config.seed, t),
                config.dataset.balance,
                t,
            )?;
            Ok((t, d))
        })
        .collect()
}

/// Dataset used for classification and knockouts: the mixed task when
/// configured, otherwise the first one.
fn probe_dataset(sets: &[(TaskVariant, Vec<VqaSample>)]) -> &[VqaSample] {
    sets.iter()
        .find(|(t, _)| *t == TaskVariant::Mixed)
        .unwrap_or(&sets[0])
        .1
        .as_slice()
}

fn resolve_model(config: &ExperimentConfig) -> Result<VlmModel> {
    match &config.model_path {
        Some(p) => load_model(p),
        None => build_planted_model(&config.model, &config.planted),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenManifest {
    pub task: TaskVariant,
    pub file: String,
    pub n: usize,
    pub balance: bool,
    pub seed: u64,
    pub option_before_or: usize,
    pub option_after_or: usize,
    pub color_varied: usize,
    pub shape_varied: usize,
}

/// Writes one JSONL dataset per task and a manifest of their splits.
pub fn cmd_gen(config: &ExperimentConfig) -> Result<Vec<GenManifest>> {
    let prov = Provenance::new(config);
    let mut manifests = Vec::new();
    for (task, data) in datasets(config)? {
        let file = format!("dataset_{}.jsonl", task.as_str());
        let path = config.out_dir.join(&file);
        fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
        save_dataset(&data, &path)?;
        let count = |f: &dyn Fn(&VqaSample) -> bool| data.iter().filter(|s| f(s)).count();
        manifests.push(GenManifest {
            task,
            file,
            n: data.len(),
            balance: config.dataset.balance,
            seed: task_seed(config.seed, task),
            option_before_or: count(&|s| s.correct_position == OptionPosition::BeforeOr),
            option_after_or: count(&|s| s.correct_position == OptionPosition::AfterOr),
            color_varied: count(&|s| s.varied_attribute == AttributeKind::Color),
            shape_varied: count(&|s| s.varied_attribute == AttributeKind::Shape),
        });
    }
    #[derive(Serialize)]
    struct Body<'a> {
        datasets: &'a [GenManifest],
    }
    stamped_json(
        &config.out_dir.join("datasets.json"),
        &prov,
        &Body {
            datasets: &manifests,
        },
    )?;
    Ok(manifests)
}

/// Builds (or loads) the model and writes it with a JSON description.
pub fn cmd_plant(config: &ExperimentConfig) -> Result<VlmModel> {
    let model = resolve_model(config)?;
    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    save_model(&model, &config.out_dir.join("model.nbm"))?;
    #[derive(Serialize)]
    struct Body<'a> {
        model: &'a crate::model::ModelConfig,
        planted: &'a Option<crate::model::PlantedSpec>,
        n_params: usize,
    }
    let body = Body {
        model: &model.config,
        planted: &model.planted,
        n_params: model.params().iter().map(|p| p.len()).sum(),
    };
    stamped_json(
        &config.out_dir.join("model.json"),
        &Provenance::new(config),
        &body,
    )?;
    Ok(model)
}

/// One sweep of one task under one corruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutput {
    pub task: TaskVariant,
    pub result: SweepResult,
}

impl SweepOutput {
    pub fn stem(&self) -> String {
        format!(
            "sweep_{}_{}",
            self.task.as_str(),
            self.result.corruption.label()
        )
    }
}

fn sweep_all(
    config: &ExperimentConfig,
    model: &VlmModel,
    sets: &[(TaskVariant, Vec<VqaSample>)],
) -> Result<Vec<SweepOutput>> {
    let mut out = Vec::new();
    for (task, data) in sets {
        for spec in &config.sweep.corruptions {
            let s = &config.sweep;
            let result = match s.kind {
                SweepKind::Module => module_sweep(model, data, spec, s.metric, config.seed)?,
                SweepKind::Head => head_sweep(model, data, spec, s.metric, s.target, config.seed)?,
            };
            info!(
                "{} {}: kept {}/{} clean-correct samples",
                task.as_str(),
                spec.label(),
                result.n_kept,
                result.n_samples
            );
            out.push(SweepOutput {
                task: *task,
                result,
            });
        }
    }
    Ok(out)
}

fn write_sweeps(config: &ExperimentConfig, sweeps: &[SweepOutput]) -> Result<()> {
    let prov = Provenance::new(config);
    for s in sweeps {
        let mut buf = format!("# {}\n", prov.line()).into_bytes();
        write_records_csv(&s.result.records, &mut buf)?;
        write(&config.out_dir.join(format!("{}.csv", s.stem())), &buf)?;
        stamped_json(&config.out_dir.join(format!("{}.json", s.stem())), &prov, s)?;
    }
    Ok(())
}

/// Runs the configured sweep for every task and corruption and writes
/// per-sample CSV and aggregate JSON.
pub fn cmd_sweep(config: &ExperimentConfig) -> Result<Vec<SweepOutput>> {
    let model = resolve_model(config)?;
    let sets = datasets(config)?;
    let sweeps = sweep_all(config, &model, &sets)?;
    write_sweeps(config, &sweeps)?;
    Ok(sweeps)
}

/// Reads a sweep JSON file and the per-sample CSV next to it.
pub fn load_sweep(json_path: &Path) -> Result<SweepOutput> {
    let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let mut out: SweepOutput = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", json_path.display())))?;
    let csv = json_path.with_extension("csv");
    if csv.exists() {
        let f = fs::File::open(&csv).map_err(|e| Error::io(&csv, e))?;
        out.result.records = read_records_csv(BufReader::new(f))?;
    }
    Ok(out)
}

fn fusion_heads(model: &VlmModel) -> Vec<HeadSite> {
    (0..model.config.n_layers)
        .flat_map(|l| (0..model.config.n_heads).map(move |h| HeadSite::new(l, h)))
        .collect()
}

fn knockout_all(
    config: &ExperimentConfig,
    model: &VlmModel,
    data: &[VqaSample],
) -> Result<Vec<KnockoutResult>> {
    let heads = config
        .knockout
        .heads
        .clone()
        .unwrap_or_else(|| fusion_heads(model));
    knockout(
        model,
        data,
        model.config.arch.fusion_submodule(),
        &heads,
        config.knockout.ablation,
    )
}

fn write_knockouts(config: &ExperimentConfig, results: &[KnockoutResult]) -> Result<()> {
    let prov = Provenance::new(config);
    let mut csv = format!("# {}\nlayer,head,submodule,ablation,mean_drop,accuracy_before,accuracy_after,max_logit_change\n", prov.line());
    for r in results {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.site.layer,
            r.site.head,
            r.submodule.as_str(),
            serde_json::to_value(r.ablation)?
                .as_str()
                .unwrap_or_default(),
            r.mean_drop,
            r.accuracy_before,
            r.accuracy_after,
            r.max_logit_change
        ));
    }
    write(&config.out_dir.join("knockout.csv"), csv.as_bytes())?;
    #[derive(Serialize)]
    struct Body<'a> {
        knockouts: &'a [KnockoutResult],
    }
    stamped_json(
        &config.out_dir.join("knockout.json"),
        &prov,
        &Body { knockouts: results },
    )
}

/// Ablates each configured head on clean runs of the probe dataset.
pub fn cmd_knockout(config: &ExperimentConfig) -> Result<Vec<KnockoutResult>> {
    let model = resolve_model(config)?;
    let sets = datasets(config)?;
    let results = knockout_all(config, &model, probe_dataset(&sets))?;
    write_knockouts(config, &results)?;
    Ok(results)
}

fn analyze(
    config: &ExperimentConfig,
    model: &VlmModel,
    probe: &[VqaSample],
    sweeps: &[SweepOutput],
) -> Result<AnalysisReport> {
    let mut settings: BTreeMap<Setting, Vec<crate::cma::SiteRecord>> = BTreeMap::new();
    for s in sweeps {
        if s.result.kind != SweepKind::Head
            || s.result.corruption.mode == CorruptionMode::GaussianNoise
        {
            continue;
        }
        let setting = Setting {
            task: s.task,
            modality: s.result.corruption.mode.modality(),
        };
        if settings.insert(setting, s.result.records.clone()).is_some() {
            return Err(Error::InvalidConfig(format!(
                "setting {} swept twice",
                setting.label()
            )));
        }
    }
    let settings: Vec<_> = settings.into_iter().collect();
    let functions = classify_heads(model, probe, &config.analysis.classifier)?;
    head_reports(
        &settings,
        config.analysis.sigma_multiplier,
        config.analysis.topk_fraction,
        Some(&functions),
    )
}

fn write_analysis(config: &ExperimentConfig, report: &AnalysisReport) -> Result<()> {
    let prov = Provenance::new(config);
    let mut buf = Vec::new();
    write_head_reports_csv(report, Some(&prov.line()), &mut buf)?;
    write(&config.out_dir.join("heads.csv"), &buf)?;
    stamped_json(&config.out_dir.join("analysis.json"), &prov, report)
}

/// Universal heads, ranks, overlaps and function classes from head sweeps.
pub fn cmd_analyze(config: &ExperimentConfig, sweeps: &[SweepOutput]) -> Result<AnalysisReport> {
    let model = resolve_model(config)?;
    let sets = datasets(config)?;
    let report = analyze(config, &model, probe_dataset(&sets), sweeps)?;
    write_analysis(config, &report)?;
    Ok(report)
}

/// Writes a heatmap per effect matrix and a bar chart of the heads with the
/// largest mean effect over all head sweeps.
pub fn cmd_render(config: &ExperimentConfig, sweeps: &[SweepOutput]) -> Result<Vec<PathBuf>> {
    let comment = Provenance::new(config).line();
    let mut files = Vec::new();
    let mut head_sum: BTreeMap<HeadSite, (f64, usize)> = BTreeMap::new();
    for s in sweeps {
        for m in &s.result.matrices {
            let title = format!(
                "{} / {} / {} / {}",
                s.task.as_str(),
                s.result.corruption.label(),
                m.submodule.as_str(),
                m.metric.as_str()
            );
            let svg = render_heatmap(m, &title, &config.palette, &comment)?;
            let path = config
                .out_dir
                .join(format!("{}_{}.svg", s.stem(), m.submodule.as_str()));
            write(&path, svg.as_bytes())?;
            files.push(path);
            if s.result.kind == SweepKind::Head {
                for h in 0..m.n_rows {
                    for l in 0..m.n_layers {
                        let e = head_sum.entry(HeadSite::new(l, h)).or_insert((0.0, 0));
                        e.0 += m.get(h, l).abs();
                        e.1 += 1;
                    }
                }
            }
        }
    }
    if !head_sum.is_empty() {
        let mut ranked: Vec<(HeadSite, f64)> = head_sum
            .into_iter()
            .map(|(h, (s, n))| (h, s / n as f64))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(10);
        let labels: Vec<String> = ranked.iter().map(|(h, _)| h.to_string()).collect();
        let values: Vec<f64> = ranked.iter().map(|r| r.1).collect();
        let svg = render_bar_chart(
            "mean |effect| per head",
            &labels,
            &values,
            &config.palette,
            &comment,
        )?;
        let path = config.out_dir.join("head_rank.svg");
        write(&path, svg.as_bytes())?;
        files.push(path);
    }
    if files.is_empty() {
        return Err(Error::Data("no effect matrices to render".into()));
    }
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct SweepSummary {
    task: TaskVariant,
    corruption: String,
    n_kept: usize,
    n_samples: usize,
    argmax_row: Option<usize>,
    argmax_layer: Option<usize>,
    max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ReportSummary {
    datasets: Vec<GenManifest>,
    sweeps: Vec<SweepSummary>,
    multimodal_heads: Vec<HeadSite>,
    vision_only_heads: Vec<HeadSite>,
    text_only_heads: Vec<HeadSite>,
    knockouts: Vec<KnockoutResult>,
    noise: Vec<NoisePoint>,
}

/// Runs every stage and writes all outputs plus `summary.json`.
pub fn cmd_report(config: &ExperimentConfig) -> Result<()> {
    let manifests = cmd_gen(config)?;
    let model = cmd_plant(config)?;
    let sets = datasets(config)?;
    let probe = probe_dataset(&sets);
    let sweeps = sweep_all(config, &model, &sets)?;
    write_sweeps(config, &sweeps)?;
    let knockouts = knockout_all(config, &model, probe)?;
    write_knockouts(config, &knockouts)?;
    let analysis = if config.sweep.kind == SweepKind::Head {
        let a = analyze(config, &model, probe, &sweeps)?;
        write_analysis(config, &a)?;
        Some(a)
    } else {
        info!("module sweep configured; skipping head analysis");
        None
    };
    cmd_render(config, &sweeps)?;
    let noise = noise_curve(&model, probe, &config.noise_sigmas, config.seed)?;
    let prov = Provenance::new(config);
    let mut csv = format!(
        "# {}\nsigma,mean_abs_logit_difference,corrupt_accuracy,n_samples\n",
        prov.line()
    );
    for p in &noise {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            p.sigma, p.mean_abs_logit_difference, p.corrupt_accuracy, p.n_samples
        ));
    }
    write(&config.out_dir.join("noise.csv"), csv.as_bytes())?;

    let with = |label| {
        analysis
            .as_ref()
            .map(|a| {
                a.heads
                    .iter()
                    .filter(|h| h.label == label)
                    .map(|h| HeadSite::new(h.layer, h.head))
                    .collect()
            })
            .unwrap_or_default()
    };
    let summary = ReportSummary {
        datasets: manifests,
        sweeps: sweeps
            .iter()
            .map(|s| {
                let m = s
                    .result
                    .matrices
                    .iter()
                    .max_by(|a, b| a.max_abs().total_cmp(&b.max_abs()));
                let arg = m.and_then(|m| m.argmax_abs());
                SweepSummary {
                    task: s.task,
                    corruption: s.result.corruption.label(),
                    n_kept: s.result.n_kept,
                    n_samples: s.result.n_samples,
                    argmax_row: arg.map(|a| a.0),
                    argmax_layer: arg.map(|a| a.1),
                    max_abs: m.map_or(0.0, |m| m.max_abs()),
                }
            })
            .collect(),
        multimodal_heads: with(crate::analysis::UnionLabel::Multimodal),
        vision_only_heads: with(crate::analysis::UnionLabel::VisionOnly),
        text_only_heads: with(crate::analysis::UnionLabel::TextOnly),
        knockouts,
        noise,
    };
    stamped_json(&config.out_dir.join("summary.json"), &prov, &summary)
}
