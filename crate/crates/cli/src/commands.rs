use std::collections::BTreeSet;
use std::path::Path;

use anyhow::Result;
use serde::Serialize;

use tba_core::approx::{
    count_params_patched, final_layer_drift, fit_linear, fit_mlp, make_skipat, patch, span_residual, ApproxPlan,
    Approximator, Arch, Encoder, TrainConfig,
};
use tba_core::capture::{capture, capture_blocks, sample_subset, CaptureOptions, DataSubset, Reduce};
use tba_core::eval::analysis::{drift_curve, fit_span, pca_export, per_class_delta, FitOptions};
use tba_core::eval::dataset::Dataset;
use tba_core::eval::probe::{evaluate, summary_csv, ProbeConfig};
use tba_core::model::ModelConfig;
use tba_core::report::{fmt_sig9, CsvTable};
use tba_core::rng::Rng;
use tba_core::similarity::{candidates_csv, rank_spans, similarity_matrix, Metric, ParamTable};
use tba_core::span::{parse_span_list, Span};
use tba_core::synth::{make_planted_model, make_synth_dataset, PlantDirective, PlantSpec, SynthData};
use tba_core::{Error, TransformerModel};

use crate::record::Run;
use crate::{
    CaptureArgs, Command, CompareArgs, DriftArgs, EvalArgs, FitArgs, FitFlags, GeneralizeArgs, IdentifyArgs,
    PatchArgs, PcaArgs, ProbeFlags, ReduceArgs, SubsetArgs, SynthArgs,
};

const IDENTIFY_SAMPLES: usize = 500;
const FIT_SAMPLES: usize = 3000;

pub fn run(cmd: &Command, out: &Path) -> Result<()> {
    let mut r = Run::new(out)?;
    match cmd {
        Command::Synth(a) => synth(a, &mut r)?,
        Command::Capture(a) => capture_cmd(a, &mut r)?,
        Command::Identify(a) => identify(a, &mut r)?,
        Command::Fit(a) => fit(a, &mut r)?,
        Command::Patch(a) => patch_cmd(a, &mut r)?,
        Command::Eval(a) => eval(a, &mut r)?,
        Command::Generalize(a) => generalize(a, &mut r)?,
        Command::Drift(a) => drift(a, &mut r)?,
        Command::Pca(a) => pca(a, &mut r)?,
        Command::Compare(a) => compare(a, &mut r)?,
    }
    r.finish(cmd)?;
    Ok(())
}

/// Prefixes non-I/O errors with the file they came from; I/O errors
/// already carry it.
fn named<T>(path: &Path, res: tba_core::Result<T>) -> Result<T> {
    res.map_err(|e| match e {
        Error::Io { .. } => e.into(),
        other => {
            let msg = format!("{}: {other}", path.display());
            anyhow::Error::new(other).context(msg)
        }
    })
}

fn load_model(r: &mut Run, path: &Path) -> Result<TransformerModel> {
    r.input(path)?;
    named(path, TransformerModel::load(path))
}

fn load_dataset(r: &mut Run, spec: &str) -> Result<Dataset> {
    if let Some(rest) = spec.strip_prefix("idx:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let bad = || Error::Argument(format!("dataset {spec:?} must look like idx:IMAGES:LABELS[:MEAN:STD]"));
        let (images, labels, mean, std) = match parts[..] {
            [i, l] => (i, l, 0.0, 1.0),
            [i, l, m, s] => (i, l, m.parse().map_err(|_| bad())?, s.parse().map_err(|_| bad())?),
            _ => return Err(bad().into()),
        };
        r.input(Path::new(images))?;
        r.input(Path::new(labels))?;
        let name = Path::new(images)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "idx".into());
        let ds = Dataset::from_idx(Path::new(images), Path::new(labels), &name, "train", mean, std);
        return named(Path::new(images), ds);
    }
    r.input(Path::new(spec))?;
    named(Path::new(spec), Dataset::load(spec))
}

/// Draws the subset; without `--samples` the default is capped at the
/// dataset size.
fn subset(r: &mut Run, ds: &Dataset, a: &SubsetArgs, default: usize, key: &str) -> Result<DataSubset> {
    let n = a.samples.unwrap_or_else(|| default.min(ds.len()));
    r.resolve(&format!("{key}.samples"), n);
    Ok(sample_subset(ds, n, a.seed)?)
}

fn capture_opts(a: &ReduceArgs) -> Result<CaptureOptions> {
    let reduce: Reduce = a.reduce.parse()?;
    Ok(CaptureOptions {
        reduce,
        mean_includes_cls: !a.exclude_cls,
        batch_size: a.batch,
    })
}

fn fit_opts(a: &FitFlags) -> FitOptions {
    FitOptions {
        use_bias: a.bias,
        rcond: a.rcond,
    }
}

fn spans(text: &str, model: &TransformerModel) -> Result<Vec<Span>> {
    let spans = parse_span_list(text)?;
    if spans.is_empty() {
        return Err(Error::Argument("no span given".into()).into());
    }
    for s in &spans {
        s.check_blocks(model.num_blocks())?;
    }
    Ok(spans)
}

fn probe_setup(a: &ProbeFlags) -> Result<(ProbeConfig, Vec<u64>)> {
    let seeds = a
        .seeds
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Argument(format!("--seeds: {s:?} is not a seed")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = ProbeConfig {
        epochs: a.epochs,
        lr: a.probe_lr,
        batch: a.probe_batch,
        feature: a.probe_feature.parse()?,
    };
    Ok((cfg, seeds))
}

fn synth(a: &SynthArgs, r: &mut Run) -> Result<()> {
    let cfg = ModelConfig {
        image_size: a.image_size,
        patch_size: a.patch_size,
        channels: a.channels,
        d_model: a.d_model,
        num_blocks: a.blocks,
        num_heads: a.heads,
        mlp_hidden: a.mlp_hidden.unwrap_or(4 * a.d_model),
        num_register_tokens: a.registers,
        has_cls: !a.no_cls,
        layernorm_eps: tba_core::ops::LAYERNORM_EPS,
        gelu_variant: Default::default(),
        block_norm_eps: Default::default(),
    };
    let directives = a
        .plant
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<PlantDirective>())
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = Rng::new(a.seed).fork(0x706c616e74);
    let plants = directives
        .iter()
        .map(|d| d.to_plant(a.d_model, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    let model = make_planted_model(&PlantSpec {
        base: cfg,
        plants,
        noise_scale: a.noise_scale,
        seed: a.seed,
    })?;
    r.container("model.ntc", &model.to_container()?)?;
    let data = SynthData::new(a.classes, a.train_per_class, a.image_size, a.channels, a.margin, a.data_seed);
    let data = SynthData { shift: a.shift, ..data };
    r.container("train.ntc", &make_synth_dataset(&data.split("train", 0))?.to_container()?)?;
    r.container("test.ntc", &make_synth_dataset(&data.split("test", 1))?.to_container()?)?;
    #[derive(Serialize)]
    struct Planted<'a> {
        kind: &'a str,
        span: String,
        s: usize,
        e: usize,
    }
    let listed: Vec<Planted> = directives
        .iter()
        .map(|d| Planted {
            kind: &d.kind,
            span: d.span.zero_based(),
            s: d.span.s,
            e: d.span.e,
        })
        .collect();
    r.json("plants.json", &listed)?;
    r.resolve("mlp_hidden", model.config.mlp_hidden);
    r.resolve("param_count", model.count_params());
    Ok(())
}

fn capture_cmd(a: &CaptureArgs, r: &mut Run) -> Result<()> {
    let model = load_model(r, &a.model)?;
    let ds = load_dataset(r, &a.subset.data)?;
    let sub = subset(r, &ds, &a.subset, IDENTIFY_SAMPLES, "subset")?;
    let acts = capture(&model, &ds, &sub, &capture_opts(&a.reduce)?)?;
    r.container("acts.ntc", &acts.to_container()?)?;
    Ok(())
}

fn identify(a: &IdentifyArgs, r: &mut Run) -> Result<()> {
    let model = load_model(r, &a.model)?;
    let ds = load_dataset(r, &a.subset.data)?;
    let sub = subset(r, &ds, &a.subset, IDENTIFY_SAMPLES, "subset")?;
    let metric: Metric = a.metric.parse()?;
    if a.max_span_len == 0 {
        return Err(Error::Argument("--max-span-len must be at least 1".into()).into());
    }
    let acts = capture(&model, &ds, &sub, &capture_opts(&a.reduce)?)?;
    let m = similarity_matrix(&acts, metric)?;
    for (s, e) in &m.degenerate_pairs {
        eprintln!("warning: cka degenerate for blocks {s} and {e}; value set to 0");
    }
    r.resolve("degenerate_pairs", &m.degenerate_pairs);
    r.csv("sim.csv", &m.to_csv())?;
    r.csv("sim_dense.csv", &m.to_dense_csv())?;
    let table = ParamTable::for_config(&model.config, a.bias);
    let cands = rank_spans(&m, a.max_span_len, a.top_k, &table);
    r.csv("candidates.csv", &candidates_csv(&cands))?;
    Ok(())
}

/// Captures only the blocks the spans touch, all tokens.
fn fitting_acts(model: &TransformerModel, ds: &Dataset, sub: &DataSubset, spans: &[Span]) -> Result<tba_core::capture::ActivationSet> {
    let blocks: BTreeSet<usize> = spans.iter().flat_map(|s| [s.s, s.e]).collect();
    let blocks: Vec<usize> = blocks.into_iter().collect();
    Ok(capture_blocks(model, ds, sub, &CaptureOptions::new(Reduce::All), Some(&blocks))?)
}

fn fit(a: &FitArgs, r: &mut Run) -> Result<()> {
    let model = load_model(r, &a.model)?;
    let spans = spans(&a.span, &model)?;
    let ds = load_dataset(r, &a.subset.data)?;
    let sub = subset(r, &ds, &a.subset, FIT_SAMPLES, "subset")?;
    let acts = fitting_acts(&model, &ds, &sub, &spans)?;
    let mut entries = Vec::new();
    let mut t = CsvTable::new(&["span", "s", "e", "rows", "residual", "identity_residual", "target_energy"]);
    for &span in &spans {
        let map = fit_linear(&acts, span, a.fit.bias, a.fit.rcond)?;
        let ident = span_residual(&acts, span, &Approximator::Identity)?;
        let xe = acts.block(span.e)?;
        let energy = xe.frobenius().powi(2) / xe.rows() as f64;
        t.row(&[
            span.zero_based(),
            span.s.to_string(),
            span.e.to_string(),
            map.meta.rows.to_string(),
            fmt_sig9(map.meta.residual),
            fmt_sig9(ident),
            fmt_sig9(energy),
        ]);
        r.container(&format!("map_{}_{}.ntc", span.s - 1, span.e - 1), &map.to_container()?)?;
        entries.push((span, Approximator::Linear(map)));
    }
    let plan = ApproxPlan::new(entries)?;
    plan.validate(&model.config)?;
    r.container("plan.ntc", &plan.to_container()?)?;
    r.csv("fit.csv", &t)?;
    Ok(())
}

fn load_plan(r: &mut Run, path: &Path, model: &TransformerModel) -> Result<ApproxPlan> {
    r.input(path)?;
    let plan = named(path, ApproxPlan::load(path))?;
    plan.validate(&model.config)?;
    Ok(plan)
}

fn patch_cmd(a: &PatchArgs, r: &mut Run) -> Result<()> {
    let model = load_model(r, &a.model)?;
    let plan = load_plan(r, &a.plan, &model)?;
    let ds = load_dataset(r, &a.subset.data)?;
    let sub = subset(r, &ds, &a.subset, IDENTIFY_SAMPLES, "subset")?;
    let patched = patch(&model, plan)?;
    let drift = final_layer_drift(&model, &patched, &ds, &sub, &capture_opts(&a.reduce)?)?;
    let orig = model.count_params();
    let new = patched.param_count();
    let mut t = CsvTable::new(&["variant", "plan", "params", "params_saved", "drift"]);
    t.row(&["original".to_string(), "original".into(), orig.to_string(), "0".into(), "0".into()]);
    t.row(&[
        "patched".to_string(),
        patched.describe(),
        new.to_string(),
        (orig as i64 - new as i64).to_string(),
        fmt_sig9(drift),
    ]);
    r.csv("patch.csv", &t)?;
    Ok(())
}

fn eval(a: &EvalArgs, r: &mut Run) -> Result<()> {
    let model = load_model(r, &a.model)?;
    let (cfg, seeds) = probe_setup(&a.probe)?;
    let train = load_dataset(r, &a.train)?;
    let test = load_dataset(r, &a.test)?;
    let id = model.fingerprint()?;
    let original = evaluate(&model, &train, &test, &cfg, &seeds, &id)?;
    let mut named = vec![("original", &original)];
    let patched_summary;
    if let Some(p) = &a.plan {
        let plan = load_plan(r, p, &model)?;
        let patched = patch(&model, plan)?;
        patched_summary = evaluate(&patched, &train, &test, &cfg, &seeds, &id)?;
        named.push(("patched", &patched_summary));
        let delta = per_class_delta(&original.results, &patched_summary.results)?;
        r.csv("per_class.csv", &delta.per_class_csv())?;
        r.csv("confusion_delta.csv", &delta.confusion_csv())?;
        r.resolve("patched_params", patched.param_count());
    }
    r.resolve("original_params", model.count_params());
    r.csv("eval.csv", &summary_csv(&named))?;
    let details: Vec<_> = named.iter().map(|(n, s)| serde_json::json!({ "variant": n, "summary": s })).collect();
    r.json("eval.json", &details)?;
    Ok(())
}

fn generalize(a: &GeneralizeArgs, r: &mut Run) -> Result<()> {
    let model = load_model(r, &a.model)?;
    let spans = spans(&a.span, &model)?;
    let [span] = spans[..] else {
        return Err(Error::Argument("generalize takes exactly one span".into()).into());
    };
    let (cfg, seeds) = probe_setup(&a.probe)?;
    let fit_ds = load_dataset(r, &a.fit_subset.data)?;
    let sub = subset(r, &fit_ds, &a.fit_subset, FIT_SAMPLES, "fit_subset")?;
    let train = load_dataset(r, &a.train)?;
    let test = load_dataset(r, &a.test)?;
    let id = model.fingerprint()?;
    let map = fit_span(&model, span, &fit_ds, &sub, &fit_opts(&a.fit))?;
    r.container("map.ntc", &map.to_container()?)?;
    let patched = patch(&model, ApproxPlan::new(vec![(span, Approximator::Linear(map))])?)?;
    let original = evaluate(&model, &train, &test, &cfg, &seeds, &id)?;
    let transferred = evaluate(&patched, &train, &test, &cfg, &seeds, &id)?;
    r.csv("generalize.csv", &summary_csv(&[("original", &original), ("transferred", &transferred)]))?;
    Ok(())
}

fn drift(a: &DriftArgs, r: &mut Run) -> Result<()> {
    let model = load_model(r, &a.model)?;
    let ds = load_dataset(r, &a.subset.data)?;
    let sub = subset(r, &ds, &a.subset, IDENTIFY_SAMPLES, "subset")?;
    let points = drift_curve(&model, &ds, &sub, &capture_opts(&a.reduce)?, &fit_opts(&a.fit))?;
    r.csv("drift.csv", &tba_core::eval::analysis::drift_csv(&points))?;
    Ok(())
}

fn pca(a: &PcaArgs, r: &mut Run) -> Result<()> {
    let model = load_model(r, &a.model)?;
    let plan = load_plan(r, &a.plan, &model)?;
    let ds = load_dataset(r, &a.subset.data)?;
    let sub = subset(r, &ds, &a.subset, IDENTIFY_SAMPLES, "subset")?;
    let patched = patch(&model, plan)?;
    let (p, table) = pca_export(&model, &patched, &ds, &sub.indices, a.k, a.probe_feature.parse()?)?;
    r.resolve("explained_variance", &p.explained_variance);
    r.csv("pca.csv", &table)?;
    Ok(())
}

fn compare(a: &CompareArgs, r: &mut Run) -> Result<()> {
    let model = load_model(r, &a.model)?;
    let spans = spans(&a.spans, &model)?;
    let ds = load_dataset(r, &a.subset.data)?;
    let sub = subset(r, &ds, &a.subset, FIT_SAMPLES, "subset")?;
    let drift_n = a.drift_samples.min(ds.len());
    r.resolve("drift_samples", drift_n);
    let drift_sub = sample_subset(&ds, drift_n, a.subset.seed)?;
    let opts = capture_opts(&a.reduce)?;
    let acts = fitting_acts(&model, &ds, &sub, &spans)?;
    let train_cfg = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        batch: a.train_batch,
        dropout_p: a.dropout_p,
        seed: a.subset.seed,
    };
    let mut t = CsvTable::new(&["span", "s", "e", "method", "residual", "drift", "params", "params_saved"]);
    let mut reports = Vec::new();
    for &span in &spans {
        let mut methods: Vec<(&str, Approximator)> = vec![
            ("tba", Approximator::Linear(fit_linear(&acts, span, a.fit.bias, a.fit.rcond)?)),
            ("skipat", make_skipat(span).1),
        ];
        for (name, arch) in [("mlp", Arch::Mlp), ("resmlp", Arch::Resmlp)] {
            let (approx, report) = fit_mlp(&acts, span, arch, &train_cfg)?;
            reports.push(serde_json::json!({ "span": span.zero_based(), "method": name, "report": report }));
            methods.push((name, approx));
        }
        for (name, approx) in methods {
            let residual = span_residual(&acts, span, &approx)?;
            let plan = ApproxPlan::new(vec![(span, approx)])?;
            let patched = patch(&model, plan)?;
            let drift = final_layer_drift(&model, &patched, &ds, &drift_sub, &opts)?;
            let params = count_params_patched(&model, &patched.plan);
            t.row(&[
                span.zero_based(),
                span.s.to_string(),
                span.e.to_string(),
                name.to_string(),
                fmt_sig9(residual),
                fmt_sig9(drift),
                params.to_string(),
                (model.count_params() as i64 - params as i64).to_string(),
            ]);
        }
    }
    r.csv("compare.csv", &t)?;
    r.json("training.json", &reports)?;
    Ok(())
}
