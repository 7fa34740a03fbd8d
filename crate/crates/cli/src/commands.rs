use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use briefx_core::corpus::{clean_pipeline, ingest_csv, BriefingRecord};
use briefx_core::eval::{
    aggregate_folds, annotator_agreement, kfold_split, render_report, score_run, EvalReport, FieldMetricPlan, FoldSpec,
    Prediction, RawOutput, ReportFormat, ScorerRegistry,
};
use briefx_core::inferclient::{run_batch, write_jsonl, BatchItem, ChatClient, InferError};
use briefx_core::outparse::{parse_or_empty, KeyAliasMap};
use briefx_core::promptkit::{
    few_shot_augment, render_user_prompt, synth_dataset, ChatMessage, Exemplar, PromptError, PromptTemplates, Role,
    TrainingManifest,
};
use briefx_core::schema::{canonical_json, validate, GoldRecord};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{EndpointFlags, RunConfig, DEFAULT_FOLDS, DEFAULT_SEED, DEFAULT_WORK_DIR};
use crate::{Cli, CliError};

pub const BRIEFINGS: &str = "briefings.jsonl";
pub const DROPPED: &str = "dropped.jsonl";
pub const CLEAN_STATS: &str = "clean_stats.json";
pub const DATASET: &str = "dataset.jsonl";
pub const MANIFEST: &str = "training_manifest.json";
pub const FOLDS: &str = "folds.json";
pub const AGREEMENT: &str = "agreement";
pub const DISAGREEMENTS: &str = "disagreements.csv";

pub struct Context {
    pub work_dir: PathBuf,
    pub config: RunConfig,
    seed_flag: Option<u64>,
}

impl Context {
    pub fn new(cli: &Cli, config: RunConfig) -> Result<Context, CliError> {
        let work_dir = cli
            .work_dir
            .clone()
            .or_else(|| config.paths.work_dir.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_WORK_DIR));
        fs::create_dir_all(&work_dir)
            .map_err(|e| CliError::Usage(format!("cannot create work dir {}: {e}", work_dir.display())))?;
        Ok(Context { work_dir, config, seed_flag: cli.seed })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.work_dir.join(name)
    }

    fn seed(&self) -> u64 {
        self.seed_flag.or(self.config.folds.seed).unwrap_or(DEFAULT_SEED)
    }

    fn gold_path(&self, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        existing(flag.or_else(|| self.config.paths.gold.clone()), "gold file (--gold or [paths] gold)")
    }

    fn templates(&self, flag: Option<PathBuf>) -> Result<PromptTemplates, CliError> {
        if let Some(path) = flag.or_else(|| self.config.paths.templates.clone()) {
            let path = existing(Some(path), "template file")?;
            return PromptTemplates::load(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())));
        }
        match self.config.prompt.language.as_deref().unwrap_or("en") {
            "en" => Ok(PromptTemplates::english()),
            "zh" => Ok(PromptTemplates::chinese()),
            other => Err(CliError::Usage(format!("unknown prompt language {other:?}; expected en or zh"))),
        }
    }

    fn briefings(&self) -> Result<Vec<BriefingRecord>, CliError> {
        let path = existing(Some(self.path(BRIEFINGS)), "cleaned briefings (run `clean` first)")?;
        read_jsonl(&path)
    }

    fn folds(&self) -> Result<FoldSpec, CliError> {
        let path = existing(Some(self.path(FOLDS)), "fold spec (run `split` first)")?;
        let text = fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

fn suffix(fold: Option<usize>) -> String {
    fold.map(|i| format!(".fold{i}")).unwrap_or_default()
}

fn existing(path: Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    let path = path.ok_or_else(|| CliError::Usage(format!("no {what} given")))?;
    if !path.exists() {
        return Err(CliError::Data(format!("{what} not found: {}", path.display())));
    }
    Ok(path)
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    read_lines(path)?
        .into_iter()
        .map(|(n, line)| {
            serde_json::from_str(&line).map_err(|e| CliError::Data(format!("{}:{n}: {e}", path.display())))
        })
        .collect()
}

/// Gold lines must parse and validate; ids must be unique.
pub fn read_gold(path: &Path) -> Result<Vec<GoldRecord>, CliError> {
    let mut seen = HashSet::new();
    read_lines(path)?
        .into_iter()
        .map(|(n, line)| {
            let g = GoldRecord::from_json_line(&line).map_err(|e| CliError::Data(format!("{}:{n}: {e}", path.display())))?;
            let report = validate(&g.record);
            if !report.valid {
                let msg = report.violations.iter().map(|v| v.message.clone()).collect::<Vec<_>>().join("; ");
                return Err(CliError::Data(format!("{}:{n}: invalid gold record {}: {msg}", path.display(), g.record_id)));
            }
            if !seen.insert(g.record_id.clone()) {
                return Err(CliError::Data(format!("{}:{n}: duplicate record id {}", path.display(), g.record_id)));
            }
            Ok(g)
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(CliError::data)? + "\n";
    write_text(path, &text)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    write_jsonl(rows, path).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn clean(
    ctx: &Context,
    input: Option<PathBuf>,
    exclude_ids: Option<PathBuf>,
    min_length: Option<usize>,
) -> Result<(), CliError> {
    let input = existing(input.or_else(|| ctx.config.paths.input_csv.clone()), "input csv (--input or [paths] input_csv)")?;
    let columns = ctx.config.clean.columns.clone().unwrap_or_default();
    let mode = ctx.config.clean.ingest_mode.unwrap_or_default();
    let ingested = ingest_csv(&input, &columns, mode).map_err(CliError::data)?;
    for bad in &ingested.malformed {
        eprintln!("warning: {}:{}: skipped malformed row: {}", input.display(), bad.line, bad.reason);
    }

    let excluded: HashSet<String> = match exclude_ids.or_else(|| ctx.config.paths.exclude_ids.clone()) {
        Some(path) => {
            let path = existing(Some(path), "exclusion list")?;
            read_lines(&path)?.into_iter().map(|(_, l)| l.trim().to_string()).collect()
        }
        None => HashSet::new(),
    };
    let (kept_posts, withheld): (Vec<_>, Vec<_>) =
        ingested.posts.into_iter().partition(|p| !excluded.contains(&p.post_id));

    let (records, mut stats) = clean_pipeline(&kept_posts, &ctx.config.clean_config(min_length));
    stats.excluded_count = withheld.len();
    let (kept, dropped): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| !r.dropped);
    write_rows(&ctx.path(BRIEFINGS), &kept)?;
    write_rows(&ctx.path(DROPPED), &dropped)?;
    write_json(&ctx.path(CLEAN_STATS), &stats)?;
    println!(
        "clean: {} posts -> {} briefings ({} too short, {} duplicates, {} with urls, {} excluded)",
        stats.input_count,
        stats.output_count,
        stats.short_dropped_count,
        stats.duplicate_dropped_count,
        stats.url_stripped_count,
        stats.excluded_count
    );
    Ok(())
}

fn briefing_map(briefings: Vec<BriefingRecord>) -> HashMap<String, BriefingRecord> {
    briefings.into_iter().map(|b| (b.record_id.clone(), b)).collect()
}

fn prompt_error(e: PromptError) -> CliError {
    CliError::Data(e.to_string())
}

pub fn synth(ctx: &Context, gold: Option<PathBuf>, templates: Option<PathBuf>) -> Result<(), CliError> {
    let templates = ctx.templates(templates)?;
    let gold = read_gold(&ctx.gold_path(gold)?)?;
    let briefings = briefing_map(ctx.briefings()?);
    let pairs = gold
        .into_iter()
        .map(|g| match briefings.get(&g.record_id) {
            Some(b) => Ok((b.clone(), g)),
            None => Err(prompt_error(PromptError::IdMismatch { briefing: String::new(), gold: g.record_id })),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n = synth_dataset(&templates, &pairs, &ctx.path(DATASET)).map_err(prompt_error)?;

    let mut overrides = ctx.config.manifest.clone();
    overrides.seed = ctx.seed_flag.or(overrides.seed).or(ctx.config.folds.seed);
    overrides.folds = overrides.folds.or(ctx.config.folds.k.map(|k| k as u32));
    let manifest = TrainingManifest::with_overrides(&overrides).map_err(|e| CliError::Usage(e.to_string()))?;
    write_json(&ctx.path(MANIFEST), &manifest)?;
    println!("synth: {n} samples -> {}", ctx.path(DATASET).display());
    Ok(())
}

pub fn split(ctx: &Context, gold: Option<PathBuf>, folds: Option<usize>) -> Result<(), CliError> {
    let gold = read_gold(&ctx.gold_path(gold)?)?;
    let ids: Vec<String> = gold.into_iter().map(|g| g.record_id).collect();
    let k = folds.or(ctx.config.folds.k).unwrap_or(DEFAULT_FOLDS);
    let spec = kfold_split(&ids, k, ctx.seed()).map_err(CliError::data)?;
    write_json(&ctx.path(FOLDS), &spec)?;
    println!("split: {} records into {} folds {:?} (seed {})", ids.len(), k, spec.sizes(), spec.seed);
    Ok(())
}

/// Gold records in file order, restricted to one fold's test ids when given.
fn target_gold(ctx: &Context, gold: Vec<GoldRecord>, fold: Option<usize>) -> Result<(Vec<GoldRecord>, Option<FoldSpec>), CliError> {
    let Some(i) = fold else { return Ok((gold, None)) };
    let spec = ctx.folds()?;
    let test: HashSet<&str> = spec
        .test_ids(i)
        .ok_or_else(|| CliError::Usage(format!("fold {i} out of range; spec has {} folds", spec.k)))?
        .iter()
        .map(String::as_str)
        .collect();
    let selected = gold.into_iter().filter(|g| test.contains(g.record_id.as_str())).collect();
    Ok((selected, Some(spec)))
}

pub fn infer(
    ctx: &Context,
    gold: Option<PathBuf>,
    templates: Option<PathBuf>,
    fold: Option<usize>,
    few_shot: Option<usize>,
    endpoint: &EndpointFlags,
) -> Result<(), CliError> {
    let endpoint = endpoint.resolve(&ctx.config.endpoint)?;
    let templates = ctx.templates(templates)?;
    let briefings = briefing_map(ctx.briefings()?);
    let texts: HashMap<String, String> = briefings.iter().map(|(id, b)| (id.clone(), b.text.clone())).collect();
    let gold_path = gold.or_else(|| ctx.config.paths.gold.clone());
    let k = few_shot.or(ctx.config.prompt.few_shot).unwrap_or(0);

    let (targets, pool): (Vec<BriefingRecord>, Vec<GoldRecord>) = match gold_path {
        Some(path) => {
            let all = read_gold(&existing(Some(path), "gold file")?)?;
            let (selected, spec) = target_gold(ctx, all.clone(), fold)?;
            let pool = match (&spec, fold) {
                (Some(spec), Some(i)) => {
                    let train: HashSet<&str> = spec.train_ids(i).into_iter().collect();
                    all.into_iter().filter(|g| train.contains(g.record_id.as_str())).collect()
                }
                _ => all,
            };
            let targets = selected
                .iter()
                .map(|g| {
                    briefings.get(&g.record_id).cloned().ok_or_else(|| {
                        CliError::Data(format!("gold record {} has no cleaned briefing", g.record_id))
                    })
                })
                .collect::<Result<_, _>>()?;
            (targets, pool)
        }
        None if fold.is_some() || k > 0 => {
            return Err(CliError::Usage("--fold and --few-shot need a gold file".into()));
        }
        None => {
            let mut all: Vec<BriefingRecord> = briefings.into_values().collect();
            all.sort_by(|a, b| a.record_id.cmp(&b.record_id));
            (all, Vec::new())
        }
    };

    let exemplars: Vec<(String, Exemplar)> = pool
        .iter()
        .filter_map(|g| {
            let briefing_text = texts.get(&g.record_id)?.clone();
            let gold_json = canonical_json(&g.record).ok()?;
            Some((g.record_id.clone(), Exemplar { briefing_text, gold_json }))
        })
        .collect();
    let items = targets
        .iter()
        .map(|b| {
            let own: Vec<Exemplar> =
                exemplars.iter().filter(|(id, _)| *id != b.record_id).map(|(_, e)| e.clone()).collect();
            let user = few_shot_augment(&render_user_prompt(&templates, b)?, &own, k)?;
            Ok(BatchItem {
                record_id: b.record_id.clone(),
                messages: vec![
                    ChatMessage::new(Role::System, templates.system_template.clone()),
                    ChatMessage::new(Role::User, user),
                ],
            })
        })
        .collect::<Result<Vec<_>, PromptError>>()
        .map_err(prompt_error)?;

    let client = ChatClient::new(endpoint).map_err(|e| match e {
        InferError::AuthMissing(_) | InferError::InvalidConfig(_) => CliError::Usage(e.to_string()),
        other => CliError::Endpoint(other.to_string()),
    })?;
    let outcome = run_batch(&client, &items);
    let sfx = suffix(fold);
    write_rows(&ctx.path(&format!("raw_outputs{sfx}.jsonl")), &outcome.raw_outputs())?;
    write_rows(&ctx.path(&format!("transcripts{sfx}.jsonl")), &outcome.transcripts)?;
    println!("infer: {}", outcome.summary());
    if outcome.ok == 0 && !items.is_empty() {
        let last = outcome.transcripts.last().and_then(|t| t.error.clone()).unwrap_or_default();
        return Err(CliError::Endpoint(format!("every request failed; last error: {last}")));
    }
    Ok(())
}

fn write_report_files(ctx: &Context, stem: &str, report: &EvalReport) -> Result<(), CliError> {
    for format in [ReportFormat::Json, ReportFormat::Markdown, ReportFormat::Csv] {
        write_text(&ctx.path(&format!("{stem}.{}", format.extension())), &render_report(report, format))?;
    }
    Ok(())
}

fn read_report(path: &Path) -> Result<EvalReport, CliError> {
    let path = existing(Some(path.to_path_buf()), "report")?;
    let text = fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn eval(
    ctx: &Context,
    gold: Option<PathBuf>,
    fold: Option<usize>,
    aggregate: bool,
    tokenizer: Option<String>,
) -> Result<(), CliError> {
    if aggregate {
        let spec = ctx.folds()?;
        let reports = (0..spec.k)
            .map(|i| read_report(&ctx.path(&format!("report.fold{i}.json"))))
            .collect::<Result<Vec<_>, _>>()?;
        let mut mean = aggregate_folds(&reports).map_err(CliError::data)?;
        mean.seed = Some(spec.seed);
        write_report_files(ctx, "report.mean", &mean)?;
        println!("eval: mean of {} folds -> {}", spec.k, ctx.path("report.mean.md").display());
        return Ok(());
    }

    let gold = read_gold(&ctx.gold_path(gold)?)?;
    let (gold, spec) = target_gold(ctx, gold, fold)?;
    let sfx = suffix(fold);
    let raw_path = existing(Some(ctx.path(&format!("raw_outputs{sfx}.jsonl"))), "raw outputs (run `infer` first)")?;
    let mut texts: HashMap<String, String> = HashMap::new();
    for (n, line) in read_lines(&raw_path)? {
        match serde_json::from_str::<RawOutput>(&line) {
            Ok(r) => {
                texts.insert(r.record_id, r.text);
            }
            Err(e) => eprintln!("warning: {}:{n}: unreadable output line ({e}); its record counts as absent", raw_path.display()),
        }
    }

    let aliases = KeyAliasMap::default();
    let raws: Vec<RawOutput> = gold
        .iter()
        .map(|g| RawOutput { record_id: g.record_id.clone(), text: texts.get(&g.record_id).cloned().unwrap_or_default() })
        .collect();
    let preds: Vec<Prediction> = raws
        .iter()
        .map(|r| Prediction { record_id: r.record_id.clone(), extraction: parse_or_empty(&r.text, &aliases) })
        .collect();

    let registry = ScorerRegistry::default();
    let mut plan = FieldMetricPlan::default();
    if let Some(name) = tokenizer.or_else(|| ctx.config.eval.tokenizer.clone()) {
        plan = plan.with_tokenizer(&name);
    }
    plan.check(&registry).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut report = score_run(&preds, &gold, &raws, &plan, &registry).map_err(CliError::data)?;
    report.fold = fold.map(|i| i.to_string()).unwrap_or_else(|| "all".into());
    report.seed = spec.map(|s| s.seed);

    let pred_rows: Vec<serde_json::Value> = preds
        .iter()
        .map(|p| serde_json::json!({"record_id": p.record_id, "extraction": p.extraction.to_json()}))
        .collect();
    write_rows(&ctx.path(&format!("predictions{sfx}.jsonl")), &pred_rows)?;
    write_report_files(ctx, &format!("report{sfx}"), &report)?;
    let absent: usize = report.absence.values().sum();
    println!(
        "eval: {} records, {} absent fields -> {}",
        report.sample_count,
        absent,
        ctx.path(&format!("report{sfx}.md")).display()
    );
    Ok(())
}

pub fn kappa(ctx: &Context, a: Option<PathBuf>, b: Option<PathBuf>) -> Result<(), CliError> {
    let a = read_gold(&existing(a.or_else(|| ctx.config.paths.gold.clone()), "first annotator file (--a)")?)?;
    let b = read_gold(&existing(b.or_else(|| ctx.config.paths.gold_b.clone()), "second annotator file (--b)")?)?;
    let mut by_id: HashMap<&str, &GoldRecord> = b.iter().map(|g| (g.record_id.as_str(), g)).collect();
    let mut aligned = Vec::with_capacity(a.len());
    for g in &a {
        let other = by_id
            .remove(g.record_id.as_str())
            .ok_or_else(|| CliError::Data(format!("record {} missing from second annotator file", g.record_id)))?;
        aligned.push(other.clone());
    }
    if let Some(extra) = by_id.keys().min() {
        return Err(CliError::Data(format!("record {extra} missing from first annotator file")));
    }
    let agreement = annotator_agreement(&a, &aligned).map_err(CliError::data)?;
    write_json(&ctx.path(&format!("{AGREEMENT}.json")), &agreement)?;
    write_text(&ctx.path(&format!("{AGREEMENT}.md")), &render_report(&agreement.to_eval_report(), ReportFormat::Markdown))?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["record_id", "field", "annotator_a", "annotator_b"]).map_err(CliError::data)?;
    for d in &agreement.disagreements {
        w.write_record([d.record_id.as_str(), d.field.as_str(), d.value_a.as_str(), d.value_b.as_str()])
            .map_err(CliError::data)?;
    }
    let bytes = w.into_inner().map_err(CliError::data)?;
    fs::File::create(ctx.path(DISAGREEMENTS))
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(CliError::data)?;
    let pooled = agreement.pooled.map(|k| format!("{k:.4}")).unwrap_or_else(|| "undefined".into());
    println!("kappa: {} records, pooled boolean kappa {pooled}, {} disagreements", agreement.record_count, agreement.disagreements.len());
    Ok(())
}

pub fn report(ctx: &Context, input: Option<PathBuf>, format: Option<String>, out: Option<PathBuf>) -> Result<(), CliError> {
    let format = ctx.config.report_format(format.as_deref())?;
    let report = read_report(&input.unwrap_or_else(|| ctx.path("report.json")))?;
    let text = render_report(&report, format);
    match out {
        Some(path) => write_text(&path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
