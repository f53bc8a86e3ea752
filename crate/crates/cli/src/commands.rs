use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use xfer_core::analysis::probe_set;
use xfer_core::datagen::{contrastive_pairs, pseudo_nli, Generated};
use xfer_core::experiment::{base_model, build_datasets, file_error, pretrain, Datasets};
use xfer_core::metrics::{bleu4, nem, rouge_l, zero_rule, MetricsReport};
use xfer_core::model::{load_checkpoint, save_checkpoint, ModelConfig, Seq2SeqModel};
use xfer_core::pipeline::{
    embed_finetune, evaluate_nli, retrieval_eval, self_finetune, similarity_eval, summarize, RetrievalSet,
};
use xfer_core::text::{gen_world, write_jsonl, DatasetRecord, Domain, Gazetteer, NliExample, NliLabel};

use crate::config::Loaded;
use crate::Command;

const PRETRAIN: &str = "checkpoints/pretrain.ckpt";
const SELF_FINETUNE: &str = "checkpoints/self_finetune.ckpt";
const EMBED: &str = "checkpoints/embed.ckpt";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    sha256: String,
    config_hash: String,
    command: String,
}

/// Experiment directory plus the manifest of everything written into it.
struct Run<'a> {
    dir: &'a Path,
    loaded: &'a Loaded,
    command: &'static str,
}

impl Run<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn record(&self, rel: &str) -> anyhow::Result<()> {
        let manifest_path = self.path("manifest.json");
        let mut manifest: BTreeMap<String, ManifestEntry> = match fs::read_to_string(&manifest_path) {
            Ok(text) => serde_json::from_str(&text).context("manifest.json is corrupt")?,
            Err(_) => BTreeMap::new(),
        };
        let bytes = fs::read(self.path(rel)).map_err(|e| file_error(&self.path(rel), e))?;
        manifest.insert(
            rel.to_string(),
            ManifestEntry {
                sha256: hex::encode(Sha256::digest(&bytes)),
                config_hash: self.loaded.config_hash.clone(),
                command: self.command.to_string(),
            },
        );
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(&manifest_path, text).map_err(|e| file_error(&manifest_path, e))?;
        Ok(())
    }

    fn write_bytes(&self, rel: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| file_error(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| file_error(&path, e))?;
        self.record(rel)
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> anyhow::Result<()> {
        self.write_bytes(rel, (serde_json::to_string_pretty(value)? + "\n").as_bytes())
    }

    fn write_csv<R: AsRef<[String]>>(&self, rel: &str, header: &[&str], rows: &[R]) -> anyhow::Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r.as_ref())?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow!("csv: {e}"))?;
        self.write_bytes(rel, &bytes)
    }

    fn write_report(&self, name: &str, mut report: MetricsReport) -> anyhow::Result<()> {
        report.config_hash = Some(self.loaded.config_hash.clone());
        report.validate()?;
        self.write_json(&format!("reports/{name}.json"), &report)?;
        self.write_csv(&format!("reports/{name}.csv"), &["model", "dataset", "metric", "value"], &report.to_csv_rows())
    }

    fn save_model(&self, rel: &str, model: &Seq2SeqModel<f32>) -> anyhow::Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| file_error(parent, e))?;
        }
        save_checkpoint(model, &path)?;
        self.record(rel)?;
        self.write_json(&sidecar(rel), model.config())
    }

    fn datasets(&self) -> anyhow::Result<Datasets> {
        Datasets::read_dir(self.dir).context("datasets missing; run gen-data first")
    }

    /// Explicit path, else the first existing default.
    fn resolve(&self, explicit: Option<&Path>, defaults: &[&str]) -> anyhow::Result<PathBuf> {
        if let Some(p) = explicit {
            return Ok(p.to_path_buf());
        }
        defaults
            .iter()
            .map(|d| self.path(d))
            .find(|p| p.exists())
            .ok_or_else(|| anyhow!("no checkpoint found; expected one of {defaults:?} under {}", self.dir.display()))
    }
}

fn sidecar(rel: &str) -> String {
    format!("{}.config.json", rel.trim_end_matches(".ckpt"))
}

fn load_model(path: &Path) -> anyhow::Result<Seq2SeqModel<f32>> {
    let side = PathBuf::from(sidecar(&path.to_string_lossy()));
    let text = fs::read_to_string(&side).map_err(|e| file_error(&side, e))?;
    let config: ModelConfig = serde_json::from_str(&text)?;
    Ok(load_checkpoint(path, &config).with_context(|| format!("loading {}", path.display()))?)
}

fn model_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

pub fn run(command: &Command, loaded: &Loaded, dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| file_error(dir, e))?;
    let cfg = &loaded.config;
    let name = match command {
        Command::GenWorld => "gen-world",
        Command::GenData => "gen-data",
        Command::Pretrain => "pretrain",
        Command::SelfFinetune { .. } => "self-finetune",
        Command::EmbedFinetune { .. } => "embed-finetune",
        Command::Eval { .. } => "eval",
        Command::Probe { .. } => "probe",
        Command::Baseline => "baseline",
        Command::Report => "report",
    };
    let run = Run { dir, loaded, command: name };
    run.write_json(&format!("configs/{name}.json"), loaded)?;

    match command {
        Command::GenWorld => {
            let world = gen_world(cfg.seed, &cfg.world)?;
            run.write_json("world.json", &world)?;
        }
        Command::GenData => {
            let data = build_datasets(cfg)?;
            for path in data.write_dir(dir)? {
                let rel = path.strip_prefix(dir).expect("inside the run directory");
                run.record(&rel.to_string_lossy())?;
            }
        }
        Command::Pretrain => {
            let data = run.datasets()?;
            let base = base_model(cfg, &data)?;
            let (model, mut record) = pretrain(&base, &data, &cfg.train)?;
            record.config_hash = Some(loaded.config_hash.clone());
            run.save_model(PRETRAIN, &model)?;
            run.write_json("reports/pretrain.json", &record)?;
            run.write_csv(
                "reports/pretrain.csv",
                &["epoch", "l_mlm", "l_nlu", "l_nlg", "l_task", "l_joint", "split"],
                &record.csv_rows(),
            )?;
        }
        Command::SelfFinetune { from } => {
            let data = run.datasets()?;
            let start = run.resolve(from.as_deref(), &[PRETRAIN])?;
            let model = load_model(&start)?;
            if !cfg.self_finetune.ablations.enable_self_finetune {
                run.save_model(SELF_FINETUNE, &model)?;
                run.write_json(
                    "reports/self_finetune.json",
                    &json!({ "config_hash": loaded.config_hash, "skipped": true, "from": model_name(&start) }),
                )?;
                return Ok(());
            }
            let premises: Vec<_> = data.target_dev.iter().map(|e| e.premise.clone()).collect();
            let (pseudo, gen_report) = pseudo_nli(&model, &data.vocab, &premises, &cfg.gen)?;
            let records: Vec<DatasetRecord> = pseudo.iter().map(generated_record).collect();
            let mut buf = Vec::new();
            write_jsonl(&mut buf, &records)?;
            run.write_bytes("data/pseudo_nli.jsonl", &buf)?;
            let examples: Vec<NliExample> = pseudo.into_iter().map(|g| g.item).collect();
            let (model, losses) = self_finetune(model, &data.vocab, &examples, &cfg.self_finetune)?;
            run.save_model(SELF_FINETUNE, &model)?;
            run.write_json(
                "reports/self_finetune.json",
                &json!({
                    "config_hash": loaded.config_hash,
                    "skipped": false,
                    "from": model_name(&start),
                    "generation": gen_report,
                    "epoch_losses": losses,
                }),
            )?;
        }
        Command::EmbedFinetune { from } => {
            let data = run.datasets()?;
            let start = run.resolve(from.as_deref(), &[SELF_FINETUNE, PRETRAIN])?;
            let model = load_model(&start)?;
            let anchors: Vec<_> = data.target_dev.iter().map(|e| e.premise.clone()).collect();
            let (sets, gen_report) = contrastive_pairs(&model, &data.vocab, &anchors, &cfg.gen)?;
            let mut buf = Vec::new();
            for s in &sets {
                serde_json::to_writer(&mut buf, s)?;
                buf.push(b'\n');
            }
            run.write_bytes("data/contrastive.jsonl", &buf)?;
            let (model, losses) = embed_finetune(model, &data.vocab, &sets, &cfg.contrastive)?;
            run.save_model(EMBED, &model)?;
            run.write_json(
                "reports/embed_finetune.json",
                &json!({
                    "config_hash": loaded.config_hash,
                    "from": model_name(&start),
                    "generation": gen_report,
                    "epoch_losses": losses,
                }),
            )?;
        }
        Command::Eval { checkpoint, embed_checkpoint } => {
            let data = run.datasets()?;
            let path = run.resolve(checkpoint.as_deref(), &[SELF_FINETUNE, PRETRAIN])?;
            let model = load_model(&path)?;
            let embed_path = match (embed_checkpoint, checkpoint) {
                (Some(p), _) => p.clone(),
                (None, Some(p)) => p.clone(),
                (None, None) => run.resolve(None, &[EMBED, SELF_FINETUNE, PRETRAIN])?,
            };
            let embedder = if embed_path == path { model.clone() } else { load_model(&embed_path)? };
            let report = evaluate(cfg.seed, &model_name(&path), &model, &embedder, &data, cfg.gen.max_len)?;
            run.write_report("eval", report)?;
        }
        Command::Probe { checkpoint } => {
            let data = run.datasets()?;
            let path = run.resolve(checkpoint.as_deref(), &[SELF_FINETUNE, PRETRAIN])?;
            let model = load_model(&path)?;
            let premises: Vec<_> = data.target_dev.iter().map(|e| e.premise.clone()).collect();
            let result = probe_set(&model, &data.vocab, &premises, cfg.seed)?;
            run.write_json(
                "reports/probe.json",
                &json!({ "config_hash": loaded.config_hash, "model": model_name(&path), "probe": result }),
            )?;
            run.write_csv("reports/probe.csv", &["label", "mean", "std", "n"], &result.to_csv_rows())?;
        }
        Command::Baseline => {
            let data = run.datasets()?;
            let train: Vec<NliLabel> = data.general_nli.iter().map(|e| e.label).collect();
            let test: Vec<NliLabel> = data.target_test.iter().map(|e| e.label).collect();
            let (_, mut report) = zero_rule(&train, &test)?;
            report.dataset = "target_test".into();
            report.model = "zero_rule".into();
            report.seed = cfg.seed;
            run.write_report("baseline", report)?;
        }
        Command::Report => {
            let rows = collect_reports(&run.path("reports"))?;
            run.write_csv("reports/summary.csv", &["source", "model", "metric", "value"], &rows)?;
            for r in &rows {
                println!("{}", r.join(","));
            }
        }
    }
    Ok(())
}

fn generated_record(g: &Generated<NliExample>) -> DatasetRecord {
    let mut r = g.item.to_record(Domain::Target);
    r.source_id = Some(g.source_id.to_string());
    r.control_code = Some(g.control_code.as_str().to_string());
    r
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn evaluate(
    seed: u64,
    name: &str,
    model: &Seq2SeqModel<f32>,
    embedder: &Seq2SeqModel<f32>,
    data: &Datasets,
    max_len: usize,
) -> anyhow::Result<MetricsReport> {
    let mut report = MetricsReport::new("target_test", name, seed);
    let nli = evaluate_nli(model, &data.vocab, &data.target_test)?;
    report.insert("accuracy", nli.accuracy).insert("macro_f1", nli.macro_f1);

    let gazetteer = Gazetteer::new(&data.world.gazetteer);
    let mut scores = Vec::with_capacity(data.target_summ_test.len());
    for ex in &data.target_summ_test {
        let out = summarize(model, &data.vocab, &ex.document, max_len)?;
        scores.push((
            bleu4(&out, std::slice::from_ref(&ex.summary)),
            rouge_l(&out, &ex.summary),
            nem(&out, &ex.summary, &gazetteer),
        ));
    }
    report
        .insert("bleu4", mean(scores.iter().map(|s| s.0)))
        .insert("rouge_l", mean(scores.iter().map(|s| s.1)))
        .insert("nem", mean(scores.iter().map(|s| s.2)));

    let set = RetrievalSet::from_entailments(&data.target_test);
    for (k, v) in retrieval_eval(embedder, &data.vocab, &set, &[1, 5, 10])? {
        report.insert(&format!("acc_at_{k}"), v);
    }
    let (r, rho) = similarity_eval(embedder, &data.vocab, &data.target_test)?;
    report.insert("pearson", r).insert("spearman", rho);
    Ok(report)
}

/// `source,model,metric,value` rows from every JSON report in `dir`.
fn collect_reports(dir: &Path) -> anyhow::Result<Vec<Vec<String>>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| file_error(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut rows = Vec::new();
    for path in files {
        let source = model_name(&path);
        let v: Value = serde_json::from_str(&fs::read_to_string(&path).map_err(|e| file_error(&path, e))?)?;
        if let Ok(report) = serde_json::from_value::<MetricsReport>(v.clone()) {
            for [model, _, metric, value] in report.to_csv_rows() {
                rows.push(vec![source.clone(), model, metric, value]);
            }
        } else if let Some(probe) = v.get("probe") {
            let model = v["model"].as_str().unwrap_or("").to_string();
            for s in probe["per_label"].as_array().into_iter().flatten() {
                rows.push(vec![
                    source.clone(),
                    model.clone(),
                    format!("control_code_mass_{}", s[0].as_str().unwrap_or("")),
                    s[1]["mean"].to_string(),
                ]);
            }
            rows.push(vec![source.clone(), model, "control_code_mass".into(), probe["overall"]["mean"].to_string()]);
        } else if let Some(epochs) = v.get("epochs").and_then(Value::as_array) {
            let sel = v["selected_epoch"].as_u64().unwrap_or(0) as usize;
            if let Some(e) = sel.checked_sub(1).and_then(|i| epochs.get(i)) {
                for key in ["l_mlm", "l_nlu", "l_nlg", "l_joint"] {
                    rows.push(vec![
                        source.clone(),
                        "pretrain".into(),
                        format!("validation_{key}"),
                        e["validation"][key].to_string(),
                    ]);
                }
            }
        }
    }
    Ok(rows)
}
