use std::fs;
use std::path::{Path, PathBuf};

use burst_core::autodiff::OpKind;
use burst_core::config::RunConfig;
use burst_core::data::{parse_manifest, Corpus, Split, MANIFEST_FILE};
use burst_core::metrics::{format_gain, relative_gain, EvalReport, EMOTIONS};
use burst_core::model::{Checkpoint, Profile, VariantSpec};
use burst_core::trainer::{self, RunRecord};
use burst_core::verify::{self, VerifyOptions};
use burst_core::{Error, Result};
use log::{info, warn};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const EFFECTIVE_CONFIG: &str = "config.toml";
pub const ABLATION_TABLE: &str = "ablation.txt";
pub const ABLATION_RECORD: &str = "ablation.json";

/// Flags shared by every command that reads a run configuration.
#[derive(Clone, Debug, Default)]
pub struct ConfigFlags {
    pub config: Option<PathBuf>,
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub bootstrap_n: Option<usize>,
}

impl ConfigFlags {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p, self.profile)?,
            None => RunConfig::for_profile(self.profile.unwrap_or(Profile::Desk)),
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(n) = self.bootstrap_n {
            cfg.eval.bootstrap_n = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("record serialises to JSON")
}

/// Writes the effective config and a manifest of the invocation into `dir`.
fn write_run_manifest(dir: &Path, command: &str, cfg: Option<&RunConfig>, details: Value) -> Result<()> {
    let argv: Vec<String> = std::env::args().collect();
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "argv": argv,
        "config": cfg.map(to_json),
        "details": details,
    });
    if let Some(cfg) = cfg {
        write_file(&dir.join(EFFECTIVE_CONFIG), &cfg.to_toml())?;
    }
    write_file(
        &dir.join(RUN_MANIFEST),
        &serde_json::to_string_pretty(&manifest).expect("manifest serialises"),
    )
}

/// SHA-256 over the manifest text followed by every WAV file in manifest order.
pub fn corpus_checksum(dir: &Path) -> Result<String> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(manifest.as_bytes());
    for record in parse_manifest(&manifest)? {
        let path = dir.join(&record.wav);
        hasher.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn summarise(corpus: &Corpus) -> String {
    let parts: Vec<String> = Split::ALL
        .iter()
        .map(|s| {
            format!(
                "{s} {} speakers / {} utterances",
                corpus.speakers(*s).len(),
                corpus.split(*s).len()
            )
        })
        .collect();
    format!(
        "{}; {} utterances total, mean duration {:.2} s",
        parts.join(", "),
        corpus.utterances.len(),
        corpus.mean_duration()
    )
}

pub fn generate(flags: &ConfigFlags, out: &Path) -> Result<()> {
    let cfg = flags.resolve()?;
    let corpus = Corpus::generate(&cfg.synthetic)?;
    create_dir(out)?;
    corpus.write(out)?;
    let checksum = corpus_checksum(out)?;
    println!("{}", summarise(&corpus));
    println!("checksum {checksum}");
    write_run_manifest(
        out,
        "generate",
        Some(&cfg),
        json!({ "checksum": checksum, "utterances": corpus.utterances.len(), "mean_duration": corpus.mean_duration() }),
    )
}

/// Parses a variant given as its number (`1`..`7`) or as `+`-joined
/// component flags: `enrolment`, `speaker_adversary`, `enrolment_speaker`,
/// `enrolment_adversary` (`base` alone is variant 1).
pub fn parse_variant(text: &str) -> Result<VariantSpec> {
    if let Ok(n) = text.parse::<u8>() {
        return VariantSpec::from_number(n);
    }
    let mut flags = [false; 4];
    for part in text.split('+').map(str::trim) {
        let i = match part {
            "base" => continue,
            "enrolment" => 0,
            "speaker_adversary" => 1,
            "enrolment_speaker" => 2,
            "enrolment_adversary" => 3,
            other => {
                return Err(Error::Spec(format!(
                    "unknown component component {other:?}; expected 1-7 or a '+'-joined list of enrolment, speaker_adversary, enrolment_speaker, enrolment_adversary"
                )))
            }
        };
        flags[i] = true;
    }
    VariantSpec::new(flags[0], flags[1], flags[2], flags[3])
}

fn load_corpus(dir: &Path, cfg: &RunConfig) -> Result<Corpus> {
    Corpus::load(dir, cfg.features.sample_rate)
}

struct TrainedVariant {
    record: RunRecord,
    best: Checkpoint,
}

fn train_into(variant: VariantSpec, corpus: &Corpus, cfg: &RunConfig, out: &Path) -> Result<TrainedVariant> {
    create_dir(out)?;
    let outcome = trainer::train(variant, corpus, &cfg.model, &cfg.features, &cfg.train, Some(out))?;
    outcome.last.save(&out.join("last.ckpt"))?;
    write_file(
        &out.join("record.json"),
        &serde_json::to_string_pretty(&outcome.record).expect("record serialises"),
    )?;
    Ok(TrainedVariant {
        record: outcome.record,
        best: outcome.best,
    })
}

pub fn train(flags: &ConfigFlags, corpus_dir: &Path, variant: &str, out: &Path) -> Result<()> {
    let cfg = flags.resolve()?;
    let variant = parse_variant(variant)?;
    let corpus = load_corpus(corpus_dir, &cfg)?;
    info!("training variant {variant} on {}", corpus_dir.display());
    let run = train_into(variant, &corpus, &cfg, out)?;
    let r = &run.record;
    println!(
        "variant {} ({}): best {} Ĉ {:.4} at epoch {}",
        r.variant, r.label, r.monitor, r.best_c_hat, r.best_epoch
    );
    if let (Some(first), Some(last)) = (r.lambda.first(), r.lambda.last()) {
        println!("λ trace {first:+.3} → {last:+.3} over {} epochs", r.lambda.len());
    }
    println!("best checkpoint {}", out.join(trainer::BEST_CHECKPOINT).display());
    write_run_manifest(
        out,
        "train",
        Some(&cfg),
        json!({ "corpus": corpus_dir, "variant": variant.number(), "record": to_json(r) }),
    )
}

fn print_report(report: &EvalReport) {
    println!(
        "{} split, {} utterances: Ĉ {} ({}% CI, {} resamples)",
        report.split,
        report.n_utterances,
        report.score_with_ci(),
        report.ci_level * 100.0,
        report.n_bootstrap
    );
    for (name, c) in EMOTIONS.iter().zip(&report.per_emotion_ccc) {
        println!("  {name:<14} {c:.4}");
    }
    if let (Some(b), Some(g)) = (&report.baseline, report.relative_gain) {
        println!("  gain vs {b}: {}%", format_gain(g));
    }
}

pub struct EvaluateArgs<'a> {
    pub checkpoint: &'a Path,
    pub corpus: &'a Path,
    pub split: Split,
    pub baseline: Option<&'a Path>,
    pub out: Option<&'a Path>,
}

pub fn evaluate(flags: &ConfigFlags, args: &EvaluateArgs<'_>) -> Result<()> {
    let cfg = flags.resolve()?;
    let ckpt = Checkpoint::load(args.checkpoint)?;
    let corpus = Corpus::load(args.corpus, ckpt.features.sample_rate)?;
    let mut report = trainer::evaluate(&ckpt, &corpus, args.split, cfg.eval.bootstrap_n, cfg.eval.bootstrap_seed)?;
    if let Some(path) = args.baseline {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = EvalReport::from_json(&text)?;
        report = report.with_baseline(&path.display().to_string(), base.c_hat)?;
    }
    print_report(&report);
    if let Some(out) = args.out {
        create_dir(out)?;
        write_file(&out.join(format!("eval_{}.json", args.split)), &report.to_json())?;
        write_run_manifest(
            out,
            "evaluate",
            Some(&cfg),
            json!({ "checkpoint": args.checkpoint, "corpus": args.corpus, "split": args.split, "report": to_json(&report) }),
        )?;
    }
    Ok(())
}

/// One ablation row: scores per split, or the error that stopped the variant.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: VariantSpec,
    pub outcome: std::result::Result<Vec<EvalReport>, String>,
}

/// Renders rows in variant order with `Ĉ [CI]` and the gain over variant 1
/// for each evaluated split.
pub fn render_table(rows: &[AblationRow], splits: &[Split]) -> String {
    let baseline: Vec<Option<f64>> = splits
        .iter()
        .enumerate()
        .map(|(i, _)| {
            rows.iter()
                .find(|r| r.variant.number() == 1)
                .and_then(|r| r.outcome.as_ref().ok())
                .map(|reports| reports[i].c_hat)
        })
        .collect();
    let label_w = rows.iter().map(|r| columns(&r.variant.label())).max().unwrap_or(5).max(5);
    let mut header = format!("{:<2}  {:<label_w$}", "#", "model");
    for s in splits {
        header.push_str(&format!("  {:<18}  {:>6}", format!("{s} Ĉ [95% CI]"), "gain%"));
    }
    let mut lines = vec![header];
    for row in rows {
        let label = row.variant.label();
        let pad = " ".repeat(label_w - columns(&label));
        let mut line = format!("{:<2}  {label}{pad}", row.variant.number());
        match &row.outcome {
            Ok(reports) => {
                for (i, rep) in reports.iter().enumerate() {
                    let gain = match baseline[i] {
                        Some(b) if b != 0.0 => relative_gain(rep.c_hat, b).map(format_gain).unwrap_or_else(|_| "n/a".into()),
                        _ => "n/a".into(),
                    };
                    line.push_str(&format!("  {:<18}  {:>6}", rep.score_with_ci(), gain));
                }
            }
            Err(e) => line.push_str(&format!("  failed: {e}")),
        }
        lines.push(line);
    }
    lines.join("\n") + "\n"
}

/// Display columns, ignoring combining diacritics such as the tilde in `g̃`.
fn columns(s: &str) -> usize {
    s.chars().filter(|c| !('\u{300}'..='\u{36f}').contains(c)).count()
}

/// Returns the first failure so the caller can pick an exit code.
pub fn ablate(flags: &ConfigFlags, corpus_dir: &Path, out: &Path) -> Result<Option<Error>> {
    let cfg = flags.resolve()?;
    let corpus = load_corpus(corpus_dir, &cfg)?;
    create_dir(out)?;
    let splits: Vec<Split> = [Split::Dev, Split::Test]
        .into_iter()
        .filter(|s| !corpus.split(*s).is_empty())
        .collect();
    let mut rows = Vec::new();
    let mut first_error = None;
    for variant in VariantSpec::all() {
        info!("ablation: variant {variant}");
        let dir = out.join(format!("variant{}", variant.number()));
        let result = train_into(variant, &corpus, &cfg, &dir).and_then(|run| {
            splits
                .iter()
                .map(|s| trainer::evaluate(&run.best, &corpus, *s, cfg.eval.bootstrap_n, cfg.eval.bootstrap_seed))
                .collect::<Result<Vec<_>>>()
        });
        let outcome = match result {
            Ok(reports) => Ok(reports),
            Err(e) => {
                warn!("variant {} failed: {e}", variant.number());
                let msg = e.to_string();
                first_error.get_or_insert(e);
                Err(msg)
            }
        };
        rows.push(AblationRow { variant, outcome });
    }
    let table = render_table(&rows, &splits);
    print!("{table}");
    write_file(&out.join(ABLATION_TABLE), &table)?;
    let record: Vec<Value> = rows
        .iter()
        .map(|r| match &r.outcome {
            Ok(reports) => json!({ "variant": r.variant.number(), "label": r.variant.label(), "reports": to_json(reports) }),
            Err(e) => json!({ "variant": r.variant.number(), "label": r.variant.label(), "error": e }),
        })
        .collect();
    write_file(
        &out.join(ABLATION_RECORD),
        &serde_json::to_string_pretty(&record).expect("record serialises"),
    )?;
    write_run_manifest(out, "ablate", Some(&cfg), json!({ "corpus": corpus_dir, "splits": splits }))?;
    Ok(first_error)
}

/// Runs the self-test suite; `Ok(false)` when any check fails.
pub fn gradcheck(seeds: u64, fault: Option<&str>, out: Option<&Path>) -> Result<bool> {
    let fault = fault
        .map(|name| OpKind::parse(name).ok_or_else(|| Error::Config(format!("inject-fault: unknown op {name:?}"))))
        .transpose()?;
    let report = verify::run(&VerifyOptions { seeds, fault })?;
    print!("{}", report.render());
    if let Some(out) = out {
        create_dir(out)?;
        let ops: Vec<Value> = report
            .ops
            .iter()
            .map(|o| json!({ "op": o.name, "seeds": o.seeds, "max_rel_error": o.max_rel_error, "passed": o.passed() }))
            .collect();
        let invariants: Vec<Value> = report
            .invariants
            .iter()
            .map(|c| json!({ "name": c.name, "passed": c.passed, "detail": c.detail }))
            .collect();
        write_run_manifest(
            out,
            "gradcheck",
            None,
            json!({ "seeds": seeds, "ops": ops, "invariants": invariants, "passed": report.passed() }),
        )?;
    }
    Ok(report.passed())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(c_hat: f64) -> EvalReport {
        EvalReport {
            split: "dev".into(),
            variant: None,
            n_utterances: 10,
            per_emotion_ccc: vec![c_hat; 10],
            c_hat,
            ci_low: c_hat - 0.005,
            ci_high: c_hat + 0.005,
            ci_level: 0.95,
            n_bootstrap: 100,
            bootstrap_seed: 0,
            baseline: None,
            relative_gain: None,
        }
    }

    #[test]
    fn table_reports_gain_over_variant_one_and_marks_failures() {
        let rows = vec![
            AblationRow {
                variant: VariantSpec::from_number(1).unwrap(),
                outcome: Ok(vec![report(0.634)]),
            },
            AblationRow {
                variant: VariantSpec::from_number(3).unwrap(),
                outcome: Ok(vec![report(0.647)]),
            },
            AblationRow {
                variant: VariantSpec::from_number(7).unwrap(),
                outcome: Err("training diverged".into()),
            },
        ];
        let table = render_table(&rows, &[Split::Dev]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].contains(".634 [.629-.639]") && lines[1].trim_end().ends_with("0.0"), "{table}");
        assert!(lines[2].contains(".647") && lines[2].trim_end().ends_with("+2.1"), "{table}");
        assert!(lines[3].starts_with("7 ") && lines[3].contains("failed: training diverged"), "{table}");
    }

    #[test]
    fn variant_syntax() {
        assert_eq!(parse_variant("base").unwrap().number(), 1);
        assert_eq!(parse_variant("speaker_adversary").unwrap().number(), 2);
        assert_eq!(parse_variant("enrolment+enrolment_speaker+enrolment_adversary").unwrap().number(), 6);
        assert_eq!(parse_variant("7").unwrap(), VariantSpec::from_number(7).unwrap());
        assert!(matches!(parse_variant("0"), Err(Error::Spec(_))));
        assert!(matches!(parse_variant("enrolment+speed"), Err(Error::Spec(_))));
    }
}
