use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use dialcrit::corpus::{generate_mixed, Split};
use dialcrit::critic::ActCodec;
use dialcrit::dialenv::{Env, Ontology, DEFAULT_ONTOLOGY};
use dialcrit::evaluator::{compare_policies, evaluate_policy, Comparison, EvaluationReport};
use dialcrit::latent::{pretrain, SlPolicy, Vae};
use dialcrit::plas::{log_to_jsonl, plas_train_with, reinforce_train_with, PlasPolicy};
use dialcrit::policy::Policy;
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    ensure_out, load_policy, replace_dir, require_dir, split_file, write_json, Checkpoint, CheckpointKind, CorpusDir,
    Metadata, ONTOLOGY, SPLITS,
};
use crate::config::{parse_mix, RunConfig};
use crate::{Command, Common, EvalFlags, Failure, Mode};

const VAE_FILES: [&str; 3] = ["vae/theta.params", "vae/phi.params", "vae/omega.params"];
const COMPARISON: &str = "comparison.json";
const CORRELATIONS: &str = "correlations.csv";

pub fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenCorpus {
            common,
            ontology,
            policy_mix,
            n,
            seed,
            out,
        } => gen_corpus(&common, ontology.as_deref(), policy_mix.as_deref(), n, seed, &out),
        Command::Pretrain { common, corpus, seed, out } => pretrain_cmd(&common, &corpus, seed, &out),
        Command::TrainPlas {
            common,
            corpus,
            pretrained,
            seed,
            out,
        } => train_plas(&common, &corpus, &pretrained, seed, &out),
        Command::TrainReinforce {
            common,
            corpus,
            pretrained,
            seed,
            out,
        } => train_reinforce(&common, &corpus, &pretrained, seed, &out),
        Command::Evaluate {
            common,
            eval,
            corpus,
            policy,
            mode,
            out,
        } => evaluate(&common, &eval, &corpus, &policy, mode, &out),
        Command::Compare {
            common,
            eval,
            corpus,
            policies,
            report,
        } => compare(&common, &eval, &corpus, &policies, &report),
        Command::Report { report } => print_report(&report),
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

/// Wraps a checkpoint writer so training loops can call it.
fn io_error(e: anyhow::Error) -> dialcrit::Error {
    dialcrit::Error::Io(std::io::Error::other(format!("{e:#}")))
}

fn gen_corpus(
    common: &Common,
    ontology: Option<&Path>,
    mix: Option<&str>,
    n: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(m) = mix {
        cfg.corpus.mix = parse_mix(m).map_err(Failure::Usage)?;
    }
    if let Some(n) = n {
        cfg.corpus.train = n;
    }
    if let Some(s) = seed {
        cfg.corpus.seed = s;
    }
    cfg.validate()?;
    let text = match ontology {
        Some(p) => fs::read_to_string(p).map_err(|e| usage(format!("cannot read ontology {}: {e}", p.display())))?,
        None => DEFAULT_ONTOLOGY.to_string(),
    };
    let env = Env::new(Ontology::from_toml_str(&text).map_err(usage)?, cfg.env.clone()).map_err(usage)?;
    let specs = cfg
        .corpus
        .mix
        .iter()
        .map(|m| load_policy(&m.policy, &env))
        .collect::<Result<Vec<_>, _>>()?;
    let mix: Vec<(f64, &dyn Policy)> = cfg.corpus.mix.iter().zip(&specs).map(|(m, s)| (m.weight, s.policy.as_ref())).collect();

    ensure_out(out)?;
    fs::write(out.join(ONTOLOGY), &text).context("writing ontology")?;
    let c = &cfg.corpus;
    let mut meta = Metadata::new("gen-corpus", env.ontology().hash(), &cfg);
    meta.inputs.insert("ontology".into(), env.ontology().hash().to_string());
    let mut files = vec![ONTOLOGY.to_string()];
    for (i, (name, size)) in SPLITS.iter().zip([c.train, c.valid, c.test]).enumerate() {
        let split: Split = name.parse()?;
        let split_seed = c.seed + i as u64;
        let corpus = generate_mixed(&env, &mix, size, split_seed, split)?;
        corpus.save(&out.join(split_file(name)), env.ontology())?;
        println!("{name}: {} episodes, success {:.4}", corpus.len(), corpus.success_rate());
        meta = meta.seed(name, split_seed);
        files.push(split_file(name));
    }
    let files: Vec<&str> = files.iter().map(String::as_str).collect();
    meta.write(out, &files)?;
    Ok(())
}

/// Loads the run config and takes the environment and corpus sections from
/// the corpus that was actually generated.
fn config_for_corpus(common: &Common, corpus: &Path) -> Result<(RunConfig, CorpusDir), Failure> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.validate()?;
    require_dir(corpus, "corpus")?;
    let cd = CorpusDir::open(corpus)?;
    cfg.env = cd.meta.config.env.clone();
    cfg.corpus = cd.meta.config.corpus.clone();
    Ok((cfg, cd))
}

fn pretrain_cmd(common: &Common, corpus: &Path, seed: u64, out: &Path) -> Result<(), Failure> {
    let (cfg, cd) = config_for_corpus(common, corpus)?;
    let (vae, report) = pretrain(&cd.env, &cd.train, &cd.valid, &cfg.latent, &cfg.pretrain, seed)?;
    ensure_out(out)?;
    vae.save(&out.join("vae"))?;
    write_json(&out.join("report.json"), &report)?;
    let mut meta = Metadata::new("pretrain", cd.env.ontology().hash(), &cfg).seed("pretrain", seed);
    meta.inputs = cd.hashes.clone();
    let mut files = VAE_FILES.to_vec();
    files.push("report.json");
    meta.write(out, &files)?;
    println!("validation reconstruction accuracy {:.4}", report.valid_accuracy);
    Ok(())
}

/// Corpus, pretrained checkpoint and the config echo of a training command.
fn training_inputs(
    common: &Common,
    corpus: &Path,
    pretrained: &Path,
    command: &str,
    seed: u64,
) -> Result<(CorpusDir, Vae, Metadata), Failure> {
    let (mut cfg, cd) = config_for_corpus(common, corpus)?;
    require_dir(pretrained, "pretrained checkpoint")?;
    let ck = Checkpoint::open(pretrained, CheckpointKind::Sl, &cd.env)?;
    cfg.latent = ck.meta.config.latent.clone();
    cfg.pretrain = ck.meta.config.pretrain.clone();
    let vae = ck.vae(&cd.env)?;
    let mut meta = Metadata::new(command, cd.env.ontology().hash(), &cfg).seed(command, seed);
    meta.inputs = cd.hashes.clone();
    meta.inputs.insert("pretrained".into(), ck.hash());
    if let Some(s) = ck.meta.seeds.get("pretrain") {
        meta = meta.seed("pretrain", *s);
    }
    Ok((cd, vae, meta))
}

fn save_plas(dir: &Path, policy: &PlasPolicy, meta: &Metadata) -> anyhow::Result<()> {
    policy.vae().save(&dir.join("vae"))?;
    policy.save(dir)?;
    let mut files = VAE_FILES.to_vec();
    files.push("actor.params");
    meta.clone().write(dir, &files)
}

fn save_sl(dir: &Path, policy: &SlPolicy, meta: &Metadata) -> anyhow::Result<()> {
    policy.vae().save(&dir.join("vae"))?;
    meta.clone().write(dir, &VAE_FILES)
}

fn train_plas(common: &Common, corpus: &Path, pretrained: &Path, seed: u64, out: &Path) -> Result<(), Failure> {
    let (cd, vae, meta) = training_inputs(common, corpus, pretrained, "train-plas", seed)?;
    let cfg = meta.config.clone();
    ensure_out(out)?;
    let latest = out.join("checkpoint");
    let run = plas_train_with(&cd.env, &cd.train, &cd.valid, &vae, &cfg.plas, seed, &mut |p| {
        replace_dir(&latest, |d| save_plas(d, p, &meta)).map_err(io_error)
    })?;
    save_plas(out, &run.policy, &meta)?;
    fs::write(out.join("log.jsonl"), log_to_jsonl(&run.log)?).context("writing log")?;
    let mut files = VAE_FILES.to_vec();
    files.extend(["actor.params", "log.jsonl"]);
    meta.write(out, &files)?;
    fs::remove_dir_all(&latest).context("removing interim checkpoint")?;
    if let Some(last) = run.log.last() {
        println!("trained on {} episodes; best validation metric {:.4}", last.episodes, best_metric(&run.log));
    }
    Ok(())
}

fn train_reinforce(common: &Common, corpus: &Path, pretrained: &Path, seed: u64, out: &Path) -> Result<(), Failure> {
    let (cd, vae, meta) = training_inputs(common, corpus, pretrained, "train-reinforce", seed)?;
    let cfg = meta.config.clone();
    ensure_out(out)?;
    let latest = out.join("checkpoint");
    let (policy, log) = reinforce_train_with(&cd.env, &cd.train, &cd.valid, &vae, &cfg.reinforce, seed, &mut |p| {
        replace_dir(&latest, |d| save_sl(d, p, &meta)).map_err(io_error)
    })?;
    save_sl(out, &policy, &meta)?;
    fs::write(out.join("log.jsonl"), log_to_jsonl(&log)?).context("writing log")?;
    let mut files = VAE_FILES.to_vec();
    files.push("log.jsonl");
    meta.write(out, &files)?;
    fs::remove_dir_all(&latest).context("removing interim checkpoint")?;
    println!("best validation metric {:.4}", best_metric(&log));
    Ok(())
}

fn best_metric(log: &[dialcrit::plas::LogRecord]) -> f64 {
    log.iter().map(|r| r.valid_metric).fold(f64::NEG_INFINITY, f64::max)
}

fn eval_config(common: &Common, flags: &EvalFlags, corpus: &Path) -> Result<(RunConfig, CorpusDir), Failure> {
    let (mut cfg, cd) = config_for_corpus(common, corpus)?;
    if let Some(s) = &flags.seeds {
        cfg.eval.critic_seeds = s.clone();
    }
    if let Some(r) = flags.rollouts {
        cfg.eval.rollouts = r;
    }
    if let Some(w) = flags.workers {
        cfg.eval.workers = w;
    }
    cfg.validate()?;
    Ok((cfg, cd))
}

fn eval_metadata(command: &str, cfg: &RunConfig, cd: &CorpusDir, policies: &[crate::artifacts::PolicySpec]) -> Metadata {
    let mut meta = Metadata::new(command, cd.env.ontology().hash(), cfg)
        .seed("rollout", cfg.eval.rollout_seed)
        .seed("pseudo", cfg.eval.pseudo_seed);
    for (i, s) in cfg.eval.critic_seeds.iter().enumerate() {
        meta = meta.seed(&format!("critic.{i}"), *s);
    }
    meta.inputs = cd.hashes.clone();
    for p in policies {
        if let Some(h) = &p.hash {
            meta.inputs.insert(format!("policy.{}", p.text), h.clone());
        }
    }
    meta
}

#[derive(Serialize, Deserialize)]
struct EvaluationFile {
    metadata: Metadata,
    policy: String,
    report: EvaluationReport,
}

fn evaluate(common: &Common, flags: &EvalFlags, corpus: &Path, spec: &str, mode: Mode, out: &Path) -> Result<(), Failure> {
    let (cfg, cd) = eval_config(common, flags, corpus)?;
    let policy = load_policy(spec, &cd.env)?;
    let codec = ActCodec::Tokens(cd.env.actions().clone());
    let report = evaluate_policy(&cd.env, policy.policy.as_ref(), &cd.train, &cd.test, &codec, &cfg.eval, mode.modes())?;
    let metadata = eval_metadata("evaluate", &cfg, &cd, std::slice::from_ref(&policy));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_out(parent)?;
    }
    if let Some(c) = &report.critic {
        println!("critic estimate {:.4} +- {:.4}", c.estimate.mean, c.estimate.half_width);
    }
    if let Some(p) = &report.pseudo {
        println!("pseudo-dialogue match {:.4} success {:.4}", p.match_rate, p.success_rate);
    }
    if let Some(o) = &report.oracle {
        println!("simulated success {:.4} +- {:.4}", o.success.mean, o.success.half_width);
    }
    write_json(
        out,
        &EvaluationFile {
            metadata,
            policy: spec.to_string(),
            report,
        },
    )?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ComparisonFile {
    policies: Vec<String>,
    comparison: Comparison,
}

fn compare(common: &Common, flags: &EvalFlags, corpus: &Path, specs: &[String], out: &Path) -> Result<(), Failure> {
    if specs.len() < 3 {
        return Err(usage(format!("compare needs at least 3 policies, got {}", specs.len())));
    }
    let (cfg, cd) = eval_config(common, flags, corpus)?;
    let policies = specs
        .iter()
        .map(|s| load_policy(s, &cd.env))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&dyn Policy> = policies.iter().map(|p| p.policy.as_ref()).collect();
    let codec = ActCodec::Tokens(cd.env.actions().clone());
    let comparison = compare_policies(&cd.env, &refs, &cd.train, &cd.test, &codec, &cfg.eval)?;
    ensure_out(out)?;
    let meta = eval_metadata("compare", &cfg, &cd, &policies);
    write_json(
        &out.join(COMPARISON),
        &ComparisonFile {
            policies: specs.to_vec(),
            comparison: comparison.clone(),
        },
    )?;
    fs::write(out.join(CORRELATIONS), comparison.correlations_csv()).context("writing correlations")?;
    meta.write(out, &[COMPARISON, CORRELATIONS])?;
    print!("{}", comparison.render());
    Ok(())
}

fn print_report(dir: &PathBuf) -> Result<(), Failure> {
    let path = dir.join(COMPARISON);
    if !path.is_file() {
        return Err(usage(format!("{} holds no comparison", dir.display())));
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let file: ComparisonFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let meta = Metadata::read(dir)?;
    println!("{} {} ({}), ontology {}", meta.tool, meta.version, meta.command, meta.ontology_hash);
    println!("policies: {}", file.policies.join(", "));
    print!("{}", file.comparison.render());
    Ok(())
}
