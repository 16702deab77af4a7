//! On-disk layout of corpora, checkpoints and reports, and the metadata
//! sidecar every output carries.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use dialcrit::corpus::Corpus;
use dialcrit::dialenv::{Env, Ontology};
use dialcrit::latent::{SlPolicy, Vae};
use dialcrit::numerics::sha256_hex;
use dialcrit::plas::PlasPolicy;
use dialcrit::policy::{EagerProvider, EpsilonOracle, Policy, ScriptedOracle};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::Failure;

pub const METADATA: &str = "metadata.json";
pub const ONTOLOGY: &str = "ontology.toml";
pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seeds: BTreeMap<String, u64>,
    pub ontology_hash: String,
    pub config: RunConfig,
    /// SHA-256 of every input file, keyed by role.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every file written next to this metadata.
    pub outputs: BTreeMap<String, String>,
}

impl Metadata {
    pub fn new(command: &str, ontology_hash: &str, config: &RunConfig) -> Self {
        Metadata {
            tool: "dialcrit".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seeds: BTreeMap::new(),
            ontology_hash: ontology_hash.to_string(),
            config: config.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    pub fn read(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(METADATA);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Hashes the listed files under `dir` into `outputs` and writes the
    /// sidecar.
    pub fn write(mut self, dir: &Path, files: &[&str]) -> anyhow::Result<()> {
        for f in files {
            self.outputs.insert(f.to_string(), hash_file(&dir.join(f))?);
        }
        write_json(&dir.join(METADATA), &self)
    }
}

pub fn hash_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// A generated corpus directory: the ontology it was built on and its three
/// splits.
pub struct CorpusDir {
    pub env: Env,
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
    pub meta: Metadata,
    pub hashes: BTreeMap<String, String>,
}

pub fn split_file(split: &str) -> String {
    format!("{split}.jsonl")
}

impl CorpusDir {
    pub fn open(dir: &Path) -> Result<Self, Failure> {
        if !dir.join(METADATA).is_file() || !dir.join(ONTOLOGY).is_file() {
            return Err(Failure::Usage(format!("{} is not a corpus directory", dir.display())));
        }
        let inner = || -> anyhow::Result<Self> {
            let meta = Metadata::read(dir)?;
            let ont = Ontology::load(&dir.join(ONTOLOGY))?;
            let env = Env::new(ont, meta.config.env.clone())?;
            let mut hashes = BTreeMap::new();
            let mut load = |split: &str| -> anyhow::Result<Corpus> {
                let path = dir.join(split_file(split));
                hashes.insert(format!("corpus.{split}"), hash_file(&path)?);
                Corpus::load(&path, &env).with_context(|| format!("loading {}", path.display()))
            };
            let (train, valid, test) = (load("train")?, load("valid")?, load("test")?);
            hashes.insert("ontology".into(), env.ontology().hash().to_string());
            Ok(CorpusDir {
                env,
                train,
                valid,
                test,
                meta,
                hashes,
            })
        };
        inner().map_err(Failure::Runtime)
    }
}

/// What a checkpoint directory holds, by the command that wrote it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Sl,
    Plas,
    Reinforce,
}

impl CheckpointKind {
    pub fn command(self) -> &'static str {
        match self {
            CheckpointKind::Sl => "pretrain",
            CheckpointKind::Plas => "train-plas",
            CheckpointKind::Reinforce => "train-reinforce",
        }
    }
}

pub struct Checkpoint {
    pub dir: PathBuf,
    pub kind: CheckpointKind,
    pub meta: Metadata,
}

impl Checkpoint {
    /// Opens a checkpoint written by `kind`'s command and checks that it was
    /// trained on the same ontology as `env`.
    pub fn open(dir: &Path, kind: CheckpointKind, env: &Env) -> Result<Self, Failure> {
        if !dir.join(METADATA).is_file() {
            return Err(Failure::Usage(format!("{} is not a checkpoint directory", dir.display())));
        }
        let meta = Metadata::read(dir).map_err(Failure::Runtime)?;
        if meta.command != kind.command() {
            return Err(Failure::Usage(format!(
                "{} was written by `{}`, expected `{}`",
                dir.display(),
                meta.command,
                kind.command()
            )));
        }
        if meta.ontology_hash != env.ontology().hash() {
            return Err(Failure::Runtime(anyhow::anyhow!(
                "ontology hash mismatch: corpus {} vs checkpoint {} ({})",
                env.ontology().hash(),
                meta.ontology_hash,
                dir.display()
            )));
        }
        Ok(Checkpoint {
            dir: dir.to_path_buf(),
            kind,
            meta,
        })
    }

    pub fn vae(&self, env: &Env) -> anyhow::Result<Vae> {
        Ok(Vae::load(&self.dir.join("vae"), self.meta.config.latent.clone(), env)?)
    }

    pub fn policy(&self, env: &Env) -> anyhow::Result<Box<dyn Policy>> {
        let vae = self.vae(env)?;
        Ok(match self.kind {
            CheckpointKind::Sl => Box::new(SlPolicy::new(vae, env).named("sl")),
            CheckpointKind::Reinforce => Box::new(SlPolicy::new(vae, env).named("reinforce")),
            CheckpointKind::Plas => Box::new(PlasPolicy::load(&self.dir, vae, self.meta.config.plas.sigma, env)?),
        })
    }

    pub fn hash(&self) -> String {
        let mut all = String::new();
        for (name, h) in &self.meta.outputs {
            all.push_str(name);
            all.push_str(h);
        }
        sha256_hex(all.as_bytes())
    }
}

/// A policy named on the command line: `oracle`, `random`, `eager`,
/// `eps-<e>`, or `sl:<dir>`, `plas:<dir>`, `reinforce:<dir>`.
pub struct PolicySpec {
    pub text: String,
    pub policy: Box<dyn Policy>,
    /// Checkpoint hash for trained policies.
    pub hash: Option<String>,
}

pub fn load_policy(spec: &str, env: &Env) -> Result<PolicySpec, Failure> {
    let scripted = |policy: Box<dyn Policy>| PolicySpec {
        text: spec.to_string(),
        policy,
        hash: None,
    };
    match spec {
        "oracle" => return Ok(scripted(Box::new(ScriptedOracle::new(env)))),
        "random" => return Ok(scripted(Box::new(EpsilonOracle::uniform(env)))),
        "eager" => return Ok(scripted(Box::new(EagerProvider::new(env)))),
        _ => {}
    }
    if let Some(e) = spec.strip_prefix("eps-") {
        let eps: f64 = e.parse().map_err(|_| Failure::Usage(format!("bad epsilon in policy `{spec}`")))?;
        let p = EpsilonOracle::new(env, eps).map_err(|e| Failure::Usage(e.to_string()))?;
        return Ok(scripted(Box::new(p)));
    }
    let (kind, dir) = match spec.split_once(':') {
        Some(("sl", d)) => (CheckpointKind::Sl, d),
        Some(("plas", d)) => (CheckpointKind::Plas, d),
        Some(("reinforce", d)) => (CheckpointKind::Reinforce, d),
        _ => return Err(Failure::Usage(format!("unknown policy `{spec}`"))),
    };
    let ck = Checkpoint::open(Path::new(dir), kind, env)?;
    let policy = ck.policy(env).map_err(Failure::Runtime)?;
    Ok(PolicySpec {
        text: spec.to_string(),
        policy,
        hash: Some(ck.hash()),
    })
}

/// Checks that a training corpus exists before any work starts.
pub fn require_dir(dir: &Path, what: &str) -> Result<(), Failure> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", dir.display())))
    }
}

pub fn ensure_out(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Replaces `dest` with the contents written into a fresh sibling directory,
/// so a reader never sees a half-written checkpoint.
pub fn replace_dir(dest: &Path, fill: impl FnOnce(&Path) -> anyhow::Result<()>) -> anyhow::Result<()> {
    let tmp = dest.with_extension("tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    fill(&tmp)?;
    if dest.exists() {
        fs::remove_dir_all(dest)?;
    }
    fs::rename(&tmp, dest)?;
    Ok(())
}
