//! Command-line surface and resolution of flags, config files and presets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use t3time::config::{parse_kv, preset_for, Ablation, ModelConfig};
use t3time::data::{dataset_info, SplitSpec};
use t3time::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "t3time", version, about = "Tri-modal multivariate time-series forecaster")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model per horizon and seed, then evaluate on the test split.
    Train(RunArgs),
    /// Evaluate saved checkpoints and print a per-horizon table.
    Eval(EvalArgs),
    /// Train the full model and the four single-component ablations.
    Ablate(RunArgs),
    /// Print the header, checksum and edge vector norms of an embedding store.
    EmbInfo {
        path: PathBuf,
    },
    /// Write a noise-free sinusoid dataset as CSV.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// key=value file using the long flag names as keys; flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub dataset_name: Option<String>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// horizon or comma list of horizons
    #[arg(long)]
    pub pred_len: Option<String>,
    #[arg(long)]
    pub channel: Option<usize>,
    /// cross-modal alignment heads
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub enc_layers: Option<usize>,
    #[arg(long)]
    pub dec_layers: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// seed or comma list of seeds
    #[arg(long)]
    pub seed: Option<String>,
    /// `stub` or `store:DIR` with train/val/test .t3emb files
    #[arg(long)]
    pub emb: Option<String>,
    #[arg(long)]
    pub few_shot: Option<f64>,
    /// components to remove: frequency, multihead, residual, gating
    #[arg(long)]
    pub ablate: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// epochs without validation improvement before stopping; 0 disables
    #[arg(long)]
    pub patience: Option<usize>,
    /// cap on optimizer steps per run
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// `instance` or `global`
    #[arg(long)]
    pub norm: Option<String>,
    /// `counts:A,B,C` or `ratios:A,B,C`
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// checkpoint file or directory searched recursively; repeatable
    #[arg(long = "ckpt", required = true)]
    pub ckpts: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// expected horizon; checkpoints with another horizon are rejected
    #[arg(long)]
    pub pred_len: Option<usize>,
    /// overrides the embedding source recorded in the checkpoint
    #[arg(long)]
    pub emb: Option<String>,
    /// `test` or `val`
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// write denormalized forecasts as CSV
    #[arg(long)]
    pub forecasts: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub vars: usize,
    #[arg(long, default_value_t = 2000)]
    pub len: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EmbSpec {
    Stub,
    Store(PathBuf),
}

impl EmbSpec {
    pub fn parse(s: &str) -> Result<Self> {
        match s.split_once(':') {
            _ if s == "stub" => Ok(EmbSpec::Stub),
            Some(("store", p)) if !p.is_empty() => Ok(EmbSpec::Store(PathBuf::from(p))),
            _ => Err(Error::Config(format!("--emb must be 'stub' or 'store:PATH', got '{s}'"))),
        }
    }
}

impl std::fmt::Display for EmbSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EmbSpec::Stub => f.write_str("stub"),
            EmbSpec::Store(p) => write!(f, "store:{}", p.display()),
        }
    }
}

pub fn parse_split(s: &str) -> Result<SplitSpec> {
    let bad = || Error::Config(format!("--split must be counts:A,B,C or ratios:A,B,C, got '{s}'"));
    let (kind, list) = s.split_once(':').ok_or_else(bad)?;
    let parts: Vec<&str> = list.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    match kind {
        "counts" => {
            let v = parts
                .iter()
                .map(|p| p.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            Ok(SplitSpec::Counts(v[0], v[1], v[2]))
        }
        "ratios" => {
            let v = parts
                .iter()
                .map(|p| p.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            Ok(SplitSpec::Ratios(v[0], v[1], v[2]))
        }
        _ => Err(bad()),
    }
}

pub fn split_to_string(s: &SplitSpec) -> String {
    match s {
        SplitSpec::Counts(a, b, c) => format!("counts:{a},{b},{c}"),
        SplitSpec::Ratios(a, b, c) => format!("ratios:{a},{b},{c}"),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormKind {
    Instance,
    Global,
}

/// Everything a train or ablate command needs, fully resolved.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub data: PathBuf,
    pub dataset: String,
    pub seq_len: usize,
    pub horizons: Vec<usize>,
    pub channel: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seeds: Vec<u64>,
    pub emb: EmbSpec,
    pub few_shot: Option<f64>,
    pub ablation: Ablation,
    pub out: PathBuf,
    pub patience: Option<usize>,
    pub max_steps: Option<usize>,
    pub norm: NormKind,
    pub split: SplitSpec,
}

fn list<V: FromStr>(s: &str, key: &str) -> Result<Vec<V>> {
    let v: Vec<V> = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| Error::Config(format!("invalid value '{p}' in --{key}"))))
        .collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(Error::Config(format!("--{key} is empty")));
    }
    Ok(v)
}

struct FileValues(BTreeMap<String, String>);

impl FileValues {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self(BTreeMap::new()));
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let map = parse_kv(&text)?
            .into_iter()
            .map(|(k, v)| (k.replace('_', "-"), v))
            .collect();
        Ok(Self(map))
    }

    /// Flag value if given, else the file value.
    fn pick<V: FromStr>(&self, flag: Option<V>, key: &str) -> Result<Option<V>> {
        if flag.is_some() {
            return Ok(flag);
        }
        self.0
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("invalid value '{v}' for {key} in config file")))
            })
            .transpose()
    }
}

const KNOWN_KEYS: [&str; 23] = [
    "data",
    "dataset-name",
    "seq-len",
    "pred-len",
    "channel",
    "heads",
    "enc-layers",
    "dec-layers",
    "dropout",
    "batch",
    "epochs",
    "lr",
    "weight-decay",
    "seed",
    "emb",
    "few-shot",
    "ablate",
    "out",
    "patience",
    "max-steps",
    "norm",
    "split",
    "config",
];

impl RunConfig {
    /// Flags override the config file, which overrides the dataset preset.
    pub fn resolve(args: &RunArgs) -> Result<Self> {
        let file = FileValues::load(args.config.as_deref())?;
        if let Some(k) = file.0.keys().find(|k| !KNOWN_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown key '{k}' in config file")));
        }
        let data: PathBuf = file
            .pick(args.data.clone(), "data")?
            .ok_or_else(|| Error::Config("--data is required".into()))?;
        let dataset: String = match file.pick(args.dataset_name.clone(), "dataset-name")? {
            Some(d) => d,
            None => data
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "data".into()),
        };
        let info = dataset_info(&dataset);
        let preset = preset_for(&dataset);
        let dataset = info.map(|i| i.name.to_string()).unwrap_or(dataset);

        let seq_len = file
            .pick(args.seq_len, "seq-len")?
            .or(info.map(|i| i.input_len))
            .unwrap_or(96);
        let horizons = match file.pick(args.pred_len.clone(), "pred-len")? {
            Some(s) => list(&s, "pred-len")?,
            None => info
                .map(|i| i.horizons.to_vec())
                .ok_or_else(|| Error::Config(format!("--pred-len is required for dataset '{dataset}'")))?,
        };
        let seeds = match file.pick(args.seed.clone(), "seed")? {
            Some(s) => list(&s, "seed")?,
            None => vec![1],
        };
        let emb = EmbSpec::parse(&file.pick(args.emb.clone(), "emb")?.unwrap_or_else(|| "stub".into()))?;
        let ablation = match file.pick(args.ablate.clone(), "ablate")? {
            Some(s) => Ablation::parse(&s)?,
            None => Ablation::FULL,
        };
        let norm = match file.pick(args.norm.clone(), "norm")?.as_deref() {
            None | Some("instance") => NormKind::Instance,
            Some("global") => NormKind::Global,
            Some(o) => return Err(Error::Config(format!("--norm must be instance or global, got '{o}'"))),
        };
        let split = match file.pick(args.split.clone(), "split")? {
            Some(s) => parse_split(&s)?,
            None => info.map(|i| i.split).unwrap_or(SplitSpec::Ratios(0.7, 0.1, 0.2)),
        };
        let patience = match file.pick(args.patience, "patience")? {
            Some(0) => None,
            Some(p) => Some(p),
            None => Some(10),
        };
        let few_shot = file.pick(args.few_shot, "few-shot")?;
        if let Some(f) = few_shot {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("--few-shot {f} outside (0, 1]")));
            }
        }
        let cfg = Self {
            data,
            seq_len,
            horizons,
            channel: file.pick(args.channel, "channel")?.or(preset.map(|p| p.channel)).unwrap_or(64),
            heads: file.pick(args.heads, "heads")?.or(preset.map(|p| p.heads)).unwrap_or(4),
            enc_layers: file
                .pick(args.enc_layers, "enc-layers")?
                .or(preset.map(|p| p.encoder_layers))
                .unwrap_or(1),
            dec_layers: file
                .pick(args.dec_layers, "dec-layers")?
                .or(preset.map(|p| p.decoder_layers))
                .unwrap_or(1),
            dropout: file.pick(args.dropout, "dropout")?.or(preset.map(|p| p.dropout)).unwrap_or(0.1),
            batch: file.pick(args.batch, "batch")?.or(preset.map(|p| p.batch_size)).unwrap_or(32),
            epochs: file.pick(args.epochs, "epochs")?.or(preset.map(|p| p.epochs)).unwrap_or(10),
            lr: file.pick(args.lr, "lr")?.or(preset.map(|p| p.learning_rate)).unwrap_or(1e-4),
            weight_decay: file
                .pick(args.weight_decay, "weight-decay")?
                .or(preset.map(|p| p.weight_decay))
                .unwrap_or(1e-3),
            seeds,
            emb,
            few_shot,
            ablation,
            out: file
                .pick(args.out.clone(), "out")?
                .unwrap_or_else(|| PathBuf::from("runs").join(&dataset)),
            patience,
            max_steps: file.pick(args.max_steps, "max-steps")?,
            norm,
            split,
            dataset,
        };
        if cfg.batch == 0 {
            return Err(Error::Config("--batch must be positive".into()));
        }
        if cfg.lr.is_nan() || cfg.lr <= 0.0 {
            return Err(Error::Config("--lr must be positive".into()));
        }
        Ok(cfg)
    }

    /// Model config for one horizon and seed.
    pub fn model_config(&self, pred_len: usize, num_vars: usize, llm_dim: usize, seed: u64) -> Result<ModelConfig> {
        let mut m = ModelConfig::new(self.seq_len, pred_len, num_vars, self.channel);
        m.cma_heads = self.heads;
        m.encoder_layers = self.enc_layers;
        m.decoder_layers = self.dec_layers;
        m.dropout = self.dropout;
        m.llm_dim = llm_dim;
        m.ablation = self.ablation;
        m.seed = seed;
        m.validate()?;
        Ok(m)
    }

    /// The resolved configuration as `key=value` text.
    pub fn to_kv(&self) -> String {
        let join = |v: &[String]| v.join(",");
        let abl = &self.ablation;
        let removed: Vec<&str> = [
            (!abl.use_frequency).then_some("frequency"),
            (!abl.use_multihead_cma).then_some("multihead"),
            (!abl.use_residual).then_some("residual"),
            (!abl.use_gating).then_some("gating"),
        ]
        .into_iter()
        .flatten()
        .collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("data", self.data.display().to_string());
        kv("dataset-name", self.dataset.clone());
        kv("seq-len", self.seq_len.to_string());
        kv("pred-len", join(&self.horizons.iter().map(|h| h.to_string()).collect::<Vec<_>>()));
        kv("channel", self.channel.to_string());
        kv("heads", self.heads.to_string());
        kv("enc-layers", self.enc_layers.to_string());
        kv("dec-layers", self.dec_layers.to_string());
        kv("dropout", self.dropout.to_string());
        kv("batch", self.batch.to_string());
        kv("epochs", self.epochs.to_string());
        kv("lr", self.lr.to_string());
        kv("weight-decay", self.weight_decay.to_string());
        kv("seed", join(&self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>()));
        kv("emb", self.emb.to_string());
        if let Some(f) = self.few_shot {
            kv("few-shot", f.to_string());
        }
        kv("ablate", if removed.is_empty() { "none".into() } else { removed.join(",") });
        kv("out", self.out.display().to_string());
        kv("patience", self.patience.unwrap_or(0).to_string());
        if let Some(m) = self.max_steps {
            kv("max-steps", m.to_string());
        }
        kv(
            "norm",
            match self.norm {
                NormKind::Instance => "instance".into(),
                NormKind::Global => "global".into(),
            },
        );
        kv("split", split_to_string(&self.split));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(data: &str) -> RunArgs {
        RunArgs {
            data: Some(data.into()),
            ..Default::default()
        }
    }

    #[test]
    fn preset_from_file_stem() {
        let cfg = RunConfig::resolve(&args("some/dir/etth1.csv")).unwrap();
        assert_eq!(cfg.dataset, "ETTh1");
        assert_eq!((cfg.channel, cfg.batch, cfg.dropout, cfg.epochs), (256, 256, 0.4, 150));
        assert_eq!(cfg.horizons, vec![96, 192, 336, 720]);
        assert_eq!(cfg.split, SplitSpec::Counts(8545, 2881, 2881));
    }

    #[test]
    fn flags_beat_file_beat_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "channel=32\nbatch=8\n# comment\nseed_len=3\n").unwrap();
        let mut a = args("etth1.csv");
        a.config = Some(path.clone());
        assert!(RunConfig::resolve(&a).is_err(), "unknown key must be rejected");
        fs::write(&path, "channel=32\nbatch=8\nseed=4,5\n").unwrap();
        a.batch = Some(2);
        let cfg = RunConfig::resolve(&a).unwrap();
        assert_eq!((cfg.channel, cfg.batch, cfg.seeds.clone()), (32, 2, vec![4, 5]));
        assert_eq!(cfg.dropout, 0.4);
    }

    #[test]
    fn echo_round_trips() {
        let mut a = args("toy.csv");
        a.pred_len = Some("24,48".into());
        a.ablate = Some("gating".into());
        a.emb = Some("store:embs".into());
        let cfg = RunConfig::resolve(&a).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("echo.cfg");
        fs::write(&path, cfg.to_kv()).unwrap();
        let again = RunConfig::resolve(&RunArgs {
            config: Some(path),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(again.to_kv(), cfg.to_kv());
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut a = args("toy.csv");
        assert!(matches!(RunConfig::resolve(&a), Err(Error::Config(_))), "unknown dataset needs a horizon");
        a.pred_len = Some("24".into());
        a.emb = Some("gpt".into());
        assert!(matches!(RunConfig::resolve(&a), Err(Error::Config(_))));
        a.emb = None;
        a.split = Some("ratios:0.7,0.1".into());
        assert!(matches!(RunConfig::resolve(&a), Err(Error::Config(_))));
    }
}
