//! Run configuration: a TOML file layered over the per-task defaults.
//!
//! Precedence, lowest first: built-in task defaults, the config file, the
//! `GENCOPY_OUTPUT_DIR` environment variable (output directory only), and
//! command-line flags (`--set section.key=value`, `--seeds`, `--output-dir`).
//! Relative paths in the file resolve against the file's directory; the
//! output directory defaults to `runs` next to the file.

use std::path::{Path, PathBuf};

use gencopy_core::decoding::DecodeConfig;
use gencopy_core::network::{ModelConfig, Task};
use gencopy_core::training::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Word/field vocabulary sizes used when the config does not say otherwise.
pub const DEFAULT_MAX_WORDS: usize = 20_000;
pub const DEFAULT_MAX_FIELDS: usize = 1_480;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    task: Task,
    seeds: Option<Vec<u64>>,
    output_dir: Option<PathBuf>,
    #[serde(default)]
    data: toml::Table,
    #[serde(default)]
    model: toml::Table,
    #[serde(default)]
    train: toml::Table,
    #[serde(default)]
    decode: toml::Table,
}

/// Where the data lives. Table paths are prefixes (`train` reads
/// `train.box`, `train.sent` and optionally `train.nb`); question-generation
/// paths are SQuAD JSON files. Relative paths resolve against the config
/// file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub max_words: usize,
    pub max_fields: usize,
    pub lowercase: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            valid: None,
            test: None,
            embeddings: None,
            max_words: DEFAULT_MAX_WORDS,
            max_fields: DEFAULT_MAX_FIELDS,
            lowercase: true,
        }
    }
}

/// Model dimensions that a config may set. Vocabulary sizes and the task are
/// derived, not configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub word_dim: usize,
    pub field_dim: usize,
    pub pos_dim: usize,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub dropout_p: f64,
    pub freeze_word_embeddings: bool,
}

impl ModelOverrides {
    fn for_task(task: Task) -> Self {
        let m = ModelConfig::for_task(task, 0, 0);
        Self {
            word_dim: m.word_dim,
            field_dim: m.field_dim,
            pos_dim: m.pos_dim,
            hidden_dim: m.hidden_dim,
            encoder_layers: m.encoder_layers,
            dropout_p: m.dropout_p,
            freeze_word_embeddings: m.freeze_word_embeddings,
        }
    }

    pub fn model_config(&self, task: Task, word_vocab: usize, field_vocab: usize) -> ModelConfig {
        ModelConfig {
            word_dim: self.word_dim,
            field_dim: self.field_dim,
            pos_dim: self.pos_dim,
            hidden_dim: self.hidden_dim,
            encoder_layers: self.encoder_layers,
            dropout_p: self.dropout_p,
            freeze_word_embeddings: self.freeze_word_embeddings,
            ..ModelConfig::for_task(task, word_vocab, field_vocab)
        }
    }
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub task: Task,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelOverrides,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub sets: Vec<String>,
    pub seeds: Option<Vec<u64>>,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path, env_output_dir: Option<PathBuf>, cli: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base_dir, env_output_dir, cli).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str, base_dir: &Path, env_output_dir: Option<PathBuf>, cli: &Overrides) -> Result<Self, CliError> {
        let mut file: FileConfig = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        for set in &cli.sets {
            let (section, key, value) = parse_set(set)?;
            let table = match section {
                "data" => &mut file.data,
                "model" => &mut file.model,
                "train" => &mut file.train,
                "decode" => &mut file.decode,
                other => return Err(CliError::Config(format!("--set: unknown section `{other}`"))),
            };
            table.insert(key.to_string(), value);
        }

        let task = file.task;
        let mut data: DataConfig = overlay(DataConfig::default(), &file.data, "data")?;
        for p in [&mut data.train, &mut data.valid, &mut data.test, &mut data.embeddings].into_iter().flatten() {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        let model = overlay(ModelOverrides::for_task(task), &file.model, "model")?;
        let train: TrainConfig = overlay(TrainConfig::for_task(task), &file.train, "train")?;
        let decode: DecodeConfig = overlay(DecodeConfig::for_task(task), &file.decode, "decode")?;
        train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        decode.validate().map_err(|e| CliError::Config(e.to_string()))?;

        let seeds = cli.seeds.clone().or(file.seeds).unwrap_or_else(|| vec![train.seed]);
        if seeds.is_empty() {
            return Err(CliError::Config("`seeds` is empty".into()));
        }
        let output_dir = cli
            .output_dir
            .clone()
            .or(env_output_dir)
            .unwrap_or_else(|| base_dir.join(file.output_dir.unwrap_or_else(|| PathBuf::from("runs"))));
        Ok(Self {
            task,
            seeds,
            output_dir,
            data,
            model,
            train,
            decode,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("# unserializable config: {e}"))
    }
}

/// `section.key=value`; the value is read as a TOML literal and falls back
/// to a bare string (so `--set data.train=corpus/train` works unquoted).
fn parse_set(s: &str) -> Result<(&str, &str, toml::Value), CliError> {
    let bad = || CliError::Config(format!("--set `{s}`: expected section.key=value"));
    let (lhs, raw) = s.split_once('=').ok_or_else(bad)?;
    let (section, key) = lhs.split_once('.').ok_or_else(bad)?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((section.trim(), key.trim(), value))
}

/// Replaces fields of `base` with the entries of `patch`; keys `base` does
/// not have are rejected.
fn overlay<T: Serialize + DeserializeOwned>(base: T, patch: &toml::Table, section: &str) -> Result<T, CliError> {
    let mut table = toml::Table::try_from(&base).map_err(|e| CliError::Config(e.to_string()))?;
    let optional = ["train", "valid", "test", "embeddings"];
    for (k, v) in patch {
        let known = table.contains_key(k) || (section == "data" && optional.contains(&k.as_str()));
        if !known {
            return Err(CliError::Config(format!("unknown key `{section}.{k}`")));
        }
        table.insert(k.clone(), v.clone());
    }
    T::deserialize(table).map_err(|e| CliError::Config(format!("[{section}] {}", e.message())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use gencopy_core::decoding::DecodeMode;
    use gencopy_core::training::OptimizerKind;

    fn parse(text: &str, cli: &Overrides) -> Result<RunConfig, CliError> {
        RunConfig::parse(text, Path::new("/cfg"), None, cli)
    }

    #[test]
    fn defaults_follow_the_task() {
        let t = parse("task = \"table2text\"", &Overrides::default()).unwrap();
        assert_eq!(t.train, TrainConfig::table2text());
        assert_eq!(t.decode.mode, DecodeMode::Greedy);
        assert_eq!((t.model.word_dim, t.model.hidden_dim), (400, 500));
        assert_eq!(t.seeds, vec![1]);
        let q = parse("task = \"qg\"", &Overrides::default()).unwrap();
        assert_eq!(q.train.optimizer, OptimizerKind::Adagrad);
        assert_eq!(q.decode.beam_size, 20);
        assert!(q.model.freeze_word_embeddings);
    }

    #[test]
    fn file_then_flags() {
        let text = r#"
            task = "qg"
            seeds = [1, 2, 3]
            output_dir = "out"
            [data]
            train = "squad/train.json"
            [train]
            lr = 0.1
            max_epochs = 3
        "#;
        let cli = Overrides {
            sets: vec!["train.lr=0.05".into(), "decode.beam_size=4".into()],
            seeds: Some(vec![9]),
            output_dir: None,
        };
        let c = parse(text, &cli).unwrap();
        assert_eq!((c.train.lr, c.train.max_epochs, c.decode.beam_size), (0.05, 3, 4));
        assert_eq!(c.seeds, vec![9]);
        assert_eq!(c.output_dir, Path::new("/cfg/out"));
        assert_eq!(c.data.train.as_deref(), Some(Path::new("/cfg/squad/train.json")));
    }

    #[test]
    fn environment_beats_file_but_not_flags() {
        let text = "task = \"qg\"\noutput_dir = \"/a\"";
        let env = Some(PathBuf::from("/b"));
        let c = RunConfig::parse(text, Path::new("."), env.clone(), &Overrides::default()).unwrap();
        assert_eq!(c.output_dir, Path::new("/b"));
        let cli = Overrides {
            output_dir: Some("/c".into()),
            ..Overrides::default()
        };
        assert_eq!(RunConfig::parse(text, Path::new("."), env, &cli).unwrap().output_dir, Path::new("/c"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "task = \"qg\"\nbogus = 1",
            "task = \"qg\"\n[train]\nlearning_rate = 1.0",
            "task = \"qg\"\n[model]\nword_vocab = 10",
            "task = \"qg\"\n[decode]\nbeam = 3",
            "task = \"qg\"\n[data]\nmax_word = 3",
        ] {
            assert!(matches!(parse(text, &Overrides::default()), Err(CliError::Config(_))), "{text}");
        }
        let cli = Overrides {
            sets: vec!["optim.lr=1".into()],
            ..Overrides::default()
        };
        assert!(parse("task = \"qg\"", &cli).is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(parse("task = \"qg\"\n[train]\nbatch_size = 0", &Overrides::default()).is_err());
        assert!(parse("task = \"qg\"\n[decode]\nmode = \"sample\"", &Overrides::default()).is_err());
        assert!(parse("task = \"poetry\"", &Overrides::default()).is_err());
    }

    #[test]
    fn set_values_parse_as_toml_or_strings() {
        assert_eq!(parse_set("train.lr=0.5").unwrap().2, toml::Value::Float(0.5));
        assert_eq!(parse_set("decode.mode=beam").unwrap().2, toml::Value::String("beam".into()));
        assert!(parse_set("lr=0.5").is_err());
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let c = parse("task = \"table2text\"\nseeds = [4, 5]", &Overrides::default()).unwrap();
        let text = c.to_toml();
        assert!(text.contains("seeds = [4, 5]"), "{text}");
        let back = parse(&text, &Overrides::default()).unwrap();
        assert_eq!(back, c);
    }
}
