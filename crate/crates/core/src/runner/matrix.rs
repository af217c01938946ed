use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::SplitSpec;
use crate::error::{Error, Result};
use crate::locality::{BlockMetric, LocalityScheduleSpec, ScheduleKind};
use crate::model::ModelConfig;
use crate::partition::PartitionMethod;
use crate::train::{RunSpec, TrainConfig};

pub const DEFAULT_SEEDS: [u64; 5] = [42, 123, 456, 789, 1337];

/// One row of the matrix: a named schedule with its partition method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixConfig {
    pub label: String,
    pub schedule: LocalityScheduleSpec,
    pub partition: PartitionMethod,
    pub metric: BlockMetric,
    /// Shown in the markdown tables; secondary rows appear in CSV/JSON only.
    pub primary: bool,
}

impl MatrixConfig {
    pub fn new(label: &str, schedule: LocalityScheduleSpec) -> Self {
        Self {
            label: label.into(),
            schedule,
            partition: PartitionMethod::default(),
            metric: BlockMetric::Index,
            primary: true,
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.schedule.kind == ScheduleKind::UniformDistributed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMatrix {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub splits: SplitSpec,
    pub seeds: Vec<u64>,
    /// Seed of the baseline whose checkpoint defines semantic partitions.
    pub reference_seed: u64,
    pub configs: Vec<MatrixConfig>,
}

impl Default for ExperimentMatrix {
    fn default() -> Self {
        let mut configs = vec![
            MatrixConfig::new("uniform_distributed", LocalityScheduleSpec::distributed()),
            MatrixConfig::new("uniform_localist", LocalityScheduleSpec::localist(1.0)),
        ];
        for beta in 1..=5 {
            let mut c = MatrixConfig::new(&format!("progressive_b{beta}"), LocalityScheduleSpec::progressive(beta, 1.0));
            c.primary = beta % 2 == 1;
            configs.push(c);
        }
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            splits: SplitSpec::default(),
            seeds: DEFAULT_SEEDS.to_vec(),
            reference_seed: 42,
            configs,
        }
    }
}

fn valid_label(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "_.-".contains(c))
}

impl ExperimentMatrix {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidMatrix(m));
        self.model.validate()?;
        self.train.validate()?;
        self.splits.validate()?;
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seed list has duplicates".into());
        }
        if !self.seeds.contains(&self.reference_seed) {
            return bad(format!("reference seed {} is not in the seed list", self.reference_seed));
        }
        if self.train.context_length > self.model.context_length {
            return bad("train context_length exceeds the model context length".into());
        }
        let mut labels = BTreeSet::new();
        for c in &self.configs {
            if !valid_label(&c.label) {
                return bad(format!("invalid label {:?}", c.label));
            }
            if !labels.insert(c.label.as_str()) {
                return bad(format!("duplicate label {:?}", c.label));
            }
            c.schedule.validate()?;
        }
        match self.configs.iter().filter(|c| c.is_baseline()).count() {
            1 => Ok(()),
            0 => bad("a uniform_distributed configuration is required".into()),
            _ => bad("only one uniform_distributed configuration is allowed".into()),
        }
    }

    pub fn baseline(&self) -> &MatrixConfig {
        self.configs.iter().find(|c| c.is_baseline()).expect("validated matrix has a baseline")
    }

    pub fn run_spec(&self, config: &MatrixConfig, seed: u64) -> RunSpec {
        RunSpec {
            label: config.label.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            schedule: config.schedule,
            metric: config.metric,
            partition: config.partition.clone(),
        }
        .with_seed(seed)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::InvalidMatrix(format!("{key} = {v:?}: {e}")))
}

/// Line-oriented `key = value` settings plus `config LABEL SCHEDULE
/// [PARTITION] [indicator] [secondary]` rows. `#` starts a comment. When no
/// config rows are given, the seven default configurations are used.
impl FromStr for ExperimentMatrix {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut m = ExperimentMatrix::default();
        let mut configs = Vec::new();
        let mut partition_all: Option<PartitionMethod> = None;
        let mut explicit_partition = Vec::new();
        let mut explicit_reference = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::InvalidMatrix(format!("line {}: {msg}", lineno + 1));
            if let Some(rest) = line.strip_prefix("config ") {
                let fields: Vec<&str> = rest.split_whitespace().collect();
                if fields.len() < 2 {
                    return Err(err("config rows need a label and a schedule".into()));
                }
                let mut c = MatrixConfig::new(fields[0], fields[1].parse()?);
                let mut explicit = false;
                for f in &fields[2..] {
                    match *f {
                        "secondary" => c.primary = false,
                        "indicator" => c.metric = BlockMetric::Indicator,
                        "index" => c.metric = BlockMetric::Index,
                        p => {
                            c.partition = p.parse()?;
                            explicit = true;
                        }
                    }
                }
                configs.push(c);
                explicit_partition.push(explicit);
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            match key {
                "layers" => m.model.num_layers = parse_num(key, value)?,
                "heads" => m.model.num_heads = parse_num(key, value)?,
                "model_dim" => m.model.model_dim = parse_num(key, value)?,
                "mlp_dim" => m.model.mlp_dim = parse_num(key, value)?,
                "context_length" => {
                    m.model.context_length = parse_num(key, value)?;
                    m.train.context_length = m.model.context_length;
                }
                "learning_rate" => m.train.learning_rate = parse_num(key, value)?,
                "adam_beta1" => m.train.adam_beta1 = parse_num(key, value)?,
                "adam_beta2" => m.train.adam_beta2 = parse_num(key, value)?,
                "adam_eps" => m.train.adam_eps = parse_num(key, value)?,
                "steps" => m.train.steps = parse_num(key, value)?,
                "batch_size" => m.train.batch_size = parse_num(key, value)?,
                "grad_clip_norm" => m.train.grad_clip_norm = parse_num(key, value)?,
                "splits" => m.splits = value.parse()?,
                "reference_seed" => {
                    m.reference_seed = parse_num(key, value)?;
                    explicit_reference = true;
                }
                "partition" => partition_all = Some(value.parse()?),
                "seeds" => {
                    m.seeds = value
                        .split(',')
                        .map(|s| parse_num("seeds", s.trim()))
                        .collect::<Result<_>>()?
                }
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        if !configs.is_empty() {
            m.configs = configs;
        } else {
            explicit_partition = vec![false; m.configs.len()];
        }
        if let Some(p) = partition_all {
            for (c, explicit) in m.configs.iter_mut().zip(explicit_partition) {
                if !explicit {
                    c.partition = p.clone();
                }
            }
        }
        if !explicit_reference && !m.seeds.contains(&m.reference_seed) {
            m.reference_seed = m.seeds[0];
        }
        m.validate()?;
        Ok(m)
    }
}
