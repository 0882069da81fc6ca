//! Run configuration: a sectioned TOML file whose every key has a default, so
//! an empty file drives the synthetic demo.

use std::path::{Path, PathBuf};

use kline_core::ar::ArConfig;
use kline_core::evaluation::{BacktestConfig, ProbeConfig};
use kline_core::inference::SamplingConfig;
use kline_core::kline::Frequency;
use kline_core::pipeline::{default_cleaning_params, CleaningParams};
use kline_core::tokenizer::{BsqConfig, TokenizerConfig};
use kline_core::train::{OptimConfig, TrainConfig};
use kline_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable naming the config file used when `--config` is absent.
pub const CONFIG_ENV: &str = "KLINE_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// CSV file, or a directory of per-asset CSV files. Empty selects the
    /// built-in synthetic data.
    pub data: String,
    pub checkpoint_dir: String,
    pub report_dir: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            data: String::new(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub frequency: String,
    /// Asset id for single-file input and synthetic data.
    pub asset_id: String,
    pub synthetic_bars: usize,
    pub synthetic_period: f64,
    pub synthetic_noise: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            frequency: "5min".into(),
            asset_id: "SYN".into(),
            synthetic_bars: 1200,
            synthetic_period: 48.0,
            synthetic_noise: 0.01,
        }
    }
}

/// Optional overrides of the per-frequency cleaning table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleaningSection {
    pub min_length: Option<usize>,
    pub price_jump_threshold: Option<f64>,
    pub max_consecutive_illiquid: Option<usize>,
    pub max_consecutive_stagnant: Option<usize>,
    pub liquidity_epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub k: usize,
    pub group_size: usize,
    pub beta: f64,
    pub gamma0: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub lambda: f64,
    /// Defaults to `sqrt(k)`.
    pub soft_scale: Option<f64>,
    pub window: usize,
    pub stride: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        let t = TokenizerConfig::tiny();
        TokenizerSection {
            n_layers: t.n_layers,
            d_model: t.d_model,
            d_ff: t.d_ff,
            n_heads: t.n_heads,
            dropout: t.dropout,
            k: t.bsq.k,
            group_size: t.bsq.group_size,
            beta: t.bsq.beta,
            gamma0: t.bsq.gamma0,
            gamma: t.bsq.gamma,
            zeta: t.bsq.zeta,
            lambda: t.bsq.lambda,
            soft_scale: None,
            window: 32,
            stride: 16,
            steps: 150,
            batch_size: 4,
            lr: 3e-3,
            weight_decay: 0.01,
            warmup_steps: 20,
        }
    }
}

impl TokenizerSection {
    pub fn model_config(&self) -> TokenizerConfig {
        let mut bsq = BsqConfig::with_bits(self.k, self.group_size);
        bsq.beta = self.beta;
        bsq.gamma0 = self.gamma0;
        bsq.gamma = self.gamma;
        bsq.zeta = self.zeta;
        bsq.lambda = self.lambda;
        if let Some(c) = self.soft_scale {
            bsq.soft_scale = c;
        }
        TokenizerConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_heads: self.n_heads,
            dropout: self.dropout,
            bsq,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        train_config(
            self.steps,
            self.batch_size,
            self.lr,
            self.weight_decay,
            self.warmup_steps,
            seed,
        )
    }

    fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.window < 2 {
            return Err(Error::config("tokenizer.window", "must be at least 2"));
        }
        if self.stride == 0 {
            return Err(Error::config("tokenizer.stride", "must be positive"));
        }
        self.train_config(0).validate().map_err(|e| prefix("tokenizer", e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `tiny`, `small`, `base` or `large`; fields below override it.
    pub preset: String,
    pub n_layers: Option<usize>,
    pub d_model: Option<usize>,
    pub d_ff: Option<usize>,
    pub n_heads: Option<usize>,
    pub max_context: Option<usize>,
    pub ffn_dropout: Option<f64>,
    pub resid_dropout: Option<f64>,
    pub attn_dropout: Option<f64>,
    pub token_dropout: Option<f64>,
    /// Training sequence length in tokens.
    pub sequence_length: usize,
    pub stride: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "tiny".into(),
            n_layers: None,
            d_model: None,
            d_ff: None,
            n_heads: None,
            max_context: Some(64),
            ffn_dropout: None,
            resid_dropout: None,
            attn_dropout: None,
            token_dropout: None,
            sequence_length: 65,
            stride: 32,
            steps: 150,
            batch_size: 4,
            lr: 3e-3,
            weight_decay: 0.01,
            warmup_steps: 20,
        }
    }
}

impl ModelSection {
    /// Preset with overrides; `k` always follows the tokenizer.
    pub fn model_config(&self, k: usize) -> Result<ArConfig> {
        let mut c = ArConfig::preset(&self.preset)?;
        c.k = k;
        c.n_layers = self.n_layers.unwrap_or(c.n_layers);
        c.d_model = self.d_model.unwrap_or(c.d_model);
        c.d_ff = self.d_ff.unwrap_or(c.d_ff);
        c.n_heads = self.n_heads.unwrap_or(c.n_heads);
        c.max_context = self.max_context.unwrap_or(c.max_context);
        c.ffn_dropout = self.ffn_dropout.unwrap_or(c.ffn_dropout);
        c.resid_dropout = self.resid_dropout.unwrap_or(c.resid_dropout);
        c.attn_dropout = self.attn_dropout.unwrap_or(c.attn_dropout);
        c.token_dropout = self.token_dropout.unwrap_or(c.token_dropout);
        Ok(c)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        train_config(
            self.steps,
            self.batch_size,
            self.lr,
            self.weight_decay,
            self.warmup_steps,
            seed,
        )
    }

    fn validate(&self, k: usize) -> Result<()> {
        self.model_config(k)?.validate()?;
        if self.sequence_length < 2 {
            return Err(Error::config("model.sequence_length", "must be at least 2"));
        }
        if self.stride == 0 {
            return Err(Error::config("model.stride", "must be positive"));
        }
        self.train_config(0).validate().map_err(|e| prefix("model", e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub temperature: f64,
    pub top_p: f64,
    pub n_samples: usize,
    pub horizon: usize,
    /// Bars of history fed to the model.
    pub lookback: usize,
    /// Bars generated by `generate`.
    pub generate_length: usize,
    pub generate_sequences: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        let f = SamplingConfig::forecasting(0);
        SamplingSection {
            temperature: f.temperature,
            top_p: f.top_p,
            n_samples: f.n_samples,
            horizon: 16,
            lookback: 48,
            generate_length: 32,
            generate_sequences: 4,
        }
    }
}

impl SamplingSection {
    pub fn sampling_config(&self, seed: u64) -> SamplingConfig {
        SamplingConfig {
            temperature: self.temperature,
            top_p: self.top_p,
            n_samples: self.n_samples,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        self.sampling_config(0).validate()?;
        for (field, v) in [
            ("sampling.horizon", self.horizon),
            ("sampling.lookback", self.lookback),
            ("sampling.generate_length", self.generate_length),
            ("sampling.generate_sequences", self.generate_sequences),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsSection {
    pub data: u64,
    pub tokenizer: u64,
    pub model: u64,
    pub sampling: u64,
    pub evaluation: u64,
}

impl Default for SeedsSection {
    fn default() -> Self {
        SeedsSection {
            data: 1,
            tokenizer: 2,
            model: 3,
            sampling: 7,
            evaluation: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// Forecast origins spaced this many bars apart.
    pub stride: usize,
    pub max_windows: usize,
    /// Also score generated sequences with the discriminator and TSTR.
    pub fidelity: bool,
    pub probe_hidden: usize,
    pub probe_epochs: usize,
    pub probe_batch_size: usize,
    pub probe_lr: f64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            stride: 64,
            max_windows: 8,
            fidelity: true,
            probe_hidden: 8,
            probe_epochs: 3,
            probe_batch_size: 16,
            probe_lr: 5e-3,
        }
    }
}

impl EvaluationSection {
    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            hidden: self.probe_hidden,
            epochs: self.probe_epochs,
            batch_size: self.probe_batch_size,
            lr: self.probe_lr,
        }
    }

    fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("evaluation.stride", self.stride),
            ("evaluation.max_windows", self.max_windows),
            ("evaluation.probe_hidden", self.probe_hidden),
            ("evaluation.probe_epochs", self.probe_epochs),
            ("evaluation.probe_batch_size", self.probe_batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.probe_lr > 0.0 && self.probe_lr.is_finite()) {
            return Err(Error::config("evaluation.probe_lr", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestSection {
    pub k: usize,
    pub n: usize,
    pub min_hold: usize,
    pub cost: f64,
    pub horizon: usize,
    pub lookback: usize,
    /// Trading days simulated at the end of the data.
    pub days: usize,
    pub n_samples: usize,
    pub synthetic_assets: usize,
    pub synthetic_days: usize,
}

impl Default for BacktestSection {
    fn default() -> Self {
        BacktestSection {
            k: 3,
            n: 1,
            min_hold: 5,
            cost: 0.0015,
            horizon: 10,
            lookback: 30,
            days: 20,
            n_samples: 1,
            synthetic_assets: 6,
            synthetic_days: 60,
        }
    }
}

impl BacktestSection {
    pub fn backtest_config(&self) -> BacktestConfig {
        BacktestConfig {
            k: self.k,
            n: self.n,
            min_hold: self.min_hold,
            cost: self.cost,
            horizon: self.horizon,
            initial_capital: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        self.backtest_config().validate()?;
        for (field, v) in [
            ("backtest.horizon", self.horizon),
            ("backtest.lookback", self.lookback),
            ("backtest.days", self.days),
            ("backtest.n_samples", self.n_samples),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.lookback < 2 {
            return Err(Error::config("backtest.lookback", "must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Command run by `kline run`; `demo` chains every stage.
    pub task: String,
    pub paths: PathsSection,
    pub data: DataSection,
    pub cleaning: CleaningSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub sampling: SamplingSection,
    pub seeds: SeedsSection,
    pub evaluation: EvaluationSection,
    pub backtest: BacktestSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: "demo".into(),
            paths: PathsSection::default(),
            data: DataSection::default(),
            cleaning: CleaningSection::default(),
            tokenizer: TokenizerSection::default(),
            model: ModelSection::default(),
            sampling: SamplingSection::default(),
            seeds: SeedsSection::default(),
            evaluation: EvaluationSection::default(),
            backtest: BacktestSection::default(),
        }
    }
}

pub const TASKS: [&str; 9] = [
    "demo",
    "clean",
    "train-tokenizer",
    "train-model",
    "forecast",
    "generate",
    "evaluate",
    "backtest",
    "audit-params",
];

fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::Config { field, msg } => Error::config(format!("{section}.{field}"), msg),
        other => other,
    }
}

fn train_config(steps: usize, batch_size: usize, lr: f64, wd: f64, warmup: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size,
        seed,
        optim: OptimConfig {
            peak_lr: lr,
            weight_decay: wd,
            warmup_steps: warmup,
            ..OptimConfig::default()
        },
    }
}

impl RunConfig {
    /// Parses TOML text and validates every field.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| format!("byte {}", s.start))
                .unwrap_or_else(|| "config".into());
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        let cfg = Self::parse(&text)?;
        cfg.check_paths()?;
        Ok(cfg)
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn frequency(&self) -> Result<Frequency> {
        self.data.frequency.parse()
    }

    pub fn cleaning_params(&self) -> Result<CleaningParams> {
        let mut p = default_cleaning_params(self.frequency()?);
        let c = &self.cleaning;
        p.min_length = c.min_length.unwrap_or(p.min_length);
        p.price_jump_threshold = c.price_jump_threshold.unwrap_or(p.price_jump_threshold);
        p.max_consecutive_illiquid = c.max_consecutive_illiquid.unwrap_or(p.max_consecutive_illiquid);
        p.max_consecutive_stagnant = c.max_consecutive_stagnant.unwrap_or(p.max_consecutive_stagnant);
        p.liquidity_epsilon = c.liquidity_epsilon.unwrap_or(p.liquidity_epsilon);
        p.validate().map_err(|e| prefix("cleaning", e))?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !TASKS.contains(&self.task.as_str()) {
            return Err(Error::config(
                "task",
                format!("unknown task {:?}; expected one of {TASKS:?}", self.task),
            ));
        }
        self.frequency().map_err(|e| prefix("data", e))?;
        if self.paths.data.is_empty() && self.data.synthetic_bars < 2 {
            return Err(Error::config("data.synthetic_bars", "must be at least 2"));
        }
        if !(self.data.synthetic_period > 0.0) {
            return Err(Error::config("data.synthetic_period", "must be positive"));
        }
        if !(self.data.synthetic_noise >= 0.0) {
            return Err(Error::config("data.synthetic_noise", "must be non-negative"));
        }
        if self.backtest.synthetic_assets < self.backtest.k {
            return Err(Error::config(
                "backtest.synthetic_assets",
                "must be at least backtest.k",
            ));
        }
        self.cleaning_params()?;
        self.tokenizer.validate()?;
        self.model.validate(self.tokenizer.k)?;
        if self.sampling.lookback + self.sampling.horizon > self.model.model_config(self.tokenizer.k)?.max_context {
            return Err(Error::config(
                "sampling.lookback",
                "lookback + horizon must fit in model.max_context",
            ));
        }
        self.sampling.validate()?;
        self.evaluation.validate()?;
        self.backtest.validate()
    }

    /// Data path must exist; output directories are created lazily by the writers.
    pub fn check_paths(&self) -> Result<()> {
        if !self.paths.data.is_empty() && !Path::new(&self.paths.data).exists() {
            return Err(Error::config(
                "paths.data",
                format!("{} does not exist", self.paths.data),
            ));
        }
        for (field, dir) in [
            ("paths.checkpoint_dir", &self.paths.checkpoint_dir),
            ("paths.report_dir", &self.paths.report_dir),
        ] {
            if dir.is_empty() {
                return Err(Error::config(field, "must not be empty"));
            }
            if Path::new(dir).exists() && !Path::new(dir).is_dir() {
                return Err(Error::config(field, format!("{dir} is not a directory")));
            }
        }
        Ok(())
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        Path::new(&self.paths.checkpoint_dir).join(name)
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        Path::new(&self.paths.report_dir).join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_valid_and_round_trips() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let text = cfg.to_toml();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn out_of_range_values_cite_their_field() {
        let cases = [
            ("[tokenizer]\nk = 15", "bsq.k"),
            ("[tokenizer]\ngroup_size = 3", "bsq.group_size"),
            ("[tokenizer]\nwindow = 1", "tokenizer.window"),
            ("[tokenizer]\nsteps = 0", "tokenizer.train"),
            ("[model]\nmax_context = 1000", "model.max_context"),
            ("[model]\npreset = \"huge\"", "model.preset"),
            ("[model]\ntoken_dropout = 1.5", "model.token_dropout"),
            ("[sampling]\ntop_p = 0.0", "top_p"),
            ("[sampling]\ntemperature = -1.0", "temperature"),
            ("[cleaning]\nmin_length = 0", "cleaning.min_length"),
            (
                "[cleaning]\nprice_jump_threshold = 0.0",
                "cleaning.price_jump_threshold",
            ),
            ("[backtest]\nk = 1\nn = 2", "backtest"),
            ("[backtest]\ncost = 1.5", "backtest.cost"),
            ("[data]\nfrequency = \"7min\"", "frequency"),
            ("task = \"dance\"", "task"),
            ("[evaluation]\nprobe_hidden = 0", "evaluation.probe_hidden"),
        ];
        for (text, field) in cases {
            match RunConfig::parse(text) {
                Err(Error::Config { field: f, .. }) => assert!(f.contains(field), "{text}: got field {f}"),
                other => panic!("{text}: expected config error, got {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::parse("[model]\nlayers = 3"),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn cleaning_overrides_apply() {
        let cfg = RunConfig::parse("[data]\nfrequency = \"daily\"\n[cleaning]\nmin_length = 10").unwrap();
        let p = cfg.cleaning_params().unwrap();
        assert_eq!(p.min_length, 10);
        assert_eq!(p.price_jump_threshold, 0.30);
    }
}
