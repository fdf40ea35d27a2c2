//! Trial configuration files.
//!
//! A config is a TOML document of scalar fields (see [`TrialConfig`]) plus an
//! optional `[grid]` table mapping field names to value lists. Each point of
//! the Cartesian product of the grid, applied over the scalar fields, is one
//! trial.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analog::{
    NoiseSpec, NormKind, NormSpec, PrecisionSpec, RoundingMode, StraightThrough, TransformChain,
};
use crate::data::DatasetKind;
use crate::error::{Error, Result};
use crate::nn::{Activation, LayerChains, ModelSpec};
use crate::optim::AdamConfig;

/// Bit precision of a signal, or `"full"` for no quantization or noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "BitsRepr", into = "BitsRepr")]
pub enum Bits {
    Full,
    N(u32),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BitsRepr {
    N(i64),
    S(String),
}

impl TryFrom<BitsRepr> for Bits {
    type Error = String;

    fn try_from(r: BitsRepr) -> std::result::Result<Self, String> {
        match r {
            BitsRepr::N(n) => u32::try_from(n)
                .ok()
                .filter(|&n| (1..=PrecisionSpec::MAX_BITS).contains(&n))
                .map(Bits::N)
                .ok_or_else(|| format!("bits must be 1..={} or \"full\", got {n}", PrecisionSpec::MAX_BITS)),
            BitsRepr::S(s) => s.parse::<Bits>().map_err(|e| e.to_string()),
        }
    }
}

impl From<Bits> for BitsRepr {
    fn from(b: Bits) -> Self {
        match b {
            Bits::Full => BitsRepr::S("full".into()),
            Bits::N(n) => BitsRepr::N(n as i64),
        }
    }
}

impl std::str::FromStr for Bits {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(Bits::Full);
        }
        let n: u32 = s
            .parse()
            .map_err(|_| Error::Config(format!("bits must be an integer or \"full\", got {s:?}")))?;
        PrecisionSpec::new(n).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Bits::N(n))
    }
}

impl fmt::Display for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bits::Full => f.write_str("full"),
            Bits::N(n) => write!(f, "{n}"),
        }
    }
}

impl Bits {
    fn precision(self, mode: RoundingMode) -> Option<(PrecisionSpec, RoundingMode)> {
        match self {
            Bits::Full => None,
            Bits::N(n) => PrecisionSpec::new(n).ok().map(|p| (p, mode)),
        }
    }
}

/// Where weight noise is injected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightNoise {
    /// Folded into the layer's output noise (variances add).
    Output,
    /// An explicit noise stage at the end of the weight chain.
    Weight,
}

/// One training run. Field names double as CLI override and grid keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialConfig {
    pub dataset: String,
    pub model: String,
    pub activation: String,
    /// Normalization on layer inputs and outputs: `none`, `clamp`, or
    /// `l{1,2}_norm{,_w,_m,_wm}`.
    pub norm_y: String,
    pub norm_w: String,
    pub bits_y: Bits,
    pub bits_w: Bits,
    /// `rp` or `srp`.
    pub rp_mode: String,
    pub ep_y: f64,
    pub ep_w: f64,
    /// Direct noise strengths; override the EP-derived values when set.
    pub sigma_y: Option<f64>,
    pub sigma_w: Option<f64>,
    pub weight_noise: WeightNoise,
    /// `identity` or `clipped`.
    pub straight_through: String,
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub split_seed: u64,
    pub train_fraction: f64,
    /// Use only the first N samples of the training split per epoch.
    pub train_limit: Option<usize>,
    /// Use only the first N samples of the eval split and test set.
    pub eval_limit: Option<usize>,
}

impl Default for TrialConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrialConfig {
            dataset: "mnist".into(),
            model: "1linear".into(),
            activation: "relu".into(),
            norm_y: "none".into(),
            norm_w: "none".into(),
            bits_y: Bits::Full,
            bits_w: Bits::Full,
            rp_mode: "rp".into(),
            ep_y: 0.0,
            ep_w: 0.0,
            sigma_y: None,
            sigma_w: None,
            weight_noise: WeightNoise::Output,
            straight_through: "identity".into(),
            epochs: 10,
            batch_size: 128,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            seed: 0,
            split_seed: 0,
            train_fraction: 0.8,
            train_limit: None,
            eval_limit: None,
        }
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// Parses `none`, `clamp`, or `l<p>_norm[_w|_m|_wm]`.
pub fn parse_norm(s: &str) -> Result<NormSpec> {
    let key = s.to_ascii_lowercase();
    match key.as_str() {
        "none" => return Ok(NormSpec::none()),
        "clamp" => return Ok(NormSpec::clamp()),
        _ => {}
    }
    let bad = || Error::Config(format!("unknown normalization {s:?}"));
    let rest = key.strip_prefix('l').ok_or_else(bad)?;
    let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
    let order: u32 = digits.parse().map_err(|_| bad())?;
    let kind = match &rest[digits.len()..] {
        "_norm" => NormKind::LpNorm,
        "_norm_w" => NormKind::LpNormW,
        "_norm_m" => NormKind::LpNormM,
        "_norm_wm" => NormKind::LpNormWM,
        _ => return Err(bad()),
    };
    NormSpec::lp(kind, order).map_err(config_err)
}

fn sigma_for(ep: f64, bits: Bits, direct: Option<f64>, what: &str) -> Result<f64> {
    if let Some(s) = direct {
        return NoiseSpec::gaussian(s).map(|n| n.sigma()).map_err(config_err);
    }
    if !(0.0..1.0).contains(&ep) {
        return Err(Error::Config(format!("{what} must be in [0, 1), got {ep}")));
    }
    match bits {
        Bits::N(n) if ep > 0.0 => NoiseSpec::from_ep(ep, n).map(|n| n.sigma()).map_err(config_err),
        _ => Ok(0.0),
    }
}

impl TrialConfig {
    /// Parses a config with no `[grid]` table.
    pub fn from_toml(text: &str) -> Result<Self> {
        let file = ConfigFile::parse(text)?;
        if !file.grid.is_empty() {
            return Err(Error::Config("expected a single trial but the config has a [grid]".into()));
        }
        file.base()
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: TrialConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dataset_kind(&self) -> Result<DatasetKind> {
        DatasetKind::parse(&self.dataset)
    }

    pub fn activation_kind(&self) -> Result<Activation> {
        Activation::parse(&self.activation).map_err(config_err)
    }

    pub fn rounding(&self) -> Result<RoundingMode> {
        RoundingMode::parse(&self.rp_mode).map_err(config_err)
    }

    fn straight_through_rule(&self) -> Result<StraightThrough> {
        match self.straight_through.as_str() {
            "identity" => Ok(StraightThrough::Identity),
            "clipped" => Ok(StraightThrough::Clipped),
            s => Err(Error::Config(format!("straight_through must be identity|clipped, got {s:?}"))),
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let kind = self.dataset_kind()?;
        ModelSpec::preset(&self.model, kind.sample_shape(), self.activation_kind()?).map_err(config_err)
    }

    /// Noise strengths `(input, output, weight-stage)` implied by the config.
    pub fn noise_sigmas(&self) -> Result<(f64, f64, f64)> {
        let sy = sigma_for(self.ep_y, self.bits_y, self.sigma_y, "ep_y")?;
        let sw = sigma_for(self.ep_w, self.bits_w, self.sigma_w, "ep_w")?;
        Ok(match self.weight_noise {
            WeightNoise::Output => (sy, sy.hypot(sw), 0.0),
            WeightNoise::Weight => (sy, sy, sw),
        })
    }

    /// Input, weight and output chains shared by every analog layer.
    pub fn layer_chains(&self) -> Result<LayerChains> {
        let mode = self.rounding()?;
        let (norm_y, norm_w) = (parse_norm(&self.norm_y)?, parse_norm(&self.norm_w)?);
        let (sy, so, sw) = self.noise_sigmas()?;
        let noise = |s: f64| NoiseSpec::gaussian(s).ok();
        let ste = self.straight_through_rule()?;
        let mut weight = TransformChain::weight(norm_w, self.bits_w.precision(mode));
        if sw > 0.0 {
            weight = weight.push(crate::analog::Transform::Noise(NoiseSpec::gaussian(sw).map_err(config_err)?));
        }
        Ok(LayerChains {
            input: TransformChain::input(norm_y, self.bits_y.precision(mode), noise(sy))
                .with_straight_through(ste),
            weight: weight.with_straight_through(ste),
            output: TransformChain::output(noise(so), norm_y, self.bits_y.precision(mode))
                .with_straight_through(ste),
        })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Checks every field against the supported vocabularies.
    pub fn validate(&self) -> Result<()> {
        self.model_spec()?;
        self.layer_chains()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction must be in (0, 1), got {}", self.train_fraction)));
        }
        let a = self.adam();
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0 && a.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid optimizer parameters {a:?}")));
        }
        if self.train_limit == Some(0) || self.eval_limit == Some(0) {
            return Err(Error::Config("train_limit/eval_limit must be >= 1".into()));
        }
        Ok(())
    }

    /// Sorted `key = value` lines; insensitive to field order and whitespace
    /// in the source file.
    pub fn canonical_text(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        let table = value.as_table().expect("config is a table");
        let sorted: BTreeMap<&String, &toml::Value> = table.iter().collect();
        sorted
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// First 16 hex digits of the SHA-256 of [`canonical_text`](Self::canonical_text).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Applies `key=value` overrides (values in TOML syntax; bare words are
    /// taken as strings).
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        apply_overrides(&mut table, overrides)?;
        Self::from_table(table)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        table.insert(k.trim().to_string(), parse_value(v.trim()));
    }
    Ok(())
}

/// A parsed config file: scalar fields and grid axes.
#[derive(Clone, Debug)]
pub struct ConfigFile {
    base: toml::Table,
    grid: Vec<(String, Vec<toml::Value>)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut base: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let grid = match base.remove("grid") {
            None => Vec::new(),
            Some(toml::Value::Table(t)) => t
                .into_iter()
                .map(|(k, v)| match v {
                    toml::Value::Array(vals) if !vals.is_empty() => Ok((k, vals)),
                    _ => Err(Error::Config(format!("grid.{k} must be a non-empty list"))),
                })
                .collect::<Result<_>>()?,
            Some(_) => return Err(Error::Config("[grid] must be a table".into())),
        };
        Ok(ConfigFile { base, grid })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides to the scalar fields.
    pub fn override_base(&mut self, overrides: &[String]) -> Result<()> {
        apply_overrides(&mut self.base, overrides)
    }

    pub fn grid(&self) -> &[(String, Vec<toml::Value>)] {
        &self.grid
    }

    /// Number of trials the grid expands to.
    pub fn trial_count(&self) -> usize {
        self.grid.iter().map(|(_, v)| v.len()).product()
    }

    /// The scalar fields alone as a config.
    pub fn base(&self) -> Result<TrialConfig> {
        TrialConfig::from_table(self.base.clone())
    }

    /// Every grid point as a validated config, in row-major order over the
    /// grid keys (sorted by name).
    pub fn expand(&self) -> Result<Vec<TrialConfig>> {
        let n = self.trial_count();
        let mut out = Vec::with_capacity(n);
        for mut index in 0..n {
            let mut table = self.base.clone();
            for (key, values) in self.grid.iter().rev() {
                table.insert(key.clone(), values[index % values.len()].clone());
                index /= values.len();
            }
            out.push(TrialConfig::from_table(table)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_defaults() {
        let cfg = TrialConfig::from_toml("model = \"3linear\"\nbits_w = 4\nbits_y = \"full\"\n").unwrap();
        assert_eq!(cfg.model, "3linear");
        assert_eq!(cfg.bits_w, Bits::N(4));
        assert_eq!(cfg.bits_y, Bits::Full);
        assert_eq!(cfg.batch_size, 128);
        assert!(TrialConfig::from_toml("modle = \"x\"").is_err());
        assert!(TrialConfig::from_toml("bits_w = 0").is_err());
        assert!(TrialConfig::from_toml("activation = \"softplus\"").is_err());
        assert!(TrialConfig::from_toml("norm_y = \"l2_norm_q\"").is_err());
    }

    #[test]
    fn norm_names() {
        assert_eq!(parse_norm("clamp").unwrap().kind(), NormKind::Clamp);
        let n = parse_norm("l1_norm_wm").unwrap();
        assert_eq!((n.kind(), n.order()), (NormKind::LpNormWM, 1));
        assert_eq!(parse_norm("L2_Norm").unwrap().kind(), NormKind::LpNorm);
        assert!(parse_norm("l0_norm").is_err());
    }

    #[test]
    fn hash_ignores_layout() {
        let a = TrialConfig::from_toml("model = \"3linear\"\nseed = 3\n").unwrap();
        let b = TrialConfig::from_toml("  seed=3\n\n# comment\nmodel   =   \"3linear\"").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        let c = TrialConfig::from_toml("model = \"3linear\"\nseed = 4\n").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn grid_expansion() {
        let f = ConfigFile::parse("model = \"3linear\"\nbits_y = 2\n[grid]\nbits_w = [2, 4, 6]\nbits_y = [2, 4, 6]\n").unwrap();
        assert_eq!(f.trial_count(), 9);
        let trials = f.expand().unwrap();
        let mut hashes: Vec<String> = trials.iter().map(TrialConfig::hash).collect();
        hashes.sort();
        hashes.dedup();
        assert_eq!(hashes.len(), 9);
        assert!(trials.iter().any(|t| t.bits_w == Bits::N(6) && t.bits_y == Bits::N(2)));
    }

    #[test]
    fn overrides() {
        let cfg = TrialConfig::default()
            .with_overrides(&["bits_w=4".into(), "rp_mode=srp".into(), "ep_y = 0.5".into()])
            .unwrap();
        assert_eq!(cfg.bits_w, Bits::N(4));
        assert_eq!(cfg.rp_mode, "srp");
        assert_eq!(cfg.ep_y, 0.5);
        assert!(TrialConfig::default().with_overrides(&["nonsense".into()]).is_err());
    }

    #[test]
    fn chains_from_config() {
        let digital = TrialConfig::default();
        assert!(digital.layer_chains().unwrap().is_digital());
        // EP without finite precision adds no noise.
        let cfg = TrialConfig { ep_y: 0.5, ..TrialConfig::default() };
        assert!(cfg.layer_chains().unwrap().is_digital());

        let cfg = TrialConfig {
            bits_y: Bits::N(4),
            bits_w: Bits::N(2),
            ep_y: 0.25,
            ep_w: 0.5,
            norm_y: "clamp".into(),
            norm_w: "clamp".into(),
            ..TrialConfig::default()
        };
        let (sy, so, sw) = cfg.noise_sigmas().unwrap();
        let ey = crate::analog::sigma_from_ep(0.25, 4).unwrap();
        let ew = crate::analog::sigma_from_ep(0.5, 2).unwrap();
        assert_eq!(sy, ey);
        assert!((so * so - ey * ey - ew * ew).abs() < 1e-15);
        assert_eq!(sw, 0.0);
        let c = cfg.layer_chains().unwrap();
        assert_eq!(c.input.transforms().len(), 3);
        assert_eq!(c.weight.transforms().len(), 2);
        assert_eq!(c.output.transforms().len(), 3);
    }
}
