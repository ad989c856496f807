//! `section.key = value` configuration files and the merged run settings.
//!
//! Precedence, lowest first: built-in defaults, the config file, then each
//! `--set section.key=value` override in command-line order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use socc_core::fusion::AugmentConfig;
use socc_core::network::ModelConfig;
use socc_core::{Error as CoreError, GridSpec};

use crate::error::{Error, Result, WithPath};
use crate::formats::read_bytes;

/// Ordered key/value pairs with the byte offset of each line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> socc_core::Result<Self> {
        let mut kv = Self::default();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let at = offset;
            offset += line.len();
            let body = line.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                return Err(CoreError::Parse { offset: at, msg: format!("expected key = value, got {body:?}") });
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(CoreError::Parse { offset: at, msg: "empty key".into() });
            }
            kv.entries.insert(k.to_string(), (v.trim().to_string(), at));
        }
        Ok(kv)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| CoreError::Parse { offset: e.valid_up_to(), msg: "not UTF-8".into() })
            .at(path)?;
        Self::parse(text).at(path)
    }

    /// [`KeyValues::read`] for run configurations: syntax errors count as
    /// configuration errors rather than malformed data.
    pub fn read_run_config(path: &Path) -> Result<Self> {
        Self::read(path).map_err(|e| match e {
            Error::File { path, source: CoreError::Parse { offset, msg } } => {
                Error::File { path, source: CoreError::Config(format!("byte {offset}: {msg}")) }
            }
            e => e,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    /// Applies a `key=value` override string.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| Error::config(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v.trim());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn parsed<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.get(key) {
            *slot = v.parse().map_err(|e| Error::config(format!("{key} = {v:?}: {e}")))?;
        }
        Ok(())
    }

    fn list<T: FromStr>(&self, key: &str, slot: &mut Vec<T>) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.get(key) {
            *slot = split_list(v).map(|s| s.parse().map_err(|e| Error::config(format!("{key} = {v:?}: {e}")))).collect::<Result<_>>()?;
        }
        Ok(())
    }

    fn triple<T: FromStr + Copy>(&self, key: &str, slot: &mut [T; 3]) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        let mut v = slot.to_vec();
        self.list(key, &mut v)?;
        *slot = v.try_into().map_err(|v: Vec<T>| Error::config(format!("{key} needs 3 values, got {}", v.len())))?;
        Ok(())
    }
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split([',', ' ']).map(str::trim).filter(|s| !s.is_empty())
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

const MODEL_KEYS: &[&str] = &[
    "model.enc_widths",
    "model.dec_widths",
    "model.seg_widths",
    "model.se_reduction",
    "model.num_classes",
    "model.lambda",
    "model.beta",
    "model.kernel_size",
    "model.ext_channels",
    "model.ext_depths",
    "model.use_se",
    "model.use_cb_loss",
    "model.use_external_features",
    "model.learnable_threshold",
    "model.seg_ignore_free",
];

const RUN_KEYS: &[&str] = &[
    "optim.lr",
    "train.batch_size",
    "train.epochs",
    "train.seed",
    "train.patience",
    "train.eval_split",
    "train.augment",
    "aug.noise",
    "aug.max_shift",
    "aug.mask_ratio",
    "data.root",
    "output.dir",
];

/// Everything a run needs, with defaults for every field.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without a validation IoU improvement before stopping; 0 never stops.
    pub patience: usize,
    /// Frames evaluated after each epoch; falls back to the training frames
    /// when the split is empty.
    pub eval_split: String,
    pub augment: bool,
    pub aug: AugmentConfig,
    pub data_root: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 1e-4,
            batch_size: 10,
            epochs: 50,
            seed: 0,
            patience: 10,
            eval_split: "val".into(),
            augment: true,
            aug: AugmentConfig::default(),
            data_root: PathBuf::from("data"),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with `kv`. Unknown keys are rejected.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        if let Some(k) = kv.keys().find(|k| !MODEL_KEYS.contains(k) && !RUN_KEYS.contains(k)) {
            return Err(Error::config(format!("unknown config key {k:?}")));
        }
        let mut c = Self::default();
        let m = &mut c.model;
        kv.list("model.enc_widths", &mut m.enc_widths)?;
        kv.list("model.dec_widths", &mut m.dec_widths)?;
        kv.list("model.seg_widths", &mut m.seg_widths)?;
        kv.parsed("model.se_reduction", &mut m.se_reduction)?;
        kv.parsed("model.num_classes", &mut m.num_classes)?;
        kv.parsed("model.lambda", &mut m.lambda)?;
        kv.parsed("model.beta", &mut m.beta)?;
        kv.parsed("model.kernel_size", &mut m.kernel_size)?;
        kv.parsed("model.ext_channels", &mut m.ext_channels)?;
        kv.list("model.ext_depths", &mut m.ext_depths)?;
        kv.parsed("model.use_se", &mut m.use_se)?;
        kv.parsed("model.use_cb_loss", &mut m.use_cb_loss)?;
        kv.parsed("model.use_external_features", &mut m.use_external_features)?;
        kv.parsed("model.learnable_threshold", &mut m.learnable_threshold)?;
        kv.parsed("model.seg_ignore_free", &mut m.seg_ignore_free)?;
        kv.parsed("optim.lr", &mut c.lr)?;
        kv.parsed("train.batch_size", &mut c.batch_size)?;
        kv.parsed("train.epochs", &mut c.epochs)?;
        kv.parsed("train.seed", &mut c.seed)?;
        kv.parsed("train.patience", &mut c.patience)?;
        kv.parsed("train.eval_split", &mut c.eval_split)?;
        kv.parsed("train.augment", &mut c.augment)?;
        kv.parsed("aug.noise", &mut c.aug.noise)?;
        kv.triple("aug.max_shift", &mut c.aug.max_shift)?;
        kv.parsed("aug.mask_ratio", &mut c.aug.mask_ratio)?;
        if let Some(v) = kv.get("data.root") {
            c.data_root = v.into();
        }
        if let Some(v) = kv.get("output.dir") {
            c.output_dir = v.into();
        }
        c.validate()?;
        Ok(c)
    }

    /// Reads an optional file, then applies overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut kv = match file {
            Some(p) => KeyValues::read_run_config(p)?,
            None => KeyValues::default(),
        };
        for o in overrides {
            kv.set_pair(o)?;
        }
        Self::from_kv(&kv)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.aug.mask_ratio) || !(self.aug.noise >= 0.0) || self.aug.max_shift.iter().any(|&s| s < 0) {
            return Err(Error::config("augmentation settings out of range"));
        }
        Ok(())
    }

    /// Canonical text form covering every key; parses back to `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        put("model.enc_widths", join(&m.enc_widths));
        put("model.dec_widths", join(&m.dec_widths));
        put("model.seg_widths", join(&m.seg_widths));
        put("model.se_reduction", m.se_reduction.to_string());
        put("model.num_classes", m.num_classes.to_string());
        put("model.lambda", format!("{:?}", m.lambda));
        put("model.beta", format!("{:?}", m.beta));
        put("model.kernel_size", m.kernel_size.to_string());
        put("model.ext_channels", m.ext_channels.to_string());
        put("model.ext_depths", join(&m.ext_depths));
        put("model.use_se", m.use_se.to_string());
        put("model.use_cb_loss", m.use_cb_loss.to_string());
        put("model.use_external_features", m.use_external_features.to_string());
        put("model.learnable_threshold", m.learnable_threshold.to_string());
        put("model.seg_ignore_free", m.seg_ignore_free.to_string());
        put("optim.lr", format!("{:?}", self.lr));
        put("train.batch_size", self.batch_size.to_string());
        put("train.epochs", self.epochs.to_string());
        put("train.seed", self.seed.to_string());
        put("train.patience", self.patience.to_string());
        put("train.eval_split", self.eval_split.clone());
        put("train.augment", self.augment.to_string());
        put("aug.noise", format!("{:?}", self.aug.noise));
        put("aug.max_shift", join(&self.aug.max_shift));
        put("aug.mask_ratio", format!("{:?}", self.aug.mask_ratio));
        put("data.root", self.data_root.display().to_string());
        put("output.dir", self.output_dir.display().to_string());
        s
    }
}

/// Geometry and sensor settings stored as `dataset.cfg` in a dataset root.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub grid: GridSpec,
    /// Raw intensities are divided by this to land in `[0, 1]`.
    pub intensity_max: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { grid: GridSpec::default(), intensity_max: 255.0 }
    }
}

impl DatasetConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let (mut lower, mut upper, mut res) = (d.grid.lower, d.grid.upper, d.grid.resolution);
        let mut intensity_max = d.intensity_max;
        if let Some(k) = kv.keys().find(|k| !["grid.lower", "grid.upper", "grid.resolution", "lidar.intensity_max"].contains(k)) {
            return Err(Error::config(format!("unknown dataset key {k:?}")));
        }
        kv.triple("grid.lower", &mut lower)?;
        kv.triple("grid.upper", &mut upper)?;
        kv.parsed("grid.resolution", &mut res)?;
        kv.parsed("lidar.intensity_max", &mut intensity_max)?;
        if !(intensity_max > 0.0 && intensity_max.is_finite()) {
            return Err(Error::config(format!("intensity maximum {intensity_max} must be positive")));
        }
        Ok(Self { grid: GridSpec::new(lower, upper, res)?, intensity_max })
    }

    pub fn to_text(&self) -> String {
        let f = |v: [f64; 3]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        format!(
            "grid.lower = {}\ngrid.upper = {}\ngrid.resolution = {:?}\nlidar.intensity_max = {:?}\n",
            f(self.grid.lower),
            f(self.grid.upper),
            self.grid.resolution,
            self.intensity_max
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_setup() {
        let c = RunConfig::default();
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.batch_size, 10);
        assert_eq!(c.model.seg_widths.last(), Some(&256));
    }

    #[test]
    fn text_round_trip() {
        let mut kv = KeyValues::default();
        kv.set("model.enc_widths", "8, 16,16");
        kv.set("model.dec_widths", "16,8");
        kv.set("model.lambda", "0.3");
        kv.set("aug.max_shift", "1,2,0");
        let c = RunConfig::from_kv(&kv).unwrap();
        assert_eq!(c.model.enc_widths, vec![8, 16, 16]);
        let back = RunConfig::from_kv(&KeyValues::parse(&c.to_text()).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_win_over_file_values() {
        let mut kv = KeyValues::parse("train.epochs = 3\n# note\noptim.lr=0.01\n").unwrap();
        kv.set_pair("train.epochs=7").unwrap();
        let c = RunConfig::from_kv(&kv).unwrap();
        assert_eq!((c.epochs, c.lr), (7, 0.01));
    }

    #[test]
    fn bad_entries_are_config_errors() {
        let kv = KeyValues::parse("train.epochs = many\n").unwrap();
        assert_eq!(RunConfig::from_kv(&kv).unwrap_err().exit_code(), 2);
        let kv = KeyValues::parse("train.nope = 1\n").unwrap();
        assert_eq!(RunConfig::from_kv(&kv).unwrap_err().exit_code(), 2);
        match KeyValues::parse("a = 1\nbroken line\n") {
            Err(CoreError::Parse { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dataset_config_round_trip() {
        let d = DatasetConfig { grid: GridSpec::new([0.0, -6.4, -1.0], [12.8, 6.4, 5.4], 0.4).unwrap(), intensity_max: 255.0 };
        assert_eq!(DatasetConfig::from_kv(&KeyValues::parse(&d.to_text()).unwrap()).unwrap(), d);
    }
}
