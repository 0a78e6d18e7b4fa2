use crate::error::{CliError, CliResult};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use volfuse_core::datapipe::{Channels, HuWindow, PhantomSpec};
use volfuse_core::protocol::Tail;
use volfuse_core::vfn::{TrainSchedule, VfnConfig};

fn default_n_train() -> usize {
    60
}

fn default_n_test() -> usize {
    20
}

fn default_base() -> usize {
    8
}

fn default_k() -> usize {
    4
}

fn yes() -> bool {
    true
}

/// One experiment. Relative paths are taken from the config file's
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: PathBuf,
    pub out: PathBuf,
    #[serde(default)]
    pub phantom: PhantomSpec,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_base")]
    pub base_channels: usize,
    /// `false` trains on the three score channels alone.
    #[serde(default = "yes")]
    pub use_image_channel: bool,
    #[serde(default)]
    pub train: TrainSchedule,
    #[serde(default = "yes")]
    pub augment: bool,
    #[serde(default)]
    pub hu_window: HuWindow,
    #[serde(default = "default_k")]
    pub cca_k: usize,
    #[serde(default)]
    pub tail: Tail,
}

impl RunConfig {
    pub fn from_json(text: &str, base: &Path) -> CliResult<Self> {
        let mut c: RunConfig = serde_json::from_str(text).map_err(|e| CliError::config(format!("bad run config: {e}")))?;
        c.corpus = absolute(base, &c.corpus);
        c.out = absolute(base, &c.out);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, &absolute(&std::env::current_dir().unwrap_or_default(), &base))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.phantom.validate()?;
        self.hu_window.validate()?;
        self.train.validate()?;
        self.vfn_config().validate()?;
        if self.n_train == 0 || self.n_test == 0 {
            return Err(CliError::config("n_train and n_test must be positive"));
        }
        Ok(())
    }

    pub fn channels(&self) -> Channels {
        Channels { image: self.use_image_channel }
    }

    pub fn vfn_config(&self) -> VfnConfig {
        VfnConfig { in_channels: self.channels().count(), base_channels: self.base_channels }
    }

    /// Seed of the weight initialization.
    pub fn init_seed(&self) -> u64 {
        self.seed
    }

    /// Seed of the patch sampler.
    pub fn sample_seed(&self) -> u64 {
        self.seed ^ 0x5a5a_5a5a_5a5a_5a5a
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.out.join("model.ckpt")
    }
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_resolves_paths() {
        let c = RunConfig::from_json(r#"{"seed": 3, "corpus": "data", "out": "/abs/out"}"#, Path::new("/cfg")).unwrap();
        assert_eq!(c.corpus, PathBuf::from("/cfg/data"));
        assert_eq!(c.out, PathBuf::from("/abs/out"));
        assert_eq!((c.n_train, c.n_test, c.base_channels, c.cca_k), (60, 20, 8, 4));
        assert_eq!(c.vfn_config().in_channels, 4);
    }

    #[test]
    fn schema_violations_are_config_errors() {
        for bad in [
            r#"{"corpus": "d", "out": "o"}"#,
            r#"{"seed": 1, "corpus": "d", "out": "o", "extra": 1}"#,
            r#"{"seed": 1, "corpus": "d", "out": "o", "train": {"iters": 3}}"#,
            r#"{"seed": 1, "corpus": "d", "out": "o", "base_channels": 0}"#,
        ] {
            assert_eq!(RunConfig::from_json(bad, Path::new("/")).unwrap_err().code, 2, "{bad}");
        }
    }

    #[test]
    fn ablation_flag_drops_the_image_channel() {
        let c = RunConfig::from_json(r#"{"seed": 1, "corpus": "d", "out": "o", "use_image_channel": false}"#, Path::new("/")).unwrap();
        assert_eq!(c.vfn_config().in_channels, 3);
    }
}
