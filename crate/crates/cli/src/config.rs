//! Run configuration: built-in defaults, then a `key = value` file, then
//! `--key value` overrides, in that order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use asymrec::data::{FrequencyBins, Split, SynthConfig};
use asymrec::mhq::MhqConfig;
use asymrec::recmodel::{RecConfig, Variant};
use asymrec::{Error, Result};

/// Every recognised key with its default. Empty paths resolve inside `out_dir`.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("out_dir", "out"),
    // artifact paths
    ("embeddings", ""),
    ("interactions", ""),
    ("codebooks", ""),
    ("codes", ""),
    ("checkpoint", ""),
    ("fuse_a", ""),
    ("fuse_b", ""),
    // synthetic corpus
    ("n_items", "1000"),
    ("dim", "64"),
    ("n_users", "2000"),
    ("clusters", "20"),
    ("seq_len_min", "5"),
    ("seq_len_max", "15"),
    ("stay_prob", "0.8"),
    ("noise", "0.35"),
    ("popularity_skew", "1.0"),
    // quantization
    ("mhq_dim", "512"),
    ("subspaces", "32"),
    ("levels", "2"),
    ("codebook_size", "256"),
    ("lambda_bal", "0.01"),
    ("lambda_reg", "0.01"),
    ("gamma", "0.99"),
    ("mhq_lr", "0.001"),
    ("mhq_epochs", "50"),
    ("mhq_batch", "256"),
    // recommender
    ("variant", "full"),
    ("d_m", "448"),
    ("layers", "2"),
    ("heads", "8"),
    ("max_len", "50"),
    ("dropout", "0.1"),
    ("lr", "0.003"),
    ("momentum", "0.9"),
    ("batch", "256"),
    ("max_epochs", "100"),
    ("patience", "20"),
    ("experts", "3"),
    ("per_position", "true"),
    // evaluation
    ("split", "test"),
    ("bins", "6,15,50"),
    ("negatives", "99"),
    ("binned", "false"),
    ("k0", "50"),
    ("top_k", "10"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = normalize(key);
        match self.values.get_mut(&key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key '{key}'"))),
        }
    }

    /// Applies a `key = value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key = value", origin.display(), n + 1))
            })?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", origin.display(), n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, path)
    }

    /// Parses `--key value` and `--key=value` pairs.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(a) = it.next() {
            let Some(flag) = a.strip_prefix("--") else {
                return Err(Error::Usage(format!("expected --key value, found '{a}'")));
            };
            if let Some((k, v)) = flag.split_once('=') {
                self.set(k, v)?;
            } else {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Usage(format!("missing value for --{flag}")))?;
                self.set(flag, v)?;
            }
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("config key '{key}' has no default"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'")))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out_dir"))
    }

    /// An artifact path: the configured value, or `default_name` inside `out_dir`.
    pub fn path(&self, key: &str, default_name: &str) -> PathBuf {
        match self.raw(key) {
            "" => self.out_dir().join(default_name),
            p => PathBuf::from(p),
        }
    }

    pub fn variant(&self) -> Result<Variant> {
        self.get("variant")
    }

    pub fn split(&self) -> Result<Split> {
        self.get("split")
    }

    pub fn checkpoint_path(&self) -> Result<PathBuf> {
        Ok(self.path("checkpoint", &format!("model-{}.arec", self.variant()?)))
    }

    pub fn bins(&self) -> Result<FrequencyBins> {
        let raw = self.raw("bins");
        let b = raw
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Config(format!("invalid bin boundaries '{raw}'")))?;
        FrequencyBins::new(b)
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        Ok(SynthConfig {
            seed: self.seed()?,
            n_items: self.get("n_items")?,
            dim: self.get("dim")?,
            n_users: self.get("n_users")?,
            cluster_count: self.get("clusters")?,
            seq_len_min: self.get("seq_len_min")?,
            seq_len_max: self.get("seq_len_max")?,
            stay_prob: self.get("stay_prob")?,
            noise: self.get("noise")?,
            popularity_skew: self.get("popularity_skew")?,
        })
    }

    pub fn mhq(&self) -> Result<MhqConfig> {
        let c = MhqConfig {
            dim: self.get("mhq_dim")?,
            subspaces: self.get("subspaces")?,
            levels: self.get("levels")?,
            codebook_size: self.get("codebook_size")?,
            lambda_bal: self.get("lambda_bal")?,
            lambda_reg: self.get("lambda_reg")?,
            gamma: self.get("gamma")?,
            lr: self.get("mhq_lr")?,
            epochs: self.get("mhq_epochs")?,
            batch: self.get("mhq_batch")?,
            seed: self.seed()?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn rec(&self) -> Result<RecConfig> {
        let c = RecConfig {
            d_m: self.get("d_m")?,
            layers: self.get("layers")?,
            heads: self.get("heads")?,
            max_len: self.get("max_len")?,
            dropout: self.get("dropout")?,
            lr: self.get("lr")?,
            momentum: self.get("momentum")?,
            batch: self.get("batch")?,
            max_epochs: self.get("max_epochs")?,
            patience: self.get("patience")?,
            experts: self.get("experts")?,
            per_position: self.get("per_position")?,
            variant: self.variant()?,
            seed: self.seed()?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nn_items = 50\nstay-prob=0.9 # trailing\n", Path::new("c"))
            .unwrap();
        c.apply_overrides(&["--n_items".into(), "70".into(), "--seed=4".into()])
            .unwrap();
        assert_eq!(c.get::<usize>("n_items").unwrap(), 70);
        assert_eq!(c.get::<f64>("stay_prob").unwrap(), 0.9);
        assert_eq!(c.seed().unwrap(), 4);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("nope", "1"), Err(Error::Config(_))));
        c.set("n_items", "many").unwrap();
        assert!(matches!(c.synth(), Err(Error::Config(_))));
        assert!(matches!(
            c.apply_overrides(&["--seed".into()]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn defaults_match_the_documented_setup() {
        let c = RunConfig::default();
        assert_eq!(c.mhq().unwrap(), MhqConfig::default());
        assert_eq!(c.rec().unwrap(), RecConfig::default());
        assert_eq!(c.synth().unwrap(), SynthConfig::default());
        assert_eq!(c.bins().unwrap(), FrequencyBins::default());
    }
}
