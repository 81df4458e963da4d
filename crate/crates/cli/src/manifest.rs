//! Per-command run manifests: config, seed, version and the SHA-256 of every
//! input and output file. No timestamps, so reruns produce identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use asymrec::recmodel::sha256;
use asymrec::{Error, Result};

use crate::config::RunConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hex(&sha256(&bytes)))
}

fn display_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

#[derive(Debug, Default)]
pub struct Manifest {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn input(&mut self, p: impl Into<PathBuf>) {
        self.inputs.push(p.into());
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) {
        self.outputs.push(p.into());
    }

    pub fn render(&self, command: &str, cfg: &RunConfig) -> Result<String> {
        let mut s = String::new();
        let _ = writeln!(s, "command\t{command}");
        let _ = writeln!(s, "version\t{VERSION}");
        let _ = writeln!(s, "seed\t{}", cfg.seed()?);
        for (k, v) in cfg.entries() {
            let _ = writeln!(s, "config\t{k}\t{v}");
        }
        for p in &self.inputs {
            let _ = writeln!(s, "input\t{}\t{}", display_name(p), file_digest(p)?);
        }
        for p in &self.outputs {
            let _ = writeln!(s, "output\t{}\t{}", display_name(p), file_digest(p)?);
        }
        Ok(s)
    }

    /// Writes `manifest-<command>` into the output directory.
    pub fn write(&self, command: &str, cfg: &RunConfig) -> Result<PathBuf> {
        let path = cfg.out_dir().join(format!("manifest-{command}"));
        let text = self.render(command, cfg)?;
        std::fs::write(&path, text).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }
}

/// `(name, sha256)` pairs of the outputs recorded in a manifest file.
pub fn output_digests(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| {
            let mut f = l.split('\t');
            match (f.next(), f.next(), f.next()) {
                (Some("output"), Some(n), Some(h)) => Some((n.to_string(), h.to_string())),
                _ => None,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_digest_of_empty_input() {
        assert_eq!(
            hex(&sha256(b"")),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn parses_output_lines() {
        let t = "command\tx\noutput\ta.bin\tabc\ninput\tb\tdef\n";
        assert_eq!(output_digests(t), vec![("a.bin".to_string(), "abc".to_string())]);
    }
}
