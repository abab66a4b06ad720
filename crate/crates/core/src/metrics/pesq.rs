//! Adapter around an external PESQ executable.
//!
//! The tool is invoked as `<bin> <ref.wav> <deg.wav> <mode>` where `mode` is
//! `wb` or `nb`; the last floating-point number on its standard output is taken
//! as the score. This matches thin wrappers around common PESQ libraries, e.g.
//! a script printing `pesq(16000, ref, deg, "wb")`.

use std::path::{Path, PathBuf};
use std::process::Command;

use crate::error::{Error, Result};

/// Environment variable naming the PESQ executable when no path is given.
pub const PESQ_BIN_ENV: &str = "EMOAVSE_PESQ_BIN";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PesqMode {
    #[default]
    Wideband,
    Narrowband,
}

impl PesqMode {
    pub fn as_arg(self) -> &'static str {
        match self {
            PesqMode::Wideband => "wb",
            PesqMode::Narrowband => "nb",
        }
    }
}

/// Resolves the tool path: explicit flag first, then the environment.
pub fn resolve_pesq_bin(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(PESQ_BIN_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
}

/// Extracts the score from tool output.
pub fn parse_pesq_output(stdout: &str) -> Result<f64> {
    let value = stdout
        .split(|c: char| c.is_whitespace() || c == ',' || c == ';' || c == '=' || c == ':')
        .filter_map(|tok| tok.parse::<f64>().ok()).rfind(|v| v.is_finite());
    match value {
        Some(v) if (-0.5..=4.5).contains(&v) => Ok(v),
        Some(v) => Err(Error::External {
            tool: "pesq".into(),
            reason: format!("score {v} outside [-0.5, 4.5]; raw output: {stdout:?}"),
        }),
        None => Err(Error::External {
            tool: "pesq".into(),
            reason: format!("no score in output: {stdout:?}"),
        }),
    }
}

/// Scores a degraded file against a reference. Returns `Ok(None)` when no tool
/// is configured or it cannot be started, so evaluation can continue.
pub fn pesq_adapter(bin: Option<&Path>, reference: &Path, degraded: &Path, mode: PesqMode) -> Result<Option<f64>> {
    let Some(bin) = resolve_pesq_bin(bin) else {
        return Ok(None);
    };
    let output = match Command::new(&bin).arg(reference).arg(degraded).arg(mode.as_arg()).output() {
        Ok(o) => o,
        Err(e) => {
            eprintln!("warning: pesq unavailable ({}: {e})", bin.display());
            return Ok(None);
        }
    };
    let stdout = String::from_utf8_lossy(&output.stdout);
    if !output.status.success() {
        return Err(Error::External {
            tool: bin.display().to_string(),
            reason: format!(
                "exit status {}; stdout: {stdout:?}; stderr: {:?}",
                output.status,
                String::from_utf8_lossy(&output.stderr)
            ),
        });
    }
    parse_pesq_output(&stdout).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_last_number() {
        assert_eq!(parse_pesq_output("PESQ (wb): 3.25\n").unwrap(), 3.25);
        assert_eq!(parse_pesq_output("1.0 2.5").unwrap(), 2.5);
        assert!(parse_pesq_output("error: bad file").is_err());
        assert!(parse_pesq_output("7.3").is_err());
    }

    #[test]
    fn missing_tool_is_absent() {
        let missing = Path::new("/nonexistent/pesq-tool");
        let r = pesq_adapter(Some(missing), Path::new("a.wav"), Path::new("b.wav"), PesqMode::Wideband).unwrap();
        assert_eq!(r, None);
    }
}
