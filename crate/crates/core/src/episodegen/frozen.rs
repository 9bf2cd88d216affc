//! Frozen episode files.
//!
//! Line-delimited canonical JSON. Line 1 is a header
//! `{"format_version":1,"generator_params":{...}}`; every following line is
//! one `{"config":..,"labels":..,"steps":..}` episode record.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Episode;
use crate::canonical;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EpisodeFileError {
    #[error("episode file {0} does not exist")]
    Missing(PathBuf),
    #[error("malformed record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("unsupported format_version {found} (this build reads {FORMAT_VERSION})")]
    VersionMismatch { found: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct GeneratorParams {
    episode_count: usize,
    regimes: Vec<String>,
    seeds: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u64,
    generator_params: GeneratorParams,
}

/// Serialize episodes to the frozen format.
pub fn write_episodes<W: Write>(episodes: &[Episode], mut out: W) -> Result<(), EpisodeFileError> {
    let mut regimes: Vec<String> = episodes
        .iter()
        .map(|e| e.config.regime.as_str().to_string())
        .collect();
    regimes.sort();
    regimes.dedup();
    let header = Header {
        format_version: u64::from(FORMAT_VERSION),
        generator_params: GeneratorParams {
            episode_count: episodes.len(),
            regimes,
            seeds: episodes.iter().map(|e| e.config.seed).collect(),
        },
    };
    writeln!(out, "{}", canonical::to_string(&header)?)?;
    for ep in episodes {
        writeln!(out, "{}", canonical::to_string(ep)?)?;
    }
    Ok(())
}

pub fn freeze_episodes(episodes: &[Episode], path: &Path) -> Result<(), EpisodeFileError> {
    let mut buf = Vec::new();
    write_episodes(episodes, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_episodes(path: &Path) -> Result<Vec<Episode>, EpisodeFileError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(EpisodeFileError::Missing(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    parse_episodes(&text)
}

fn malformed(line: usize, reason: impl ToString) -> EpisodeFileError {
    EpisodeFileError::Malformed {
        line,
        reason: reason.to_string(),
    }
}

pub(crate) fn parse_episodes(text: &str) -> Result<Vec<Episode>, EpisodeFileError> {
    if !text.is_empty() && !text.ends_with('\n') {
        let last = text.lines().count();
        return Err(malformed(
            last,
            "record is not newline-terminated (truncated file?)",
        ));
    }
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header_line) = lines.next().ok_or_else(|| malformed(1, "missing header"))?;

    let raw: serde_json::Value = serde_json::from_str(header_line).map_err(|e| malformed(1, e))?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| malformed(1, "header lacks format_version"))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(EpisodeFileError::VersionMismatch { found: version });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| malformed(1, e))?;

    let mut episodes = Vec::with_capacity(header.generator_params.episode_count);
    for (line_no, line) in lines {
        let ep: Episode = serde_json::from_str(line).map_err(|e| malformed(line_no, e))?;
        episodes.push(ep);
    }
    if episodes.len() != header.generator_params.episode_count {
        return Err(malformed(
            episodes.len() + 1,
            format!(
                "header declares {} episodes, file holds {}",
                header.generator_params.episode_count,
                episodes.len()
            ),
        ));
    }
    Ok(episodes)
}
