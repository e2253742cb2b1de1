use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArtistLabel, ARTIST_SUFFIX_SEPARATOR};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const DEFAULT_IMAGES_PER_PROMPT: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLine {
    pub context: String,
    pub artist: ArtistLabel,
    pub full_text: String,
}

impl PromptLine {
    pub fn new(context: &str, artist: &ArtistLabel) -> Result<Self> {
        if context.trim().is_empty() {
            return Err(Error::MalformedInput("blank prompt context".into()));
        }
        if context.contains('\n') || context.contains('\r') {
            return Err(Error::MalformedInput(format!(
                "prompt context spans several lines: {context:?}"
            )));
        }
        let suffix = format!("{ARTIST_SUFFIX_SEPARATOR}{}", artist.name);
        if context.ends_with(&suffix) {
            return Err(Error::MalformedInput(format!(
                "prompt context already names the artist: {context:?}"
            )));
        }
        Ok(Self {
            context: context.to_owned(),
            artist: artist.clone(),
            full_text: format!("{context}{suffix}"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBatch {
    pub lines: Vec<PromptLine>,
    /// Number of images to request from the generator.
    pub request_count: usize,
}

/// Appends ", by <artist>" to every context, preserving order.
pub fn build_prompts<S: AsRef<str>>(
    contexts: &[S],
    artist: &ArtistLabel,
    images_per_prompt: usize,
) -> Result<PromptBatch> {
    if contexts.is_empty() {
        return Err(Error::MalformedInput("no prompt contexts given".into()));
    }
    if images_per_prompt == 0 {
        return Err(Error::MalformedInput("images_per_prompt must be positive".into()));
    }
    let lines = contexts
        .iter()
        .map(|c| PromptLine::new(c.as_ref(), artist))
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptBatch {
        request_count: lines.len() * images_per_prompt,
        lines,
    })
}

/// Plain-text export: one full prompt per line, UTF-8, LF endings.
pub fn write_prompts(path: impl AsRef<Path>, lines: &[PromptLine]) -> Result<()> {
    let mut text = String::new();
    for line in lines {
        text.push_str(&line.full_text);
        text.push('\n');
    }
    write_atomic(path.as_ref(), text.as_bytes())
}
