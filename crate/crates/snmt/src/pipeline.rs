//! Corpus transforms: IOB subword tags, target-side supertag interleaving
//! and stripping, source feature replication, length filtering, and the
//! plain-text corpus file formats.

use std::fs;
use std::path::Path;

use crate::bpe::{self, MergeTable};
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

/// One parallel sentence with its annotations, word-aligned on both sides.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSentencePair {
    pub src_words: Vec<String>,
    /// Named word-aligned annotation streams (supertags, dependency labels).
    pub src_annotations: Vec<(String, Vec<String>)>,
    pub tgt_words: Vec<String>,
    pub tgt_supertags: Option<Vec<String>>,
}

impl AnnotatedSentencePair {
    pub fn plain(src_words: Vec<String>, tgt_words: Vec<String>) -> Self {
        AnnotatedSentencePair {
            src_words,
            src_annotations: Vec::new(),
            tgt_words,
            tgt_supertags: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, stream) in &self.src_annotations {
            if stream.len() != self.src_words.len() {
                return Err(Error::Misaligned(format!(
                    "source annotation `{name}` has {} tokens for {} words",
                    stream.len(),
                    self.src_words.len()
                )));
            }
        }
        if let Some(tags) = &self.tgt_supertags {
            if tags.len() != self.tgt_words.len() {
                return Err(Error::Misaligned(format!(
                    "target has {} supertags for {} words",
                    tags.len(),
                    self.tgt_words.len()
                )));
            }
            if tags
                .iter()
                .any(|t| t.is_empty() || t.chars().any(char::is_whitespace))
            {
                return Err(Error::Misaligned(
                    "supertags must be non-empty and whitespace-free".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn annotation(&self, name: &str) -> Option<&[String]> {
        self.src_annotations
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.as_slice())
    }
}

/// Target token stream with supertags interleaved before each word's
/// subunits. Pre-BPE the stream has exactly `2 * word_count` tokens; after
/// BPE it has `subunit_count + word_count`.
#[derive(Clone, Debug, PartialEq)]
pub struct InterleavedTarget {
    pub tokens: Vec<String>,
    pub word_count: usize,
}

/// IOB markers for a subword split: `O` for whole words, `B I.. E` inside
/// multi-unit words.
pub fn iob_tags(subunits_per_word: &[Vec<String>]) -> Vec<String> {
    let mut out = Vec::new();
    for units in subunits_per_word {
        match units.len() {
            0 => {}
            1 => out.push("O".to_string()),
            k => {
                out.push("B".to_string());
                for _ in 0..k - 2 {
                    out.push("I".to_string());
                }
                out.push("E".to_string());
            }
        }
    }
    out
}

/// Emits each word's supertag once, followed by the word's BPE subunits.
pub fn interleave_target(
    tgt_words: &[String],
    tgt_supertags: &[String],
    merges: &MergeTable,
) -> Result<InterleavedTarget> {
    if tgt_words.len() != tgt_supertags.len() {
        return Err(Error::Misaligned(format!(
            "{} target words but {} supertags",
            tgt_words.len(),
            tgt_supertags.len()
        )));
    }
    let mut tokens = Vec::new();
    for (word, tag) in tgt_words.iter().zip(tgt_supertags) {
        tokens.push(tag.clone());
        tokens.extend(bpe::apply_bpe(word, merges));
    }
    Ok(InterleavedTarget {
        tokens,
        word_count: tgt_words.len(),
    })
}

/// Removes every tag-partition token, preserving order. Malformed tag
/// placement (runs of tags, missing tags) is deliberately tolerated: the
/// model may emit ungrammatical tag sequences and translation extraction
/// must never fail.
pub fn strip_tags(tokens: &[String], vocab: &Vocabulary) -> Vec<String> {
    tokens
        .iter()
        .filter(|t| !vocab.is_tag_token(t))
        .cloned()
        .collect()
}

/// Id-level strip; exact even when a string exists in both partitions.
pub fn strip_tag_ids(ids: &[u32], vocab: &Vocabulary) -> Vec<u32> {
    ids.iter().copied().filter(|&i| !vocab.is_tag(i)).collect()
}

/// Copies each word-level feature value onto every BPE subunit of its word.
pub fn replicate_source_features(
    features_per_word: &[String],
    subunits_per_word: &[Vec<String>],
) -> Result<Vec<String>> {
    if features_per_word.len() != subunits_per_word.len() {
        return Err(Error::Misaligned(format!(
            "{} feature values for {} words",
            features_per_word.len(),
            subunits_per_word.len()
        )));
    }
    let mut out = Vec::new();
    for (feature, units) in features_per_word.iter().zip(subunits_per_word) {
        for _ in 0..units.len() {
            out.push(feature.clone());
        }
    }
    Ok(out)
}

/// A sentence pair in its model-facing form: flat BPE source with aligned
/// feature rows, and the mode's target stream(s).
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub src_subunits: Vec<String>,
    /// Per-feature token streams aligned to `src_subunits`; first is "word".
    pub src_features: Vec<(String, Vec<String>)>,
    /// Baseline: BPE word stream. Interleaved: tag+subunit stream.
    /// Multitask: BPE word stream (tags carried separately below).
    pub tgt_tokens: Vec<String>,
    /// Word-level supertag stream for the multitask tag decoder.
    pub tgt_tags: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FilterReport {
    pub kept: usize,
    pub dropped: usize,
}

/// Keeps pairs whose source stream is at most `src_max` tokens and whose
/// target stream(s) are at most `tgt_max`; the bound is inclusive. Lengths
/// are measured on the model-facing sequences, so interleaved targets are
/// checked against the interleaved length.
pub fn filter_corpus(
    pairs: Vec<PreparedPair>,
    src_max: usize,
    tgt_max: usize,
) -> (Vec<PreparedPair>, FilterReport) {
    let before = pairs.len();
    let kept: Vec<PreparedPair> = pairs
        .into_iter()
        .filter(|p| {
            p.src_subunits.len() <= src_max
                && p.tgt_tokens.len() <= tgt_max
                && p.tgt_tags.len() <= tgt_max
        })
        .collect();
    let report = FilterReport {
        kept: kept.len(),
        dropped: before - kept.len(),
    };
    (kept, report)
}

// ── corpus files ────────────────────────────────────────────────────

/// Reads a UTF-8 text file as whitespace-tokenized sentences, one per line.
pub fn read_token_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

pub fn write_token_lines(path: &Path, sentences: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&s.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_id_lines(path: &Path) -> Result<Vec<Vec<u32>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut ids = Vec::new();
        for tok in line.split_whitespace() {
            ids.push(tok.parse::<u32>().map_err(|_| {
                Error::Misaligned(format!(
                    "{}: line {}: `{tok}` is not an id",
                    path.display(),
                    i + 1
                ))
            })?);
        }
        out.push(ids);
    }
    Ok(out)
}

pub fn write_id_lines(path: &Path, sentences: &[Vec<u32>]) -> Result<()> {
    let mut out = String::new();
    for s in sentences {
        let strs: Vec<String> = s.iter().map(u32::to_string).collect();
        out.push_str(&strs.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A parallel corpus with annotations, after alignment checks.
#[derive(Debug, Default)]
pub struct LoadedCorpus {
    pub pairs: Vec<AnnotatedSentencePair>,
    /// Pairs dropped for per-sentence token misalignment or empty sides,
    /// mirroring the elimination of unparseable sentences upstream.
    pub dropped: usize,
}

/// Loads a parallel corpus plus optional annotation files.
///
/// A line-count mismatch between files is a hard error naming the files and
/// counts; a per-sentence token misalignment drops that pair with a warning.
pub fn load_corpus(
    src_path: &Path,
    tgt_path: &Path,
    tgt_tag_path: Option<&Path>,
    src_annotation_paths: &[(String, std::path::PathBuf)],
) -> Result<LoadedCorpus> {
    let src = read_token_lines(src_path)?;
    let tgt = read_token_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::Misaligned(format!(
            "{} has {} lines but {} has {}",
            src_path.display(),
            src.len(),
            tgt_path.display(),
            tgt.len()
        )));
    }
    let tags = match tgt_tag_path {
        Some(p) => {
            let t = read_token_lines(p)?;
            if t.len() != src.len() {
                return Err(Error::Misaligned(format!(
                    "{} has {} lines but the corpus has {}",
                    p.display(),
                    t.len(),
                    src.len()
                )));
            }
            Some(t)
        }
        None => None,
    };
    let mut annotations = Vec::new();
    for (name, path) in src_annotation_paths {
        let a = read_token_lines(path)?;
        if a.len() != src.len() {
            return Err(Error::Misaligned(format!(
                "{} has {} lines but the corpus has {}",
                path.display(),
                a.len(),
                src.len()
            )));
        }
        annotations.push((name.clone(), a));
    }

    let mut corpus = LoadedCorpus::default();
    for (i, (src_words, tgt_words)) in src.into_iter().zip(tgt).enumerate() {
        let pair = AnnotatedSentencePair {
            src_words,
            src_annotations: annotations
                .iter()
                .map(|(name, rows)| (name.clone(), rows[i].clone()))
                .collect(),
            tgt_words,
            tgt_supertags: tags.as_ref().map(|t| t[i].clone()),
        };
        if pair.src_words.is_empty() || pair.tgt_words.is_empty() {
            log::warn!("dropping empty sentence pair at line {}", i + 1);
            corpus.dropped += 1;
            continue;
        }
        if let Err(e) = pair.validate() {
            log::warn!("dropping misaligned pair at line {}: {e}", i + 1);
            corpus.dropped += 1;
            continue;
        }
        corpus.pairs.push(pair);
    }
    Ok(corpus)
}
