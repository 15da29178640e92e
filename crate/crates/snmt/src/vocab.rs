//! Token↔id vocabularies with a word/tag partition.
//!
//! Ids 0..2 are reserved (PAD, UNK, EOS). Every other entry is either a word
//! or a tag; the same string may appear once in each partition with distinct
//! ids, which is what lets supertags share the target embedding space with
//! words while still being strippable from decoded output.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const EOS: u32 = 2;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "</s>";

/// Fallback entry in the tag partition; unknown supertags map here so that
/// stripping removes them like any tag.
pub const UNK_TAG_TOKEN: &str = "<unk-tag>";

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    entries: Vec<(String, bool)>, // (token, is_tag), indexed by id
    words: HashMap<String, u32>,
    tags: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Vocabulary {
        let mut v = Vocabulary {
            entries: Vec::new(),
            words: HashMap::new(),
            tags: HashMap::new(),
        };
        for reserved in [PAD_TOKEN, UNK_TOKEN, EOS_TOKEN] {
            v.entries.push((reserved.to_string(), false));
            v.words
                .insert(reserved.to_string(), v.entries.len() as u32 - 1);
        }
        v
    }

    pub fn add_word(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.words.get(token) {
            return id;
        }
        let id = self.entries.len() as u32;
        self.entries.push((token.to_string(), false));
        self.words.insert(token.to_string(), id);
        id
    }

    pub fn add_tag(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.tags.get(token) {
            return id;
        }
        let id = self.entries.len() as u32;
        self.entries.push((token.to_string(), true));
        self.tags.insert(token.to_string(), id);
        id
    }

    pub fn encode_word(&self, token: &str) -> u32 {
        self.words.get(token).copied().unwrap_or(UNK)
    }

    /// Unknown tags fall back to the UNK-TAG entry when the vocabulary has a
    /// tag partition, else to UNK.
    pub fn encode_tag(&self, token: &str) -> u32 {
        self.tags
            .get(token)
            .or_else(|| self.tags.get(UNK_TAG_TOKEN))
            .copied()
            .unwrap_or(UNK)
    }

    pub fn decode(&self, id: u32) -> &str {
        &self.entries[id as usize].0
    }

    pub fn is_tag(&self, id: u32) -> bool {
        self.entries[id as usize].1
    }

    /// Whether this exact string is a tag-partition entry.
    pub fn is_tag_token(&self, token: &str) -> bool {
        self.tags.contains_key(token)
    }

    pub fn contains_word(&self, token: &str) -> bool {
        self.words.contains_key(token)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tag_count(&self) -> usize {
        self.tags.len()
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn has_tags(&self) -> bool {
        !self.tags.is_empty()
    }

    pub fn unk_tag_id(&self) -> Option<u32> {
        self.tags.get(UNK_TAG_TOKEN).copied()
    }

    /// SHA-256 over the full entry list; used as the checkpoint's vocabulary
    /// reference so ensembles can verify their members agree.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update((self.entries.len() as u64).to_le_bytes());
        for (token, is_tag) in &self.entries {
            hasher.update([u8::from(*is_tag)]);
            hasher.update((token.len() as u64).to_le_bytes());
            hasher.update(token.as_bytes());
        }
        hasher.finalize().into()
    }

    /// Writes the vocabulary as two files: `path` with one token per line
    /// (line number = id after the 3 reserved ids) and `tag_path` listing the
    /// tag-partition tokens in id order.
    pub fn write(&self, path: &Path, tag_path: &Path) -> Result<()> {
        let mut body = String::new();
        let mut tags = String::new();
        for (token, is_tag) in self.entries.iter().skip(3) {
            body.push_str(token);
            body.push('\n');
            if *is_tag {
                tags.push_str(token);
                tags.push('\n');
            }
        }
        fs::write(path, body).map_err(|e| Error::io(path, e))?;
        fs::write(tag_path, tags).map_err(|e| Error::io(tag_path, e))
    }

    /// Reads a vocabulary written by [`Vocabulary::write`]. Tag entries are
    /// matched from the end of the file, which reconstructs the partition
    /// exactly because the builders append tag entries after word entries.
    pub fn read(path: &Path, tag_path: &Path) -> Result<Vocabulary> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tag_body = fs::read_to_string(tag_path).map_err(|e| Error::io(tag_path, e))?;
        let tokens: Vec<&str> = body.lines().collect();
        let mut is_tag = vec![false; tokens.len()];
        let mut remaining: HashMap<&str, usize> = HashMap::new();
        for t in tag_body.lines() {
            *remaining.entry(t).or_insert(0) += 1;
        }
        let mut unmatched: usize = remaining.values().sum();
        for i in (0..tokens.len()).rev() {
            if unmatched == 0 {
                break;
            }
            if let Some(n) = remaining.get_mut(tokens[i]) {
                if *n > 0 {
                    *n -= 1;
                    unmatched -= 1;
                    is_tag[i] = true;
                }
            }
        }
        if unmatched > 0 {
            return Err(Error::Misaligned(format!(
                "{}: {} tag tokens not present in the vocabulary",
                tag_path.display(),
                unmatched
            )));
        }
        let mut vocab = Vocabulary::new();
        for (token, tag) in tokens.iter().zip(&is_tag) {
            if *tag {
                vocab.add_tag(token);
            } else {
                vocab.add_word(token);
            }
        }
        if vocab.len() != tokens.len() + 3 {
            return Err(Error::Misaligned(format!(
                "{}: duplicate tokens within a partition",
                path.display()
            )));
        }
        Ok(vocab)
    }
}

/// Counts token frequencies over sentence streams.
pub fn count_tokens<'a, I>(sentences: I) -> HashMap<String, u64>
where
    I: IntoIterator<Item = &'a Vec<String>>,
{
    let mut counts = HashMap::new();
    for sentence in sentences {
        for token in sentence {
            *counts.entry(token.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Most frequent tokens, capped; ties break toward the smaller string.
pub fn top_tokens(counts: &HashMap<String, u64>, cap: usize) -> Vec<String> {
    let mut items: Vec<(&String, &u64)> = counts.iter().collect();
    items.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
    items
        .into_iter()
        .take(cap)
        .map(|(t, _)| t.clone())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VocabMode {
    Plain,
    Interleaved,
}

#[derive(Clone, Copy, Debug)]
pub struct VocabCaps {
    pub words: usize,
    pub tags: usize,
}

impl Default for VocabCaps {
    fn default() -> Self {
        // paper-scale caps; desk runs override from config
        VocabCaps {
            words: 85_000,
            tags: 500,
        }
    }
}

/// Builds the source and target vocabularies from BPE-segmented corpora.
///
/// In interleaved mode the target vocabulary also receives the tag types
/// (capped separately) plus the UNK-TAG fallback, giving words and supertags
/// a shared embedding space.
pub fn build_vocabularies(
    src_sentences: &[Vec<String>],
    tgt_sentences: &[Vec<String>],
    tgt_tags: &[Vec<String>],
    mode: VocabMode,
    caps: VocabCaps,
) -> (Vocabulary, Vocabulary) {
    let mut src = Vocabulary::new();
    for token in top_tokens(&count_tokens(src_sentences), caps.words) {
        src.add_word(&token);
    }
    let mut tgt = Vocabulary::new();
    for token in top_tokens(&count_tokens(tgt_sentences), caps.words) {
        tgt.add_word(&token);
    }
    if mode == VocabMode::Interleaved {
        tgt.add_tag(UNK_TAG_TOKEN);
        for tag in top_tokens(&count_tokens(tgt_tags), caps.tags) {
            tgt.add_tag(&tag);
        }
    }
    (src, tgt)
}

/// Builds the standalone tag vocabulary used by the multitask tag decoder.
pub fn build_tag_vocabulary(tag_sentences: &[Vec<String>], cap: usize) -> Vocabulary {
    let mut vocab = Vocabulary::new();
    vocab.add_tag(UNK_TAG_TOKEN);
    for tag in top_tokens(&count_tokens(tag_sentences), cap) {
        vocab.add_tag(&tag);
    }
    vocab
}

/// Builds a vocabulary for one source-side feature stream (IOB markers,
/// replicated supertags, dependency labels). Entries live in the word
/// partition: "tag-ness" only matters for the target side.
pub fn build_feature_vocabulary(streams: &[Vec<String>], cap: usize) -> Vocabulary {
    let mut vocab = Vocabulary::new();
    for token in top_tokens(&count_tokens(streams), cap) {
        vocab.add_word(&token);
    }
    vocab
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentences(rows: &[&[&str]]) -> Vec<Vec<String>> {
        rows.iter()
            .map(|r| r.iter().map(|s| s.to_string()).collect())
            .collect()
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::new();
        assert_eq!(v.encode_word(PAD_TOKEN), PAD);
        assert_eq!(v.encode_word(UNK_TOKEN), UNK);
        assert_eq!(v.encode_word(EOS_TOKEN), EOS);
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn encode_decode_identity_and_unk() {
        let mut v = Vocabulary::new();
        let id = v.add_word("cat");
        assert_eq!(v.encode_word("cat"), id);
        assert_eq!(v.decode(id), "cat");
        assert_eq!(v.encode_word("dog"), UNK);
    }

    #[test]
    fn word_and_tag_collision_gets_two_ids() {
        let mut v = Vocabulary::new();
        let word_id = v.add_word("NP");
        let tag_id = v.add_tag("NP");
        assert_ne!(word_id, tag_id);
        assert!(!v.is_tag(word_id));
        assert!(v.is_tag(tag_id));
        assert_eq!(v.encode_word("NP"), word_id);
        assert_eq!(v.encode_tag("NP"), tag_id);
        // bijection within each partition
        assert_eq!(v.decode(word_id), "NP");
        assert_eq!(v.decode(tag_id), "NP");
    }

    #[test]
    fn small_corpus_below_cap_keeps_everything() {
        let src = sentences(&[&["a", "b", "c"], &["d", "e", "a"]]);
        let (vocab, _) = build_vocabularies(
            &src,
            &src,
            &[],
            VocabMode::Plain,
            VocabCaps {
                words: 10,
                tags: 10,
            },
        );
        assert_eq!(vocab.len(), 5 + 3);
    }

    #[test]
    fn cap_truncates_by_frequency_then_token() {
        let src = sentences(&[&["b", "b", "a", "a", "z", "q"]]);
        let counts = count_tokens(&src);
        let top = top_tokens(&counts, 3);
        // a and b tied at 2 (a first), then q/z tied at 1 (q first)
        assert_eq!(top, vec!["a", "b", "q"]);
    }

    #[test]
    fn interleaved_mode_adds_tag_partition() {
        let tgt = sentences(&[&["Obama", "receives"]]);
        let tags = sentences(&[&["NP", "VP"]]);
        let (_, vocab) = build_vocabularies(
            &tgt,
            &tgt,
            &tags,
            VocabMode::Interleaved,
            VocabCaps {
                words: 100,
                tags: 100,
            },
        );
        assert!(vocab.has_tags());
        assert_eq!(vocab.tag_count(), 3); // NP, VP, unk-tag
        assert!(vocab.is_tag(vocab.encode_tag("NP")));
        assert_eq!(vocab.encode_tag("BOGUS"), vocab.unk_tag_id().unwrap());
    }

    #[test]
    fn file_round_trip_preserves_partition() {
        let mut v = Vocabulary::new();
        v.add_word("NP"); // collides with a tag below
        v.add_word("cat");
        v.add_tag(UNK_TAG_TOKEN);
        v.add_tag("NP");
        v.add_tag("(S[dcl]\\NP)/NP");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let t = dir.path().join("vocab.tags.txt");
        v.write(&p, &t).unwrap();
        let loaded = Vocabulary::read(&p, &t).unwrap();
        assert_eq!(loaded, v);
        assert_eq!(loaded.content_hash(), v.content_hash());
    }

    #[test]
    fn content_hash_distinguishes_partitions() {
        let mut a = Vocabulary::new();
        a.add_word("NP");
        let mut b = Vocabulary::new();
        b.add_tag("NP");
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
