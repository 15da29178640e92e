//! Byte-pair-encoding subword segmentation.
//!
//! Words are split into characters with an end-of-word sentinel attached to
//! the final character; merges are learned greedily by pair frequency and
//! applied in priority order. Rendered subunits carry a `+` continuation
//! marker on every unit except the last, matching the corpus rendering
//! (`Netanyahu` → `Net+ an+ yahu`).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Sentinel appended to the last character of a word before merging.
const WORD_END: &str = "</w>";

/// Continuation marker suffixed to every subunit except the last.
pub const CONTINUATION: char = '+';

/// Ordered list of BPE merges; position in the list is the priority.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
    priority: HashMap<(String, String), usize>,
}

impl MergeTable {
    pub fn new(pairs: Vec<(String, String)>) -> Result<MergeTable> {
        let mut table = MergeTable::default();
        for (l, r) in pairs {
            table.push(l, r)?;
        }
        Ok(table)
    }

    pub fn empty() -> MergeTable {
        MergeTable::default()
    }

    fn push(&mut self, left: String, right: String) -> Result<()> {
        let key = (left.clone(), right.clone());
        if self.priority.contains_key(&key) {
            return Err(Error::InvalidArgument(format!(
                "duplicate merge pair ({left}, {right})"
            )));
        }
        self.priority.insert(key, self.merges.len());
        self.merges.push((left, right));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.merges
    }

    fn rank(&self, left: &str, right: &str) -> Option<usize> {
        self.priority
            .get(&(left.to_string(), right.to_string()))
            .copied()
    }

    /// One merge per line, `left right`, priority by line order.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (l, r) in &self.merges {
            out.push_str(l);
            out.push(' ');
            out.push_str(r);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<MergeTable> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut it = line.split(' ');
            match (it.next(), it.next(), it.next()) {
                (Some(l), Some(r), None) => pairs.push((l.to_string(), r.to_string())),
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "{}: line {}: expected `left right`",
                        path.display(),
                        i + 1
                    )))
                }
            }
        }
        MergeTable::new(pairs)
    }
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    if let Some(last) = symbols.last_mut() {
        last.push_str(WORD_END);
    }
    symbols
}

/// Learns `num_merges` greedy most-frequent-pair merges over the token
/// stream. Ties break toward the lexicographically smallest pair, which
/// makes learning deterministic regardless of iteration order.
pub fn learn_bpe<'a, I>(corpus: I, num_merges: usize) -> MergeTable
where
    I: IntoIterator<Item = &'a str>,
{
    let mut word_freqs: HashMap<String, u64> = HashMap::new();
    for token in corpus {
        if !token.is_empty() {
            *word_freqs.entry(token.to_string()).or_insert(0) += 1;
        }
    }
    let mut words: Vec<(Vec<String>, u64)> = {
        let mut sorted: Vec<_> = word_freqs.into_iter().collect();
        sorted.sort();
        sorted
            .into_iter()
            .map(|(w, f)| (word_symbols(&w), f))
            .collect()
    };

    let mut table = MergeTable::empty();
    for _ in 0..num_merges {
        let mut pair_counts: HashMap<(String, String), u64> = HashMap::new();
        for (symbols, freq) in &words {
            for pair in symbols.windows(2) {
                *pair_counts
                    .entry((pair[0].clone(), pair[1].clone()))
                    .or_insert(0) += freq;
            }
        }
        let best = pair_counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((left, right), _)) = best else { break };
        for (symbols, _) in &mut words {
            merge_pair(symbols, &left, &right);
        }
        table
            .push(left, right)
            .expect("greedy merges are unique: a merged pair never recurs");
    }
    table
}

/// Replaces every non-overlapping occurrence of `(left, right)` left to right.
fn merge_pair(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let merged = format!("{}{}", symbols[i], symbols[i + 1]);
            symbols[i] = merged;
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

/// Segments one word into subunits under `merges`.
///
/// Deterministic; joining the output (dropping one trailing `+` from every
/// unit but the last) reproduces the word exactly.
pub fn apply_bpe(word: &str, merges: &MergeTable) -> Vec<String> {
    if word.is_empty() {
        return Vec::new();
    }
    let mut symbols = word_symbols(word);
    loop {
        let mut best: Option<(usize, usize)> = None; // (rank, position)
        for i in 0..symbols.len().saturating_sub(1) {
            if let Some(rank) = merges.rank(&symbols[i], &symbols[i + 1]) {
                if best.map_or(true, |(r, _)| rank < r) {
                    best = Some((rank, i));
                }
            }
        }
        let Some((_, pos)) = best else { break };
        let (left, right) = (symbols[pos].clone(), symbols[pos + 1].clone());
        merge_pair(&mut symbols, &left, &right);
    }
    render(symbols)
}

fn render(mut symbols: Vec<String>) -> Vec<String> {
    if let Some(last) = symbols.last_mut() {
        if let Some(stripped) = last.strip_suffix(WORD_END) {
            *last = stripped.to_string();
        }
    }
    let n = symbols.len();
    for (i, s) in symbols.iter_mut().enumerate() {
        if i + 1 < n {
            s.push(CONTINUATION);
        }
    }
    symbols
}

/// Segments every word of a sentence, keeping the per-word nesting.
pub fn apply_bpe_sentence(words: &[String], merges: &MergeTable) -> Vec<Vec<String>> {
    words.iter().map(|w| apply_bpe(w, merges)).collect()
}

/// Joins a flat subunit stream back into words: a unit ending in `+`
/// continues into the next unit. An unterminated continuation at the end of
/// the stream is flushed as-is.
pub fn join_subunits(subunits: &[String]) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for unit in subunits {
        match unit.strip_suffix(CONTINUATION) {
            Some(head) => current.push_str(head),
            None => {
                current.push_str(unit);
                words.push(std::mem::take(&mut current));
            }
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

#[cfg(test)]
pub(crate) fn full_word_merges(word: &str) -> Vec<(String, String)> {
    // chain of merges that reassembles `word` into a single unit
    let chars: Vec<char> = word.chars().collect();
    let mut pairs = Vec::new();
    let mut acc = chars[0].to_string();
    for (i, c) in chars.iter().enumerate().skip(1) {
        let mut right = c.to_string();
        if i == chars.len() - 1 {
            right.push_str(WORD_END);
        }
        pairs.push((acc.clone(), right.clone()));
        acc.push(*c);
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Merge chains that split Netanyahu into three units and nothing else.
    fn netanyahu_table() -> MergeTable {
        let pairs = [
            ("N", "e"),
            ("Ne", "t"),
            ("a", "n"),
            ("y", "a"),
            ("ya", "h"),
            ("yah", "u</w>"),
        ]
        .map(|(l, r)| (l.to_string(), r.to_string()));
        MergeTable::new(pairs.to_vec()).unwrap()
    }

    #[test]
    fn learn_single_merge_on_aaab() {
        // pairs in "aaab": (a,a) twice, (a,b</w>) once
        let table = learn_bpe(["aaab"], 1);
        assert_eq!(table.pairs(), &[("a".to_string(), "a".to_string())]);
    }

    #[test]
    fn zero_merges_is_character_segmentation() {
        let table = learn_bpe(["abc"], 0);
        assert!(table.is_empty());
        assert_eq!(apply_bpe("abc", &table), vec!["a+", "b+", "c"]);
    }

    #[test]
    fn single_character_corpus_learns_nothing() {
        let table = learn_bpe(["a", "b", "c", "a"], 10);
        assert!(table.is_empty());
    }

    #[test]
    fn netanyahu_splits_into_three_units() {
        let table = netanyahu_table();
        assert_eq!(apply_bpe("Netanyahu", &table), vec!["Net+", "an+", "yahu"]);
    }

    #[test]
    fn fully_merged_word_stays_whole() {
        let table = MergeTable::new(full_word_merges("Obama")).unwrap();
        assert_eq!(apply_bpe("Obama", &table), vec!["Obama"]);
    }

    #[test]
    fn join_reverses_segmentation() {
        let table = netanyahu_table();
        for word in ["Netanyahu", "Obama", "nan", "a", "x+y"] {
            let units = apply_bpe(word, &table);
            assert_eq!(join_subunits(&units), vec![word.to_string()], "word {word}");
        }
    }

    #[test]
    fn merge_table_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("merges.txt");
        let table = netanyahu_table();
        table.write(&path).unwrap();
        assert_eq!(MergeTable::read(&path).unwrap(), table);
    }

    #[test]
    fn duplicate_pairs_rejected() {
        let pairs = vec![
            ("a".to_string(), "b".to_string()),
            ("a".to_string(), "b".to_string()),
        ];
        assert!(MergeTable::new(pairs).is_err());
    }

    #[test]
    fn tie_breaks_lexicographically() {
        // "xy" and "ab" both appear twice; (a,b</w>) sorts before (x,y</w>)
        let table = learn_bpe(["xy", "ab", "xy", "ab"], 1);
        assert_eq!(table.pairs(), &[("a".to_string(), "b</w>".to_string())]);
    }

    #[test]
    fn learning_is_deterministic() {
        let corpus = ["the", "quick", "brown", "fox", "the", "the", "quack"];
        let a = learn_bpe(corpus, 8);
        let b = learn_bpe(corpus, 8);
        assert_eq!(a, b);
    }
}
