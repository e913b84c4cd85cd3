//! Synthetic sequence-classification tasks.
//!
//! Every sequence starts with the reserved pooling token `0`, followed by
//! `L` content tokens, so model inputs have length `L + 1`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::RngState;

pub const CLS: usize = 0;
pub const TOKEN_A: usize = 1;
pub const TOKEN_B: usize = 2;
pub const OPEN: usize = 1;
pub const CLOSE: usize = 2;

const STREAM_GENERATE: u64 = 21;
const STREAM_SPLIT: u64 = 22;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Full,
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub split: SplitTag,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, ex) in self.examples.iter().enumerate() {
            if let Some(&t) = ex.tokens.iter().find(|&&t| t >= self.vocab_size) {
                return Err(Error::Index {
                    what: "token id",
                    index: t,
                    bound: self.vocab_size,
                });
            }
            if ex.label >= self.num_classes {
                return Err(Error::Config(format!(
                    "example {i} label {} >= {} classes",
                    ex.label, self.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn max_len(&self) -> usize {
        self.examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0)
    }
}

/// Label 1 iff token A occurs strictly more often than token B. Ties are
/// never generated and labels alternate, so classes differ by at most one.
pub fn gen_majority_token(n: usize, len: usize, vocab: usize, seed: u64) -> Result<Dataset> {
    if vocab < 3 || len < 2 || n == 0 {
        return Err(Error::Config(format!(
            "majority task needs vocab >= 3, length >= 2, n >= 1 (got {vocab}, {len}, {n})"
        )));
    }
    let mut rng = RngState::new(seed, STREAM_GENERATE);
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let want = i % 2;
        loop {
            let content: Vec<usize> = (0..len).map(|_| 1 + rng.below(vocab - 1)).collect();
            let Some(label) = majority_label(&content) else {
                continue;
            };
            if label == want {
                let mut tokens = Vec::with_capacity(len + 1);
                tokens.push(CLS);
                tokens.extend(content);
                examples.push(Example { tokens, label });
                break;
            }
        }
    }
    Ok(Dataset {
        examples,
        vocab_size: vocab,
        num_classes: 2,
        split: SplitTag::Full,
    })
}

/// `Some(1)` if A outnumbers B, `Some(0)` if B outnumbers A, `None` on a tie.
pub fn majority_label(content: &[usize]) -> Option<usize> {
    let a = content.iter().filter(|&&t| t == TOKEN_A).count();
    let b = content.iter().filter(|&&t| t == TOKEN_B).count();
    match a.cmp(&b) {
        std::cmp::Ordering::Greater => Some(1),
        std::cmp::Ordering::Less => Some(0),
        std::cmp::Ordering::Equal => None,
    }
}

/// Stack check over bracket tokens (other tokens are ignored).
pub fn is_balanced(content: &[usize]) -> bool {
    let mut depth = 0i64;
    for &t in content {
        match t {
            OPEN => depth += 1,
            CLOSE => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            _ => {}
        }
    }
    depth == 0
}

fn random_dyck(len: usize, rng: &mut RngState) -> Vec<usize> {
    let mut opens_left = len / 2;
    let mut depth = 0usize;
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let can_open = opens_left > 0;
        let can_close = depth > 0;
        let open = match (can_open, can_close) {
            (true, true) => rng.below(2) == 0,
            (true, false) => true,
            (false, _) => false,
        };
        if open {
            opens_left -= 1;
            depth += 1;
            out.push(OPEN);
        } else {
            depth -= 1;
            out.push(CLOSE);
        }
    }
    out
}

/// Label 1 for a well-nested bracket string of length `len`; negatives are
/// single-swap corruptions of well-nested strings.
pub fn gen_balanced_brackets(n: usize, len: usize, seed: u64) -> Result<Dataset> {
    if len < 2 || len % 2 != 0 || n == 0 {
        return Err(Error::Config(format!(
            "bracket task needs an even length >= 2 and n >= 1 (got {len}, {n})"
        )));
    }
    let mut rng = RngState::new(seed, STREAM_GENERATE);
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let mut content = random_dyck(len, &mut rng);
        if i % 2 == 0 {
            loop {
                let a = rng.below(len);
                let b = rng.below(len);
                if content[a] == content[b] {
                    continue;
                }
                let mut candidate = content.clone();
                candidate.swap(a, b);
                if !is_balanced(&candidate) {
                    content = candidate;
                    break;
                }
            }
        }
        let label = usize::from(is_balanced(&content));
        let mut tokens = Vec::with_capacity(len + 1);
        tokens.push(CLS);
        tokens.extend(content);
        examples.push(Example { tokens, label });
    }
    Ok(Dataset {
        examples,
        vocab_size: 3,
        num_classes: 2,
        split: SplitTag::Full,
    })
}

/// Deterministic shuffled partition into (train, dev, test).
pub fn split(d: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let n = d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngState::new(seed, STREAM_SPLIT));
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_dev = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let counts = [n_train, n_dev, n - n_train - n_dev];
    for (i, (&c, &f)) in counts.iter().zip(&fractions).enumerate() {
        if f > 0.0 && c == 0 {
            return Err(Error::Config(format!(
                "split {} is empty for {n} examples",
                ["train", "dev", "test"][i]
            )));
        }
    }
    let take = |range: std::ops::Range<usize>, tag| Dataset {
        examples: order[range].iter().map(|&i| d.examples[i].clone()).collect(),
        vocab_size: d.vocab_size,
        num_classes: d.num_classes,
        split: tag,
    };
    Ok((
        take(0..n_train, SplitTag::Train),
        take(n_train..n_train + n_dev, SplitTag::Dev),
        take(n_train + n_dev..n, SplitTag::Test),
    ))
}

/// One record per line: space-separated token ids, a tab, the label.
pub fn write_records(d: &Dataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in &d.examples {
        let toks: Vec<String> = ex.tokens.iter().map(usize::to_string).collect();
        writeln!(out, "{}\t{}", toks.join(" "), ex.label)?;
    }
    out.flush()?;
    Ok(())
}

/// Inverse of [`write_records`]; vocabulary and class count are taken as
/// `max + 1` unless given.
pub fn read_records(
    path: &Path,
    vocab_size: Option<usize>,
    num_classes: Option<usize>,
) -> Result<Dataset> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: i + 1, msg };
        let (toks, label) = line
            .split_once('\t')
            .ok_or_else(|| err("missing tab separator".into()))?;
        let tokens = toks
            .split_whitespace()
            .map(str::parse::<usize>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| err(e.to_string()))?;
        let label = label.trim().parse::<usize>().map_err(|e| err(e.to_string()))?;
        examples.push(Example { tokens, label });
    }
    let max_tok = examples.iter().flat_map(|e| e.tokens.iter()).max().copied();
    let max_label = examples.iter().map(|e| e.label).max();
    let d = Dataset {
        vocab_size: vocab_size.unwrap_or(max_tok.map_or(0, |m| m + 1)),
        num_classes: num_classes.unwrap_or(max_label.map_or(0, |m| m + 1)),
        examples,
        split: SplitTag::Full,
    };
    d.validate()?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn majority_label_definition() {
        assert_eq!(majority_label(&[1, 1, 2, 1, 3]), Some(1));
        assert_eq!(majority_label(&[1, 2, 2]), Some(0));
        assert_eq!(majority_label(&[1, 2, 3]), None);
    }

    #[test]
    fn majority_dataset_properties() {
        let d = gen_majority_token(301, 16, 6, 7).unwrap();
        assert_eq!(d, gen_majority_token(301, 16, 6, 7).unwrap());
        assert_ne!(d, gen_majority_token(301, 16, 6, 8).unwrap());
        d.validate().unwrap();
        let ones = d.examples.iter().filter(|e| e.label == 1).count();
        assert!((ones as i64 - (d.len() - ones) as i64).abs() <= 1);
        for ex in &d.examples {
            assert_eq!(ex.tokens[0], CLS);
            assert_eq!(ex.tokens.len(), 17);
            assert_eq!(majority_label(&ex.tokens[1..]), Some(ex.label));
        }
        assert!(gen_majority_token(10, 16, 2, 0).is_err());
        assert!(gen_majority_token(10, 1, 5, 0).is_err());
    }

    #[test]
    fn bracket_checker() {
        let enc = |s: &str| -> Vec<usize> { s.chars().map(|c| if c == '(' { OPEN } else { CLOSE }).collect() };
        assert!(is_balanced(&enc("(()())")));
        assert!(!is_balanced(&enc("())(")));
        assert!(!is_balanced(&enc("((")));
    }

    #[test]
    fn bracket_dataset_labels_match_stack_check() {
        let d = gen_balanced_brackets(400, 12, 3).unwrap();
        let ones = d.examples.iter().filter(|e| e.label == 1).count();
        assert_eq!(ones, 200);
        for ex in &d.examples {
            assert_eq!(usize::from(is_balanced(&ex.tokens[1..])), ex.label);
            let opens = ex.tokens[1..].iter().filter(|&&t| t == OPEN).count();
            // single swaps preserve the bracket counts
            assert_eq!(opens, 6);
        }
        assert!(gen_balanced_brackets(10, 7, 0).is_err());
    }

    #[test]
    fn split_partitions_the_multiset() {
        let d = gen_majority_token(200, 8, 5, 1).unwrap();
        let (tr, dv, te) = split(&d, [0.5, 0.25, 0.25], 9).unwrap();
        assert_eq!((tr.len(), dv.len(), te.len()), (100, 50, 50));
        let again = split(&d, [0.5, 0.25, 0.25], 9).unwrap();
        assert_eq!(tr, again.0);
        let mut counts: HashMap<&Example, i64> = HashMap::new();
        for e in &d.examples {
            *counts.entry(e).or_default() += 1;
        }
        for e in tr.examples.iter().chain(&dv.examples).chain(&te.examples) {
            *counts.get_mut(e).unwrap() -= 1;
        }
        assert!(counts.values().all(|&c| c == 0));

        let (tr, dv, te) = split(&d, [1.0, 0.0, 0.0], 9).unwrap();
        assert_eq!((tr.len(), dv.len(), te.len()), (200, 0, 0));
        let tiny = gen_majority_token(2, 4, 5, 1).unwrap();
        assert!(split(&tiny, [0.8, 0.1, 0.1], 0).is_err());
        assert!(split(&d, [0.5, 0.5, 0.5], 0).is_err());
    }

    #[test]
    fn records_round_trip() {
        let d = gen_balanced_brackets(20, 6, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        write_records(&d, &path).unwrap();
        let back = read_records(&path, Some(3), Some(2)).unwrap();
        assert_eq!(back.examples, d.examples);
        std::fs::write(&path, "0 1 2\n").unwrap();
        assert!(matches!(
            read_records(&path, None, None),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
