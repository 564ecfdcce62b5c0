//! Corpus ingestion (pre-tokenized parallel text, optional Pharaoh
//! alignments) and synthetic task generation for desk-scale experiments.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evaluation::parse_pharaoh_line;
use crate::training::TrainingExample;
use crate::vocab::Vocabulary;

/// Whitespace-tokenized lines of a text file.
pub fn read_token_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(|t| t.to_string()).collect())
        .collect())
}

/// Assemble training examples from line-aligned files. Pairs longer than
/// `max_len` on either side are dropped; the second return value counts them.
pub fn read_parallel(
    src_path: &Path,
    tgt_path: &Path,
    align_path: Option<&Path>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    max_len: usize,
) -> Result<(Vec<TrainingExample>, usize)> {
    let src = read_token_lines(src_path)?;
    let tgt = read_token_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::data(format!(
            "parallel files disagree: {} has {} lines, {} has {}",
            src_path.display(),
            src.len(),
            tgt_path.display(),
            tgt.len()
        )));
    }
    let aligns = match align_path {
        Some(p) => {
            let lines = fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?;
            let parsed: Vec<Vec<(usize, usize)>> = lines
                .lines()
                .enumerate()
                .map(|(no, l)| parse_pharaoh_line(l, no + 1))
                .collect::<Result<_>>()?;
            if parsed.len() != src.len() {
                return Err(Error::data(format!(
                    "alignment file {} has {} lines, corpus has {}",
                    p.display(),
                    parsed.len(),
                    src.len()
                )));
            }
            Some(parsed)
        }
        None => None,
    };

    let mut examples = Vec::with_capacity(src.len());
    let mut dropped = 0;
    for (no, (s_toks, t_toks)) in src.iter().zip(&tgt).enumerate() {
        if s_toks.is_empty() || t_toks.is_empty() {
            return Err(Error::data(format!(
                "line {}: empty sentence in corpus",
                no + 1
            )));
        }
        if s_toks.len() > max_len || t_toks.len() > max_len {
            dropped += 1;
            continue;
        }
        let source: Vec<u32> = s_toks.iter().map(|t| src_vocab.id(t)).collect();
        let target: Vec<u32> = t_toks.iter().map(|t| tgt_vocab.id(t)).collect();
        let mut ex = TrainingExample::new(source, target);
        if let Some(aligns) = &aligns {
            for &(i, j) in &aligns[no] {
                if i >= s_toks.len() || j >= t_toks.len() {
                    return Err(Error::data(format!(
                        "alignment line {}: link {i}-{j} out of range for lengths {}/{}",
                        no + 1,
                        s_toks.len(),
                        t_toks.len()
                    )));
                }
            }
            ex = ex.with_links(aligns[no].clone());
        }
        examples.push(ex);
    }
    Ok((examples, dropped))
}

/// Synthetic tasks with known gold alignments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// target = source, links (i, i)
    Copy,
    /// target = reversed source, links (i, l-1-i)
    Reverse,
    /// even-numbered tokens emit two target words, odd ones emit one:
    /// one-to-many fertility with the matching links
    Fertility,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "fertility" => Ok(Task::Fertility),
            other => Err(Error::config(format!(
                "unknown task {other:?} (expected copy|reverse|fertility)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub links: Vec<(usize, usize)>,
}

/// Generate `size` sentence pairs over a `vocab`-token alphabet with lengths
/// uniform in `[min_len, max_len]`, deterministically from the seed.
pub fn gen_synthetic(
    task: Task,
    size: usize,
    vocab: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<SyntheticPair>> {
    if size < 1 {
        return Err(Error::config("synthetic corpus size must be at least 1"));
    }
    if vocab < 1 || min_len < 1 || max_len < min_len {
        return Err(Error::config(
            "synthetic corpus needs vocab >= 1 and 1 <= min-len <= max-len",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(size);
    for _ in 0..size {
        let len = rng.gen_range(min_len..=max_len);
        let words: Vec<usize> = (0..len).map(|_| rng.gen_range(1..=vocab)).collect();
        let source: Vec<String> = words.iter().map(|w| format!("w{w}")).collect();
        let pair = match task {
            Task::Copy => SyntheticPair {
                target: source.clone(),
                links: (0..len).map(|i| (i, i)).collect(),
                source,
            },
            Task::Reverse => SyntheticPair {
                target: source.iter().rev().cloned().collect(),
                links: (0..len).map(|i| (i, len - 1 - i)).collect(),
                source,
            },
            Task::Fertility => {
                let mut target = Vec::new();
                let mut links = Vec::new();
                for (i, w) in words.iter().enumerate() {
                    if w % 2 == 0 {
                        links.push((i, target.len()));
                        target.push(format!("w{w}a"));
                        links.push((i, target.len()));
                        target.push(format!("w{w}b"));
                    } else {
                        links.push((i, target.len()));
                        target.push(format!("w{w}"));
                    }
                }
                SyntheticPair {
                    source,
                    target,
                    links,
                }
            }
        };
        pairs.push(pair);
    }
    Ok(pairs)
}

/// The three parallel files of a synthetic corpus as strings.
pub fn render_synthetic(pairs: &[SyntheticPair]) -> (String, String, String) {
    let mut src = String::new();
    let mut tgt = String::new();
    let mut align = String::new();
    for p in pairs {
        src.push_str(&p.source.join(" "));
        src.push('\n');
        tgt.push_str(&p.target.join(" "));
        tgt.push('\n');
        let links: Vec<String> = p.links.iter().map(|(i, j)| format!("{i}-{j}")).collect();
        align.push_str(&links.join(" "));
        align.push('\n');
    }
    (src, tgt, align)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_pairs_are_identities_with_diagonal_links() {
        let pairs = gen_synthetic(Task::Copy, 5, 6, 2, 4, 9).unwrap();
        for p in &pairs {
            assert_eq!(p.source, p.target);
            for (k, &(i, j)) in p.links.iter().enumerate() {
                assert_eq!((i, j), (k, k));
            }
        }
    }

    #[test]
    fn reverse_pairs_mirror_links() {
        let pairs = gen_synthetic(Task::Reverse, 5, 6, 3, 3, 10).unwrap();
        for p in &pairs {
            let l = p.source.len();
            let rev: Vec<String> = p.source.iter().rev().cloned().collect();
            assert_eq!(p.target, rev);
            for &(i, j) in &p.links {
                assert_eq!(j, l - 1 - i);
            }
        }
    }

    #[test]
    fn fertility_doubles_even_tokens() {
        let pairs = gen_synthetic(Task::Fertility, 20, 6, 2, 5, 11).unwrap();
        for p in &pairs {
            let mut expect = Vec::new();
            for tok in &p.source {
                let w: usize = tok[1..].parse().unwrap();
                if w % 2 == 0 {
                    expect.push(format!("{tok}a"));
                    expect.push(format!("{tok}b"));
                } else {
                    expect.push(tok.clone());
                }
            }
            assert_eq!(p.target, expect);
            // Every source position links to 1 or 2 target positions.
            for (i, tok) in p.source.iter().enumerate() {
                let w: usize = tok[1..].parse().unwrap();
                let n = p.links.iter().filter(|&&(li, _)| li == i).count();
                assert_eq!(n, if w % 2 == 0 { 2 } else { 1 });
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_synthetic(Task::Copy, 10, 8, 2, 6, 42).unwrap();
        let b = gen_synthetic(Task::Copy, 10, 8, 2, 6, 42).unwrap();
        let (sa, ta, aa) = render_synthetic(&a);
        let (sb, tb, ab) = render_synthetic(&b);
        assert_eq!((sa, ta, aa), (sb, tb, ab));
    }

    #[test]
    fn parallel_ingestion_validates_lengths_and_links() {
        let dir = tempfile::tempdir().unwrap();
        let s = dir.path().join("c.src");
        let t = dir.path().join("c.tgt");
        let a = dir.path().join("c.align");
        std::fs::write(&s, "w1 w2\nw3\n").unwrap();
        std::fs::write(&t, "w1 w2\nw3\n").unwrap();
        std::fs::write(&a, "0-0 1-1\n0-0\n").unwrap();
        let vocab = Vocabulary::build(["w1", "w2", "w3"], 10).unwrap();
        let (examples, dropped) =
            read_parallel(&s, &t, Some(&a), &vocab, &vocab, 50).unwrap();
        assert_eq!(examples.len(), 2);
        assert_eq!(dropped, 0);
        assert_eq!(examples[0].links.as_ref().unwrap().len(), 2);

        // Line-count mismatch.
        std::fs::write(&t, "w1 w2\n").unwrap();
        assert!(read_parallel(&s, &t, None, &vocab, &vocab, 50).is_err());

        // Out-of-range link.
        std::fs::write(&t, "w1 w2\nw3\n").unwrap();
        std::fs::write(&a, "0-0 1-1\n5-0\n").unwrap();
        assert!(read_parallel(&s, &t, Some(&a), &vocab, &vocab, 50).is_err());
    }

    #[test]
    fn overlong_pairs_are_dropped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let s = dir.path().join("c.src");
        let t = dir.path().join("c.tgt");
        std::fs::write(&s, "w1 w1 w1 w1\nw1\n").unwrap();
        std::fs::write(&t, "w1\nw1\n").unwrap();
        let vocab = Vocabulary::build(["w1"], 10).unwrap();
        let (examples, dropped) = read_parallel(&s, &t, None, &vocab, &vocab, 3).unwrap();
        assert_eq!(examples.len(), 1);
        assert_eq!(dropped, 1);
    }
}
