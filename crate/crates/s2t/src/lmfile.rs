//! Plain-text trigram counts keyed by target token id.
//!
//! ```text
//! s2t-trigram-lm
//! order=3
//! vocab_size=12
//! lambdas=0.1,0.3,0.6
//! \1-grams: 2
//! 4	7
//! ...
//! \end
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use s2t_core::lm::TrigramModel;

use crate::error::FormatError;

const HEADER: &str = "s2t-trigram-lm";

pub fn encode_lm(lm: &TrigramModel) -> String {
    let mut out = String::new();
    let l = lm.lambdas();
    let _ = writeln!(out, "{HEADER}\norder=3\nvocab_size={}", lm.vocab_size());
    let _ = writeln!(out, "lambdas={},{},{}", l[0], l[1], l[2]);
    let _ = writeln!(out, "\\1-grams: {}", lm.unigrams().len());
    for (w, c) in lm.unigrams() {
        let _ = writeln!(out, "{w}\t{c}");
    }
    let _ = writeln!(out, "\\2-grams: {}", lm.bigrams().len());
    for ((v, w), c) in lm.bigrams() {
        let _ = writeln!(out, "{v} {w}\t{c}");
    }
    let _ = writeln!(out, "\\3-grams: {}", lm.trigrams().len());
    for ((u, v, w), c) in lm.trigrams() {
        let _ = writeln!(out, "{u} {v} {w}\t{c}");
    }
    out.push_str("\\end\n");
    out
}

fn bad(line: usize, what: &str) -> FormatError {
    FormatError::Malformed(format!("language model line {line}: {what}"))
}

pub fn decode_lm(text: &str) -> Result<TrigramModel, FormatError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
    let mut next = |what: &'static str| lines.next().ok_or(FormatError::Truncated(what));
    let (_, header) = next("language model header")?;
    if header != HEADER {
        return Err(FormatError::BadMagic { expected: HEADER });
    }
    let mut field = |key: &str| -> Result<(usize, String), FormatError> {
        let (n, line) = next("language model header")?;
        let value = line
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .ok_or_else(|| bad(n, &format!("expected {key}=")))?;
        Ok((n, value.to_string()))
    };
    let (n, order) = field("order")?;
    if order != "3" {
        return Err(bad(n, "only order 3 is supported"));
    }
    let (n, vocab) = field("vocab_size")?;
    let vocab_size: usize = vocab.parse().map_err(|_| bad(n, "bad vocabulary size"))?;
    let (n, lambdas) = field("lambdas")?;
    let lambdas: Vec<f64> = lambdas
        .split(',')
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|_| bad(n, "bad interpolation weights"))?;
    let lambdas: [f64; 3] = lambdas.try_into().map_err(|_| bad(n, "need three weights"))?;

    let mut sections: [BTreeMap<Vec<u32>, u64>; 3] = Default::default();
    for (order, section) in sections.iter_mut().enumerate() {
        let (n, head) = next("n-gram section")?;
        let count: usize = head
            .strip_prefix(&format!("\\{}-grams:", order + 1))
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| bad(n, "bad section header"))?;
        for _ in 0..count {
            let (n, line) = next("n-gram record")?;
            let (ids, c) = line
                .split_once('\t')
                .ok_or_else(|| bad(n, "expected ids<TAB>count"))?;
            let ids: Vec<u32> = ids
                .split(' ')
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| bad(n, "bad token id"))?;
            if ids.len() != order + 1 {
                return Err(bad(n, "wrong n-gram order"));
            }
            let c: u64 = c.parse().map_err(|_| bad(n, "bad count"))?;
            if section.insert(ids, c).is_some() {
                return Err(bad(n, "duplicate n-gram"));
            }
        }
    }
    let (n, end) = next("end marker")?;
    if end != "\\end" {
        return Err(bad(n, "expected \\end"));
    }
    let [uni, bi, tri] = sections;
    Ok(TrigramModel::from_counts(
        vocab_size,
        lambdas,
        uni.into_iter().map(|(k, c)| (k[0], c)).collect(),
        bi.into_iter().map(|(k, c)| ((k[0], k[1]), c)).collect(),
        tri.into_iter().map(|(k, c)| ((k[0], k[1], k[2]), c)).collect(),
    )?)
}

pub fn write_lm(path: &Path, lm: &TrigramModel) -> Result<(), FormatError> {
    Ok(fs::write(path, encode_lm(lm))?)
}

pub fn read_lm(path: &Path) -> Result<TrigramModel, FormatError> {
    decode_lm(&fs::read_to_string(path)?)
}
