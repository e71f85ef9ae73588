//! Token error rate, character perplexity and length statistics.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::manifest::Utterance;
use crate::model::AsrModel;
use crate::s2s::BeamOptions;

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// One scored utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtteranceScore {
    pub id: String,
    pub ref_len: usize,
    pub hyp_len: usize,
    pub edits: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ter: f64,
    pub ppl: Option<f64>,
    pub rows: Vec<UtteranceScore>,
}

impl EvalReport {
    pub fn total_edits(&self) -> usize {
        self.rows.iter().map(|r| r.edits).sum()
    }

    pub fn total_ref(&self) -> usize {
        self.rows.iter().map(|r| r.ref_len).sum()
    }

    /// Mean of `|hyp_len - ref_len|` over utterances.
    pub fn mean_abs_length_gap(&self) -> f64 {
        mean(
            self.rows
                .iter()
                .map(|r| r.hyp_len.abs_diff(r.ref_len) as f64),
        )
    }

    /// Mean of `hyp_len - ref_len` over utterances.
    pub fn mean_length_gap(&self) -> f64 {
        mean(
            self.rows
                .iter()
                .map(|r| r.hyp_len as f64 - r.ref_len as f64),
        )
    }
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    if n == 0 {
        0.0
    } else {
        xs.sum::<f64>() / n as f64
    }
}

/// Scores hypotheses against references (both delimiter-free token lists).
/// References without a hypothesis count as all deletions.
pub fn score(refs: &[(String, Vec<usize>)], hyps: &HashMap<String, Vec<usize>>) -> EvalReport {
    let rows: Vec<UtteranceScore> = refs
        .iter()
        .map(|(id, r)| {
            let (hyp_len, edits) = match hyps.get(id) {
                Some(h) => (h.len(), edit_distance(r, h)),
                None => {
                    warn!("no hypothesis for `{id}`, counting {} deletions", r.len());
                    (0, r.len())
                }
            };
            UtteranceScore {
                id: id.clone(),
                ref_len: r.len(),
                hyp_len,
                edits,
            }
        })
        .collect();
    let total_ref: usize = rows.iter().map(|r| r.ref_len).sum();
    let total_edits: usize = rows.iter().map(|r| r.edits).sum();
    let ter = if total_ref == 0 {
        if total_edits == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        total_edits as f64 / total_ref as f64
    };
    EvalReport {
        ter,
        ppl: None,
        rows,
    }
}

/// Summed character edits over summed reference length.
pub fn token_error_rate(refs: &[Vec<usize>], hyps: &[Vec<usize>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::Validation(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let ids: Vec<(String, Vec<usize>)> = refs
        .iter()
        .enumerate()
        .map(|(i, r)| (i.to_string(), r.clone()))
        .collect();
    let map = hyps
        .iter()
        .enumerate()
        .map(|(i, h)| (i.to_string(), h.clone()))
        .collect();
    Ok(score(&ids, &map).ter)
}

/// Decodes every utterance and scores the results.
pub fn evaluate(
    model: &AsrModel,
    utts: &[Utterance],
    opts: &BeamOptions,
) -> Result<(EvalReport, Vec<(String, Vec<usize>)>)> {
    let mut hyps = Vec::with_capacity(utts.len());
    for u in utts {
        let p = model.prepare(u)?;
        hyps.push((u.id.clone(), model.decode(&p, opts)?.text_tokens()));
    }
    let refs: Vec<(String, Vec<usize>)> = utts
        .iter()
        .map(|u| (u.id.clone(), u.tokens.clone()))
        .collect();
    let map = hyps.iter().cloned().collect();
    Ok((score(&refs, &map), hyps))
}

/// `exp` of the mean per-token negative log-likelihood under teacher forcing,
/// counting end-of-sentence as a target and start-of-sentence as none.
pub fn char_perplexity(model: &AsrModel, utts: &[Utterance]) -> Result<f64> {
    if utts.is_empty() {
        return Err(Error::EmptyInput("perplexity over an empty corpus".into()));
    }
    let mut nll = 0.0;
    let mut count = 0usize;
    for u in utts {
        let (n, c) = model.char_nll(&model.prepare(u)?)?;
        nll += n;
        count += c;
    }
    Ok((nll / count as f64).exp())
}

/// Per-utterance length pair with its reference-length bucket.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LengthRow {
    pub id: String,
    pub ref_len: usize,
    pub hyp_len: usize,
    pub bucket: usize,
}

/// `(bucket lower bound, count)`; bucket `b` covers `[b * width, (b + 1) * width)`.
pub fn length_stats(
    rows: &[UtteranceScore],
    bucket_width: usize,
) -> (Vec<LengthRow>, Vec<(usize, usize)>) {
    let width = bucket_width.max(1);
    let lengths: Vec<LengthRow> = rows
        .iter()
        .map(|r| LengthRow {
            id: r.id.clone(),
            ref_len: r.ref_len,
            hyp_len: r.hyp_len,
            bucket: r.ref_len / width,
        })
        .collect();
    let n_buckets = lengths.iter().map(|r| r.bucket + 1).max().unwrap_or(0);
    let mut hist = vec![0usize; n_buckets];
    for r in &lengths {
        hist[r.bucket] += 1;
    }
    let hist = hist
        .into_iter()
        .enumerate()
        .map(|(b, c)| (b * width, c))
        .collect();
    (lengths, hist)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `eval.csv`, `lengths.csv` and `hist.csv` into `dir`.
pub fn write_reports(dir: &Path, report: &EvalReport, bucket_width: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut eval =
        String::from("utterances,ref_tokens,edits,ter,ppl,mean_len_gap,mean_abs_len_gap\n");
    let ppl = report.ppl.map_or_else(String::new, |p| p.to_string());
    let _ = writeln!(
        eval,
        "{},{},{},{},{},{},{}",
        report.rows.len(),
        report.total_ref(),
        report.total_edits(),
        report.ter,
        ppl,
        report.mean_length_gap(),
        report.mean_abs_length_gap()
    );
    write_file(&dir.join("eval.csv"), &eval)?;

    let (rows, hist) = length_stats(&report.rows, bucket_width);
    let mut lengths = String::from("id,ref_len,hyp_len,bucket\n");
    for r in &rows {
        let _ = writeln!(lengths, "{},{},{},{}", r.id, r.ref_len, r.hyp_len, r.bucket);
    }
    write_file(&dir.join("lengths.csv"), &lengths)?;

    write_file(&dir.join("hist.csv"), &histogram_csv(&hist, bucket_width))
}

pub fn histogram_csv(hist: &[(usize, usize)], bucket_width: usize) -> String {
    let mut out = String::from("bucket_start,bucket_end,count\n");
    for &(lo, c) in hist {
        let _ = writeln!(out, "{lo},{},{c}", lo + bucket_width.max(1));
    }
    out
}
