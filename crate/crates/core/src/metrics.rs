//! Edit distance, CER/SER, perplexity and the evaluation report.

use serde::{Deserialize, Serialize};

use crate::decoding::DecodeRecord;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::synth::Utterance;
use crate::text::{encode, to_syllables, Vocabulary};
use crate::training::{corpus_nll, Networks};

/// Levenshtein distance with unit insertion, deletion and substitution costs.
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

/// Corpus-pooled error rate: total distance over total reference length.
/// Can exceed 1 when hypotheses run long.
pub fn cer<R: AsRef<[usize]>, H: AsRef<[usize]>>(refs: &[R], hyps: &[H]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::Config(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let total: usize = refs.iter().map(|r| r.as_ref().len()).sum();
    if total == 0 {
        return Err(Error::EmptyReference);
    }
    let dist: usize = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| edit_distance(r.as_ref(), h.as_ref()))
        .sum();
    Ok(dist as f64 / total as f64)
}

/// [`cer`] after collapsing tokens to their syllable classes.
pub fn ser<R: AsRef<[usize]>, H: AsRef<[usize]>>(refs: &[R], hyps: &[H], vocab: &Vocabulary) -> Result<f64> {
    let r: Vec<Vec<usize>> = refs.iter().map(|x| to_syllables(x.as_ref(), vocab)).collect();
    let h: Vec<Vec<usize>> = hyps.iter().map(|x| to_syllables(x.as_ref(), vocab)).collect();
    cer(&r, &h)
}

/// `exp` of the mean per-token negative log-likelihood over every step of
/// every utterance. Without an encoder this scores the text-only model;
/// with one, the fused model under oracle alignments.
pub fn perplexity(store: &ParamStore, nets: Networks, utts: &[Utterance], batch_size: usize) -> Result<f64> {
    let (nll, n) = corpus_nll(store, nets, utts, batch_size)?;
    if n == 0 {
        return Err(Error::EmptyReference);
    }
    Ok((nll / n as f64).exp())
}

/// CER and SER of decoded records.
pub fn score_records(records: &[DecodeRecord], vocab: &Vocabulary) -> Result<(f64, f64)> {
    let refs: Vec<Vec<usize>> = records.iter().map(|r| encode(&r.reference, vocab).token_ids).collect();
    let hyps: Vec<Vec<usize>> = records.iter().map(|r| encode(&r.hypothesis, vocab).token_ids).collect();
    Ok((cer(&refs, &hyps)?, ser(&refs, &hyps, vocab)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub system: String,
    pub split: String,
    pub strategy: String,
    pub id: String,
    pub ref_len: usize,
    pub hyp_len: usize,
    pub char_errors: usize,
    pub syllable_errors: usize,
}

impl UtteranceScore {
    pub fn from_record(system: &str, split: &str, r: &DecodeRecord, vocab: &Vocabulary) -> Self {
        let rf = encode(&r.reference, vocab).token_ids;
        let hy = encode(&r.hypothesis, vocab).token_ids;
        UtteranceScore {
            system: system.to_string(),
            split: split.to_string(),
            strategy: r.strategy.clone(),
            id: r.id.clone(),
            ref_len: rf.len(),
            hyp_len: hy.len(),
            char_errors: edit_distance(&rf, &hy),
            syllable_errors: edit_distance(&to_syllables(&rf, vocab), &to_syllables(&hy, vocab)),
        }
    }
}

/// One row of the results table: a system evaluated on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub system: String,
    pub split: String,
    pub ppl: Option<f64>,
    pub cer_oracle: Option<f64>,
    pub cer_practical: Option<f64>,
    pub ser_oracle: Option<f64>,
    pub ser_practical: Option<f64>,
}

impl EvalRow {
    pub fn new(system: &str, split: &str) -> Self {
        EvalRow {
            system: system.to_string(),
            split: split.to_string(),
            ppl: None,
            cer_oracle: None,
            cer_practical: None,
            ser_oracle: None,
            ser_practical: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fingerprint: String,
    pub rows: Vec<EvalRow>,
    pub utterances: Vec<UtteranceScore>,
}

impl EvalReport {
    pub fn row(&self, system: &str, split: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.system == system && r.split == split)
    }

    pub fn row_mut(&mut self, system: &str, split: &str) -> &mut EvalRow {
        match self.rows.iter().position(|r| r.system == system && r.split == split) {
            Some(i) => &mut self.rows[i],
            None => {
                self.rows.push(EvalRow::new(system, split));
                self.rows.last_mut().expect("just pushed")
            }
        }
    }

    /// Plain-text table, one line per row, rates as percentages.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
        let header = [
            "system",
            "split",
            "PPL",
            "CER oracle",
            "CER practical",
            "SER oracle",
            "SER practical",
        ];
        let body: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.system.clone(),
                    r.split.clone(),
                    r.ppl.map_or("-".to_string(), |p| format!("{p:.2}")),
                    pct(r.cer_oracle),
                    pct(r.cer_practical),
                    pct(r.ser_oracle),
                    pct(r.ser_practical),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for row in &body {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: Vec<&str>| {
            cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect::<Vec<_>>()
                .join(" | ")
        };
        let mut out = format!("# config {}\n", self.fingerprint);
        out.push_str(&line(header.to_vec()));
        out.push('\n');
        out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-|-"));
        out.push('\n');
        for row in &body {
            out.push_str(&line(row.iter().map(String::as_str).collect()));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::build_vocabulary;

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(b"abc", b"abc"), 0);
        assert_eq!(edit_distance(b"abcd", b"abd"), 1);
        assert_eq!(edit_distance(b"", b"ab"), 2);
        assert_eq!(edit_distance(b"kitten", b"sitting"), 3);
    }

    #[test]
    fn cer_examples() {
        assert_eq!(cer(&[vec![1, 2, 3]], &[vec![1, 2, 3]]).unwrap(), 0.0);
        assert_eq!(cer(&[vec![1, 2, 3, 4]], &[vec![1, 2, 4]]).unwrap(), 0.25);
        // pooled, not averaged per utterance
        assert_eq!(cer(&[vec![1], vec![1, 2, 3]], &[vec![2], vec![1, 2, 3]]).unwrap(), 0.25);
        assert_eq!(cer(&[vec![1]], &[vec![2, 3, 4]]).unwrap(), 3.0);
        assert!(matches!(
            cer::<Vec<usize>, Vec<usize>>(&[vec![]], &[vec![]]),
            Err(Error::EmptyReference)
        ));
        assert!(cer(&[vec![1]], &[vec![1], vec![2]]).is_err());
    }

    #[test]
    fn ser_collapses_homophones() {
        let corpus = [vec!["ma1", "ma2", "ba1"]];
        let groups = vec![vec!["ma1".to_string(), "ma2".to_string()]];
        let v = build_vocabulary(corpus.iter().map(|s| s.as_slice()), Some(&groups)).unwrap();
        let (m1, m2, b1) = (v.id("ma1").unwrap(), v.id("ma2").unwrap(), v.id("ba1").unwrap());
        let refs = [vec![m1, b1]];
        let hyps = [vec![m2, b1]];
        assert_eq!(cer(&refs, &hyps).unwrap(), 0.5);
        assert_eq!(ser(&refs, &hyps, &v).unwrap(), 0.0);

        let plain = build_vocabulary(corpus.iter().map(|s| s.as_slice()), None).unwrap();
        let hyps2 = [vec![b1, m1, m2]];
        assert_eq!(ser(&refs, &hyps2, &plain).unwrap(), cer(&refs, &hyps2).unwrap());
    }

    #[test]
    fn table_has_report_columns() {
        let mut r = EvalReport {
            fingerprint: "abc".into(),
            ..Default::default()
        };
        r.row_mut("BERT-LM", "dev").ppl = Some(12.345);
        let row = r.row_mut("Average", "dev");
        row.cer_oracle = Some(0.5);
        row.cer_practical = Some(1.058);
        let t = r.to_table();
        assert!(
            t.contains("PPL | CER oracle | CER practical | SER oracle | SER practical"),
            "{t}"
        );
        assert!(t.contains("12.35") && t.contains("105.8"), "{t}");
        assert_eq!(r.rows.len(), 2);
    }
}
