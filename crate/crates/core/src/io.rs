//! Plain-text file formats. Every float is written with 17 significant
//! digits so that a write/parse round trip reproduces it exactly.
//!
//! * embeddings: `#dim <D>` header, then `utt_id spk_id domain_id v1 .. vD`
//! * stats: `dim`, `epsilon`, `sigma`, `center` lines
//! * transform: `dim <D>`, D rows of M, one row of b
//! * scores: `model_id test_utt_id score label`
//! * results: `case method n_speakers proportion eer_percent`
//!
//! Lines starting with `#` are comments (except the embedding header).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::adapt::DomainTransform;
use crate::data::{Embedding, LabeledDataset, Record};
use crate::error::{Error, Result};
use crate::eval::{ScoreRecord, TrialLabel};
use crate::experiment::ResultRow;
use crate::model::DomainStats;

/// Formats a float with 17 significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn push_floats(out: &mut String, values: impl IntoIterator<Item = f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        out.push_str(&fmt_float(v));
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

struct LineParser<'a> {
    source: &'a str,
}

impl LineParser<'_> {
    fn error(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.source.to_string(),
            line,
            message: message.into(),
        }
    }

    fn float(&self, line: usize, token: &str) -> Result<f64> {
        let v: f64 = token
            .parse()
            .map_err(|_| self.error(line, format!("invalid number '{token}'")))?;
        if !v.is_finite() {
            return Err(self.error(line, format!("non-finite value '{token}'")));
        }
        Ok(v)
    }

    fn floats(&self, line: usize, tokens: &[&str], expected: usize) -> Result<Vec<f64>> {
        if tokens.len() != expected {
            return Err(self.error(
                line,
                format!("expected {expected} values, found {}", tokens.len()),
            ));
        }
        tokens.iter().map(|t| self.float(line, t)).collect()
    }
}

/// Non-empty, non-comment lines with their 1-based numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn format_embeddings(data: &LabeledDataset) -> String {
    let mut out = format!("#dim {}\n", data.dim());
    for r in data.iter() {
        let _ = write!(out, "{} {} {} ", r.utt_id, r.spk_id, r.domain_id);
        push_floats(&mut out, r.embedding.as_slice().iter().copied());
        out.push('\n');
    }
    out
}

pub fn parse_embeddings(text: &str, source: &str) -> Result<LabeledDataset> {
    let p = LineParser { source };
    let mut dim = None;
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (no, raw) in text.lines().enumerate() {
        let no = no + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#dim") {
            if dim.is_some() {
                return Err(p.error(no, "duplicate #dim header"));
            }
            let d: usize = rest
                .trim()
                .parse()
                .ok()
                .filter(|d| *d > 0)
                .ok_or_else(|| p.error(no, format!("invalid dimension '{}'", rest.trim())))?;
            dim = Some(d);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let d = dim.ok_or_else(|| p.error(no, "record before the #dim header"))?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() < 3 {
            return Err(p.error(no, "expected utt_id spk_id domain_id followed by values"));
        }
        let values = p.floats(no, &tokens[3..], d)?;
        if !seen.insert(tokens[0].to_string()) {
            return Err(p.error(no, format!("duplicate utterance id {}", tokens[0])));
        }
        records.push(Record {
            utt_id: tokens[0].to_string(),
            spk_id: tokens[1].to_string(),
            domain_id: tokens[2].to_string(),
            embedding: Embedding::new(values).map_err(|e| p.error(no, e.to_string()))?,
        });
    }
    let dim = dim.ok_or_else(|| p.error(0, "missing #dim header"))?;
    LabeledDataset::new(dim, records).map_err(|e| p.error(0, e.to_string()))
}

pub fn parse_embedding_file(path: &Path) -> Result<LabeledDataset> {
    parse_embeddings(&read_text(path)?, &path.display().to_string())
}

pub fn write_embedding_file(path: &Path, data: &LabeledDataset) -> Result<()> {
    write_text(path, &format_embeddings(data))
}

pub fn format_stats(stats: &DomainStats) -> String {
    let mut out = format!(
        "dim {}\nepsilon {}\nsigma {}\ncenter ",
        stats.dim(),
        fmt_float(stats.epsilon()),
        fmt_float(stats.sigma())
    );
    push_floats(&mut out, stats.center().iter().copied());
    out.push('\n');
    out
}

pub fn parse_stats(text: &str, source: &str) -> Result<DomainStats> {
    let p = LineParser { source };
    let (mut dim, mut eps, mut sig, mut center) = (None, None, None, None);
    let mut last = 0;
    for (no, line) in content_lines(text) {
        last = no;
        let mut tokens = line.split_whitespace();
        let key = tokens.next().unwrap_or_default();
        let rest: Vec<&str> = tokens.collect();
        match key {
            "dim" => {
                let [d] = rest[..] else {
                    return Err(p.error(no, "expected 'dim <D>'"));
                };
                dim = Some(
                    d.parse::<usize>()
                        .ok()
                        .filter(|d| *d > 0)
                        .ok_or_else(|| p.error(no, format!("invalid dimension '{d}'")))?,
                );
            }
            "epsilon" => eps = Some(p.floats(no, &rest, 1)?[0]),
            "sigma" => sig = Some(p.floats(no, &rest, 1)?[0]),
            "center" => {
                let d = dim.ok_or_else(|| p.error(no, "center before dim"))?;
                center = Some(p.floats(no, &rest, d)?);
            }
            other => return Err(p.error(no, format!("unknown key '{other}'"))),
        }
    }
    let missing = |k: &str| p.error(last, format!("missing '{k}' line"));
    let stats = DomainStats::new(
        eps.ok_or_else(|| missing("epsilon"))?,
        sig.ok_or_else(|| missing("sigma"))?,
        center.ok_or_else(|| missing("center"))?,
    );
    stats.map_err(|e| p.error(last, e.to_string()))
}

pub fn read_stats_file(path: &Path) -> Result<DomainStats> {
    parse_stats(&read_text(path)?, &path.display().to_string())
}

pub fn write_stats_file(path: &Path, stats: &DomainStats) -> Result<()> {
    write_text(path, &format_stats(stats))
}

pub fn format_transform(t: &DomainTransform) -> String {
    let d = t.dim();
    let mut out = format!("dim {d}\n");
    for i in 0..d {
        push_floats(&mut out, t.m().row(i).iter().copied());
        out.push('\n');
    }
    push_floats(&mut out, t.b().iter().copied());
    out.push('\n');
    out
}

pub fn parse_transform(text: &str, source: &str) -> Result<DomainTransform> {
    let p = LineParser { source };
    let mut lines = content_lines(text);
    let (no, header) = lines
        .next()
        .ok_or_else(|| p.error(0, "empty transform file"))?;
    let d = header
        .strip_prefix("dim")
        .and_then(|r| r.trim().parse::<usize>().ok())
        .filter(|d| *d > 0)
        .ok_or_else(|| p.error(no, "expected 'dim <D>'"))?;
    let mut rows = Vec::with_capacity(d + 1);
    let mut last = no;
    for (no, line) in lines {
        last = no;
        if rows.len() == d + 1 {
            return Err(p.error(no, "trailing data after the offset row"));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        rows.push(p.floats(no, &tokens, d)?);
    }
    if rows.len() != d + 1 {
        return Err(p.error(
            last,
            format!("expected {} rows, found {}", d + 1, rows.len()),
        ));
    }
    let b = DVector::from_vec(rows.pop().unwrap());
    let m = DMatrix::from_row_iterator(d, d, rows.into_iter().flatten());
    DomainTransform::new(m, b).map_err(|e| p.error(last, e.to_string()))
}

pub fn read_transform_file(path: &Path) -> Result<DomainTransform> {
    parse_transform(&read_text(path)?, &path.display().to_string())
}

pub fn write_transform_file(path: &Path, t: &DomainTransform) -> Result<()> {
    write_text(path, &format_transform(t))
}

pub fn format_scores(records: &[ScoreRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(
            out,
            "{} {} {} {}",
            r.model_id,
            r.test_utt_id,
            fmt_float(r.score),
            r.label
        );
    }
    out
}

pub fn parse_scores(text: &str, source: &str) -> Result<Vec<ScoreRecord>> {
    let p = LineParser { source };
    content_lines(text)
        .map(|(no, line)| {
            let tokens: Vec<&str> = line.split_whitespace().collect();
            let [model, utt, score, label] = tokens[..] else {
                return Err(p.error(no, "expected 'model_id test_utt_id score label'"));
            };
            Ok(ScoreRecord {
                model_id: model.to_string(),
                test_utt_id: utt.to_string(),
                score: p.float(no, score)?,
                label: label.parse::<TrialLabel>().map_err(|e| p.error(no, e))?,
            })
        })
        .collect()
}

pub fn read_score_file(path: &Path) -> Result<Vec<ScoreRecord>> {
    parse_scores(&read_text(path)?, &path.display().to_string())
}

pub fn write_score_file(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    write_text(path, &format_scores(records))
}

pub const RESULTS_HEADER: &str = "case method n_speakers proportion eer_percent";

pub fn format_results(rows: &[ResultRow]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in rows {
        let proportion = r.proportion.map_or_else(|| "-".to_string(), fmt_float);
        let _ = writeln!(
            out,
            "{} {} {} {} {}",
            r.case,
            r.method,
            r.n_speakers,
            proportion,
            fmt_float(r.eer_percent)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_small_embedding_file() {
        let text = "# comment\n#dim 2\nu1 s1 A 0.5 1e-3\n\nu2 s2 A -1 2\n";
        let ds = parse_embeddings(text, "mem").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.records()[0].embedding.as_slice(), &[0.5, 1e-3]);
    }

    #[test]
    fn short_line_names_its_number() {
        let text = "#dim 2\nu1 s1 A 0.5 1.0\nu2 s2 A 0.5\n";
        match parse_embeddings(text, "f.emb") {
            Err(Error::Parse { line, path, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(path, "f.emb");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn embedding_errors() {
        assert!(parse_embeddings("u1 s A 1\n", "x").is_err());
        assert!(parse_embeddings("#dim 1\nu1 s A 1\nu1 t A 2\n", "x").is_err());
        assert!(parse_embeddings("#dim 1\nu1 s A nan\n", "x").is_err());
        assert!(parse_embeddings("#dim 1\nu1 s A 1,5\n", "x").is_err());
    }

    #[test]
    fn stats_format_is_line_oriented() {
        let s = DomainStats::new(0.25, 1.5, vec![1.0, -2.0]).unwrap();
        let text = format_stats(&s);
        assert!(text.starts_with("dim 2\nepsilon 2.5000000000000000e-1\n"));
        assert_eq!(parse_stats(&text, "s").unwrap(), s);
        assert!(parse_stats("dim 2\nepsilon 1\nsigma 1\ncenter 0\n", "s").is_err());
        assert!(parse_stats("dim 1\nepsilon 1\ncenter 0\n", "s").is_err());
        assert!(parse_stats("dim 1\nepsilon -1\nsigma 1\ncenter 0\n", "s").is_err());
    }

    #[test]
    fn transform_errors() {
        assert!(parse_transform("dim 2\n1 0\n0 1\n", "t").is_err());
        assert!(parse_transform("dim 1\n1\n0\n5\n", "t").is_err());
        let t = parse_transform("# m then b\ndim 1\n2\n3\n", "t").unwrap();
        assert_eq!(t.m()[(0, 0)], 2.0);
        assert_eq!(t.b()[0], 3.0);
    }

    #[test]
    fn score_lines() {
        let r = parse_scores("m1 u1 1.5 target\nm1 u2 -2 nontarget\n", "s").unwrap();
        assert_eq!(r[1].label, TrialLabel::Nontarget);
        assert!(parse_scores("m1 u1 1.5\n", "s").is_err());
        assert!(parse_scores("m1 u1 1.5 maybe\n", "s").is_err());
    }
}
