//! File formats: the UAKS-FEAT binary feature container, CTM-like
//! alignment files, and the query / reference TSV formats.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{
    grapheme_tokens, AlignmentEntry, FeatureKind, FeatureMatrix, Occurrence, QueryText,
    WordAlignment,
};
use crate::error::{Error, Result};

const FEAT_MAGIC: &str = "UAKS-FEAT v1";

/// Writes a feature matrix as a one-line text header followed by N*D
/// little-endian f32 values, row-major:
/// `UAKS-FEAT v1 doc=<id> n=<N> d=<D> period=<sec> dtype=f32le`
pub fn write_feature_matrix(path: &Path, m: &FeatureMatrix) -> Result<()> {
    if m.doc_id.contains(char::is_whitespace) {
        return Err(Error::invalid(format!(
            "doc id {:?} may not contain whitespace",
            m.doc_id
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = format!(
        "{FEAT_MAGIC} doc={} n={} d={} period={} dtype=f32le kind={}\n",
        m.doc_id,
        m.num_frames(),
        m.dim(),
        m.frame_period,
        m.kind.as_str()
    );
    w.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
    for v in m.frames.iter() {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_feature_matrix(path: &Path) -> Result<FeatureMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = String::new();
    r.read_line(&mut header).map_err(|e| Error::io(path, e))?;
    let header = header.trim_end_matches('\n');
    let mut fields = header.split(' ');
    let magic = format!(
        "{} {}",
        fields.next().unwrap_or(""),
        fields.next().unwrap_or("")
    );
    if magic != FEAT_MAGIC {
        return Err(Error::format(
            "feature header",
            format!("expected `{FEAT_MAGIC}`, found `{magic}` in {}", path.display()),
        ));
    }
    let mut doc_id = None;
    let mut n = None;
    let mut d = None;
    let mut period = None;
    let mut dtype = None;
    let mut kind = FeatureKind::Mfcc;
    for field in fields {
        let (key, value) = field.split_once('=').ok_or_else(|| {
            Error::format("feature header", format!("field `{field}` is not key=value"))
        })?;
        match key {
            "doc" => doc_id = Some(value.to_string()),
            "n" => n = Some(parse_header_num::<usize>(field, value)?),
            "d" => d = Some(parse_header_num::<usize>(field, value)?),
            "period" => period = Some(parse_header_num::<f64>(field, value)?),
            "dtype" => dtype = Some(value.to_string()),
            "kind" => {
                kind = FeatureKind::parse(value).ok_or_else(|| {
                    Error::format("feature header", format!("unknown kind `{value}`"))
                })?
            }
            _ => {
                return Err(Error::format(
                    "feature header",
                    format!("unknown field `{key}`"),
                ))
            }
        }
    }
    let doc_id = doc_id.ok_or_else(|| Error::format("feature header", "missing doc="))?;
    let n = n.ok_or_else(|| Error::format("feature header", "missing n="))?;
    let d = d.ok_or_else(|| Error::format("feature header", "missing d="))?;
    let period = period.ok_or_else(|| Error::format("feature header", "missing period="))?;
    match dtype.as_deref() {
        Some("f32le") => {}
        other => {
            return Err(Error::format(
                "feature header",
                format!("unsupported dtype {other:?}"),
            ))
        }
    }

    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    let want = n * d * 4;
    if payload.len() < want {
        return Err(Error::format(
            "feature payload",
            format!(
                "truncated payload in {}: header declares {n}x{d} ({want} bytes), found {}",
                path.display(),
                payload.len()
            ),
        ));
    }
    if payload.len() > want {
        return Err(Error::format(
            "feature payload",
            format!(
                "trailing bytes in {}: header declares {want} bytes, found {}",
                path.display(),
                payload.len()
            ),
        ));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::format(
                "feature payload",
                format!(
                    "non-finite value at frame {}, dim {} of {}",
                    i / d,
                    i % d,
                    path.display()
                ),
            ));
        }
    }
    let frames = Array2::from_shape_vec((n, d), values)
        .map_err(|e| Error::format("feature payload", e.to_string()))?;
    FeatureMatrix::new(doc_id, frames, period, kind)
}

fn parse_header_num<T: std::str::FromStr>(field: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::format("feature header", format!("cannot parse `{field}`")))
}

/// Loads a CTM-like alignment file: `<doc-id> <channel> <t_begin> <duration>
/// <token>` per line. Entries are grouped per document and sorted by begin
/// time; overlapping spans are rejected with the offending line number.
pub fn load_alignments(path: &Path) -> Result<Vec<WordAlignment>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    // doc id -> (entry, source line)
    let mut docs: BTreeMap<String, Vec<(AlignmentEntry, usize)>> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 5 fields, found {}", fields.len()),
            ));
        }
        let t_begin: f64 = fields[2]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad begin time `{}`", fields[2])))?;
        let duration: f64 = fields[3]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad duration `{}`", fields[3])))?;
        if t_begin < 0.0 {
            return Err(Error::parse(path, lineno, "negative begin time"));
        }
        if duration <= 0.0 {
            return Err(Error::parse(path, lineno, "non-positive duration"));
        }
        docs.entry(fields[0].to_string()).or_default().push((
            AlignmentEntry {
                token: fields[4].to_string(),
                t_begin,
                t_end: t_begin + duration,
            },
            lineno,
        ));
    }
    let mut out = Vec::with_capacity(docs.len());
    for (doc_id, mut entries) in docs {
        entries.sort_by(|a, b| {
            a.0.t_begin
                .partial_cmp(&b.0.t_begin)
                .expect("begin times are finite")
        });
        for pair in entries.windows(2) {
            // Shared boundaries are allowed; true overlap is not.
            if pair[1].0.t_begin < pair[0].0.t_end - 1e-9 {
                return Err(Error::parse(
                    path,
                    pair[1].1,
                    format!(
                        "entry `{}` overlaps previous entry `{}` in document {doc_id}",
                        pair[1].0.token, pair[0].0.token
                    ),
                ));
            }
        }
        out.push(WordAlignment {
            doc_id,
            entries: entries.into_iter().map(|(e, _)| e).collect(),
        });
    }
    Ok(out)
}

pub fn write_alignments(path: &Path, alignments: &[WordAlignment]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ali in alignments {
        for e in &ali.entries {
            writeln!(
                w,
                "{} 1 {:.2} {:.2} {}",
                ali.doc_id,
                e.t_begin,
                e.t_end - e.t_begin,
                e.token
            )
            .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Query list TSV: `<query-id>\t<word word ...>`. Grapheme tokens are
/// derived from the words on load.
pub fn load_queries(path: &Path) -> Result<Vec<QueryText>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, lineno, "expected <query-id>\\t<words>"))?;
        let words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        if words.is_empty() {
            return Err(Error::parse(path, lineno, "query has no words"));
        }
        let tokens = grapheme_tokens(&words);
        out.push(QueryText::new(id, words, tokens)?);
    }
    Ok(out)
}

pub fn write_queries(path: &Path, queries: &[QueryText]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for q in queries {
        let text = if q.words.is_empty() {
            q.tokens.join(" ")
        } else {
            q.words.join(" ")
        };
        writeln!(w, "{}\t{}", q.query_id, text).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reference list TSV: `<query-id>\t<doc-id>\t<t_begin>\t<t_end>`.
pub fn load_occurrences(path: &Path) -> Result<Vec<Occurrence>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let t_begin: f64 = fields[2]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad begin time `{}`", fields[2])))?;
        let t_end: f64 = fields[3]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad end time `{}`", fields[3])))?;
        out.push(
            Occurrence::new(fields[0], fields[1], t_begin, t_end)
                .map_err(|e| Error::parse(path, lineno, e.to_string()))?,
        );
    }
    Ok(out)
}

pub fn write_occurrences(path: &Path, occurrences: &[Occurrence]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for o in occurrences {
        writeln!(w, "{}\t{}\t{}\t{}", o.query_id, o.doc_id, o.t_begin, o.t_end)
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn feature_header_shape_echo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.feat");
        let frames = Array2::from_shape_fn((100, 13), |(i, j)| (i * 13 + j) as f32);
        let m = FeatureMatrix::new("doc1", frames, 0.01, FeatureKind::Mfcc).unwrap();
        write_feature_matrix(&path, &m).unwrap();
        let back = load_feature_matrix(&path).unwrap();
        assert_eq!(back.doc_id, "doc1");
        assert_eq!(back.num_frames(), 100);
        assert_eq!(back.dim(), 13);
        assert!((back.frame_period - 0.01).abs() < 1e-15);
    }

    #[test]
    fn feature_truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.feat");
        let frames = Array2::<f32>::zeros((100, 13));
        let m = FeatureMatrix::new("doc1", frames, 0.01, FeatureKind::Mfcc).unwrap();
        write_feature_matrix(&path, &m).unwrap();
        // Drop the last 4 bytes: 1299 of 1300 values remain.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_feature_matrix(&path).unwrap_err();
        assert!(err.to_string().contains("truncated payload"), "{err}");
    }

    #[test]
    fn feature_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.feat");
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let frames = Array2::from_shape_fn((37, 8), |_| rng.random_range(-10.0f32..10.0));
        let m = FeatureMatrix::new("rt", frames.clone(), 0.02, FeatureKind::External).unwrap();
        write_feature_matrix(&path, &m).unwrap();
        let back = load_feature_matrix(&path).unwrap();
        assert_eq!(back.kind, FeatureKind::External);
        for (a, b) in frames.iter().zip(back.frames.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn ctm_format_echo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ctm");
        std::fs::write(&path, "doc1 1 0.20 0.10 cat\n").unwrap();
        let alis = load_alignments(&path).unwrap();
        assert_eq!(alis.len(), 1);
        let e = &alis[0].entries[0];
        assert_eq!(e.token, "cat");
        assert!((e.t_begin - 0.20).abs() < 1e-12);
        assert!((e.t_end - 0.30).abs() < 1e-12);
    }

    #[test]
    fn ctm_empty_file_is_empty_set() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ctm");
        std::fs::write(&path, "").unwrap();
        assert!(load_alignments(&path).unwrap().is_empty());
    }

    #[test]
    fn ctm_out_of_order_lines_come_back_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.ctm");
        std::fs::write(&path, "d 1 0.50 0.10 b\nd 1 0.20 0.10 a\n").unwrap();
        let alis = load_alignments(&path).unwrap();
        let tokens: Vec<&str> = alis[0].entries.iter().map(|e| e.token.as_str()).collect();
        assert_eq!(tokens, vec!["a", "b"]);
    }

    #[test]
    fn ctm_rejects_negative_duration_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.ctm");
        std::fs::write(&path, "d 1 0.20 0.10 a\nd 1 0.50 -0.10 b\n").unwrap();
        let err = load_alignments(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn ctm_rejects_overlap_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ctm");
        std::fs::write(&path, "d 1 0.20 0.30 a\nd 1 0.35 0.10 b\n").unwrap();
        let err = load_alignments(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
        assert!(err.to_string().contains("overlaps"), "{err}");
    }

    #[test]
    fn query_and_occurrence_tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let qpath = dir.path().join("q.tsv");
        let opath = dir.path().join("o.tsv");
        let q = QueryText::new(
            "q1",
            vec!["the".into(), "cat".into()],
            grapheme_tokens(&["the".to_string(), "cat".to_string()]),
        )
        .unwrap();
        write_queries(&qpath, &[q.clone()]).unwrap();
        let back = load_queries(&qpath).unwrap();
        assert_eq!(back, vec![q]);

        let o = Occurrence::new("q1", "d7", 1.25, 2.0).unwrap();
        write_occurrences(&opath, &[o.clone()]).unwrap();
        assert_eq!(load_occurrences(&opath).unwrap(), vec![o]);
    }
}
