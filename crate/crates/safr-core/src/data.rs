//! Dataset ingestion: TSV parsing, word-level tokenization, vocabulary,
//! encoding, deterministic batching, and the on-disk dataset cache.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::rng::stream_rng;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CACHE_MAGIC: &[u8; 8] = b"SAFRDS1\0";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed line (expected label<TAB>text)")]
    MalformedLine { path: String, line: usize },
    #[error("{path}:{line}: label out of range (got {label}, classes {classes})")]
    LabelOutOfRange {
        path: String,
        line: usize,
        label: i64,
        classes: usize,
    },
    #[error("{path}: no examples")]
    NoExamples { path: String },
    #[error("dataset cache is corrupt: {0}")]
    BadCache(String),
}

#[derive(Debug, Clone)]
pub struct RawExample {
    pub label: u32,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct Vocab {
    pub token_to_id: HashMap<String, u32>,
    pub id_to_token: Vec<String>,
    pub min_freq: u32,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        *self.token_to_id.get(token).unwrap_or(&UNK_ID)
    }

    /// Vocabulary from an explicit id-ordered token list (index = id).
    /// Tokens must be unique.
    pub fn from_tokens(id_to_token: Vec<String>) -> Result<Vocab, DataError> {
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(DataError::BadCache(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(Vocab {
            token_to_id,
            id_to_token,
            min_freq: 0,
        })
    }

    /// FNV-1a over the id-ordered token list; pins vocab identity in
    /// checkpoints and manifests.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in &self.id_to_token {
            for b in t.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct TokenizedExample {
    pub token_ids: Vec<u32>,
    pub tokens: Vec<String>,
    pub label: u32,
}

impl TokenizedExample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub name: String,
    pub examples: Vec<TokenizedExample>,
}

/// Fully encoded corpus plus the settings that produced it.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocab,
    pub train: DatasetSplit,
    pub dev: DatasetSplit,
    pub test: DatasetSplit,
    pub classes: usize,
    pub max_len: usize,
    pub seed: u64,
    pub rejected: usize,
}

/// One padded minibatch; `lengths[i]` is the true length of row i.
#[derive(Debug, Clone)]
pub struct Batch {
    pub token_ids: Vec<Vec<u32>>,
    pub lengths: Vec<usize>,
    pub labels: Vec<u32>,
}

/// Parses `label<TAB>text` lines. Blank lines are skipped; anything else
/// malformed is an error naming the line.
pub fn load_tsv(path: &Path, classes: usize) -> Result<Vec<RawExample>, DataError> {
    let content = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label_str, text) = line.split_once('\t').ok_or(DataError::MalformedLine {
            path: path.display().to_string(),
            line: idx + 1,
        })?;
        let label: i64 = label_str
            .trim()
            .parse()
            .map_err(|_| DataError::MalformedLine {
                path: path.display().to_string(),
                line: idx + 1,
            })?;
        if label < 0 || label as usize >= classes {
            return Err(DataError::LabelOutOfRange {
                path: path.display().to_string(),
                line: idx + 1,
                label,
                classes,
            });
        }
        out.push(RawExample {
            label: label as u32,
            text: text.to_string(),
        });
    }
    if out.is_empty() {
        return Err(DataError::NoExamples {
            path: path.display().to_string(),
        });
    }
    Ok(out)
}

fn is_strippable_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (c.is_alphanumeric() == false && !c.is_whitespace() && c != '\'')
}

/// Lowercases, splits on whitespace, and peels leading/trailing punctuation
/// of each piece into tokens of their own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for piece in text.to_lowercase().split_whitespace() {
        let chars: Vec<char> = piece.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        let mut leading = Vec::new();
        let mut trailing = Vec::new();
        while start < end && is_strippable_punct(chars[start]) {
            leading.push(chars[start].to_string());
            start += 1;
        }
        while end > start && is_strippable_punct(chars[end - 1]) {
            trailing.push(chars[end - 1].to_string());
            end -= 1;
        }
        out.extend(leading);
        if start < end {
            out.push(chars[start..end].iter().collect());
        }
        trailing.reverse();
        out.extend(trailing);
    }
    out
}

/// Builds the vocabulary from the train split only. Tokens at or above
/// `min_freq` get ids ordered by (frequency desc, token asc).
pub fn build_vocab(train: &[RawExample], min_freq: u32) -> Vocab {
    let mut counts: HashMap<String, u32> = HashMap::new();
    for ex in train {
        for tok in tokenize(&ex.text) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(String, u32)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_freq)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut id_to_token = vec!["<pad>".to_string(), "<unk>".to_string()];
    id_to_token.extend(kept.into_iter().map(|(t, _)| t));
    let token_to_id = id_to_token
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();
    Vocab {
        token_to_id,
        id_to_token,
        min_freq,
    }
}

/// Encodes one example, truncating to the first `max_len` tokens.
/// Returns None for examples that tokenize to nothing.
pub fn encode(example: &RawExample, vocab: &Vocab, max_len: usize) -> Option<TokenizedExample> {
    let mut tokens = tokenize(&example.text);
    if tokens.is_empty() {
        return None;
    }
    tokens.truncate(max_len);
    let token_ids = tokens.iter().map(|t| vocab.id(t)).collect();
    Some(TokenizedExample {
        token_ids,
        tokens,
        label: example.label,
    })
}

fn encode_split(
    name: &str,
    raw: &[RawExample],
    vocab: &Vocab,
    max_len: usize,
    rejected: &mut usize,
) -> DatasetSplit {
    let examples = raw
        .iter()
        .filter_map(|ex| {
            let enc = encode(ex, vocab, max_len);
            if enc.is_none() {
                *rejected += 1;
            }
            enc
        })
        .collect();
    DatasetSplit {
        name: name.to_string(),
        examples,
    }
}

/// Full ingestion: vocabulary from train, all three splits encoded.
pub fn ingest(
    train: &[RawExample],
    dev: &[RawExample],
    test: &[RawExample],
    classes: usize,
    min_freq: u32,
    max_len: usize,
    seed: u64,
) -> Dataset {
    let vocab = build_vocab(train, min_freq);
    let mut rejected = 0;
    Dataset {
        train: encode_split("train", train, &vocab, max_len, &mut rejected),
        dev: encode_split("dev", dev, &vocab, max_len, &mut rejected),
        test: encode_split("test", test, &vocab, max_len, &mut rejected),
        vocab,
        classes,
        max_len,
        seed,
        rejected,
    }
}

/// Seeded carve-out of a dev set from a train file (e.g. the IMDB 20k/5k
/// split, where no official dev set exists).
pub fn carve_dev(
    mut train: Vec<RawExample>,
    dev_fraction: f64,
    seed: u64,
) -> (Vec<RawExample>, Vec<RawExample>) {
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = stream_rng(seed, "dev-carve");
    order.shuffle(&mut rng);
    let n_dev = ((train.len() as f64) * dev_fraction).round() as usize;
    let dev_idx: std::collections::HashSet<usize> = order.into_iter().take(n_dev).collect();
    let mut dev = Vec::with_capacity(n_dev);
    let mut rest = Vec::with_capacity(train.len() - n_dev);
    for (i, ex) in train.drain(..).enumerate() {
        if dev_idx.contains(&i) {
            dev.push(ex);
        } else {
            rest.push(ex);
        }
    }
    (rest, dev)
}

/// Deterministic shuffle + right padding to the longest example per batch.
pub fn make_batches(split: &DatasetSplit, batch_size: usize, seed: u64) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..split.examples.len()).collect();
    let mut rng = stream_rng(seed, "batch-shuffle");
    order.shuffle(&mut rng);

    order
        .chunks(batch_size)
        .map(|chunk| {
            let max_t = chunk
                .iter()
                .map(|&i| split.examples[i].len())
                .max()
                .unwrap_or(0);
            let mut token_ids = Vec::with_capacity(chunk.len());
            let mut lengths = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let ex = &split.examples[i];
                let mut ids = ex.token_ids.clone();
                ids.resize(max_t, PAD_ID);
                token_ids.push(ids);
                lengths.push(ex.len());
                labels.push(ex.label);
            }
            Batch {
                token_ids,
                lengths,
                labels,
            }
        })
        .collect()
}

// --- dataset cache -------------------------------------------------------

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String, DataError> {
    let len = read_u32(r).map_err(|e| DataError::BadCache(e.to_string()))? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| DataError::BadCache(e.to_string()))?;
    String::from_utf8(buf).map_err(|e| DataError::BadCache(e.to_string()))
}

impl Dataset {
    pub fn save_cache(&self, path: &Path) -> Result<(), DataError> {
        let file = std::fs::File::create(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut w = std::io::BufWriter::new(file);
        let io_err = |source: std::io::Error| DataError::Io {
            path: path.display().to_string(),
            source,
        };
        w.write_all(CACHE_MAGIC).map_err(io_err)?;
        write_u64(&mut w, self.seed).map_err(io_err)?;
        write_u32(&mut w, self.classes as u32).map_err(io_err)?;
        write_u32(&mut w, self.max_len as u32).map_err(io_err)?;
        write_u32(&mut w, self.vocab.min_freq).map_err(io_err)?;
        write_u32(&mut w, self.rejected as u32).map_err(io_err)?;
        write_u32(&mut w, self.vocab.len() as u32).map_err(io_err)?;
        for t in &self.vocab.id_to_token {
            write_str(&mut w, t).map_err(io_err)?;
        }
        for split in [&self.train, &self.dev, &self.test] {
            write_u32(&mut w, split.examples.len() as u32).map_err(io_err)?;
            for ex in &split.examples {
                write_u32(&mut w, ex.label).map_err(io_err)?;
                write_u32(&mut w, ex.len() as u32).map_err(io_err)?;
                for &id in &ex.token_ids {
                    write_u32(&mut w, id).map_err(io_err)?;
                }
                for t in &ex.tokens {
                    write_str(&mut w, t).map_err(io_err)?;
                }
            }
        }
        Ok(())
    }

    pub fn load_cache(path: &Path) -> Result<Dataset, DataError> {
        let file = std::fs::File::open(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut r = std::io::BufReader::new(file);
        let bad = |e: std::io::Error| DataError::BadCache(e.to_string());

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != CACHE_MAGIC {
            return Err(DataError::BadCache("wrong magic bytes".into()));
        }
        let seed = read_u64(&mut r).map_err(bad)?;
        let classes = read_u32(&mut r).map_err(bad)? as usize;
        let max_len = read_u32(&mut r).map_err(bad)? as usize;
        let min_freq = read_u32(&mut r).map_err(bad)?;
        let rejected = read_u32(&mut r).map_err(bad)? as usize;
        let vocab_len = read_u32(&mut r).map_err(bad)? as usize;
        let mut id_to_token = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            id_to_token.push(read_str(&mut r)?);
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let vocab = Vocab {
            token_to_id,
            id_to_token,
            min_freq,
        };
        let mut splits = Vec::new();
        for name in ["train", "dev", "test"] {
            let n = read_u32(&mut r).map_err(bad)? as usize;
            let mut examples = Vec::with_capacity(n);
            for _ in 0..n {
                let label = read_u32(&mut r).map_err(bad)?;
                let t = read_u32(&mut r).map_err(bad)? as usize;
                let mut token_ids = Vec::with_capacity(t);
                for _ in 0..t {
                    token_ids.push(read_u32(&mut r).map_err(bad)?);
                }
                let mut tokens = Vec::with_capacity(t);
                for _ in 0..t {
                    tokens.push(read_str(&mut r)?);
                }
                examples.push(TokenizedExample {
                    token_ids,
                    tokens,
                    label,
                });
            }
            splits.push(DatasetSplit {
                name: name.to_string(),
                examples,
            });
        }
        let test = splits.pop().unwrap();
        let dev = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Ok(Dataset {
            vocab,
            train,
            dev,
            test,
            classes,
            max_len,
            seed,
            rejected,
        })
    }

    /// Human-readable ingestion summary.
    pub fn manifest(&self) -> String {
        format!(
            "splits: train={} dev={} test={}\nvocab_size={}\nclasses={}\nmax_len={}\nmin_freq={}\nseed={}\nrejected={}\nvocab_hash={:016x}\n",
            self.train.examples.len(),
            self.dev.examples.len(),
            self.test.examples.len(),
            self.vocab.len(),
            self.classes,
            self.max_len,
            self.vocab.min_freq,
            self.seed,
            self.rejected,
            self.vocab.hash()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize("Preposterous and tedious,"),
            vec!["preposterous", "and", "tedious", ","]
        );
        assert_eq!(tokenize("A"), vec!["a"]);
        assert!(tokenize("  ").is_empty());
        assert_eq!(tokenize("(film)."), vec!["(", "film", ")", "."]);
    }

    #[test]
    fn load_tsv_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ok.tsv");
        std::fs::write(&p, "1\tgreat film\n0\tawful\n").unwrap();
        let ex = load_tsv(&p, 2).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].label, 1);
        assert_eq!(ex[0].text, "great film");

        let empty = dir.path().join("empty.tsv");
        std::fs::write(&empty, "").unwrap();
        assert!(matches!(
            load_tsv(&empty, 2),
            Err(DataError::NoExamples { .. })
        ));

        let bad = dir.path().join("bad.tsv");
        std::fs::write(&bad, "2\tok\n").unwrap();
        assert!(matches!(
            load_tsv(&bad, 2),
            Err(DataError::LabelOutOfRange { line: 1, .. })
        ));

        let notab = dir.path().join("notab.tsv");
        std::fs::write(&notab, "1 no tab here\n").unwrap();
        assert!(matches!(
            load_tsv(&notab, 2),
            Err(DataError::MalformedLine { line: 1, .. })
        ));
    }

    #[test]
    fn vocab_rules() {
        let train = vec![RawExample {
            label: 0,
            text: "a a b".into(),
        }];
        let v = build_vocab(&train, 2);
        assert!(v.token_to_id.contains_key("a"));
        assert!(!v.token_to_id.contains_key("b"));

        let v = build_vocab(
            &[RawExample {
                label: 0,
                text: "x".into(),
            }],
            1,
        );
        assert_eq!(v.id_to_token, vec!["<pad>", "<unk>", "x"]);

        // tie at equal frequency: lexicographically smaller gets smaller id
        let train = vec![RawExample {
            label: 0,
            text: "zeta apple zeta apple zeta apple".into(),
        }];
        let v = build_vocab(&train, 1);
        assert!(v.id("apple") < v.id("zeta"));
    }

    #[test]
    fn encode_rules() {
        let v = build_vocab(
            &[RawExample {
                label: 0,
                text: "great film great film".into(),
            }],
            1,
        );
        let e = encode(
            &RawExample {
                label: 1,
                text: "great film".into(),
            },
            &v,
            64,
        )
        .unwrap();
        assert_eq!(e.len(), 2);

        let long_text = (0..300).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let e = encode(
            &RawExample {
                label: 0,
                text: long_text,
            },
            &v,
            256,
        )
        .unwrap();
        assert_eq!(e.len(), 256);
        assert_eq!(e.tokens[0], "w0");

        let e = encode(
            &RawExample {
                label: 0,
                text: "zzz_oov".into(),
            },
            &v,
            64,
        )
        .unwrap();
        assert_eq!(e.token_ids[0], UNK_ID);

        assert!(encode(
            &RawExample {
                label: 0,
                text: "   ".into()
            },
            &v,
            64
        )
        .is_none());
    }

    fn toy_split(n: usize) -> DatasetSplit {
        let examples = (0..n)
            .map(|i| TokenizedExample {
                token_ids: vec![2; i % 4 + 1],
                tokens: vec!["t".into(); i % 4 + 1],
                label: (i % 2) as u32,
            })
            .collect();
        DatasetSplit {
            name: "train".into(),
            examples,
        }
    }

    #[test]
    fn batching_rules() {
        let split = toy_split(5);
        let batches = make_batches(&split, 2, 7);
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[0].labels.len(), 2);
        assert_eq!(batches[2].labels.len(), 1);

        let again = make_batches(&split, 2, 7);
        for (a, b) in batches.iter().zip(&again) {
            assert_eq!(a.token_ids, b.token_ids);
            assert_eq!(a.labels, b.labels);
        }

        // padding to batch max with true lengths preserved
        for b in &batches {
            let w = b.token_ids[0].len();
            for (row, &len) in b.token_ids.iter().zip(&b.lengths) {
                assert_eq!(row.len(), w);
                assert!(len <= w);
                assert!(row[len..].iter().all(|&id| id == PAD_ID));
            }
        }
    }

    #[test]
    fn cache_round_trip() {
        let train = vec![
            RawExample {
                label: 1,
                text: "great great film".into(),
            },
            RawExample {
                label: 0,
                text: "awful awful film".into(),
            },
        ];
        let ds = ingest(&train, &train, &train, 2, 1, 16, 42);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.bin");
        ds.save_cache(&p).unwrap();
        let back = Dataset::load_cache(&p).unwrap();
        assert_eq!(back.vocab.id_to_token, ds.vocab.id_to_token);
        assert_eq!(back.train.examples.len(), 2);
        assert_eq!(back.train.examples[0].tokens, ds.train.examples[0].tokens);
        assert_eq!(back.seed, 42);

        // byte-identical re-save
        let p2 = dir.path().join("ds2.bin");
        back.save_cache(&p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn ingest_deterministic() {
        let train = vec![
            RawExample {
                label: 1,
                text: "the film was great".into(),
            },
            RawExample {
                label: 0,
                text: "the film was bad".into(),
            },
        ];
        let a = ingest(&train, &train, &train, 2, 1, 8, 3);
        let b = ingest(&train, &train, &train, 2, 1, 8, 3);
        assert_eq!(a.vocab.id_to_token, b.vocab.id_to_token);
        for (x, y) in a.train.examples.iter().zip(&b.train.examples) {
            assert_eq!(x.token_ids, y.token_ids);
        }
    }

    #[test]
    fn tsv_writer_helper_works_with_loader() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tsv");
        let mut f = std::fs::File::create(&p).unwrap();
        writeln!(f, "0\tsome text").unwrap();
        writeln!(f, "1\tmore text").unwrap();
        drop(f);
        assert_eq!(load_tsv(&p, 2).unwrap().len(), 2);
    }
}
