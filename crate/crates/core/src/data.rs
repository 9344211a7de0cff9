//! Corpus ingestion, tokenization, vocabulary, batching, and pretrained
//! word-embedding loading.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::Deserialize;

use crate::model::Example;
use crate::{Error, Result};

/// Reserved token ids, fixed across every vocabulary.
pub mod special {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const SOS: usize = 2;
    pub const EOS: usize = 3;
    pub const CLS: usize = 4;
    /// Separator between flattened multi-turn context utterances.
    pub const SEP: usize = 5;
    pub const RESERVED: usize = 6;

    pub const NAMES: [&str; RESERVED] = ["<pad>", "<unk>", "<sos>", "<eos>", "<cls>", "<sep>"];
}

// ── Tokenization ─────────────────────────────────────────────────────

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\''
}

/// Lowercase, split on whitespace, then split punctuation into its own
/// tokens (apostrophes stay inside words, so "don't" is one token).
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.to_lowercase().chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if is_word_char(c) {
            current.push(c);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(c.to_string());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

// ── Vocabulary ───────────────────────────────────────────────────────

/// Token to id map with the reserved block in front. Unknown tokens map
/// to UNK on lookup.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Vocabulary {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            index.insert(t.clone(), i);
        }
        Vocabulary { tokens, index }
    }

    /// Builds from token streams: frequency >= min_freq, ordered by
    /// (-frequency, token) so two builds of one corpus agree exactly.
    pub fn build<'a>(streams: impl Iterator<Item = &'a [String]>, min_freq: usize) -> Vocabulary {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for stream in streams {
            for token in stream {
                *counts.entry(token.as_str()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> =
            counts.into_iter().filter(|&(_, c)| c >= min_freq.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut tokens: Vec<String> = special::NAMES.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
        Vocabulary::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(special::UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Non-reserved tokens only, one per line; id = reserved block + line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens[special::RESERVED..] {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut tokens: Vec<String> = special::NAMES.iter().map(|s| s.to_string()).collect();
        for line in text.lines() {
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if tokens.iter().any(|existing| existing == t) {
                return Err(Error::Vocab(format!("duplicate token '{t}' in {}", path.display())));
            }
            tokens.push(t.to_string());
        }
        Ok(Vocabulary::from_tokens(tokens))
    }
}

// ── Corpus ───────────────────────────────────────────────────────────

/// One dialogue example: multi-turn context, response, optional meta label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialoguePair {
    pub context: Vec<Vec<String>>,
    pub response: Vec<String>,
    pub meta: Option<String>,
}

#[derive(Deserialize)]
struct RawPair {
    context: Vec<String>,
    response: String,
    #[serde(default)]
    meta: Option<String>,
}

/// Reads a JSON-lines corpus. Malformed lines are collected; more than 1%
/// of them is fatal, with their line numbers in the error.
pub fn load_corpus(path: &Path) -> Result<Vec<DialoguePair>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    let mut bad_lines: Vec<(usize, String)> = Vec::new();
    let mut total = 0usize;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match serde_json::from_str::<RawPair>(&line) {
            Ok(raw) => {
                let response = tokenize(&raw.response);
                if response.is_empty() {
                    bad_lines.push((lineno + 1, "empty response".to_string()));
                    continue;
                }
                pairs.push(DialoguePair {
                    context: raw.context.iter().map(|u| tokenize(u)).collect(),
                    response,
                    meta: raw.meta,
                });
            }
            Err(e) => bad_lines.push((lineno + 1, e.to_string())),
        }
    }

    if total == 0 {
        log::warn!("corpus {} is empty", path.display());
    }
    if !bad_lines.is_empty() && bad_lines.len() * 100 > total {
        let listing: Vec<String> =
            bad_lines.iter().map(|(n, msg)| format!("line {n}: {msg}")).collect();
        return Err(Error::corpus(
            path,
            format!("{} of {} lines malformed (>1%): {}", bad_lines.len(), total, listing.join("; ")),
        ));
    }
    for (n, msg) in &bad_lines {
        log::warn!("corpus {}: skipped line {n}: {msg}", path.display());
    }
    Ok(pairs)
}

/// Distinct meta labels in sorted order; id = index into this list.
pub fn collect_meta_labels(pairs: &[DialoguePair]) -> Vec<String> {
    let mut labels: Vec<String> = pairs.iter().filter_map(|p| p.meta.clone()).collect();
    labels.sort();
    labels.dedup();
    labels
}

/// Iterator over every token stream in the corpus (for vocab building).
pub fn token_streams(pairs: &[DialoguePair]) -> impl Iterator<Item = &[String]> {
    pairs
        .iter()
        .flat_map(|p| p.context.iter().map(|u| u.as_slice()).chain(std::iter::once(p.response.as_slice())))
}

/// Counters from encoding a corpus (reported, never silent).
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct EncodeReport {
    pub truncated_contexts: usize,
    pub truncated_responses: usize,
}

/// Encodes pairs to id-space examples. Context turns are flattened with a
/// separator; overlong contexts are truncated from the left (oldest turns
/// dropped) to fit `max_len` minus the CLS slot, responses from the right
/// to fit minus the SOS/EOS slot.
pub fn encode_pairs(
    pairs: &[DialoguePair],
    vocab: &Vocabulary,
    meta_labels: &[String],
    max_len: usize,
) -> (Vec<Example>, EncodeReport) {
    let meta_index: HashMap<&str, usize> =
        meta_labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut report = EncodeReport::default();
    let budget = max_len - 1;

    let examples = pairs
        .iter()
        .map(|pair| {
            let mut context: Vec<usize> = Vec::new();
            for (i, turn) in pair.context.iter().enumerate() {
                if i > 0 {
                    context.push(special::SEP);
                }
                context.extend(vocab.encode(turn));
            }
            if context.len() > budget {
                context.drain(..context.len() - budget);
                report.truncated_contexts += 1;
            }
            let mut response = vocab.encode(&pair.response);
            if response.len() > budget {
                response.truncate(budget);
                report.truncated_responses += 1;
            }
            Example {
                context,
                response,
                meta: pair.meta.as_deref().and_then(|l| meta_index.get(l).copied()),
            }
        })
        .collect();
    (examples, report)
}

// ── Batching ─────────────────────────────────────────────────────────

/// Padded id matrices plus the unpadded examples they were built from.
#[derive(Debug, Clone)]
pub struct Batch {
    /// [B x Lc] context ids, PAD-filled.
    pub context: Vec<Vec<usize>>,
    /// [B x Lc] true where the id is a real token.
    pub context_mask: Vec<Vec<bool>>,
    /// [B x Lr] SOS-prefixed decoder inputs.
    pub response_in: Vec<Vec<usize>>,
    /// [B x Lr] EOS-suffixed targets, aligned one-step-ahead of response_in.
    pub response_out: Vec<Vec<usize>>,
    /// [B x Lr] true where response_out holds a real target.
    pub response_mask: Vec<Vec<bool>>,
    pub meta: Vec<Option<usize>>,
    pub examples: Vec<Example>,
}

fn pad_to(ids: &[usize], len: usize) -> (Vec<usize>, Vec<bool>) {
    let mut row = ids.to_vec();
    let mut mask = vec![true; ids.len()];
    row.resize(len, special::PAD);
    mask.resize(len, false);
    (row, mask)
}

/// Groups examples into batches after a stable sort by (response length,
/// context length) so padding inside each batch stays small.
pub fn batchify(examples: &[Example], batch_size: usize) -> Vec<Batch> {
    assert!(batch_size > 0, "batchify: batch_size must be positive");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| (examples[i].response.len(), examples[i].context.len(), i));

    order
        .chunks(batch_size)
        .map(|chunk| {
            let members: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let lc = members.iter().map(|e| e.context.len()).max().unwrap();
            let lr = members.iter().map(|e| e.response.len() + 1).max().unwrap();
            let mut batch = Batch {
                context: Vec::new(),
                context_mask: Vec::new(),
                response_in: Vec::new(),
                response_out: Vec::new(),
                response_mask: Vec::new(),
                meta: Vec::new(),
                examples: members.iter().map(|e| (*e).clone()).collect(),
            };
            for e in members {
                let (ctx, ctx_mask) = pad_to(&e.context, lc);
                let (rin, _) = pad_to(&crate::model::decoder_input_ids(&e.response), lr);
                let (rout, rmask) = pad_to(&crate::model::target_ids(&e.response), lr);
                batch.context.push(ctx);
                batch.context_mask.push(ctx_mask);
                batch.response_in.push(rin);
                batch.response_out.push(rout);
                batch.response_mask.push(rmask);
                batch.meta.push(e.meta);
            }
            batch
        })
        .collect()
}

// ── Embeddings ───────────────────────────────────────────────────────

/// Result of loading pretrained word vectors against a vocabulary.
pub struct LoadedEmbeddings {
    /// Row-major [vocab x dim].
    pub matrix: Vec<f64>,
    pub dim: usize,
    /// Vocab tokens absent from the file (random-initialized rows).
    pub misses: usize,
    /// Token ids that were found in the file.
    pub hits: Vec<bool>,
}

/// Reads GloVe-style text vectors ("token v1 v2 ... vD"). In-vocab tokens
/// copy their file rows bit-exactly; missing tokens (and the reserved
/// block) draw N(0, 0.02^2) rows from the embedding-init stream of `seed`.
pub fn load_embeddings(path: &Path, vocab: &Vocabulary, dim: usize, seed: u64) -> Result<LoadedEmbeddings> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut by_token: HashMap<String, Vec<f64>> = HashMap::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap().to_string();
        let values: std::result::Result<Vec<f64>, _> = parts.map(|p| p.parse::<f64>()).collect();
        let values = values.map_err(|e| Error::Embeddings {
            path: path.to_path_buf(),
            message: format!("line {}: bad number: {e}", lineno + 1),
        })?;
        if values.len() != dim {
            return Err(Error::Embeddings {
                path: path.to_path_buf(),
                message: format!(
                    "line {}: token '{token}' has {} dims, expected {dim}",
                    lineno + 1,
                    values.len()
                ),
            });
        }
        by_token.insert(token, values);
    }

    let v = vocab.len();
    let mut matrix = vec![0.0; v * dim];
    let mut hits = vec![false; v];
    let mut misses = 0usize;
    let mut rng = crate::rng::rng_for(seed, crate::rng::Stream::EmbeddingInit, 0);
    for id in 0..v {
        let slot = &mut matrix[id * dim..(id + 1) * dim];
        match (id >= special::RESERVED).then(|| by_token.get(vocab.token(id))).flatten() {
            Some(row) => {
                slot.copy_from_slice(row);
                hits[id] = true;
            }
            None => {
                // Reserved rows count as misses only if they are real words,
                // which they are not; still draw rows in id order so the
                // result is independent of file ordering.
                let row = crate::rng::standard_normal(&mut rng, dim);
                for (s, r) in slot.iter_mut().zip(row) {
                    *s = r * 0.02;
                }
                if id >= special::RESERVED {
                    misses += 1;
                }
            }
        }
    }
    Ok(LoadedEmbeddings { matrix, dim, misses, hits })
}

/// Writes a corpus back to JSON-lines (used by fixture tooling and tests).
pub fn save_corpus(path: &Path, pairs: &[DialoguePair]) -> Result<()> {
    let mut out = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for p in pairs {
        let record = serde_json::json!({
            "context": p.context.iter().map(|u| detokenize(u)).collect::<Vec<_>>(),
            "response": detokenize(&p.response),
            "meta": p.meta,
        });
        writeln!(out, "{record}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f.flush().unwrap();
        f
    }

    #[test]
    fn tokenize_lowercases_and_splits_punctuation() {
        assert_eq!(tokenize("Hello, world!"), vec!["hello", ",", "world", "!"]);
        assert_eq!(tokenize("don't stop"), vec!["don't", "stop"]);
        assert_eq!(tokenize("  a\tb\nc "), vec!["a", "b", "c"]);
    }

    #[test]
    fn detokenize_round_trips_normalized_text() {
        let s = "i don't know , sorry !";
        assert_eq!(detokenize(&tokenize(s)), s);
    }

    #[test]
    fn vocab_orders_by_frequency_then_token() {
        let a = tokenize("b a a c c");
        let vocab = Vocabulary::build(std::iter::once(a.as_slice()), 1);
        // a and c both occur twice: alphabetical breaks the tie; b is last.
        assert_eq!(vocab.id("a"), special::RESERVED);
        assert_eq!(vocab.id("c"), special::RESERVED + 1);
        assert_eq!(vocab.id("b"), special::RESERVED + 2);
        assert_eq!(vocab.len(), special::RESERVED + 3);
    }

    #[test]
    fn vocab_min_freq_drops_rare_tokens_to_unk() {
        let stream = tokenize("a a b");
        let vocab = Vocabulary::build(std::iter::once(stream.as_slice()), 2);
        assert!(vocab.contains("a"));
        assert!(!vocab.contains("b"));
        assert_eq!(vocab.id("b"), special::UNK);
    }

    #[test]
    fn vocab_builds_are_deterministic() {
        let streams: Vec<Vec<String>> =
            vec![tokenize("x y z z"), tokenize("y x w q q q")];
        let build = || {
            let v = Vocabulary::build(streams.iter().map(|s| s.as_slice()), 1);
            (0..v.len()).map(|i| v.token(i).to_string()).collect::<Vec<_>>()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn vocab_save_load_round_trip() {
        let stream = tokenize("alpha beta beta gamma");
        let vocab = Vocabulary::build(std::iter::once(stream.as_slice()), 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        vocab.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded.len(), vocab.len());
        for i in 0..vocab.len() {
            assert_eq!(loaded.token(i), vocab.token(i));
        }
    }

    #[test]
    fn corpus_fixture_loads_in_order() {
        let f = write_lines(&[
            r#"{"context": ["How are you?"], "response": "Fine, thanks.", "meta": "joy"}"#,
            r#"{"context": ["Hi there", "hello"], "response": "hey"}"#,
            r#"{"context": [], "response": "ok then"}"#,
        ]);
        let pairs = load_corpus(f.path()).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[0].response, tokenize("fine , thanks ."));
        assert_eq!(pairs[0].meta.as_deref(), Some("joy"));
        assert_eq!(pairs[1].context.len(), 2);
        assert_eq!(pairs[1].meta, None);
        assert_eq!(pairs[2].response, tokenize("ok then"));
    }

    #[test]
    fn corpus_with_malformed_lines_is_fatal_with_line_numbers() {
        let f = write_lines(&[
            r#"{"context": [], "response": "good line"}"#,
            r#"{"context": [], "broken"#,
        ]);
        let err = load_corpus(f.path()).unwrap_err().to_string();
        assert!(err.contains("line 2"), "error did not cite the line: {err}");
    }

    #[test]
    fn empty_corpus_is_allowed() {
        let f = write_lines(&[]);
        assert!(load_corpus(f.path()).unwrap().is_empty());
    }

    #[test]
    fn context_flattening_and_truncation() {
        let pairs = vec![DialoguePair {
            context: vec![tokenize("a b"), tokenize("c d e")],
            response: tokenize("x y"),
            meta: None,
        }];
        let streams: Vec<Vec<String>> = vec![tokenize("a b c d e x y")];
        let vocab = Vocabulary::build(streams.iter().map(|s| s.as_slice()), 1);

        // Generous budget: [a b <sep> c d e].
        let (examples, report) = encode_pairs(&pairs, &vocab, &[], 16);
        assert_eq!(examples[0].context.len(), 6);
        assert_eq!(examples[0].context[2], special::SEP);
        assert_eq!(report.truncated_contexts, 0);

        // Budget 4 (max_len 5 minus CLS): oldest tokens dropped, so the
        // survivors are [<sep> c d e].
        let (examples, report) = encode_pairs(&pairs, &vocab, &[], 5);
        let mut expected = vec![special::SEP];
        expected.extend(vocab.encode(&tokenize("c d e")));
        assert_eq!(examples[0].context, expected);
        assert_eq!(report.truncated_contexts, 1);
    }

    #[test]
    fn batchify_pads_and_masks_consistently() {
        let ex = |ctx: &[usize], resp: &[usize]| Example {
            context: ctx.to_vec(),
            response: resp.to_vec(),
            meta: None,
        };
        let examples = vec![ex(&[10, 11, 12], &[20, 21, 22, 23]), ex(&[10], &[20, 21])];
        let batches = batchify(&examples, 2);
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        // Sorted by response length: the 2-token response comes first.
        assert_eq!(b.response_out[0], vec![20, 21, special::EOS, special::PAD, special::PAD]);
        assert_eq!(b.response_in[0], vec![special::SOS, 20, 21, special::PAD, special::PAD]);
        assert_eq!(b.response_mask[0], vec![true, true, true, false, false]);
        assert_eq!(b.response_out[1], vec![20, 21, 22, 23, special::EOS]);
        // Mask=keep exactly where id != PAD.
        for (row, mask) in b.context.iter().zip(&b.context_mask) {
            for (id, keep) in row.iter().zip(mask) {
                assert_eq!(*keep, *id != special::PAD);
            }
        }
    }

    #[test]
    fn batchify_conserves_response_tokens() {
        let mk = |n: usize| Example {
            context: vec![7],
            response: (0..n).map(|i| 10 + i).collect(),
            meta: None,
        };
        let examples: Vec<Example> = (1..=7).map(mk).collect();
        let batches = batchify(&examples, 3);
        let total: usize = batches
            .iter()
            .flat_map(|b| b.response_mask.iter())
            .map(|m| m.iter().filter(|&&k| k).count())
            .sum();
        let expected: usize = (1..=7).map(|n| n + 1).sum();
        assert_eq!(total, expected);
    }

    #[test]
    fn embeddings_copy_file_rows_exactly_and_count_misses() {
        let stream = tokenize("alpha beta gamma");
        let vocab = Vocabulary::build(std::iter::once(stream.as_slice()), 1);
        let f = write_lines(&["alpha 0.125 -3.5 7.0", "beta 1.0 2.0 3.0", "ignored 9 9 9"]);
        let loaded = load_embeddings(f.path(), &vocab, 3, 77).unwrap();
        let a = vocab.id("alpha");
        assert_eq!(&loaded.matrix[a * 3..a * 3 + 3], &[0.125, -3.5, 7.0]);
        let b = vocab.id("beta");
        assert_eq!(&loaded.matrix[b * 3..b * 3 + 3], &[1.0, 2.0, 3.0]);
        assert_eq!(loaded.misses, 1); // gamma
        assert!(!loaded.hits[vocab.id("gamma")]);
    }

    #[test]
    fn embeddings_with_wrong_width_are_fatal() {
        let stream = tokenize("alpha");
        let vocab = Vocabulary::build(std::iter::once(stream.as_slice()), 1);
        let f = write_lines(&["alpha 1.0 2.0"]);
        assert!(load_embeddings(f.path(), &vocab, 3, 0).is_err());
    }

    #[test]
    fn embeddings_misses_are_seed_deterministic() {
        let stream = tokenize("alpha beta");
        let vocab = Vocabulary::build(std::iter::once(stream.as_slice()), 1);
        let f = write_lines(&["alpha 1.0 2.0 3.0"]);
        let a = load_embeddings(f.path(), &vocab, 3, 5).unwrap();
        let b = load_embeddings(f.path(), &vocab, 3, 5).unwrap();
        assert_eq!(a.matrix, b.matrix);
    }

    #[test]
    fn meta_labels_are_sorted_and_deduped() {
        let mk = |meta: Option<&str>| DialoguePair {
            context: vec![],
            response: tokenize("ok"),
            meta: meta.map(|s| s.to_string()),
        };
        let pairs = vec![mk(Some("joy")), mk(None), mk(Some("anger")), mk(Some("joy"))];
        assert_eq!(collect_meta_labels(&pairs), vec!["anger".to_string(), "joy".to_string()]);
    }
}
