//! Automatic metrics over a trained model: teacher-forced perplexity,
//! posterior/prior KL divergence, distinct n-gram ratios pooled over the
//! generated responses, and cosine similarity of averaged word embeddings,
//! plus assembly of the report and generations artifacts.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{detokenize, special, LoadedEmbeddings, Vocabulary};
use crate::model::{AnyModel, Example, LatentSource, Variant};
use crate::rng::{derive_seed, Stream};
use crate::tensor::{ParamStore, Real, Tape};
use crate::{Error, Result};

// ── Word vectors ─────────────────────────────────────────────────────

/// Maps token ids to dense vectors. Implemented by pretrained file rows and
/// by the model's own token table, so similarity is pluggable.
pub trait WordVectors {
    fn dim(&self) -> usize;
    fn row(&self, id: usize) -> &[f64];
}

impl WordVectors for LoadedEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn row(&self, id: usize) -> &[f64] {
        &self.matrix[id * self.dim..(id + 1) * self.dim]
    }
}

/// Plain row-major matrix vectors.
pub struct DenseVectors {
    pub matrix: Vec<f64>,
    pub dim: usize,
}

impl DenseVectors {
    /// Snapshots the model's learned token embedding table.
    pub fn from_token_table<T: Real>(store: &ParamStore<T>) -> DenseVectors {
        let id = store
            .lookup("embeddings.token")
            .expect("word vectors: store has no embeddings.token");
        let p = store.get(id);
        DenseVectors {
            matrix: p.data.iter().map(|v| v.into_f64()).collect(),
            dim: p.shape[1],
        }
    }
}

impl WordVectors for DenseVectors {
    fn dim(&self) -> usize {
        self.dim
    }

    fn row(&self, id: usize) -> &[f64] {
        &self.matrix[id * self.dim..(id + 1) * self.dim]
    }
}

// ── Metrics ──────────────────────────────────────────────────────────

fn ppl_from(nll_sum: f64, tokens: usize) -> f64 {
    (nll_sum / tokens as f64).exp()
}

/// Corpus perplexity: exp of the summed teacher-forced NLL over the summed
/// target-token count. Variational models use the posterior mean latent, so
/// this is reconstruction perplexity.
pub fn perplexity<T: Real>(model: &AnyModel, store: &ParamStore<T>, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Eval("perplexity over an empty corpus".into()));
    }
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for ex in data {
        let tape = Tape::new();
        let terms = model.loss(&tape, store, ex, 1.0, None);
        nll += terms.rec;
        tokens += terms.target_tokens;
    }
    Ok(ppl_from(nll, tokens))
}

/// Mean over examples of KL(posterior ‖ prior), unannealed. Zero for the
/// baseline, which has no latent.
pub fn corpus_kld<T: Real>(model: &AnyModel, store: &ParamStore<T>, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Eval("kld over an empty corpus".into()));
    }
    let sum: f64 = data.iter().map(|ex| model.example_kl(store, ex)).sum();
    Ok(sum / data.len() as f64)
}

/// |unique n-grams| / |total n-grams| pooled over all sentences. Sentences
/// shorter than n contribute nothing; None when the pool is empty.
pub fn distinct_n(sentences: &[Vec<usize>], n: usize) -> Option<f64> {
    assert!((1..=3).contains(&n), "distinct_n: n must be 1, 2, or 3, got {n}");
    let mut total = 0usize;
    let mut unique: HashSet<&[usize]> = HashSet::new();
    for s in sentences {
        for gram in s.windows(n) {
            total += 1;
            unique.insert(gram);
        }
    }
    (total > 0).then(|| unique.len() as f64 / total as f64)
}

/// Mean vector over the word ids of a sentence. Reserved ids (PAD, UNK, and
/// the sequence markers) are not words and are dropped first.
fn mean_vector(ids: &[usize], vectors: &dyn WordVectors) -> Option<Vec<f64>> {
    let mut sum = vec![0.0; vectors.dim()];
    let mut count = 0usize;
    for &id in ids {
        if id < special::RESERVED {
            continue;
        }
        for (s, v) in sum.iter_mut().zip(vectors.row(id)) {
            *s += v;
        }
        count += 1;
    }
    (count > 0).then(|| {
        for s in &mut sum {
            *s /= count as f64;
        }
        sum
    })
}

/// Cosine similarity of the two sentences' mean word vectors. None when a
/// sentence has no word ids left after exclusions or a mean has zero norm.
pub fn embedding_similarity(a: &[usize], b: &[usize], vectors: &dyn WordVectors) -> Option<f64> {
    let ma = mean_vector(a, vectors)?;
    let mb = mean_vector(b, vectors)?;
    let dot: f64 = ma.iter().zip(&mb).map(|(x, y)| x * y).sum();
    let na = ma.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = mb.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| dot / (na * nb))
}

// ── Generations ──────────────────────────────────────────────────────

/// One decoded example, as written to the generations JSON-lines file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub context: String,
    pub reference: String,
    pub generated: String,
    pub meta: Option<String>,
}

pub fn save_generations(path: &Path, generations: &[Generation]) -> Result<()> {
    let mut out = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for g in generations {
        let line = serde_json::to_string(g).expect("generation serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn load_generations(path: &Path) -> Result<Vec<Generation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            serde_json::from_str(line)
                .map_err(|e| Error::Eval(format!("generations file line {}: {e}", n + 1)))
        })
        .collect()
}

/// Token ids of a saved generation string: whitespace split plus vocabulary
/// lookup. Exact inverse of the writer because tokens never contain spaces
/// and the reserved marker names are themselves in the vocabulary.
pub fn encode_generation(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    text.split_whitespace().map(|t| vocab.id(t)).collect()
}

/// The metrics recomputable from the generations file alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationMetrics {
    pub dist1: Option<f64>,
    pub dist2: Option<f64>,
    pub dist3: Option<f64>,
    pub emb_sim: Option<f64>,
}

/// Distinct-n over the pooled generations plus mean embedding similarity
/// over the pairs where it is defined.
pub fn generation_metrics(
    generated: &[Vec<usize>],
    references: &[Vec<usize>],
    vectors: &dyn WordVectors,
) -> GenerationMetrics {
    assert_eq!(
        generated.len(),
        references.len(),
        "generation_metrics: {} generations vs {} references",
        generated.len(),
        references.len()
    );
    let sims: Vec<f64> = generated
        .iter()
        .zip(references)
        .filter_map(|(g, r)| embedding_similarity(g, r, vectors))
        .collect();
    GenerationMetrics {
        dist1: distinct_n(generated, 1),
        dist2: distinct_n(generated, 2),
        dist3: distinct_n(generated, 3),
        emb_sim: (!sims.is_empty()).then(|| sims.iter().sum::<f64>() / sims.len() as f64),
    }
}

// ── Report ───────────────────────────────────────────────────────────

/// Corpus-level evaluation summary. Optional fields are genuinely undefined
/// in some runs (no latent, empty n-gram pool, no scorable pairs) and print
/// as the word `absent`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model: Variant,
    pub ppl: f64,
    pub kld: Option<f64>,
    pub dist1: Option<f64>,
    pub dist2: Option<f64>,
    pub dist3: Option<f64>,
    pub emb_sim: Option<f64>,
    pub n_examples: usize,
    pub seed: u64,
}

impl EvalReport {
    /// Flat key-value text. Float values print in shortest round-trip form,
    /// so identical runs produce byte-identical reports.
    pub fn to_text(&self) -> String {
        fn kv(v: Option<f64>) -> String {
            v.map_or_else(|| "absent".to_string(), |x| x.to_string())
        }
        format!(
            "model = {}\nppl = {}\nkld = {}\ndist1 = {}\ndist2 = {}\ndist3 = {}\nemb_sim = {}\nn_examples = {}\nseed = {}\n# ppl is reconstruction perplexity: teacher-forced with posterior-mean latents\n",
            self.model,
            self.ppl,
            kv(self.kld),
            kv(self.dist1),
            kv(self.dist2),
            kv(self.dist3),
            kv(self.emb_sim),
            self.n_examples,
            self.seed
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub struct EvalOutput {
    pub report: EvalReport,
    pub generations: Vec<Generation>,
}

/// Greedy-decodes every example and assembles all metrics. Variational
/// models sample the prior with a per-example seed derived from
/// `decode_seed`, so the whole evaluation is reproducible from one number.
pub fn evaluate<T: Real>(
    model: &AnyModel,
    store: &ParamStore<T>,
    data: &[Example],
    vocab: &Vocabulary,
    vectors: &dyn WordVectors,
    decode_seed: u64,
    max_new: usize,
) -> Result<EvalOutput> {
    if data.is_empty() {
        return Err(Error::Eval("evaluate over an empty corpus".into()));
    }
    let labels = &model.config().meta_labels;

    let mut generated_ids = Vec::with_capacity(data.len());
    let mut generations = Vec::with_capacity(data.len());
    for (i, ex) in data.iter().enumerate() {
        let source = LatentSource::PriorSample {
            seed: derive_seed(decode_seed, Stream::Decode, i as u64),
        };
        let out = model.decode_greedy(store, &ex.context, ex.meta, source, max_new);
        generations.push(Generation {
            context: detokenize(&vocab.decode(&ex.context)),
            reference: detokenize(&vocab.decode(&ex.response)),
            generated: detokenize(&vocab.decode(&out)),
            meta: ex.meta.map(|m| labels[m].clone()),
        });
        generated_ids.push(out);
    }

    let references: Vec<Vec<usize>> = data.iter().map(|ex| ex.response.clone()).collect();
    let gm = generation_metrics(&generated_ids, &references, vectors);
    let kld = match model.variant() {
        Variant::Baseline => None,
        Variant::Gvt | Variant::Svt => Some(corpus_kld(model, store, data)?),
    };
    Ok(EvalOutput {
        report: EvalReport {
            model: model.variant(),
            ppl: perplexity(model, store, data)?,
            kld,
            dist1: gm.dist1,
            dist2: gm.dist2,
            dist3: gm.dist3,
            emb_sim: gm.emb_sim,
            n_examples: data.len(),
            seed: decode_seed,
        },
        generations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{tiny_config, ModelConfig};

    fn w(i: usize) -> usize {
        special::RESERVED + i
    }

    fn tiny_model(variant: Variant) -> (ParamStore<f64>, AnyModel, ModelConfig) {
        let cfg = tiny_config(variant);
        let mut store = ParamStore::new();
        let model = AnyModel::build(&mut store, &cfg, 11);
        (store, model, cfg)
    }

    fn tiny_data() -> Vec<Example> {
        vec![
            Example { context: vec![w(0), w(1)], response: vec![w(2), w(3)], meta: Some(0) },
            Example { context: vec![w(4)], response: vec![w(5), w(6), w(7)], meta: None },
            Example { context: vec![w(1), w(8)], response: vec![w(9)], meta: Some(1) },
        ]
    }

    /// Vocabulary sized to the tiny config (6 reserved + 44 words).
    fn tiny_vocab() -> Vocabulary {
        let words: Vec<Vec<String>> = (0..44).map(|i| vec![format!("w{i:02}")]).collect();
        let vocab = Vocabulary::build(words.iter().map(|v| v.as_slice()), 1);
        assert_eq!(vocab.len(), 50, "fixture vocab size");
        vocab
    }

    #[test]
    fn ppl_combines_nll_sums() {
        // Two tokens with NLL ln 2 and ln 8: exp((ln2 + ln8) / 2) = 4.
        let got = ppl_from((2f64).ln() + (8f64).ln(), 2);
        assert!((got - 4.0).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn uniform_model_ppl_is_vocab_size() {
        let (mut store, model, cfg) = tiny_model(Variant::Baseline);
        for name in ["output_proj.w", "output_proj.b"] {
            let id = store.lookup(name).unwrap();
            store.get_mut(id).data.fill(0.0);
        }
        let ppl = perplexity(&model, &store, &tiny_data()).unwrap();
        assert!(
            (ppl - cfg.vocab_size as f64).abs() < 1e-9,
            "uniform ppl {ppl} should equal vocab size {}",
            cfg.vocab_size
        );
    }

    #[test]
    fn ppl_is_partition_invariant() {
        let (store, model, _) = tiny_model(Variant::Baseline);
        let data = tiny_data();
        let full = perplexity(&model, &store, &data).unwrap();

        // Recombine from per-chunk sums: same value regardless of the split.
        let mut nll = 0.0;
        let mut tokens = 0usize;
        for chunk in [&data[..1], &data[1..]] {
            for ex in chunk {
                let tape = Tape::new();
                let terms = model.loss(&tape, &store, ex, 1.0, None);
                nll += terms.rec;
                tokens += terms.target_tokens;
            }
        }
        assert!((full - ppl_from(nll, tokens)).abs() < 1e-12);
        assert!(perplexity(&model, &store, &[]).is_err(), "empty corpus must error");
    }

    #[test]
    fn corpus_kld_is_mean_of_example_terms_and_nonnegative() {
        let (store, model, _) = tiny_model(Variant::Gvt);
        let data = tiny_data();
        let got = corpus_kld(&model, &store, &data).unwrap();
        let expected: f64 =
            data.iter().map(|ex| model.example_kl(&store, ex)).sum::<f64>() / data.len() as f64;
        assert!((got - expected).abs() < 1e-12);
        assert!(got >= 0.0, "kld {got} must be nonnegative");

        let (store_b, baseline, _) = tiny_model(Variant::Baseline);
        assert_eq!(corpus_kld(&baseline, &store_b, &data).unwrap(), 0.0);
    }

    #[test]
    fn distinct_n_hand_oracles() {
        // "i am not sure i am": 6 unigrams, 4 distinct.
        let s = vec![vec![w(0), w(1), w(2), w(3), w(0), w(1)]];
        assert_eq!(distinct_n(&s, 1), Some(4.0 / 6.0));

        // "a a a": bigrams (a,a), (a,a) -> 1 distinct of 2.
        let aaa = vec![vec![w(7), w(7), w(7)]];
        assert_eq!(distinct_n(&aaa, 2), Some(0.5));

        // All unique -> 1.0.
        assert_eq!(distinct_n(&[vec![w(0), w(1), w(2)]], 1), Some(1.0));

        // Sentences shorter than n contribute nothing; empty pool is absent.
        assert_eq!(distinct_n(&[vec![w(0), w(1)]], 3), None);
        assert_eq!(distinct_n(&[], 1), None);
    }

    #[test]
    fn distinct_n_strictly_decreases_under_duplication() {
        let base = vec![vec![w(0), w(1), w(2), w(3), w(0), w(1)], vec![w(4), w(4)]];
        let mut doubled = base.clone();
        doubled.extend(base.clone());
        for n in 1..=2 {
            let before = distinct_n(&base, n).unwrap();
            let after = distinct_n(&doubled, n).unwrap();
            assert!(
                after < before,
                "dist-{n} must strictly decrease: {before} -> {after}"
            );
            assert!((after - before / 2.0).abs() < 1e-15, "denominator doubles exactly");
        }
    }

    /// 2-d fixture vectors: word i gets a hand-picked row.
    fn fixture_vectors() -> DenseVectors {
        let mut matrix = vec![0.0; 12 * 2];
        let set = |m: &mut Vec<f64>, id: usize, v: [f64; 2]| {
            m[id * 2] = v[0];
            m[id * 2 + 1] = v[1];
        };
        set(&mut matrix, w(0), [1.0, 0.0]);
        set(&mut matrix, w(1), [0.0, 1.0]);
        set(&mut matrix, w(2), [-1.0, 0.0]);
        // w(3) stays the zero vector.
        DenseVectors { matrix, dim: 2 }
    }

    #[test]
    fn embedding_similarity_hand_oracles() {
        let v = fixture_vectors();

        // Identical sentences -> 1.
        let s = vec![w(0), w(1)];
        let same = embedding_similarity(&s, &s, &v).unwrap();
        assert!((same - 1.0).abs() < 1e-12, "got {same}");

        // Orthogonal means -> 0.
        assert_eq!(embedding_similarity(&[w(0)], &[w(1)], &v), Some(0.0));

        // Hand-computed: mean([w0, w1]) = (0.5, 0.5) vs (1, 0) -> 1/sqrt(2).
        let got = embedding_similarity(&[w(0), w(1)], &[w(0)], &v).unwrap();
        assert!((got - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn embedding_similarity_exclusions_and_symmetry() {
        let v = fixture_vectors();

        // Non-word ids are dropped before averaging.
        let noisy = vec![special::UNK, special::PAD, w(0), special::EOS];
        let clean = vec![w(0)];
        let sim = embedding_similarity(&noisy, &clean, &v).unwrap();
        assert!((sim - 1.0).abs() < 1e-12);

        // Nothing left after exclusions, or a zero-norm mean -> absent.
        assert_eq!(embedding_similarity(&[special::UNK], &clean, &v), None);
        assert_eq!(embedding_similarity(&[w(3)], &clean, &v), None);

        let a = vec![w(0), w(1)];
        let b = vec![w(1), w(2)];
        assert_eq!(
            embedding_similarity(&a, &b, &v),
            embedding_similarity(&b, &a, &v),
            "cosine must be symmetric"
        );
    }

    #[test]
    fn baseline_report_has_absent_kld_and_same_seed_reproduces() {
        let (store, model, _) = tiny_model(Variant::Baseline);
        let data = tiny_data();
        let vocab = tiny_vocab();
        let vectors = DenseVectors::from_token_table(&store);

        let a = evaluate(&model, &store, &data, &vocab, &vectors, 5, 6).unwrap();
        let b = evaluate(&model, &store, &data, &vocab, &vectors, 5, 6).unwrap();
        assert_eq!(a.report.kld, None, "baseline has no latent");
        assert_eq!(a.report.n_examples, data.len());
        assert_eq!(a.report.to_text(), b.report.to_text(), "same seed, same bytes");
        assert_eq!(a.generations, b.generations);
        assert!(a.report.to_text().contains("kld = absent"));
        assert!(a.report.ppl.is_finite());
    }

    #[test]
    fn generation_metrics_recompute_from_saved_file() {
        let (store, model, _) = tiny_model(Variant::Gvt);
        let data = tiny_data();
        let vocab = tiny_vocab();
        let vectors = DenseVectors::from_token_table(&store);
        let out = evaluate(&model, &store, &data, &vocab, &vectors, 9, 6).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("generations.jsonl");
        save_generations(&path, &out.generations).unwrap();
        let loaded = load_generations(&path).unwrap();
        assert_eq!(loaded, out.generations);

        let gen_ids: Vec<Vec<usize>> =
            loaded.iter().map(|g| encode_generation(&g.generated, &vocab)).collect();
        let ref_ids: Vec<Vec<usize>> =
            loaded.iter().map(|g| encode_generation(&g.reference, &vocab)).collect();
        let gm = generation_metrics(&gen_ids, &ref_ids, &vectors);
        assert_eq!(gm.dist1, out.report.dist1);
        assert_eq!(gm.dist2, out.report.dist2);
        assert_eq!(gm.dist3, out.report.dist3);
        assert_eq!(gm.emb_sim, out.report.emb_sim);
    }

    #[test]
    fn evaluate_rejects_empty_corpus() {
        let (store, model, _) = tiny_model(Variant::Baseline);
        let vocab = tiny_vocab();
        let vectors = DenseVectors::from_token_table(&store);
        let err = match evaluate(&model, &store, &[], &vocab, &vectors, 0, 4) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("empty corpus must be an error"),
        };
        assert!(err.contains("empty"), "got: {err}");
    }
}
