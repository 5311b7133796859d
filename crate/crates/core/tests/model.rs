//! Trained count models on synthetic corpora, checked against independent
//! recomputation.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use simulstream::harness::{generate_synthetic, train_on, SyntheticConfig, SyntheticCorpus};
use simulstream::manifest::Split;
use simulstream::model::{
    greedy_decode_next, joint_async_loss, joint_sync_loss, language_loss, packet_code, prefix_nll, train_count_model,
    CountModelConfig, DecodeContext, PrefixModel, TokenId, Variant, Vocabulary, EOS,
};
use simulstream::policy::g_of_t;
use simulstream::stream::{TargetLanguage, Utterance};
use simulstream::TrainedModel;

fn lang(tag: &str) -> TargetLanguage {
    TargetLanguage::new(tag).unwrap()
}

fn corpus(train: usize, shifts: &[(&str, usize)], seed: u64) -> SyntheticCorpus {
    generate_synthetic(&SyntheticConfig {
        train,
        dev: 0,
        test: 0,
        dim: 8,
        seed,
        shifts: shifts.iter().map(|(l, s)| (lang(l), *s)).collect(),
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn k_map(pairs: &[(&str, usize)]) -> BTreeMap<TargetLanguage, usize> {
    pairs.iter().map(|(l, k)| (lang(l), *k)).collect()
}

fn vocab(train: &[Utterance], langs: &[&str]) -> Arc<Vocabulary> {
    let langs: Vec<_> = langs.iter().map(|l| lang(l)).collect();
    Arc::new(Vocabulary::build(train, &langs, 8000).unwrap())
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum V {
    Pending,
    End,
    Code(u64),
}

/// Straight-line re-derivation of a single-language separate decoder:
/// choose the offset by exhaustive search, count, then score.
struct Brute {
    vocab: Arc<Vocabulary>,
    eps: f64,
    offset: usize,
    full: HashMap<(Option<TokenId>, V), HashMap<TokenId, f64>>,
    back: HashMap<V, HashMap<TokenId, f64>>,
}

fn view(utt: &Utterance, k: usize, t: usize, a: usize) -> V {
    let n = utt.stream.len();
    let g = g_of_t(k, t, n);
    if t + a <= g {
        V::Code(packet_code(&utt.stream.packets()[t + a - 1]))
    } else if g == n {
        V::End
    } else {
        V::Pending
    }
}

fn targets(vocab: &Vocabulary, utt: &Utterance, l: &TargetLanguage) -> Vec<TokenId> {
    let mut y = vocab.encode(&utt.references[l]);
    y.push(EOS);
    y
}

fn prob(table: &HashMap<TokenId, f64>, tok: TokenId, eps: f64, v: usize) -> f64 {
    let total: f64 = table.values().sum();
    (table.get(&tok).copied().unwrap_or(0.0) + eps) / (total + eps * v as f64)
}

impl Brute {
    fn train(train: &[Utterance], vocab: Arc<Vocabulary>, l: &TargetLanguage, k: usize, eps: f64) -> Self {
        let v = vocab.len();
        let mut best = (f64::INFINITY, 0);
        for a in 0..=8 {
            let mut full: HashMap<(Option<TokenId>, V), HashMap<TokenId, f64>> = HashMap::new();
            for utt in train {
                let mut prev = None;
                for (i, &tok) in targets(&vocab, utt, l).iter().enumerate() {
                    *full
                        .entry((prev, view(utt, k, i + 1, a)))
                        .or_default()
                        .entry(tok)
                        .or_default() += 1.0;
                    prev = Some(tok);
                }
            }
            let mut nll = 0.0;
            for table in full.values() {
                for (&tok, &c) in table {
                    nll -= c * prob(table, tok, eps, v).ln();
                }
            }
            if nll < best.0 {
                best = (nll, a);
            }
        }
        let offset = best.1;
        let mut full: HashMap<_, HashMap<TokenId, f64>> = HashMap::new();
        let mut back: HashMap<_, HashMap<TokenId, f64>> = HashMap::new();
        for utt in train {
            let mut prev = None;
            for (i, &tok) in targets(&vocab, utt, l).iter().enumerate() {
                let vw = view(utt, k, i + 1, offset);
                *full.entry((prev, vw)).or_default().entry(tok).or_default() += 1.0;
                *back.entry(vw).or_default().entry(tok).or_default() += 1.0;
                prev = Some(tok);
            }
        }
        Self {
            vocab,
            eps,
            offset,
            full,
            back,
        }
    }

    fn nll(&self, utt: &Utterance, l: &TargetLanguage, k: usize) -> f64 {
        let mut prev = None;
        let mut total = 0.0;
        for (i, &tok) in self.vocab.encode(&utt.references[l]).iter().enumerate() {
            let vw = view(utt, k, i + 1, self.offset);
            let p = match self.full.get(&(prev, vw)).or_else(|| self.back.get(&vw)) {
                Some(table) => prob(table, tok, self.eps, self.vocab.len()),
                None => 1.0 / self.vocab.len() as f64,
            };
            total -= p.ln();
            prev = Some(tok);
        }
        total
    }
}

#[test]
fn trained_nll_matches_brute_force() {
    let c = corpus(50, &[("es", 1)], 4);
    let train = c.split(Split::Train);
    let v = vocab(train, &["es"]);
    let es = lang("es");
    for k in [1, 2, 3] {
        let model = train_count_model::<f64>(
            train,
            v.clone(),
            Variant::Separate,
            &k_map(&[("es", k)]),
            CountModelConfig::default(),
        )
        .unwrap();
        let decoder = model.decoder(&es).unwrap();
        let brute = Brute::train(train, v.clone(), &es, k, 1e-3);
        assert_eq!(decoder.offset(None), Some(brute.offset));
        for utt in &train[..10] {
            let got: f64 = prefix_nll(decoder, &utt.stream, &utt.references[&es], k).unwrap();
            let want = brute.nll(utt, &es, k);
            assert!((got - want).abs() <= 1e-9, "k={k} {}: {got} vs {want}", utt.id);
        }
    }
}

#[test]
fn unified_matches_separate_on_disjoint_vocabularies() {
    let c = corpus(120, &[("es", 1), ("fr", 3)], 5);
    let train = c.split(Split::Train);
    let k = k_map(&[("es", 2), ("fr", 3)]);
    let (unified, _) = train_on(train, Variant::Unified, &k, CountModelConfig::default(), 8000).unwrap();
    let (separate, _) = train_on(train, Variant::Separate, &k, CountModelConfig::default(), 8000).unwrap();
    for utt in train {
        for (l, &kl) in &k {
            let y = &utt.references[l];
            let u: f64 = language_loss(&unified, &utt.stream, l, y, kl).unwrap();
            let s: f64 = language_loss(&separate, &utt.stream, l, y, kl).unwrap();
            assert!((u - s).abs() <= 1e-9, "{} {l}: {u} vs {s}", utt.id);
        }
    }
}

#[test]
fn joint_loss_matches_token_by_token_accumulation() {
    let c = corpus(80, &[("es", 1), ("fr", 3)], 6);
    let train = c.split(Split::Train);
    let k = k_map(&[("es", 2), ("fr", 4)]);
    let (model, _) = train_on(train, Variant::Unified, &k, CountModelConfig::default(), 8000).unwrap();
    let decoder = model.decoder(&lang("es")).unwrap();
    let v = decoder.vocab();
    for utt in &train[..20] {
        let mut want = 0.0;
        for (l, y) in &utt.references {
            let mut prefix = vec![v.lang_id(l).unwrap()];
            for (i, tok) in v.encode(y).into_iter().enumerate() {
                let g = g_of_t(3, i + 1, utt.stream.len());
                let ctx = DecodeContext {
                    prefix: &prefix,
                    packets: utt.stream.prefix(g),
                    source_complete: g == utt.stream.len(),
                };
                want -= PrefixModel::<f64>::distribution(decoder, &ctx)[tok as usize].ln();
                prefix.push(tok);
            }
        }
        let got: f64 = joint_sync_loss(&model, &utt.stream, &utt.references, 3).unwrap();
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
    }
}

/// Training NLL of a unified model trained and scored under `k`.
fn training_loss(train: &[Utterance], k: &BTreeMap<TargetLanguage, usize>) -> f64 {
    let (model, log) = train_on(train, Variant::Unified, k, CountModelConfig::default(), 8000).unwrap();
    let total: f64 = train
        .iter()
        .map(|u| joint_async_loss::<f64, _, _>(&model, &u.stream, &u.references, k).unwrap())
        .sum();
    assert!((total - log.final_nll).abs() <= 1e-6 * total);
    total
}

#[test]
fn async_loss_lies_between_the_sync_losses() {
    let c = corpus(300, &[("es", 1), ("fr", 3)], 1);
    let train = c.split(Split::Train);
    let low = training_loss(train, &k_map(&[("es", 1), ("fr", 1)]));
    let mixed = training_loss(train, &k_map(&[("es", 1), ("fr", 4)]));
    let high = training_loss(train, &k_map(&[("es", 4), ("fr", 4)]));
    // Regression values for this corpus.
    for (got, want) in [
        (low, 9999.46308923816),
        (mixed, 8907.88052258324),
        (high, 427.3566817425126),
    ] {
        assert!((got - want).abs() <= 1e-9 * want, "{got} vs {want}");
    }
    assert!(high < mixed && mixed < low);
}

#[test]
fn more_context_never_hurts_the_fit() {
    for seed in [1, 2, 3] {
        let c = corpus(200, &[("es", 0), ("fr", 2)], seed);
        let train = c.split(Split::Train);
        let losses: Vec<f64> = (1..=7)
            .map(|k| training_loss(train, &k_map(&[("es", k), ("fr", k)])))
            .collect();
        assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
    }
}

#[test]
fn distributions_are_normalized() {
    let c = corpus(100, &[("es", 1), ("fr", 3)], 7);
    let train = c.split(Split::Train);
    let k = k_map(&[("es", 2), ("fr", 4)]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for variant in [Variant::Separate, Variant::Unified] {
        let (model, _) = train_on(train, variant, &k, CountModelConfig::default(), 8000).unwrap();
        for _ in 0..1000 {
            let l = if rng.gen_bool(0.5) { lang("es") } else { lang("fr") };
            let decoder = model.decoder(&l).unwrap();
            let v = decoder.vocab();
            let utt = &train[rng.gen_range(0..train.len())];
            let mut prefix = model.initial_prefix::<f64>(&l).unwrap();
            let y = v.encode(&utt.references[&l]);
            prefix.extend(y.iter().take(rng.gen_range(0..=y.len())));
            if rng.gen_bool(0.2) {
                prefix.push(rng.gen_range(0..v.len() as TokenId));
            }
            let g = rng.gen_range(0..=utt.stream.len());
            let ctx = DecodeContext {
                prefix: &prefix,
                packets: utt.stream.prefix(g),
                source_complete: g == utt.stream.len(),
            };
            let dist: Vec<f64> = decoder.distribution(&ctx);
            let total: f64 = dist.iter().sum();
            assert!((total - 1.0).abs() <= 1e-6, "{total}");
            assert!(dist.iter().all(|&p| p > 0.0));
            let f32_total: f64 = dist.iter().map(|&p| p as f32 as f64).sum();
            assert!((f32_total - 1.0).abs() <= 1e-5);
        }
    }
}

#[test]
fn greedy_decoding_recovers_references_past_the_shift() {
    let c = corpus(400, &[("es", 2)], 9);
    let train = c.split(Split::Train);
    let es = lang("es");
    let (model, _) = train_on(
        train,
        Variant::Separate,
        &k_map(&[("es", 3)]),
        CountModelConfig::default(),
        8000,
    )
    .unwrap();
    let decoder = model.decoder(&es).unwrap();
    for utt in &train[..50] {
        let y = decoder.vocab().encode(&utt.references[&es]);
        let n = utt.stream.len();
        for t in 1..=y.len() + 1 {
            let g = g_of_t(3, t, n);
            let ctx = DecodeContext {
                prefix: &y[..t - 1],
                packets: utt.stream.prefix(g),
                source_complete: g == n,
            };
            let want = y.get(t - 1).copied().unwrap_or(EOS);
            assert_eq!(greedy_decode_next::<f64, _>(decoder, &ctx), want, "{} slot {t}", utt.id);
        }
    }
}

#[test]
fn training_and_serialization_are_deterministic() {
    let c = corpus(60, &[("es", 1), ("fr", 3)], 10);
    let train = c.split(Split::Train);
    let k = k_map(&[("es", 2), ("fr", 4)]);
    for variant in [Variant::Separate, Variant::Unified] {
        let (a, log_a) = train_on(train, variant, &k, CountModelConfig::default(), 8000).unwrap();
        let (b, log_b) = train_on(train, variant, &k, CountModelConfig::default(), 8000).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(log_a, log_b);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        a.save(&path).unwrap();
        let loaded = TrainedModel::load(&path).unwrap();
        assert_eq!(loaded.to_json(), a.to_json());
    }
}
