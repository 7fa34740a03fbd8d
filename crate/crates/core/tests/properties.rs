use std::collections::{BTreeMap, BTreeSet};

use briefx_core::corpus::{clean_pipeline, normalize_text, strip_mentions, CleanConfig, RawPost};
use briefx_core::eval::{aggregate_folds, kfold_split, EvalReport, MetricKind, ReportEntry};
use briefx_core::metrics::{
    bleu4, cohen_kappa, cosine, jaccard, lcs_len, rouge_l, rouge_n, tfidf_cosine, CharTokenizer, TfIdfModel, TokenSeq, Tokenizer,
};
use briefx_core::outparse::{parse_output, KeyAliasMap, ParseMode};
use briefx_core::schema::{canonical_json, parse_canonical, validate, Amount, ExtractionRecord, TypeCode};
use proptest::prelude::*;

fn text_strategy() -> impl Strategy<Value = String> {
    let piece = prop_oneof![
        4 => "[\u{4e00}-\u{4e80}]{1,6}",
        2 => "[a-zA-Z0-9]{1,5}",
        1 => Just("https://weibo.com/x?a=1".to_string()),
        1 => Just("t.cn/AbC9".to_string()),
        1 => Just("@平安北京 ".to_string()),
        1 => Just("@@user_1".to_string()),
        2 => "[ \t\n\u{3000}]{1,3}",
        2 => "[。，、；：？！“”（）《》.,;:!?()\"-]",
        1 => "[😀🚓#%&*/\\\\]",
        1 => "[０-９]{1,3}",
    ];
    prop::collection::vec(piece, 0..20).prop_map(|v| v.concat())
}

fn post(id: usize, body: String) -> RawPost {
    RawPost {
        post_id: format!("p{id}"),
        account_id: "a".into(),
        posted_at: String::new(),
        reposts: 0,
        likes: 0,
        comments: 0,
        body_text: body,
        image_texts: vec![],
    }
}

fn cjk_text() -> impl Strategy<Value = String> {
    "[\u{4e00}-\u{4fff}，。、 ]{0,12}"
}

fn record_strategy() -> impl Strategy<Value = ExtractionRecord> {
    let codes = prop::collection::btree_set(1u8..=11, 0..4);
    let count = prop_oneof![Just(0i64), 1i64..1000];
    let amount = prop_oneof![Just(0i64), 1i64..10_000_000_000];
    (
        (cjk_text(), cjk_text(), codes, "[\u{4e00}-\u{4fff}a-z\"\\\\\n/ ]{0,20}", "[\u{4e00}-\u{4fff}，。]{0,15}"),
        prop::array::uniform4(any::<bool>()),
        (count.clone(), count, amount, any::<bool>()),
    )
        .prop_map(|((prov, city, codes, means, handling), bools, (deaths, injuries, fen, social))| {
            let mut r = ExtractionRecord::default();
            r.location.province = prov.trim().to_string();
            r.location.city = city.trim().to_string();
            r.event.type_codes = codes.into_iter().map(|c| format!("{c:02}")).collect();
            r.event.illegal_means = means;
            r.event.police_handling = handling;
            r.event.cybercrime = bools[0];
            r.event.completed_illegal_act = bools[1];
            r.event.case_closure = bools[2];
            r.impact.deaths.existence = deaths > 0 || bools[3];
            r.impact.deaths.number = deaths;
            r.impact.injuries.existence = injuries > 0;
            r.impact.injuries.number = injuries;
            r.impact.economic_losses.existence = fen > 0;
            r.impact.economic_losses.amount = Amount::from_fen(fen);
            r.impact.social_impact = social;
            r
        })
}

fn seq(s: &[u8]) -> TokenSeq {
    s.iter().map(|b| (*b as char).to_string()).collect()
}

fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<u8> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i]).collect();
        let mut it = b.iter();
        if sub.iter().all(|x| it.any(|y| y == x)) {
            best = best.max(sub.len());
        }
    }
    best
}

/// Clipped n-gram counts by direct enumeration.
fn naive_modified_precision(c: &[u8], r: &[u8], n: usize) -> (usize, usize) {
    if c.len() < n {
        return (0, 0);
    }
    let grams: Vec<&[u8]> = c.windows(n).collect();
    let mut matched = 0;
    let mut done: Vec<&[u8]> = Vec::new();
    for g in &grams {
        if done.contains(g) {
            continue;
        }
        done.push(g);
        let in_c = grams.iter().filter(|x| *x == g).count();
        let in_r = if r.len() >= n { r.windows(n).filter(|x| x == g).count() } else { 0 };
        matched += in_c.min(in_r);
    }
    (matched, grams.len())
}

fn report(values: &[Option<f64>]) -> EvalReport {
    EvalReport {
        fold: "0".into(),
        seed: Some(1),
        sample_count: 3,
        entries: values
            .iter()
            .enumerate()
            .map(|(i, v)| ReportEntry {
                field: format!("f{i}"),
                metric: MetricKind::Emr,
                value: *v,
                undefined: v.is_none().then(|| "undefined".to_string()),
                excluded: 0,
            })
            .collect(),
        absence: BTreeMap::new(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn normalize_is_idempotent(s in text_strategy()) {
        let once = normalize_text(&s);
        prop_assert_eq!(normalize_text(&once), once.clone());
        prop_assert!(!once.contains("http"));
        prop_assert_eq!(once.trim(), once.as_str());
    }

    #[test]
    fn strip_mentions_is_idempotent(s in text_strategy()) {
        let once = strip_mentions(&s);
        prop_assert_eq!(strip_mentions(&once), once);
    }

    #[test]
    fn clean_pipeline_is_idempotent_and_conserving(texts in prop::collection::vec(text_strategy(), 0..12)) {
        let posts: Vec<RawPost> = texts.into_iter().enumerate().map(|(i, t)| post(i, t)).collect();
        let cfg = CleanConfig { min_length: 3 };
        let (records, stats) = clean_pipeline(&posts, &cfg);
        prop_assert!(stats.is_conserved());
        prop_assert_eq!(records.len(), posts.len());
        let kept: Vec<RawPost> = records.iter().filter(|r| !r.dropped).enumerate().map(|(i, r)| post(i, r.text.clone())).collect();
        let (again, stats2) = clean_pipeline(&kept, &cfg);
        prop_assert_eq!(stats2.output_count, kept.len());
        for (a, k) in again.iter().zip(&kept) {
            prop_assert_eq!(&a.text, &k.body_text);
        }
    }

    #[test]
    fn canonical_round_trip(r in record_strategy()) {
        prop_assert!(validate(&r).valid);
        let text = canonical_json(&r).unwrap();
        let mut expected = r.clone();
        expected.event.type_codes.sort();
        prop_assert_eq!(parse_canonical(&text).unwrap(), expected.clone());
        let parsed = parse_output(&text, &KeyAliasMap::default(), ParseMode::Strict).unwrap();
        prop_assert_eq!(parsed.record.complete().unwrap(), expected);
        prop_assert!(parsed.absent_fields().is_empty());
    }

    #[test]
    fn codes_are_known(r in record_strategy()) {
        for c in &r.event.type_codes {
            prop_assert!(TypeCode::parse(c).is_ok());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn lcs_matches_brute_force(a in prop::collection::vec(b'a'..=b'c', 0..=6), b in prop::collection::vec(b'a'..=b'c', 0..=6)) {
        let l = lcs_len(&a, &b);
        prop_assert_eq!(l, brute_lcs(&a, &b));
        prop_assert_eq!(l, lcs_len(&b, &a));
        if !a.is_empty() && !b.is_empty() {
            let p = rouge_l(&seq(&a), &seq(&b)).unwrap();
            prop_assert!((0.0..=1.0).contains(&p.f1));
            prop_assert_eq!(p.recall, l as f64 / b.len() as f64);
        }
    }

    #[test]
    fn bleu_matches_enumeration(c in prop::collection::vec(b'a'..=b'e', 1..12), r in prop::collection::vec(b'a'..=b'e', 1..12)) {
        let got = bleu4(&[(seq(&c), seq(&r))]).unwrap();
        let mut log_sum = 0.0;
        let mut zero = false;
        for n in 1..=4 {
            let (m, t) = naive_modified_precision(&c, &r, n);
            prop_assert_eq!(got.matches[n - 1], m);
            prop_assert_eq!(got.totals[n - 1], t);
            if m == 0 { zero = true } else { log_sum += 0.25 * (m as f64 / t as f64).ln() }
        }
        let bp = if c.len() > r.len() { 1.0 } else { (1.0 - r.len() as f64 / c.len() as f64).exp() };
        let expected = if zero { 0.0 } else { 100.0 * bp * log_sum.exp() };
        prop_assert!((got.score - expected).abs() < 1e-9, "{} vs {}", got.score, expected);
        prop_assert!((0.0..=100.0).contains(&got.score));
    }

    #[test]
    fn rouge_n_bounds(c in prop::collection::vec(b'a'..=b'd', 0..10), r in prop::collection::vec(b'a'..=b'd', 2..10)) {
        for n in 1..=2 {
            let p = rouge_n(&seq(&c), &seq(&r), n).unwrap();
            for x in [p.precision, p.recall, p.f1] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }
    }

    #[test]
    fn similarity_symmetry_and_range(a in "[甲乙丙丁 ]{0,10}", b in "[甲乙丙丁 ]{0,10}") {
        let ab = tfidf_cosine(std::slice::from_ref(&a), std::slice::from_ref(&b), &CharTokenizer).unwrap()[0];
        let ba = tfidf_cosine(std::slice::from_ref(&b), std::slice::from_ref(&a), &CharTokenizer).unwrap()[0];
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        let self_sim = tfidf_cosine(std::slice::from_ref(&a), std::slice::from_ref(&a), &CharTokenizer).unwrap()[0];
        prop_assert_eq!(self_sim, 1.0);
        let docs = [CharTokenizer.tokenize(&a), CharTokenizer.tokenize(&b)];
        let model = TfIdfModel::fit(&docs);
        let (va, vb) = (model.vectorize(&docs[0]), model.vectorize(&docs[1]));
        prop_assert!((cosine(&va, &vb) - cosine(&vb, &va)).abs() < 1e-12);
    }

    #[test]
    fn jaccard_symmetry(a in prop::collection::btree_set(1u8..=11, 0..6), b in prop::collection::btree_set(1u8..=11, 0..6)) {
        let j = jaccard(&a, &b);
        prop_assert_eq!(j, jaccard(&b, &a));
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert_eq!(jaccard(&a, &a), 1.0);
    }

    #[test]
    fn kappa_symmetry(pairs in prop::collection::vec((0u8..3, 0u8..3), 2..40)) {
        let (a, b): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        match (cohen_kappa(&a, &b), cohen_kappa(&b, &a)) {
            (Ok(x), Ok(y)) => {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&x));
            }
            (Err(_), Err(_)) => {}
            other => prop_assert!(false, "asymmetric definedness {:?}", other),
        }
    }

    #[test]
    fn folds_partition(n in 2usize..300, k in 2usize..8, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
        let spec = kfold_split(&ids, k, seed).unwrap();
        let sizes = spec.sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let all: BTreeSet<&String> = spec.folds.iter().flatten().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(kfold_split(&ids, k, seed).unwrap(), spec);
    }

    #[test]
    fn aggregate_of_identical_reports_is_identity(values in prop::collection::vec(prop::option::of(0.0f64..=100.0), 1..12), k in 1usize..8) {
        let r = report(&values);
        let agg = aggregate_folds(&vec![r.clone(); k]).unwrap();
        for (a, b) in agg.entries.iter().zip(&r.entries) {
            prop_assert_eq!(a.value, b.value);
        }
    }
}
