use super::*;
use crate::model::ModelConfig;
use crate::tokenizer::SEP;

fn tok() -> TokenizerModel {
    TokenizerModel::byte_level(&[SEP]).unwrap()
}

fn words(s: &str) -> Vec<String> {
    BleuTokenization::Whitespace.tokenize(s)
}

/// Puts all mass on the bytes of one fixed text, then EOS.
struct Oracle {
    answer: Vec<u32>,
}

impl LikelihoodModel for Oracle {
    fn max_len(&self) -> usize {
        64
    }

    fn continuation_log_probs(&self, _prompt: &[u32], cs: &[Vec<u32>]) -> Result<Vec<Vec<Float>>> {
        Ok(cs
            .iter()
            .map(|c| c.iter().enumerate().map(|(i, &t)| if self.answer.get(i) == Some(&t) { 0.0 } else { -50.0 }).collect())
            .collect())
    }
}

fn item(q: &str, opts: &[&str], ans: usize, section: &str) -> ExamItem {
    ExamItem { question: q.into(), options: opts.iter().map(|s| s.to_string()).collect(), answer_index: ans, section: section.into() }
}

#[test]
fn certain_model_scores_every_item() {
    let t = tok();
    let items: Vec<ExamItem> =
        (0..8).map(|i| item(&format!("q{i}"), &["red", "green", "blue", "cyan"], i % 4, NAPLEX_SECTIONS[i % 3])).collect();
    let mut total = 0;
    for it in &items {
        let mut ans = t.encode(&it.options[it.answer_index]);
        ans.push(t.eos());
        let r = score_exam(&Oracle { answer: ans }, std::slice::from_ref(it), &t).unwrap();
        total += r.overall.correct;
        assert_eq!(r.overall.accuracy, 1.0);
    }
    assert_eq!(total, 8);
}

#[test]
fn ties_go_to_lowest_index_and_denominators_reconcile() {
    let t = tok();
    let m = Oracle { answer: vec![] };
    let items = vec![
        item("a", &["x", "y", "z"], 2, "NAPLEX I"),
        item(&"long ".repeat(20), &["x", "y"], 0, "NAPLEX I"),
        item("b", &["x", "y"], 0, "NAPLEX II"),
    ];
    let r = score_exam(&m, &items, &t).unwrap();
    assert_eq!(r.records[0].predicted, Some(0));
    assert!(r.records[1].unscorable.is_some());
    let s1 = &r.sections["NAPLEX I"];
    assert_eq!((s1.total, s1.scored, s1.unscorable, s1.correct), (2, 1, 1, 0));
    assert_eq!(r.overall.scored + r.overall.unscorable, r.overall.total);
    assert_eq!(r.overall.accuracy, 0.5);
    assert!(score_exam(&m, &[item("q", &["only"], 0, "s")], &t).is_err());
    assert!(score_exam(&m, &[item("q", &["a", "b"], 2, "s")], &t).is_err());
}

#[test]
fn batched_option_scores_match_single_sequence_scoring() {
    let t = tok();
    let model = Model::new(ModelConfig { vocab_size: t.vocab_size(), hidden: 16, layers: 1, heads: 2, max_len: 40, seed: 2 }).unwrap();
    let prompt = format_prompt(&t, "which?").unwrap();
    let opts: Vec<Vec<u32>> = ["a", "longer option", "mid"].iter().map(|o| t.encode(o)).collect();
    let batched = model.continuation_log_probs(&prompt, &opts).unwrap();
    for (o, lp) in opts.iter().zip(&batched) {
        let full = model.token_log_probs(&[prompt.as_slice(), o].concat()).unwrap();
        let tail = &full[full.len() - o.len()..];
        assert!(tail.iter().zip(lp).all(|(a, b)| (a - b).abs() < 1e-9));
    }
    let alone = model.continuation_log_probs(&prompt, &opts[..1]).unwrap();
    assert!(alone[0].iter().zip(&batched[0]).all(|(a, b)| (a - b).abs() < 1e-9));
}

#[test]
fn bleu_examples() {
    assert_eq!(bleu("the cat sat on the mat", &["the cat sat on the mat"], 4, BleuTokenization::Whitespace), 1.0);
    assert_eq!(bleu("", &["the cat"], 4, BleuTokenization::Whitespace), 0.0);
    let (m, total) = modified_precision(&words("the the the the the the the"), &[words("the cat is on the mat")], 1);
    assert_eq!((m, total), (2, 7));
    // one word, no match: epsilon keeps the score tiny but non-zero
    let s = bleu("dog", &["cat"], 4, BleuTokenization::Whitespace);
    assert!(s > 0.0 && s < 1e-8);
    let refs = ["the cat is on the mat", "there is a cat on the mat"];
    let a = bleu("the cat is on a mat", &refs, 4, BleuTokenization::Whitespace);
    let b = bleu("the cat is on a mat", &[refs[1], refs[0]], 4, BleuTokenization::Whitespace);
    assert_eq!(a, b);
    assert!(a > 0.0 && a < 1.0);
}

#[test]
fn char_tokenization_and_brevity_penalty() {
    assert_eq!(BleuTokenization::Char.tokenize("阿司 匹林"), vec!["阿", "司", "匹", "林"]);
    assert_eq!(bleu("阿司匹林", &["阿司匹林"], 4, BleuTokenization::Char), 1.0);
    // a perfect-precision prefix pays only the brevity penalty
    let s = bleu("a b c d", &["a b c d e f g h"], 4, BleuTokenization::Whitespace);
    assert!((s - (1.0f64 - 2.0).exp()).abs() < 1e-12);
}

#[test]
fn translation_scores_group_by_granularity() {
    let items = vec![
        TranslationItem { source: "s".into(), references: vec!["a b c".into()], granularity: Granularity::Sentence },
        TranslationItem { source: "s".into(), references: vec!["x".into()], granularity: Granularity::Word },
    ];
    let r = score_translations(&items, &["a b c".into(), "x".into()], BleuTokenization::Whitespace, 4).unwrap();
    assert_eq!(r.by_granularity[&Granularity::Sentence].mean_bleu, 100.0);
    assert_eq!(r.by_granularity[&Granularity::Word].items, 1);
    assert!(score_translations(&items, &["a".into()], BleuTokenization::Whitespace, 4).is_err());
}

fn exam_with(acc: &[(&str, Float)]) -> ExamReport {
    let mut r = ExamReport::default();
    for (s, a) in acc {
        r.sections.insert(s.to_string(), SectionScore { total: 10, scored: 10, correct: (a * 10.0) as usize, accuracy: *a, unscorable: 0 });
    }
    r
}

#[test]
fn report_labels_reference_and_flags_trends() {
    let empty = report(&EvalResults::default(), &ReferenceTable::default());
    assert!(empty.text.contains("WARNING"));
    assert!(empty.text.contains("66.0        68.0        76.0"), "{}", empty.text);
    assert!(empty.text.contains(REFERENCE_LABEL));

    let sweep = EvalResults {
        exams: vec![
            ("s".into(), exam_with(&[("NAPLEX I", 0.2), ("NAPLEX II", 0.5)])),
            ("m".into(), exam_with(&[("NAPLEX I", 0.4), ("NAPLEX II", 0.3)])),
            ("l".into(), exam_with(&[("NAPLEX I", 0.4), ("NAPLEX II", 0.6)])),
        ],
        bleu: None,
    };
    let r = report(&sweep, &ReferenceTable::default());
    assert_eq!(r.json["monotonic"]["NAPLEX I"], true);
    assert_eq!(r.json["monotonic"]["NAPLEX II"], false);
    assert!(r.text.contains("NAPLEX II: false"));
    assert!(!r.text.contains("WARNING"));
}
