//! Deterministic synthetic data for tests, the acceptance suite and the
//! shipped CLI fixture set. Every generator is a pure function of its seed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datapipe::{Category, CorpusDocument, Language};
use crate::eval::{ExamItem, Granularity, TranslationItem, NAPLEX_SECTIONS};
use crate::reward::PreferencePair;
use crate::rng::{SeedTree, Stream};
use crate::sft::{InstructionSample, WeightClass};

const SYLLABLES: [&str; 16] = ["ba", "do", "ke", "li", "mo", "na", "pe", "ra", "si", "tu", "va", "xe", "zo", "fi", "gu", "ho"];

/// Drug classes with the name stem shared by their members.
pub const DRUG_CLASSES: [(&str, &str); 8] = [
    ("ace inhibitor", "pril"),
    ("beta blocker", "olol"),
    ("statin", "statin"),
    ("penicillin", "cillin"),
    ("azole antifungal", "conazole"),
    ("antiviral", "vir"),
    ("anticoagulant", "parin"),
    ("diuretic", "thiazide"),
];

pub const DRUGS_PER_CLASS: usize = 6;

const GENERAL_WORDS: [&str; 48] = [
    "the", "a", "morning", "river", "city", "walks", "bright", "quiet", "market", "opens", "early", "children",
    "play", "near", "old", "bridge", "rain", "falls", "softly", "on", "roof", "people", "gather", "for", "news",
    "train", "arrives", "late", "every", "evening", "bakery", "sells", "warm", "bread", "garden", "grows",
    "green", "beans", "friends", "share", "stories", "after", "dinner", "window", "light", "summer", "and", "in",
];

const DOMAIN_TERMS: [&str; 16] = [
    "pharmacokinetics",
    "bioavailability",
    "contraindicated",
    "hepatic clearance",
    "renal impairment",
    "therapeutic window",
    "adverse reaction",
    "half-life",
    "dosage adjustment",
    "plasma concentration",
    "drug interaction",
    "prescription",
    "pharmacist",
    "tablet",
    "milligrams",
    "hypertension",
];

fn pick<'a>(rng: &mut Stream, xs: &[&'a str]) -> &'a str {
    xs[rng.below(xs.len())]
}

/// `(name, class)` for every fixture drug; names end in their class stem.
pub fn drugs() -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (c, (class, stem)) in DRUG_CLASSES.iter().enumerate() {
        for i in 0..DRUGS_PER_CLASS {
            let a = SYLLABLES[(c * 5 + i * 3) % SYLLABLES.len()];
            let b = SYLLABLES[(c * 7 + i * 11 + 1) % SYLLABLES.len()];
            out.push((format!("{a}{b}{stem}"), class.to_string()));
        }
    }
    out
}

/// Mixed-script strings covering ASCII, Latin accents, Greek, Cyrillic,
/// CJK, Arabic, emoji and combining marks.
pub fn mixed_script_strings(n: usize, seed: u64) -> Vec<String> {
    const POOLS: [&str; 8] = [
        "abcdefghijklmnopqrstuvwxyz ABCXYZ0123456789 .,;:!?",
        "éèêàçñüöß øåæ",
        "αβγδεζηθλμπσω",
        "абвгдежзийклмнопрст",
        "药学阿司匹林剂量肝肾临床试验",
        "مرحبا دواء",
        "😀💊🧪🩺🇨🇳",
        "e\u{301}a\u{308}\u{200d}\t\n",
    ];
    let seeds = SeedTree::new(seed).split("mixed-script");
    (0..n)
        .map(|i| {
            let mut rng = seeds.split_index(i as u64).rng();
            let len = rng.below(40);
            (0..len)
                .map(|_| {
                    let pool: Vec<char> = POOLS[rng.below(POOLS.len())].chars().collect();
                    pool[rng.below(pool.len())]
                })
                .collect()
        })
        .collect()
}

/// Everyday English sentences with no domain vocabulary.
pub fn general_corpus(n_docs: usize, seed: u64) -> Vec<String> {
    let seeds = SeedTree::new(seed).split("general");
    (0..n_docs)
        .map(|i| {
            let mut rng = seeds.split_index(i as u64).rng();
            let words = 12 + rng.below(12);
            let mut s: Vec<&str> = (0..words).map(|_| pick(&mut rng, &GENERAL_WORDS)).collect();
            s.push(".");
            s.join(" ")
        })
        .collect()
}

/// Clinical prose dense in recurring domain terms and drug names.
pub fn domain_corpus(n_docs: usize, seed: u64) -> Vec<String> {
    let seeds = SeedTree::new(seed).split("domain");
    let drugs = drugs();
    (0..n_docs)
        .map(|i| {
            let mut rng = seeds.split_index(i as u64).rng();
            let (drug, class) = &drugs[rng.below(drugs.len())];
            let t1 = pick(&mut rng, &DOMAIN_TERMS);
            let t2 = pick(&mut rng, &DOMAIN_TERMS);
            let mg = 5 * (1 + rng.below(40));
            format!(
                "{drug} is a {class}. the {t1} of {drug} guides {t2}; the pharmacist reviews {mg} milligrams and the prescription for hypertension."
            )
        })
        .collect()
}

/// The pretraining text: documents of fact sentences, one drug per class each, plus
/// a few general documents. Small enough for a desk model to memorize, and
/// every document is long enough to pass the default quality filter.
pub fn memorization_corpus() -> BTreeMap<Category, Vec<String>> {
    let mut out = BTreeMap::new();
    // Grouping across classes keeps the word repeat ratio under the filter limit.
    let all = drugs();
    let facts: Vec<String> = (0..DRUGS_PER_CLASS)
        .map(|j| {
            all.iter().skip(j).step_by(DRUGS_PER_CLASS).map(|(d, c)| format!("{d} is a {c}.")).collect::<Vec<_>>().join(" ")
        })
        .collect();
    out.insert(Category::Papers, facts);
    let general = general_corpus(16, 7);
    out.insert(Category::Web, general.chunks(2).map(|p| p.join(" ")).collect());
    out
}

/// Categories the datapipe fixture uses; disjoint from the pretraining ones.
pub const NOISE_CATEGORIES: [Category; 4] = [Category::News, Category::Patents, Category::Books, Category::Chats];

/// Pretraining documents plus the datapipe fixture, as one raw corpus.
pub fn raw_corpus(seed: u64) -> Vec<CorpusDocument> {
    let mut docs = Vec::new();
    for (cat, texts) in memorization_corpus() {
        for (i, t) in texts.into_iter().enumerate() {
            docs.push(CorpusDocument::new(format!("{cat}-{i:03}"), cat, Language::En, t));
        }
    }
    docs.extend(datapipe_fixture(seed).docs);
    docs
}

/// Instruction templates used for SFT; the exam uses [`EXAM_TEMPLATE`].
pub const SFT_TEMPLATES: [&str; 3] = ["what class is {d}?", "{d} belongs to which class?", "which drug class includes {d}?"];
pub const EXAM_TEMPLATE: &str = "what drug class is {d}?";

/// Expert drug-class facts under every training template, plus generic echo tasks.
pub fn sft_samples(seed: u64) -> Vec<InstructionSample> {
    let mut out = Vec::new();
    for (d, c) in drugs() {
        for t in SFT_TEMPLATES {
            out.push(InstructionSample {
                instruction: t.replace("{d}", &d),
                output: c.clone(),
                weight_class: WeightClass::Expert,
                source_tag: "drug-facts".into(),
            });
        }
    }
    let seeds = SeedTree::new(seed).split("sft-generic");
    for i in 0..24 {
        let mut rng = seeds.split_index(i).rng();
        let w = pick(&mut rng, &GENERAL_WORDS);
        out.push(InstructionSample {
            instruction: format!("repeat the word {w}"),
            output: w.to_string(),
            weight_class: WeightClass::Generic,
            source_tag: "echo".into(),
        });
    }
    out
}

/// One 4-option item per drug under the held-out template. Answers are
/// balanced over positions and distractors over classes.
pub fn exam_items() -> Vec<ExamItem> {
    let classes: Vec<&str> = DRUG_CLASSES.iter().map(|(c, _)| *c).collect();
    drugs()
        .iter()
        .enumerate()
        .map(|(i, (d, c))| {
            let ci = classes.iter().position(|x| x == c).expect("known class");
            let mut options: Vec<String> = (1..=3).map(|k| classes[(ci + k * (1 + i % 2)) % classes.len()].to_string()).collect();
            let answer_index = i % 4;
            options.insert(answer_index, c.clone());
            ExamItem {
                question: EXAM_TEMPLATE.replace("{d}", d),
                options,
                answer_index,
                section: NAPLEX_SECTIONS[i % 3].to_string(),
            }
        })
        .collect()
}

/// Chosen responses advise taking the dose with water; rejected ones advise
/// doubling it. The rest of the text is shared.
pub fn preference_pairs(n: usize, seed: u64) -> Vec<PreferencePair> {
    let seeds = SeedTree::new(seed).split("preferences");
    let drugs = drugs();
    (0..n)
        .map(|i| {
            let mut rng = seeds.split_index(i as u64).rng();
            let (d, _) = &drugs[rng.below(drugs.len())];
            let w = pick(&mut rng, &GENERAL_WORDS);
            let mg = 5 * (1 + rng.below(40));
            PreferencePair {
                prompt: format!("how do i take {mg} mg of {d} #{i}"),
                chosen: format!("{w}: take {d} with water"),
                rejected: format!("{w}: take {d} twice now"),
            }
        })
        .collect()
}

pub fn ppo_prompts() -> Vec<String> {
    drugs().iter().take(16).map(|(d, _)| format!("how should i take {d}?")).collect()
}

pub fn translation_items() -> Vec<TranslationItem> {
    let rows: [(&str, &str, Granularity); 6] = [
        ("阿司匹林", "aspirin", Granularity::Word),
        ("剂量", "dosage", Granularity::Word),
        ("请随餐服用此药。", "take this medicine with food .", Granularity::Sentence),
        ("肝功能不全者慎用。", "use with caution in hepatic impairment .", Granularity::Sentence),
        (
            "本品为降压药。每日一次，每次一片。",
            "this product lowers blood pressure . take one tablet once a day .",
            Granularity::Paragraph,
        ),
        (
            "孕妇禁用。如出现皮疹请停药。",
            "contraindicated in pregnancy . stop the drug if a rash appears .",
            Granularity::Paragraph,
        ),
    ];
    rows.iter()
        .map(|(s, r, g)| TranslationItem { source: s.to_string(), references: vec![r.to_string()], granularity: *g })
        .collect()
}

/// Corpus documents with planted duplicates and PII, plus the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatapipeFixture {
    pub docs: Vec<CorpusDocument>,
    /// Byte-identical (up to whitespace) copies: `(copy id, original id)`.
    pub exact_copies: Vec<(String, String)>,
    /// One-word-edit copies: `(copy id, original id)`.
    pub near_copies: Vec<(String, String)>,
    /// Distinct originals that must all survive.
    pub originals: Vec<String>,
    /// Every planted PII string.
    pub pii: Vec<String>,
}

fn random_words(rng: &mut Stream, n: usize) -> Vec<String> {
    (0..n)
        .map(|_| {
            let k = 2 + rng.below(2);
            (0..k).map(|_| SYLLABLES[rng.below(SYLLABLES.len())]).collect::<String>()
        })
        .collect()
}

pub fn datapipe_fixture(seed: u64) -> DatapipeFixture {
    let seeds = SeedTree::new(seed).split("datapipe");
    let mut docs = Vec::new();
    let mut originals = Vec::new();
    let mut pii = Vec::new();
    let n_orig = 30;
    let mut texts = Vec::new();
    for i in 0..n_orig {
        let mut rng = seeds.split_index(i).rng();
        let mut words = random_words(&mut rng, 80);
        if i % 3 == 0 {
            let email = format!("user{i}.{}@clinic{}.org", words[0], i % 7);
            let phone = format!("+86 138 {:04} {:04}", 1000 + i * 37, 2000 + i * 91);
            words.insert(10, format!("mail {email} or call {phone}"));
            pii.push(email);
            pii.push(phone);
        }
        let text = words.join(" ");
        let id = format!("doc-{i:03}");
        let cat = NOISE_CATEGORIES[i as usize % NOISE_CATEGORIES.len()];
        docs.push(CorpusDocument::new(&id, cat, Language::En, &text));
        originals.push(id);
        texts.push(text);
    }
    let mut exact_copies = Vec::new();
    let mut near_copies = Vec::new();
    for j in 0..8usize {
        let src = j * 3 + 1;
        let id = format!("exact-{j}");
        // whitespace changes must not hide a byte duplicate
        let text = if j % 2 == 0 { texts[src].clone() } else { format!("  {}\n", texts[src].replace(' ', "  ")) };
        docs.push(CorpusDocument::new(&id, Category::News, Language::En, &text));
        exact_copies.push((id, originals[src].clone()));
    }
    for j in 0..8usize {
        let src = j * 3 + 2;
        let mut rng = seeds.split("edit").split_index(j as u64).rng();
        let mut words: Vec<String> = texts[src].split(' ').map(str::to_string).collect();
        let at = 20 + rng.below(40);
        words[at] = format!("{}x", words[at]);
        let id = format!("near-{j}");
        docs.push(CorpusDocument::new(&id, Category::News, Language::En, words.join(" ")));
        near_copies.push((id, originals[src].clone()));
    }
    DatapipeFixture { docs, exact_copies, near_copies, originals, pii }
}
