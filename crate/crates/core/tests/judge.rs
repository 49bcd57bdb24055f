//! Answer judging against the fact base.

use proptest::prelude::*;

use cclx_core::corpus::{answer_words, FactBase, Grammar, Lang, TwinLanguageSpec, WordOrder};
use cclx_core::eval::{judge_answer, judge_answer_in, Verdict};

fn world(seed: u64) -> (TwinLanguageSpec, FactBase) {
    let spec = TwinLanguageSpec::generate(Grammar::default(), WordOrder::SOR, seed).unwrap();
    let facts = FactBase::generate(&spec.grammar, 50, seed).unwrap();
    (spec, facts)
}

#[test]
fn answers_from_the_fact_base_are_hallucination_free() {
    let (spec, facts) = world(3);
    for f in &facts.facts {
        for lang in [Lang::A, Lang::B] {
            let v = judge_answer_in(&answer_words(&spec, f, lang), lang, f.id, &facts, &spec).unwrap().verdict;
            assert_eq!(v, Verdict::HallucinationFree, "fact {} in {lang}", f.id);
        }
    }
}

#[test]
fn every_swapped_object_is_a_factual_error() {
    let (spec, facts) = world(5);
    let n_obj = spec.grammar.objects.len();
    for f in &facts.facts {
        for o in (0..n_obj).filter(|&o| o != f.object) {
            let mut swapped = f.clone();
            swapped.object = o;
            let v = judge_answer(&answer_words(&spec, &swapped, Lang::B), f.id, &facts, &spec).unwrap().verdict;
            assert_eq!(v, Verdict::FactualError);
        }
    }
}

#[test]
fn partial_and_unrelated_answers() {
    let (spec, facts) = world(9);
    let f = &facts.facts[0];
    let subject = spec.twin(&spec.grammar.subjects[f.subject]).to_string();
    assert_eq!(judge_answer(&[subject], f.id, &facts, &spec).unwrap().verdict, Verdict::Incomplete);
    assert_eq!(judge_answer(&[], f.id, &facts, &spec).unwrap().verdict, Verdict::Irrelevant);
    // English words do not count in a target-language answer.
    let english = answer_words(&spec, f, Lang::A);
    assert_eq!(judge_answer(&english, f.id, &facts, &spec).unwrap().verdict, Verdict::Irrelevant);
    assert!(judge_answer(&[], 10_000, &facts, &spec).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn verdict_ignores_word_order_and_repetition(
        seed in 0u64..50,
        fact in 0usize..50,
        extra in prop::collection::vec(0usize..160, 0..6),
        rotate in 0usize..10,
        dup in 0usize..10,
    ) {
        let (spec, facts) = world(seed);
        let f = &facts.facts[fact];
        let pool: Vec<String> = spec.grammar.words().map(|w| spec.twin(w).to_string()).collect();
        let mut answer = answer_words(&spec, f, Lang::B);
        answer.extend(extra.iter().map(|&i| pool[i % pool.len()].clone()));
        let base = judge_answer(&answer, f.id, &facts, &spec).unwrap().verdict;
        let mut shuffled = answer.clone();
        let n = shuffled.len();
        shuffled.rotate_left(rotate % n);
        shuffled.push(shuffled[dup % n].clone());
        prop_assert_eq!(judge_answer(&shuffled, f.id, &facts, &spec).unwrap().verdict, base);
    }
}
