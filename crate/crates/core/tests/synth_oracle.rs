use tabqa_core::dataset::AnswerSource;
use tabqa_core::synth::{generate_corpus, QuestionSpec, SynthConfig};

/// Every cell satisfying a question's constraints, found by brute force.
fn satisfying_cells(spec: &QuestionSpec, table: &tabqa_core::dataset::Table, passages: &std::collections::BTreeMap<String, tabqa_core::dataset::Passage>, answer: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..table.n_rows() {
        for c in 0..table.n_cols() {
            let key_ok = (0..table.n_cols())
                .any(|k| table.headers[k] == spec.key_header && table.rows[r][k].text == spec.key_value);
            if !key_ok || table.headers[c] != spec.target_header {
                continue;
            }
            let cell = &table.rows[r][c];
            let answer_ok = match &spec.attribute {
                None => cell.text == answer,
                Some(attr) => cell.passage_ids.iter().filter_map(|p| passages.get(p)).any(|p| {
                    p.sentences
                        .iter()
                        .any(|s| *s == format!("The {attr} of {} is {answer} .", cell.text))
                }),
            };
            if answer_ok {
                out.push((r, c));
            }
        }
    }
    out
}

#[test]
fn every_question_has_exactly_one_satisfying_cell() {
    let s = generate_corpus(&SynthConfig::default()).unwrap();
    assert_eq!(s.specs.len(), s.corpus.examples.len());
    for (ex, spec) in s.corpus.examples.iter().zip(&s.specs) {
        assert_eq!(ex.question_id, spec.question_id);
        let table = s.corpus.table_for(ex).unwrap();
        let cells = satisfying_cells(spec, table, &s.corpus.passages, &ex.answer_text);
        assert_eq!(cells, vec![ex.gold_cell.unwrap()], "{}: {}", ex.question_id, ex.question);
        assert!(ex.question.contains(&spec.key_value) && ex.question.contains(&spec.key_header));
        assert_eq!(spec.attribute.is_some(), ex.source == AnswerSource::InPassage);
    }
}

#[test]
fn gold_column_is_always_labeled() {
    let s = generate_corpus(&SynthConfig::default()).unwrap();
    assert_eq!(s.labels.len(), s.corpus.examples.len());
    for (ex, lab) in s.corpus.examples.iter().zip(&s.labels) {
        assert_eq!(ex.question_id, lab.question_id);
        let (_, c) = ex.gold_cell.unwrap();
        assert_eq!(lab.labels[c], 1, "{}", ex.question_id);
    }
}

#[test]
fn coverage_of_both_answer_sources() {
    let s = generate_corpus(&SynthConfig::default()).unwrap();
    let n = s.corpus.examples.len() as f64;
    let passage = s.corpus.examples.iter().filter(|e| e.source == AnswerSource::InPassage).count() as f64;
    assert!(passage / n >= 0.4 && 1.0 - passage / n >= 0.4);
    assert_eq!(s.corpus.tables.len(), 50);
}

#[test]
fn written_files_reload_identically() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_corpus(&SynthConfig::default()).unwrap();
    s.write(dir.path()).unwrap();
    let first = std::fs::read(dir.path().join("corpus.json")).unwrap();
    generate_corpus(&SynthConfig::default()).unwrap().write(dir.path()).unwrap();
    assert_eq!(first, std::fs::read(dir.path().join("corpus.json")).unwrap());
    let reloaded = tabqa_core::dataset::load_hybrid_corpus(dir.path().join("corpus.json"), Default::default()).unwrap();
    assert_eq!(reloaded, s.corpus);
}
