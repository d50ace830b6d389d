use fedinstruct_core::generation::{render_prompt, DEFAULT_HEADER};
use fedinstruct_core::retrieval::SelectedExamples;
use fedinstruct_core::{Document, Example};

const GOLDEN: &str = include_str!("fixtures/fewshot_prompt.txt");

fn placeholder_examples() -> SelectedExamples {
    // the third document placeholder is worded differently in the listing
    let docs = [
        "{The content of document 1}",
        "{The content of document 2}",
        "{The content document 3}",
    ];
    let examples = docs
        .iter()
        .enumerate()
        .map(|(i, d)| Example {
            document: Document::new(format!("p{i}"), *d).unwrap(),
            instruction: format!("{{The content of question {}}}", i + 1),
            response: format!("{{The content of answer {}}}", i + 1),
            domain: None,
        })
        .collect();
    SelectedExamples {
        examples,
        indices: vec![0, 1, 2],
        scores: None,
    }
}

#[test]
fn three_shot_prompt_matches_listing() {
    let target = Document::new("t", "{The content of the target text}").unwrap();
    let prompt = render_prompt(DEFAULT_HEADER, &placeholder_examples(), &target);
    assert_eq!(prompt.as_bytes(), GOLDEN.as_bytes());
}

#[test]
fn header_lines_keep_trailing_spaces() {
    let lines: Vec<&str> = DEFAULT_HEADER.split('\n').collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[..4].iter().all(|l| l.ends_with(' ')));
    assert_eq!(lines[4], "helping AI Agent.");
}
