use serde::{Deserialize, Serialize};

use crate::encoder::{cosine, TextEncoder};

/// Question-token × header-token relevance. Entries are token-state cosines
/// mapped to `[0, 1]`; they describe encoder geometry, not the alignment
/// head's internals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub question_tokens: Vec<String>,
    pub header_tokens: Vec<String>,
    /// Index of the header each header token belongs to.
    pub header_of_token: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

/// With `softmax`, each question-token row is renormalized to sum to one.
pub fn relevance_heatmap(
    question: &str,
    headers: &[String],
    encoder: &dyn TextEncoder,
    softmax: bool,
) -> Heatmap {
    let q = encoder.encode(question);
    let joined = headers.join(" ");
    let h = encoder.encode(&joined);
    let mut question_tokens = encoder.tokenize(question);
    if question_tokens.is_empty() {
        question_tokens.push(String::new());
    }
    let mut header_tokens = Vec::new();
    let mut header_of_token = Vec::new();
    for (j, name) in headers.iter().enumerate() {
        for t in encoder.tokenize(name) {
            header_tokens.push(t);
            header_of_token.push(j);
        }
    }
    let nh = header_tokens.len().min(h.token_states.nrows());
    header_tokens.truncate(nh);
    header_of_token.truncate(nh);
    let nq = question_tokens.len().min(q.token_states.nrows());
    question_tokens.truncate(nq);
    let values = (0..nq)
        .map(|i| {
            let qi = q.token_states.row(i).to_owned();
            let mut row: Vec<f64> = (0..nh)
                .map(|j| {
                    let c = cosine(&qi, &h.token_states.row(j).to_owned());
                    ((c + 1.0) / 2.0).clamp(0.0, 1.0)
                })
                .collect();
            if softmax && !row.is_empty() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                row.iter_mut().for_each(|v| *v = (*v - max).exp() / z);
            }
            row
        })
        .collect();
    Heatmap {
        question_tokens,
        header_tokens,
        header_of_token,
        values,
    }
}

impl Heatmap {
    /// First row names header tokens; each further row is one question token.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut head = vec!["question_token".to_string()];
        head.extend(self.header_tokens.iter().cloned());
        w.write_record(&head).expect("in-memory write");
        for (t, row) in self.question_tokens.iter().zip(&self.values) {
            let mut rec = vec![t.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}
