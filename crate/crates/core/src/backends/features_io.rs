//! `features.jsonl`: one generated sample per line.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::pool::{FeatureVector, GeneratedSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    pub sample_id: String,
    pub concept: String,
    pub generator: String,
    pub prompt_id: String,
    pub feature: Vec<f64>,
}

impl From<&GeneratedSample> for FeatureRecord {
    fn from(s: &GeneratedSample) -> Self {
        Self {
            sample_id: s.sample_id.clone(),
            concept: s.concept_id.clone(),
            generator: s.generator_id.clone(),
            prompt_id: s.prompt_id.clone(),
            feature: s.feature.as_slice().to_vec(),
        }
    }
}

pub fn write_features_jsonl<W: Write>(mut out: W, samples: &[GeneratedSample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, &FeatureRecord::from(s))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Parses every non-blank line. Non-finite feature values are rejected with the
/// offending line number; `source` only labels error messages.
pub fn read_features_jsonl<R: BufRead>(input: R, source: &str) -> Result<Vec<GeneratedSample>> {
    let mut samples = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            message,
        };
        let record: FeatureRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let feature = FeatureVector::new(record.feature).map_err(|e| parse_err(e.to_string()))?;
        samples.push(GeneratedSample {
            sample_id: record.sample_id,
            concept_id: record.concept,
            generator_id: record.generator,
            prompt_id: record.prompt_id,
            feature,
            payload_ref: None,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_samples() {
        let s = GeneratedSample {
            sample_id: "g:c:0.1".into(),
            concept_id: "c".into(),
            generator_id: "g".into(),
            prompt_id: "0.1".into(),
            feature: FeatureVector::new(vec![0.1, -2.5e-7, 3.0]).unwrap(),
            payload_ref: None,
        };
        let mut buf = Vec::new();
        write_features_jsonl(&mut buf, std::slice::from_ref(&s)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(r#"{"sample_id":"g:c:0.1","concept":"c","generator":"g""#));
        let back = read_features_jsonl(&buf[..], "mem").unwrap();
        assert_eq!(back, vec![s]);
    }

    #[test]
    fn floats_survive_the_text_round_trip_bit_for_bit() {
        let values: Vec<f64> = (1..200)
            .map(|i| (i as f64 * 0.7137).sin() * 10f64.powi(i % 17 - 8))
            .chain([0.3364359524360336, 5e-324, f64::MAX, -0.1])
            .collect();
        let s = GeneratedSample {
            sample_id: "g:c:0".into(),
            concept_id: "c".into(),
            generator_id: "g".into(),
            prompt_id: "0".into(),
            feature: FeatureVector::new(values.clone()).unwrap(),
            payload_ref: None,
        };
        let mut buf = Vec::new();
        write_features_jsonl(&mut buf, &[s]).unwrap();
        let back = read_features_jsonl(buf.as_slice(), "mem").unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back[0].feature.as_slice()), bits(&values));
    }

    #[test]
    fn non_finite_and_malformed_lines_are_rejected() {
        let nan =
            r#"{"sample_id":"a","concept":"c","generator":"g","prompt_id":"0","feature":[NaN]}"#;
        assert!(matches!(
            read_features_jsonl(nan.as_bytes(), "f"),
            Err(Error::Parse { line: 1, .. })
        ));
        let huge = "\n{\"sample_id\":\"a\",\"concept\":\"c\",\"generator\":\"g\",\"prompt_id\":\"0\",\"feature\":[1e999]}";
        assert!(matches!(
            read_features_jsonl(huge.as_bytes(), "f"),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
