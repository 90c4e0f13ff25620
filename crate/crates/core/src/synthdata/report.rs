//! Template grammar for synthetic reports, and a rule-based reader.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::phantom::Phenotype;

/// Sentences that carry no label information.
pub const DISTRACTORS: [&str; 6] = [
    "the study was performed with contrast",
    "no pericardial effusion is seen",
    "the right ventricle is normal",
    "images are of good quality",
    "there is mild motion artifact",
    "the aorta is normal in size",
];

/// Ejection fraction rounded down to a multiple of five percent.
pub fn ef_percent_bucket(ef: f64) -> u32 {
    ((ef * 100.0).floor() as u32 / 5) * 5
}

pub fn ef_quantitative(ef: f64) -> String {
    format!("the ejection fraction is {} percent", ef_percent_bucket(ef))
}

pub fn ef_qualitative(ef: f64) -> &'static str {
    if ef >= 0.55 {
        "systolic function is normal"
    } else if ef >= 0.40 {
        "systolic function is mildly reduced"
    } else if ef >= 0.30 {
        "systolic function is moderately reduced"
    } else {
        "systolic function is severely reduced"
    }
}

pub fn wall_sentence(hypertrophy: bool) -> &'static str {
    if hypertrophy {
        "the walls are thickened"
    } else {
        "wall thickness is normal"
    }
}

pub fn size_sentence(dilation: bool) -> &'static str {
    if dilation {
        "the left ventricle is dilated"
    } else {
        "the left ventricle is normal in size"
    }
}

/// Every word the grammar can emit, sorted and deduplicated.
pub fn grammar_words() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    let mut push = |s: &str| words.extend(s.split_whitespace().map(str::to_string));
    push("the ejection fraction is percent");
    for ef in [0.6, 0.45, 0.35, 0.1] {
        push(ef_qualitative(ef));
    }
    for b in [true, false] {
        push(wall_sentence(b));
        push(size_sentence(b));
    }
    DISTRACTORS.iter().for_each(|d| push(d));
    words.extend((5..=85).step_by(5).map(|n| n.to_string()));
    words.sort();
    words.dedup();
    words
}

/// Report for a phenotype: two ejection-fraction sentences, one wall and one
/// size sentence, and two to four distractors, in shuffled order.
pub fn write_report(p: &Phenotype, rng: &mut impl Rng) -> Vec<String> {
    let mut sentences = vec![
        ef_quantitative(p.ef),
        ef_qualitative(p.ef).to_string(),
        wall_sentence(p.flag("hypertrophy")).to_string(),
        size_sentence(p.flag("dilation")).to_string(),
    ];
    let k = rng.random_range(2..=4);
    let mut pool: Vec<&str> = DISTRACTORS.to_vec();
    pool.shuffle(rng);
    sentences.extend(pool.into_iter().take(k).map(str::to_string));
    sentences.shuffle(rng);
    sentences
}

/// Recover label flags from report text.
pub fn read_flags(report: &[String]) -> BTreeMap<String, bool> {
    let mut flags = BTreeMap::new();
    for s in report {
        let words: Vec<&str> = s.split_whitespace().collect();
        if s.starts_with("the ejection fraction is") {
            if let Some(n) = words.get(4).and_then(|w| w.parse::<u32>().ok()) {
                flags.insert("low_ef".to_string(), n < 40);
            }
        }
        if s.starts_with("systolic function is") && !flags.contains_key("low_ef") {
            let low = s.ends_with("moderately reduced") || s.ends_with("severely reduced");
            flags.insert("low_ef".to_string(), low);
        }
        if s == wall_sentence(true) || s == wall_sentence(false) {
            flags.insert("hypertrophy".to_string(), s == wall_sentence(true));
        }
        if s == size_sentence(true) || s == size_sentence(false) {
            flags.insert("dilation".to_string(), s == size_sentence(true));
        }
    }
    flags
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_respects_forty_percent_cutoff() {
        assert_eq!(ef_percent_bucket(0.3999), 35);
        assert_eq!(ef_percent_bucket(0.40), 40);
        assert_eq!(ef_percent_bucket(0.85), 85);
        assert_eq!(ef_percent_bucket(0.05), 5);
    }
}
