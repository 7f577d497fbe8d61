//! Telemetry (T1–T6) and textual (C1–C5) features.
//!
//! A [`FeatureVector`] lays out, in a fixed canonical order, the selected
//! scalar features, then one-hot blocks for language, IDE, last character
//! and last non-whitespace character, and finally the whitespace-after-cursor
//! flag as a plain 0/1 entry.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{CompletionEvent, Dataset, Ide};

/// Languages with a dedicated one-hot slot; anything else maps to the
/// trailing unknown bucket. Version 1 of the table.
pub const LANGUAGES: [&str; 20] = [
    "javascript",
    "typescript",
    "typescriptreact",
    "python",
    "vue",
    "php",
    "dart",
    "javascriptreact",
    "go",
    "css",
    "cpp",
    "html",
    "scss",
    "markdown",
    "csharp",
    "java",
    "json",
    "rust",
    "ruby",
    "c",
];
pub const LANGUAGE_TABLE_VERSION: u32 = 1;
pub const LANGUAGE_SLOTS: usize = LANGUAGES.len() + 1;
pub const UNKNOWN_LANGUAGE: usize = LANGUAGES.len();

/// Printable ASCII 32..=125, then `other`, then `none`.
pub const CHAR_SLOTS: usize = 96;
pub const CHAR_OTHER: usize = 94;
pub const CHAR_NONE: usize = 95;

pub fn language_index(language: &str) -> usize {
    let lower = language.to_ascii_lowercase();
    LANGUAGES
        .iter()
        .position(|l| *l == lower)
        .unwrap_or(UNKNOWN_LANGUAGE)
}

pub fn char_index(c: Option<char>) -> usize {
    match c {
        None => CHAR_NONE,
        Some(c) if (32..=125).contains(&(c as u32)) => c as usize - 32,
        Some(_) => CHAR_OTHER,
    }
}

fn char_slot_name(slot: usize) -> String {
    match slot {
        CHAR_OTHER => "other".into(),
        CHAR_NONE => "none".into(),
        s => format!("{:?}", char::from(32 + s as u8)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TelemetryFeatures {
    pub t1_time_since_last: f64,
    pub t2_document_length: f64,
    pub t3_cursor_offset: f64,
    pub t4_offset_percent: f64,
    pub t5_language: usize,
    pub t6_ide: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextualFeatures {
    pub c1_last_line_len: usize,
    pub c2_last_line_len_nows: usize,
    pub c3_whitespace_after_cursor: bool,
    pub c4_last_char: usize,
    pub c5_last_nonws_char: usize,
}

pub fn telemetry_from_parts(
    time_since_last_completion: u64,
    document_length: u64,
    cursor_offset: u64,
    language: &str,
    ide: Ide,
) -> TelemetryFeatures {
    let t2 = document_length as f64;
    let t3 = cursor_offset as f64;
    TelemetryFeatures {
        t1_time_since_last: time_since_last_completion as f64,
        t2_document_length: t2,
        t3_cursor_offset: t3,
        t4_offset_percent: (t3 / t2.max(1.0)).clamp(0.0, 1.0),
        t5_language: language_index(language),
        t6_ide: ide.index(),
    }
}

pub fn extract_telemetry(event: &CompletionEvent) -> TelemetryFeatures {
    telemetry_from_parts(
        event.time_since_last_completion,
        event.document_length,
        event.cursor_offset,
        &event.language,
        event.ide,
    )
}

pub fn extract_textual(prefix: &str, suffix: &str) -> TextualFeatures {
    let last_line = prefix.rsplit('\n').next().unwrap_or("");
    let c1 = last_line.chars().count();
    let c2 = last_line.chars().filter(|c| !c.is_whitespace()).count();
    let c3 = suffix.chars().next().map_or(true, char::is_whitespace);
    let c4 = char_index(prefix.chars().next_back());
    let c5 = char_index(prefix.chars().rev().find(|c| !c.is_whitespace()));
    TextualFeatures {
        c1_last_line_len: c1,
        c2_last_line_len_nows: c2,
        c3_whitespace_after_cursor: c3,
        c4_last_char: c4,
        c5_last_nonws_char: c5,
    }
}

/// Feature groups selectable by a [`FeatureMask`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    T1,
    T2,
    T3,
    T4,
    T5,
    T6,
    C1,
    C2,
    C3,
    C4,
    C5,
}

impl Feature {
    pub const ALL: [Feature; 11] = [
        Feature::T1,
        Feature::T2,
        Feature::T3,
        Feature::T4,
        Feature::T5,
        Feature::T6,
        Feature::C1,
        Feature::C2,
        Feature::C3,
        Feature::C4,
        Feature::C5,
    ];

    pub fn is_textual(self) -> bool {
        matches!(self, Feature::C1 | Feature::C2 | Feature::C3 | Feature::C4 | Feature::C5)
    }
}

/// The six continuous features, in layout order.
pub const SCALARS: [Feature; 6] = [
    Feature::T1,
    Feature::T2,
    Feature::T3,
    Feature::T4,
    Feature::C1,
    Feature::C2,
];

const SCALAR_NAMES: [&str; 6] = [
    "t1_time_since_last",
    "t2_document_length",
    "t3_cursor_offset",
    "t4_offset_percent",
    "c1_last_line_len",
    "c2_last_line_len_nows",
];

/// A set of features; listing order is irrelevant.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureMask(BTreeSet<Feature>);

impl FeatureMask {
    pub fn new(features: impl IntoIterator<Item = Feature>) -> Self {
        FeatureMask(features.into_iter().collect())
    }

    /// T1–T5: the telemetry-only baseline.
    pub fn telemetry_only() -> Self {
        Self::new([Feature::T1, Feature::T2, Feature::T3, Feature::T4, Feature::T5])
    }

    /// Every T and C feature: the full logistic baseline.
    pub fn baseline() -> Self {
        Self::new(Feature::ALL)
    }

    /// T1–T6: the telemetry given to the encoder extensions.
    pub fn extension() -> Self {
        Self::new([
            Feature::T1,
            Feature::T2,
            Feature::T3,
            Feature::T4,
            Feature::T5,
            Feature::T6,
        ])
    }

    pub fn contains(&self, f: Feature) -> bool {
        self.0.contains(&f)
    }

    pub fn needs_textual(&self) -> bool {
        self.0.iter().any(|f| f.is_textual())
    }

    pub fn iter(&self) -> impl Iterator<Item = Feature> + '_ {
        self.0.iter().copied()
    }
}

/// Names every position of a feature vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub mask: FeatureMask,
    pub names: Vec<String>,
}

impl FeatureLayout {
    pub fn new(mask: FeatureMask) -> Self {
        let mut names = Vec::new();
        for (f, name) in SCALARS.iter().zip(SCALAR_NAMES) {
            if mask.contains(*f) {
                names.push(name.to_string());
            }
        }
        if mask.contains(Feature::T5) {
            names.extend(LANGUAGES.iter().map(|l| format!("t5_language={l}")));
            names.push("t5_language=unknown".into());
        }
        if mask.contains(Feature::T6) {
            names.extend(Ide::ALL.iter().map(|i| format!("t6_ide={}", i.as_str())));
        }
        if mask.contains(Feature::C4) {
            names.extend((0..CHAR_SLOTS).map(|s| format!("c4_last_char={}", char_slot_name(s))));
        }
        if mask.contains(Feature::C5) {
            names.extend((0..CHAR_SLOTS).map(|s| format!("c5_last_nonws_char={}", char_slot_name(s))));
        }
        if mask.contains(Feature::C3) {
            names.push("c3_whitespace_after_cursor".into());
        }
        FeatureLayout { mask, names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Ranges of one-hot blocks (each sums to one in every vector).
    pub fn one_hot_blocks(&self) -> Vec<std::ops::Range<usize>> {
        let mut blocks = Vec::new();
        let mut start = SCALARS.iter().filter(|f| self.mask.contains(**f)).count();
        for (f, width) in [
            (Feature::T5, LANGUAGE_SLOTS),
            (Feature::T6, Ide::ALL.len()),
            (Feature::C4, CHAR_SLOTS),
            (Feature::C5, CHAR_SLOTS),
        ] {
            if self.mask.contains(f) {
                blocks.push(start..start + width);
                start += width;
            }
        }
        blocks
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    None,
    Log1p,
}

impl Transform {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Transform::None => x,
            Transform::Log1p => x.max(0.0).ln_1p(),
        }
    }
}

pub const STD_FLOOR: f64 = 1e-8;

/// Per-scalar transform plus optional standardization (fitted on training
/// data only). Indexed like [`SCALARS`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSpec {
    pub transforms: [Transform; 6],
    pub standardization: Option<Standardization>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: [f64; 6],
    pub std: [f64; 6],
}

impl Default for ScalingSpec {
    /// Log scaling for counts and durations, none for the offset fraction.
    fn default() -> Self {
        use Transform::*;
        ScalingSpec {
            transforms: [Log1p, Log1p, Log1p, None, Log1p, Log1p],
            standardization: Option::None,
        }
    }
}

impl ScalingSpec {
    fn scale(&self, slot: usize, raw: f64) -> f64 {
        let x = self.transforms[slot].apply(raw);
        match &self.standardization {
            Some(s) => (x - s.mean[slot]) / s.std[slot],
            None => x,
        }
    }
}

fn raw_scalars(t: &TelemetryFeatures, c: Option<&TextualFeatures>) -> [f64; 6] {
    let (c1, c2) = c.map_or((0.0, 0.0), |c| (c.c1_last_line_len as f64, c.c2_last_line_len_nows as f64));
    [
        t.t1_time_since_last,
        t.t2_document_length,
        t.t3_cursor_offset,
        t.t4_offset_percent,
        c1,
        c2,
    ]
}

/// Fits means and population standard deviations over the post-transform
/// scalar features of `dataset`.
pub fn fit_scaling(dataset: &Dataset) -> ScalingSpec {
    let mut spec = ScalingSpec::default();
    let n = dataset.len().max(1) as f64;
    let rows: Vec<[f64; 6]> = dataset
        .samples
        .iter()
        .map(|s| {
            let t = extract_telemetry(&s.event);
            let c = extract_textual(&s.event.prefix, &s.event.suffix);
            let raw = raw_scalars(&t, Some(&c));
            std::array::from_fn(|k| spec.transforms[k].apply(raw[k]))
        })
        .collect();
    let mut mean = [0.0; 6];
    for r in &rows {
        for k in 0..6 {
            mean[k] += r[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 6];
    for r in &rows {
        for k in 0..6 {
            var[k] += (r[k] - mean[k]).powi(2);
        }
    }
    let std = var.map(|v| (v / n).sqrt().max(STD_FLOOR));
    spec.standardization = Some(Standardization { mean, std });
    spec
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub layout: Arc<FeatureLayout>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FeatureError {
    #[error("feature mask selects textual features but none were supplied")]
    MissingTextual,
    #[error("feature layout mismatch: expected {expected} positions, got {actual}")]
    LayoutMismatch { expected: usize, actual: usize },
    #[error("feature layout mismatch at position {position}: expected `{expected}`, got `{actual}`")]
    NameMismatch {
        position: usize,
        expected: String,
        actual: String,
    },
}

impl FeatureLayout {
    /// Checks that `other` names exactly the same positions.
    pub fn check_matches(&self, other: &FeatureLayout) -> Result<(), FeatureError> {
        if self.len() != other.len() {
            return Err(FeatureError::LayoutMismatch {
                expected: self.len(),
                actual: other.len(),
            });
        }
        if let Some((i, (a, b))) = self
            .names
            .iter()
            .zip(&other.names)
            .enumerate()
            .find(|(_, (a, b))| a != b)
        {
            return Err(FeatureError::NameMismatch {
                position: i,
                expected: a.clone(),
                actual: b.clone(),
            });
        }
        Ok(())
    }
}

/// Assembles one feature vector; builds its layout from `mask`.
pub fn assemble(
    telemetry: &TelemetryFeatures,
    textual: Option<&TextualFeatures>,
    spec: &ScalingSpec,
    mask: &FeatureMask,
) -> Result<FeatureVector, FeatureError> {
    let layout = Arc::new(FeatureLayout::new(mask.clone()));
    assemble_into(telemetry, textual, spec, &layout)
}

pub fn assemble_into(
    telemetry: &TelemetryFeatures,
    textual: Option<&TextualFeatures>,
    spec: &ScalingSpec,
    layout: &Arc<FeatureLayout>,
) -> Result<FeatureVector, FeatureError> {
    let mask = &layout.mask;
    if mask.needs_textual() && textual.is_none() {
        return Err(FeatureError::MissingTextual);
    }
    let raw = raw_scalars(telemetry, textual);
    let mut values = Vec::with_capacity(layout.len());
    for (slot, f) in SCALARS.iter().enumerate() {
        if mask.contains(*f) {
            values.push(spec.scale(slot, raw[slot]));
        }
    }
    let mut one_hot = |width: usize, hot: usize| {
        let start = values.len();
        values.resize(start + width, 0.0);
        values[start + hot.min(width - 1)] = 1.0;
    };
    if mask.contains(Feature::T5) {
        one_hot(LANGUAGE_SLOTS, telemetry.t5_language);
    }
    if mask.contains(Feature::T6) {
        one_hot(Ide::ALL.len(), telemetry.t6_ide);
    }
    if let Some(c) = textual {
        if mask.contains(Feature::C4) {
            one_hot(CHAR_SLOTS, c.c4_last_char);
        }
        if mask.contains(Feature::C5) {
            one_hot(CHAR_SLOTS, c.c5_last_nonws_char);
        }
        if mask.contains(Feature::C3) {
            values.push(if c.c3_whitespace_after_cursor { 1.0 } else { 0.0 });
        }
    }
    if values.len() != layout.len() {
        return Err(FeatureError::LayoutMismatch {
            expected: layout.len(),
            actual: values.len(),
        });
    }
    Ok(FeatureVector {
        values,
        layout: Arc::clone(layout),
    })
}

/// Mask, scaling and layout bundled for repeated encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEncoder {
    pub scaling: ScalingSpec,
    pub layout: Arc<FeatureLayout>,
}

impl FeatureEncoder {
    pub fn new(mask: FeatureMask, scaling: ScalingSpec) -> Self {
        FeatureEncoder {
            scaling,
            layout: Arc::new(FeatureLayout::new(mask)),
        }
    }

    pub fn encode_parts(&self, telemetry: &TelemetryFeatures, prefix: &str, suffix: &str) -> FeatureVector {
        let textual = self
            .layout
            .mask
            .needs_textual()
            .then(|| extract_textual(prefix, suffix));
        assemble_into(telemetry, textual.as_ref(), &self.scaling, &self.layout)
            .expect("textual features supplied whenever the mask needs them")
    }

    pub fn encode(&self, event: &CompletionEvent) -> FeatureVector {
        self.encode_parts(&extract_telemetry(event), &event.prefix, &event.suffix)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tele(t1: f64, t2: u64, t3: u64) -> TelemetryFeatures {
        telemetry_from_parts(t1 as u64, t2, t3, "python", Ide::Vscode)
    }

    #[test]
    fn offset_percent() {
        assert_eq!(tele(0.0, 100, 50).t4_offset_percent, 0.5);
        assert_eq!(tele(0.0, 0, 0).t4_offset_percent, 0.0);
    }

    #[test]
    fn unknown_language_buckets() {
        let t = telemetry_from_parts(0, 1, 0, "brainfuck", Ide::Jetbrains);
        assert_eq!(t.t5_language, UNKNOWN_LANGUAGE);
        assert_eq!(UNKNOWN_LANGUAGE, 20);
        assert_eq!(language_index("Python"), 3);
        assert_eq!(language_index("c"), 19);
    }

    #[test]
    fn textual_examples() {
        let c = extract_textual("def f():\n    x.", "");
        assert_eq!(c.c1_last_line_len, 6);
        assert_eq!(c.c2_last_line_len_nows, 2);
        assert_eq!(c.c4_last_char, char_index(Some('.')));
        assert_eq!(c.c5_last_nonws_char, char_index(Some('.')));

        let c = extract_textual("", "");
        assert_eq!((c.c1_last_line_len, c.c2_last_line_len_nows), (0, 0));
        assert_eq!((c.c4_last_char, c.c5_last_nonws_char), (CHAR_NONE, CHAR_NONE));

        assert!(extract_textual("a", " )").c3_whitespace_after_cursor);
        assert!(!extract_textual("a", ")").c3_whitespace_after_cursor);
        assert!(extract_textual("a", "").c3_whitespace_after_cursor);
    }

    #[test]
    fn char_map_edges() {
        assert_eq!(char_index(Some(' ')), 0);
        assert_eq!(char_index(Some('}')), 93);
        assert_eq!(char_index(Some('~')), CHAR_OTHER);
        assert_eq!(char_index(Some('é')), CHAR_OTHER);
        assert_eq!(char_index(Some('\t')), CHAR_OTHER);
        let c = extract_textual("x = y é  ", "");
        assert_eq!(c.c4_last_char, char_index(Some(' ')));
        assert_eq!(c.c5_last_nonws_char, CHAR_OTHER);
    }

    #[test]
    fn log1p_scaling_values() {
        let spec = ScalingSpec::default();
        let mask = FeatureMask::new([Feature::T1]);
        let fv = assemble(&tele(0.0, 10, 0), None, &spec, &mask).unwrap();
        assert_eq!(fv.values, vec![0.0]);
        let t = TelemetryFeatures {
            t1_time_since_last: std::f64::consts::E - 1.0,
            ..tele(0.0, 10, 0)
        };
        let fv = assemble(&t, None, &spec, &mask).unwrap();
        assert!((fv.values[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layout_sizes() {
        assert_eq!(FeatureLayout::new(FeatureMask::extension()).len(), 4 + 21 + 2);
        assert_eq!(FeatureLayout::new(FeatureMask::baseline()).len(), 6 + 21 + 2 + 96 + 96 + 1);
        assert_eq!(FeatureLayout::new(FeatureMask::telemetry_only()).len(), 4 + 21);
    }

    #[test]
    fn textual_mask_without_textual_input_fails() {
        let r = assemble(&tele(1.0, 2, 1), None, &ScalingSpec::default(), &FeatureMask::baseline());
        assert_eq!(r.unwrap_err(), FeatureError::MissingTextual);
    }

    #[test]
    fn fit_scaling_two_points_and_constants() {
        use crate::events::{label, Dataset, InvocationKind, Provenance, Verdict};
        let mk = |t4num: u64| CompletionEvent {
            prefix: String::new(),
            suffix: String::new(),
            timestamp: 0,
            time_since_last_completion: 5,
            document_length: 2,
            cursor_offset: t4num,
            language: "go".into(),
            ide: Ide::Vscode,
            invocation_kind: InvocationKind::Manual,
            verdict: Verdict::Accepted,
            ground_truth: None,
            completion: None,
            user_id: "u".into(),
            session_hint: None,
        };
        let ds = Dataset {
            samples: vec![label(mk(0)), label(mk(2))],
            provenance: Provenance::RealLog,
            seed: None,
        };
        let spec = fit_scaling(&ds);
        let st = spec.standardization.clone().unwrap();
        // t4 in {0, 1}: mean 0.5, population std 0.5
        assert!((st.mean[3] - 0.5).abs() < 1e-15);
        assert!((st.std[3] - 0.5).abs() < 1e-15);
        // t1 is constant
        assert_eq!(st.std[0], STD_FLOOR);
        let enc = FeatureEncoder::new(FeatureMask::new([Feature::T1, Feature::T4]), spec);
        let fv = enc.encode(&ds.samples[0].event);
        assert_eq!(fv.values[0], 0.0);
        assert_eq!(fv.values[1], -1.0);
    }

    #[test]
    fn two_point_standardization_on_raw_values() {
        // a log-free feature {0, 2} → mean 1, population std 1
        let xs = [0.0f64, 2.0];
        let mean = xs.iter().sum::<f64>() / 2.0;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        assert_eq!((mean, std), (1.0, 1.0));
    }

    proptest! {
        #[test]
        fn textual_invariants(prefix in "\\PC{0,40}", suffix in "\\PC{0,10}") {
            let c = extract_textual(&prefix, &suffix);
            prop_assert!(c.c2_last_line_len_nows <= c.c1_last_line_len);
            prop_assert_eq!(c.c4_last_char == CHAR_NONE, prefix.is_empty());
            let mut other = suffix.chars().take(1).collect::<String>();
            other.push_str(if suffix.is_empty() { "" } else { "zz(" });
            prop_assert_eq!(
                extract_textual(&prefix, &other).c3_whitespace_after_cursor,
                c.c3_whitespace_after_cursor
            );
        }

        #[test]
        fn one_hot_blocks_sum_to_one(
            t1 in 0u64..10_000_000, doc in 0u64..100_000, frac in 0.0f64..1.0,
            lang in "[a-z]{1,12}", prefix in "\\PC{0,30}", suffix in "\\PC{0,5}", jb in any::<bool>()
        ) {
            let cursor = (doc as f64 * frac) as u64;
            let ide = if jb { Ide::Jetbrains } else { Ide::Vscode };
            let t = telemetry_from_parts(t1, doc, cursor, &lang, ide);
            prop_assert!((0.0..=1.0).contains(&t.t4_offset_percent));
            let c = extract_textual(&prefix, &suffix);
            let fv = assemble(&t, Some(&c), &ScalingSpec::default(), &FeatureMask::baseline()).unwrap();
            prop_assert_eq!(fv.values.len(), fv.layout.len());
            for block in fv.layout.one_hot_blocks() {
                let s: f64 = fv.values[block].iter().sum();
                prop_assert_eq!(s, 1.0);
            }
        }

        #[test]
        fn mask_order_is_irrelevant(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut feats = Feature::ALL.to_vec();
            feats.shuffle(&mut crate::rng::seeded(seed, "mask"));
            let keep = (seed % 11) as usize + 1;
            let a = FeatureMask::new(feats[..keep].iter().copied());
            let mut rev = feats[..keep].to_vec();
            rev.reverse();
            let b = FeatureMask::new(rev);
            let t = tele(1234.0, 500, 120);
            let c = extract_textual("x = foo.", "\n");
            let fa = assemble(&t, Some(&c), &ScalingSpec::default(), &a).unwrap();
            let fb = assemble(&t, Some(&c), &ScalingSpec::default(), &b).unwrap();
            prop_assert_eq!(fa, fb);
        }

        #[test]
        fn log1p_is_monotone(x in 0.0f64..1e9, dx in 1e-3f64..1e6) {
            prop_assert!(Transform::Log1p.apply(x) < Transform::Log1p.apply(x + dx));
        }
    }
}
