//! Emotion ↔ action-unit relatedness tables.
//!
//! A table lists, per basic emotion, the AUs associated with it. Each entry is
//! either prototypical (weight exactly 1.0) or observational with a weight in
//! (0, 1]. Cognitive tables carry both kinds; tables inferred from annotated
//! data carry observational frequencies only.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::labels::{au_index, Emotion, CANONICAL_AUS, N_AUS, N_EMOTIONS};

const COGNITIVE_JSON: &str = include_str!("../data/cognitive.json");
const EMPIRICAL_JSON: &str = include_str!("../data/empirical.json");
const COMPOUND_JSON: &str = include_str!("../data/compound_classes.json");

/// Default inclusion threshold for [`infer_table`].
pub const DEFAULT_INFERENCE_THRESHOLD: f64 = 0.1;

/// Constituent pairs whose compound class receives the positive-valence term.
const VALENCE_PAIRS: [(Emotion, Emotion); 2] = [
    (Emotion::Happiness, Emotion::Surprise),
    (Emotion::Happiness, Emotion::Disgust),
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuEntry {
    pub au: u32,
    pub weight: f64,
    pub prototypical: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelatednessTable {
    rows: [Vec<AuEntry>; N_EMOTIONS],
}

impl RelatednessTable {
    /// Builds and validates a table from per-emotion entries.
    pub fn new(rows: [Vec<AuEntry>; N_EMOTIONS]) -> Result<Self> {
        let table = RelatednessTable { rows };
        table.validate()?;
        Ok(table)
    }

    /// The bundled cognitive table (prototypical + weighted observational AUs).
    pub fn cognitive() -> Self {
        Self::from_json_str(COGNITIVE_JSON).expect("bundled cognitive table is valid")
    }

    /// The bundled empirical table (activation frequencies only).
    pub fn empirical() -> Self {
        Self::from_json_str(EMPIRICAL_JSON).expect("bundled empirical table is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: TableFile = serde_json::from_str(text)?;
        file.into_table()
    }

    pub fn to_json_string(&self) -> String {
        let file = TableFile::from_table(self);
        serde_json::to_string_pretty(&file).expect("table serialization cannot fail")
    }

    pub fn au_ids(&self) -> &'static [u32; N_AUS] {
        &CANONICAL_AUS
    }

    pub fn row(&self, emo: Emotion) -> &[AuEntry] {
        &self.rows[emo.index()]
    }

    pub fn entry(&self, emo: Emotion, au: u32) -> Option<&AuEntry> {
        self.row(emo).iter().find(|e| e.au == au)
    }

    /// p(AU | emotion): 1/0 membership when unweighted, the entry weight
    /// (1.0 for prototypical AUs) when weighted.
    pub fn au_given_emotion(&self, au: u32, emo: Emotion, weighted: bool) -> Result<f64> {
        au_index(au)?;
        Ok(match self.entry(emo, au) {
            Some(e) if weighted => e.weight,
            Some(_) => 1.0,
            None => 0.0,
        })
    }

    /// Dense p(AU | emotion) matrix, rows by emotion index, columns by
    /// canonical AU index.
    pub fn matrix(&self, weighted: bool) -> [[f64; N_AUS]; N_EMOTIONS] {
        let mut m = [[0.0; N_AUS]; N_EMOTIONS];
        for emo in Emotion::ALL {
            for e in self.row(emo) {
                let col = au_index(e.au).expect("validated");
                m[emo.index()][col] = if weighted { e.weight } else { 1.0 };
            }
        }
        m
    }

    fn validate(&self) -> Result<()> {
        if !self.rows[Emotion::Neutral.index()].is_empty() {
            return Err(Error::InvalidTable(
                "emotion `neutral` must have an empty entry set".into(),
            ));
        }
        for emo in Emotion::ALL {
            let mut seen = BTreeSet::new();
            for e in self.row(emo) {
                if au_index(e.au).is_err() {
                    return Err(Error::InvalidTable(format!("unknown AU id {} in row `{emo}`", e.au)));
                }
                if !seen.insert(e.au) {
                    return Err(Error::InvalidTable(format!("duplicate AU{} in row `{emo}`", e.au)));
                }
                if !(e.weight > 0.0 && e.weight <= 1.0) {
                    return Err(Error::InvalidTable(format!(
                        "weight out of range: AU{} in row `{emo}` has weight {}",
                        e.au, e.weight
                    )));
                }
                if e.prototypical && e.weight != 1.0 {
                    return Err(Error::InvalidTable(format!(
                        "prototypical AU{} in row `{emo}` must have weight 1.0",
                        e.au
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// JSON file format

#[derive(Serialize, Deserialize)]
struct TableFile {
    au_ids: Vec<u32>,
    emotions: EmotionRows,
}

#[derive(Default, Serialize, Deserialize)]
struct RowFile {
    #[serde(default)]
    prototypical: Vec<u32>,
    #[serde(default)]
    observational: Vec<(u32, f64)>,
}

/// Ordered emotion rows; duplicate keys are kept so validation can reject them.
struct EmotionRows(Vec<(String, RowFile)>);

impl Serialize for EmotionRows {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.0.len()))?;
        for (name, row) in &self.0 {
            map.serialize_entry(name, row)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for EmotionRows {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct RowsVisitor;

        impl<'de> Visitor<'de> for RowsVisitor {
            type Value = EmotionRows;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map from emotion name to AU row")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> std::result::Result<EmotionRows, A::Error> {
                let mut rows = Vec::new();
                while let Some((k, v)) = access.next_entry::<String, RowFile>()? {
                    rows.push((k, v));
                }
                Ok(EmotionRows(rows))
            }
        }

        deserializer.deserialize_map(RowsVisitor)
    }
}

impl TableFile {
    fn into_table(self) -> Result<RelatednessTable> {
        let ids: BTreeSet<u32> = self.au_ids.iter().copied().collect();
        if self.au_ids.len() != N_AUS || ids.len() != N_AUS {
            return Err(Error::InvalidTable(format!(
                "au_ids must list exactly {N_AUS} distinct ids, got {}",
                self.au_ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|id| au_index(**id).is_err()) {
            return Err(Error::InvalidTable(format!(
                "unknown AU id {bad} in au_ids (expected the canonical set {CANONICAL_AUS:?})"
            )));
        }

        let mut rows: [Vec<AuEntry>; N_EMOTIONS] = Default::default();
        let mut filled = [false; N_EMOTIONS];
        for (name, row) in self.emotions.0 {
            let emo: Emotion = name
                .parse()
                .map_err(|_| Error::InvalidTable(format!("unknown emotion `{name}`")))?;
            if std::mem::replace(&mut filled[emo.index()], true) {
                return Err(Error::InvalidTable(format!("duplicate emotion `{emo}`")));
            }
            let entries = &mut rows[emo.index()];
            for au in row.prototypical {
                check_listed(&ids, au, emo)?;
                entries.push(AuEntry {
                    au,
                    weight: 1.0,
                    prototypical: true,
                });
            }
            for (au, weight) in row.observational {
                check_listed(&ids, au, emo)?;
                entries.push(AuEntry {
                    au,
                    weight,
                    prototypical: false,
                });
            }
        }
        RelatednessTable::new(rows)
    }

    fn from_table(table: &RelatednessTable) -> Self {
        let rows = Emotion::ALL
            .iter()
            .map(|&emo| {
                let row = table.row(emo);
                let file = RowFile {
                    prototypical: row.iter().filter(|e| e.prototypical).map(|e| e.au).collect(),
                    observational: row
                        .iter()
                        .filter(|e| !e.prototypical)
                        .map(|e| (e.au, e.weight))
                        .collect(),
                };
                (emo.name().to_string(), file)
            })
            .collect();
        TableFile {
            au_ids: CANONICAL_AUS.to_vec(),
            emotions: EmotionRows(rows),
        }
    }
}

fn check_listed(ids: &BTreeSet<u32>, au: u32, emo: Emotion) -> Result<()> {
    if ids.contains(&au) {
        Ok(())
    } else {
        Err(Error::InvalidTable(format!("unknown AU id {au} in row `{emo}`")))
    }
}

// ---------------------------------------------------------------------------
// Empirical inference

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceWarning {
    pub emotion: Emotion,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct InferredTable {
    pub table: RelatednessTable,
    pub warnings: Vec<InferenceWarning>,
}

/// Infers a relatedness table from samples annotated with both an emotion and
/// a full AU activation vector.
///
/// For each (emotion, AU) pair the activation frequency among that emotion's
/// samples becomes the entry weight when it reaches `threshold`. Neutral stays
/// empty. Emotions without samples are skipped and reported as warnings.
pub fn infer_table(samples: &[(Emotion, [bool; N_AUS])], threshold: f64) -> Result<InferredTable> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("cannot infer a table from zero samples".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidInput(format!("threshold {threshold} outside [0, 1]")));
    }

    let mut totals = [0u64; N_EMOTIONS];
    let mut active = [[0u64; N_AUS]; N_EMOTIONS];
    for (emo, aus) in samples {
        totals[emo.index()] += 1;
        for (count, &on) in active[emo.index()].iter_mut().zip(aus) {
            *count += u64::from(on);
        }
    }

    let mut rows: [Vec<AuEntry>; N_EMOTIONS] = Default::default();
    let mut warnings = Vec::new();
    for emo in Emotion::ALL.into_iter().skip(1) {
        let total = totals[emo.index()];
        if total == 0 {
            log::warn!("no samples for emotion `{emo}`; row left empty");
            warnings.push(InferenceWarning {
                emotion: emo,
                reason: "no samples".into(),
            });
            continue;
        }
        for (col, &count) in active[emo.index()].iter().enumerate() {
            let freq = count as f64 / total as f64;
            if count > 0 && freq >= threshold {
                rows[emo.index()].push(AuEntry {
                    au: CANONICAL_AUS[col],
                    weight: freq,
                    prototypical: false,
                });
            }
        }
    }
    Ok(InferredTable {
        table: RelatednessTable::new(rows)?,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Compound classes

#[derive(Clone, Debug, PartialEq)]
pub struct CompoundClass {
    pub name: String,
    pub emo1: Emotion,
    pub emo2: Emotion,
    /// AU id → p(AU | class) weight.
    pub au_weights: BTreeMap<u32, f64>,
    pub valence_term_applies: bool,
}

fn is_valence_pair(a: Emotion, b: Emotion) -> bool {
    VALENCE_PAIRS.iter().any(|&(x, y)| (x, y) == (a, b) || (y, x) == (a, b))
}

/// Compound class whose AU association is the union of both constituents'
/// rows, keeping the larger weight when both list an AU.
pub fn compound_union(table: &RelatednessTable, emo1: Emotion, emo2: Emotion) -> Result<CompoundClass> {
    if emo1 == emo2 {
        return Err(Error::InvalidInput(format!(
            "compound class needs two distinct emotions, got `{emo1}` twice"
        )));
    }
    let mut au_weights = BTreeMap::new();
    for e in table.row(emo1).iter().chain(table.row(emo2)) {
        let w = au_weights.entry(e.au).or_insert(0.0);
        *w = f64::max(*w, e.weight);
    }
    Ok(CompoundClass {
        name: format!("{}_{}", emo1.adverb(), emo2.adjective()),
        emo1,
        emo2,
        au_weights,
        valence_term_applies: is_valence_pair(emo1, emo2),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CompoundFile {
    classes: Vec<CompoundSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CompoundSpec {
    name: String,
    emo1: String,
    emo2: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    valence_term: Option<bool>,
    /// Per-class AU override; the constituent union is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aus: Option<Vec<(u32, f64)>>,
}

/// Parses a compound class list, resolving AU sets against `table`.
pub fn compound_classes_from_json(text: &str, table: &RelatednessTable) -> Result<Vec<CompoundClass>> {
    let file: CompoundFile = serde_json::from_str(text)?;
    if file.classes.is_empty() {
        return Err(Error::InvalidInput("compound class list is empty".into()));
    }
    file.classes
        .into_iter()
        .map(|spec| {
            let emo1: Emotion = spec.emo1.parse()?;
            let emo2: Emotion = spec.emo2.parse()?;
            let mut class = compound_union(table, emo1, emo2)?;
            class.name = spec.name;
            if let Some(v) = spec.valence_term {
                class.valence_term_applies = v;
            }
            if let Some(aus) = spec.aus {
                let mut weights = BTreeMap::new();
                for (au, w) in aus {
                    au_index(au)?;
                    if !(w > 0.0 && w <= 1.0) {
                        return Err(Error::InvalidInput(format!(
                            "weight out of range for AU{au} in class `{}`",
                            class.name
                        )));
                    }
                    weights.insert(au, w);
                }
                class.au_weights = weights;
            }
            Ok(class)
        })
        .collect()
}

pub fn load_compound_classes(path: impl AsRef<Path>, table: &RelatednessTable) -> Result<Vec<CompoundClass>> {
    compound_classes_from_json(&std::fs::read_to_string(path)?, table)
}

/// The bundled eleven-class list.
pub fn default_compound_classes(table: &RelatednessTable) -> Vec<CompoundClass> {
    compound_classes_from_json(COMPOUND_JSON, table).expect("bundled compound list is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(table: &RelatednessTable, emo: Emotion) -> BTreeMap<u32, (f64, bool)> {
        table
            .row(emo)
            .iter()
            .map(|e| (e.au, (e.weight, e.prototypical)))
            .collect()
    }

    #[test]
    fn cognitive_rows_match_reference() {
        let t = RelatednessTable::cognitive();
        type Row = (Emotion, &'static [u32], &'static [(u32, f64)]);
        let expected: [Row; 7] = [
            (Emotion::Neutral, &[], &[]),
            (Emotion::Happiness, &[12, 25], &[(6, 0.51)]),
            (
                Emotion::Sadness,
                &[4, 15],
                &[(1, 0.6), (6, 0.5), (11, 0.26), (17, 0.67)],
            ),
            (Emotion::Fear, &[1, 4, 20, 25], &[(2, 0.57), (5, 0.63), (26, 0.33)]),
            (Emotion::Anger, &[4, 7, 24], &[(10, 0.26), (17, 0.52), (23, 0.29)]),
            (Emotion::Surprise, &[1, 2, 25, 26], &[(5, 0.66)]),
            (Emotion::Disgust, &[9, 10, 17], &[(4, 0.31), (24, 0.26)]),
        ];
        for (emo, proto, obs) in expected {
            let mut want: BTreeMap<u32, (f64, bool)> = proto.iter().map(|&a| (a, (1.0, true))).collect();
            want.extend(obs.iter().map(|&(a, w)| (a, (w, false))));
            assert_eq!(set(&t, emo), want, "row {emo}");
        }
    }

    #[test]
    fn empirical_happy_row() {
        let t = RelatednessTable::empirical();
        let e = t.entry(Emotion::Happiness, 12).unwrap();
        assert_eq!(e.weight, 0.82);
        assert!(!e.prototypical);
        assert_eq!(t.entry(Emotion::Disgust, 25).unwrap().weight, 0.8);
        assert!(t.row(Emotion::Neutral).is_empty());
    }

    #[test]
    fn lookups() {
        let t = RelatednessTable::cognitive();
        assert_eq!(t.au_given_emotion(2, Emotion::Surprise, false).unwrap(), 1.0);
        assert_eq!(t.au_given_emotion(2, Emotion::Fear, false).unwrap(), 1.0);
        assert_eq!(t.au_given_emotion(6, Emotion::Happiness, true).unwrap(), 0.51);
        assert_eq!(t.au_given_emotion(12, Emotion::Happiness, true).unwrap(), 1.0);
        for weighted in [false, true] {
            assert_eq!(t.au_given_emotion(12, Emotion::Sadness, weighted).unwrap(), 0.0);
        }
        assert!(matches!(
            t.au_given_emotion(3, Emotion::Sadness, true),
            Err(Error::UnknownAu(3))
        ));
    }

    #[test]
    fn rejects_out_of_range_weight() {
        let text = COGNITIVE_JSON.replace("[6, 0.51]", "[6, 1.3]");
        let err = RelatednessTable::from_json_str(&text).unwrap_err();
        assert!(err.to_string().contains("weight out of range"), "{err}");
    }

    #[test]
    fn rejects_unknown_au_and_duplicates() {
        let text = COGNITIVE_JSON.replace("[6, 0.51]", "[8, 0.51]");
        assert!(RelatednessTable::from_json_str(&text)
            .unwrap_err()
            .to_string()
            .contains("unknown AU id 8"));

        let text = COGNITIVE_JSON.replace(
            "\"sadness\":",
            "\"happy\": { \"prototypical\": [12] },\n    \"sadness\":",
        );
        assert!(RelatednessTable::from_json_str(&text)
            .unwrap_err()
            .to_string()
            .contains("duplicate emotion"));

        let text = COGNITIVE_JSON.replace(
            "\"neutral\": { \"prototypical\": []",
            "\"neutral\": { \"prototypical\": [12]",
        );
        assert!(RelatednessTable::from_json_str(&text).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        for t in [RelatednessTable::cognitive(), RelatednessTable::empirical()] {
            let back = RelatednessTable::from_json_str(&t.to_json_string()).unwrap();
            assert_eq!(back, t);
        }
    }

    #[test]
    fn infer_simple_frequencies() {
        let mut samples = Vec::new();
        for i in 0..100 {
            let mut aus = [false; N_AUS];
            aus[au_index(12).unwrap()] = i < 82;
            aus[au_index(1).unwrap()] = i < 5;
            samples.push((Emotion::Happiness, aus));
        }
        let inferred = infer_table(&samples, 0.1).unwrap();
        let t = &inferred.table;
        assert_eq!(t.entry(Emotion::Happiness, 12).unwrap().weight, 0.82);
        assert!(t.entry(Emotion::Happiness, 1).is_none());
        // every other non-neutral emotion had no samples
        assert_eq!(inferred.warnings.len(), 5);
        assert!(infer_table(&[], 0.1).is_err());
    }

    #[test]
    fn compound_union_rules() {
        let t = RelatednessTable::cognitive();
        let hs = compound_union(&t, Emotion::Happiness, Emotion::Surprise).unwrap();
        assert_eq!(hs.name, "happily_surprised");
        for au in [12, 25, 6, 1, 2, 26, 5] {
            assert!(hs.au_weights.contains_key(&au), "AU{au}");
        }
        assert_eq!(hs.au_weights[&25], 1.0);
        assert!(hs.valence_term_applies);

        let sf = compound_union(&t, Emotion::Sadness, Emotion::Fear).unwrap();
        assert!(!sf.valence_term_applies);
        // AU1 is observational (0.6) for sadness and prototypical for fear
        assert_eq!(sf.au_weights[&1], 1.0);

        assert!(compound_union(&t, Emotion::Happiness, Emotion::Happiness).is_err());
    }

    #[test]
    fn default_compound_list() {
        let t = RelatednessTable::cognitive();
        let classes = default_compound_classes(&t);
        assert_eq!(classes.len(), 11);
        let with_valence: Vec<_> = classes
            .iter()
            .filter(|c| c.valence_term_applies)
            .map(|c| c.name.as_str())
            .collect();
        assert_eq!(with_valence, ["happily_surprised", "happily_disgusted"]);
    }

    #[test]
    fn compound_override() {
        let t = RelatednessTable::cognitive();
        let text = r#"{"classes":[{"name":"x","emo1":"sad","emo2":"angry","aus":[[4,1.0],[15,0.5]]}]}"#;
        let classes = compound_classes_from_json(text, &t).unwrap();
        assert_eq!(classes[0].au_weights.len(), 2);
        assert_eq!(classes[0].au_weights[&15], 0.5);
    }
}
