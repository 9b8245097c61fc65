//! Reference computations read straight from the fixture files, sharing no
//! code with the crate.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde_json::Value;

/// Conditions that make a travel day unsuitable.
pub const ADVERSE_CONDITIONS: [&str; 3] = ["storm", "rain", "snow"];

pub fn crate_file(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(rel)
}

pub fn read_text(rel: &str) -> String {
    std::fs::read_to_string(crate_file(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn jsonl(rel: &str) -> Vec<Value> {
    read_text(rel)
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("{rel}: {e}")))
        .collect()
}

fn xy(v: &Value) -> (f64, f64) {
    (v["x_km"].as_f64().unwrap(), v["y_km"].as_f64().unwrap())
}

/// Cities within `radius_km` of `address`, nearest first.
pub fn nearby_cities(address: &str, radius_km: f64) -> Vec<String> {
    let home = jsonl("fixtures/data/addresses.jsonl")
        .into_iter()
        .find(|a| a["address"] == address)
        .map(|a| xy(&a))
        .expect("address in fixtures");
    let mut within: Vec<(f64, String)> = jsonl("fixtures/data/cities.jsonl")
        .iter()
        .map(|c| {
            let (x, y) = xy(c);
            (
                (x - home.0).hypot(y - home.1),
                c["name"].as_str().unwrap().to_string(),
            )
        })
        .filter(|(d, _)| *d <= radius_km)
        .collect();
    within.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    within.into_iter().map(|(_, n)| n).collect()
}

/// Cities with at least one adverse day in the forecast.
pub fn adverse_cities() -> BTreeSet<String> {
    jsonl("fixtures/data/weather.jsonl")
        .iter()
        .filter(|d| ADVERSE_CONDITIONS.contains(&d["condition"].as_str().unwrap_or("")))
        .map(|d| d["city"].as_str().unwrap().to_string())
        .collect()
}

pub fn stopwords() -> BTreeSet<String> {
    read_text("src/stopwords.txt")
        .lines()
        .map(str::trim)
        .filter(|w| !w.is_empty() && !w.starts_with('#'))
        .map(str::to_string)
        .collect()
}

/// Lower-cased alphanumeric runs that are not stop-words.
pub fn token_set(text: &str, stop: &BTreeSet<String>) -> BTreeSet<String> {
    let lower = text.to_lowercase();
    lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && !stop.contains(*t))
        .map(str::to_string)
        .collect()
}

/// Names of the records in a JSON list.
pub fn names(list: &Value) -> Vec<String> {
    list.as_array()
        .map(|items| {
            items
                .iter()
                .filter_map(|i| i["name"].as_str().map(str::to_string))
                .collect()
        })
        .unwrap_or_default()
}
