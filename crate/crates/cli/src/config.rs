//! Sectioned key=value config files.
//!
//! Format: `[section]` headers, `key = value` lines, `#` starts a comment.
//! Keys are addressed as `section.key`. Parsing keeps line numbers so every
//! error can point at its source; duplicate and unknown keys are rejected
//! before any compute starts.

use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone)]
pub struct Config {
    entries: Vec<Entry>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, String> {
        let mut section = String::new();
        let mut entries: Vec<Entry> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(body) = line.strip_prefix('[') {
                let Some(name) = body.strip_suffix(']') else {
                    return Err(format!("line {line_no}: unterminated section header"));
                };
                let name = name.trim();
                if name.is_empty()
                    || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
                {
                    return Err(format!("line {line_no}: bad section name '{name}'"));
                }
                section = name.to_string();
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(format!("line {line_no}: expected 'key = value'"));
            };
            let key_part = line[..eq].trim();
            let value = line[eq + 1..].trim();
            if key_part.is_empty()
                || !key_part.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
            {
                return Err(format!("line {line_no}: bad key '{key_part}'"));
            }
            if section.is_empty() {
                return Err(format!("line {line_no}: key '{key_part}' outside any [section]"));
            }
            let key = format!("{section}.{key_part}");
            if let Some(prev) = entries.iter().find(|e| e.key == key) {
                return Err(format!(
                    "line {line_no}: duplicate key {key} (first set on line {})",
                    prev.line
                ));
            }
            entries.push(Entry { key, value: value.to_string(), line: line_no });
        }
        Ok(Config { entries })
    }

    /// Rejects keys outside `allowed` and missing `required` keys. Errors
    /// name the offending key, with its line when there is one.
    pub fn check_keys(&self, allowed: &[&str], required: &[&str]) -> Result<(), String> {
        for e in &self.entries {
            if !allowed.contains(&e.key.as_str()) {
                return Err(format!(
                    "line {}: unknown key {} (allowed here: {})",
                    e.line,
                    e.key,
                    allowed.join(", ")
                ));
            }
        }
        for k in required {
            if !self.entries.iter().any(|e| e.key == *k) {
                return Err(format!("missing required key {k}"));
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    pub fn has(&self, key: &str) -> bool {
        self.get(key).is_some()
    }

    pub fn str(&self, key: &str) -> Result<&str, String> {
        self.get(key)
            .map(|e| e.value.as_str())
            .ok_or_else(|| format!("missing required key {key}"))
    }

    pub fn f64(&self, key: &str) -> Result<f64, String> {
        let e = self.get(key).ok_or_else(|| format!("missing required key {key}"))?;
        e.value
            .parse::<f64>()
            .map_err(|_| format!("{key}: cannot parse '{}' as a number (line {})", e.value, e.line))
    }

    pub fn usize(&self, key: &str) -> Result<usize, String> {
        let e = self.get(key).ok_or_else(|| format!("missing required key {key}"))?;
        e.value.parse::<usize>().map_err(|_| {
            format!("{key}: cannot parse '{}' as a nonnegative integer (line {})", e.value, e.line)
        })
    }

    pub fn u64(&self, key: &str) -> Result<u64, String> {
        let e = self.get(key).ok_or_else(|| format!("missing required key {key}"))?;
        e.value.parse::<u64>().map_err(|_| {
            format!("{key}: cannot parse '{}' as a nonnegative integer (line {})", e.value, e.line)
        })
    }

    /// Comma-separated list of numbers.
    pub fn list_f64(&self, key: &str) -> Result<Vec<f64>, String> {
        let e = self.get(key).ok_or_else(|| format!("missing required key {key}"))?;
        e.value
            .split(',')
            .map(|part| {
                part.trim().parse::<f64>().map_err(|_| {
                    format!(
                        "{key}: cannot parse '{}' as a number (line {})",
                        part.trim(),
                        e.line
                    )
                })
            })
            .collect()
    }

    /// Line number of a key, for validation messages raised after parsing.
    pub fn line_of(&self, key: &str) -> usize {
        self.get(key).map(|e| e.line).unwrap_or(0)
    }

    /// The raw entries as a sorted JSON object, echoed into run summaries.
    pub fn echo(&self) -> serde_json::Value {
        let map: BTreeMap<&str, &str> =
            self.entries.iter().map(|e| (e.key.as_str(), e.value.as_str())).collect();
        serde_json::to_value(map).expect("string map serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_values() {
        let cfg = Config::parse(
            "# top comment\n[model]\ndimension = 1 # inline\ndensity = 0.25\n\n[sim]\nt_obs = 1, 2.5, 10\n",
        )
        .unwrap();
        assert_eq!(cfg.usize("model.dimension").unwrap(), 1);
        assert_eq!(cfg.f64("model.density").unwrap(), 0.25);
        assert_eq!(cfg.list_f64("sim.t_obs").unwrap(), vec![1.0, 2.5, 10.0]);
        assert_eq!(cfg.line_of("model.density"), 4);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = Config::parse("[model]\ndimension 1\n").unwrap_err();
        assert!(err.contains("line 2"), "{err}");
        let err = Config::parse("dimension = 1\n").unwrap_err();
        assert!(err.contains("line 1") && err.contains("outside"), "{err}");
        let err = Config::parse("[model]\na = 1\na = 2\n").unwrap_err();
        assert!(err.contains("line 3") && err.contains("duplicate"), "{err}");
        let err = Config::parse("[model\na = 1\n").unwrap_err();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn key_checks_name_the_offender() {
        let cfg = Config::parse("[model]\ndensity = 0.5\nbogus = 1\n").unwrap();
        let err = cfg.check_keys(&["model.density"], &["model.density"]).unwrap_err();
        assert!(err.contains("model.bogus") && err.contains("line 3"), "{err}");
        let cfg = Config::parse("[model]\ndensity = 0.5\n").unwrap();
        let err = cfg
            .check_keys(&["model.density", "sim.seed"], &["model.density", "sim.seed"])
            .unwrap_err();
        assert!(err.contains("sim.seed"), "{err}");
    }

    #[test]
    fn echo_is_sorted_and_complete() {
        let cfg = Config::parse("[b]\nz = 1\n[a]\ny = 2\n").unwrap();
        let echo = cfg.echo();
        let obj = echo.as_object().unwrap();
        let keys: Vec<&String> = obj.keys().collect();
        assert_eq!(keys, ["a.y", "b.z"]);
    }
}
