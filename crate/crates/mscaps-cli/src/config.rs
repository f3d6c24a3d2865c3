use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{usage, Result};

/// Defaults file: one `key=value` per line, `#` comments, blank lines
/// ignored. Keys use the long flag spelling (e.g. `patch-size=9`).
/// Precedence everywhere: built-in default < config entry < flag.
pub struct Settings {
    entries: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Settings> {
        let mut entries = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    usage(format!(
                        "{}:{}: expected key=value, got {line:?}",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                entries.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(Settings { entries })
    }

    fn parse<T: FromStr>(&self, key: &str, raw: &str) -> Result<T> {
        raw.parse()
            .map_err(|_| usage(format!("config key {key}: cannot parse {raw:?}")))
    }

    /// Flag wins, then config, then the built-in default.
    pub fn get<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        match (flag, self.entries.get(key)) {
            (Some(v), _) => Ok(v),
            (None, Some(raw)) => self.parse(key, raw),
            (None, None) => Ok(default),
        }
    }

    /// Flag wins, then config; absent everywhere stays absent.
    pub fn get_opt<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        match (flag, self.entries.get(key)) {
            (Some(v), _) => Ok(Some(v)),
            (None, Some(raw)) => self.parse(key, raw).map(Some),
            (None, None) => Ok(None),
        }
    }

    pub fn get_path(&self, key: &str, flag: Option<PathBuf>) -> Option<PathBuf> {
        flag.or_else(|| self.entries.get(key).map(PathBuf::from))
    }

    /// Boolean flags can only be switched on by the command line, so the
    /// config value applies whenever the flag is absent.
    pub fn get_switch(&self, key: &str, flag: bool) -> Result<bool> {
        if flag {
            return Ok(true);
        }
        match self.entries.get(key) {
            Some(raw) => match raw.as_str() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(usage(format!("config key {key}: cannot parse {raw:?} as bool"))),
            },
            None => Ok(false),
        }
    }
}

/// Parses `WIDTHxHEIGHT` into (h, w).
pub fn parse_size(spec: &str) -> Result<(usize, usize)> {
    let (w, h) = spec
        .split_once(['x', 'X'])
        .ok_or_else(|| usage(format!("size must be WIDTHxHEIGHT, got {spec:?}")))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| usage(format!("size must be WIDTHxHEIGHT, got {spec:?}")))
    };
    Ok((parse(h)?, parse(w)?))
}

/// Parses `top,left,bottom,right` (half-open) into a rectangle.
pub fn parse_region(spec: &str) -> Result<mscaps_core::preprocessing::Rect> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(usage(format!(
            "region must be top,left,bottom,right, got {spec:?}"
        )));
    }
    let mut nums = [0usize; 4];
    for (slot, part) in nums.iter_mut().zip(&parts) {
        *slot = part
            .parse()
            .map_err(|_| usage(format!("region must be four integers, got {spec:?}")))?;
    }
    Ok(mscaps_core::preprocessing::Rect {
        top: nums[0],
        left: nums[1],
        bottom: nums[2],
        right: nums[3],
    })
}

/// Parses a comma-separated integer list, deduplicating while preserving
/// first-occurrence order; duplicates are reported on stderr.
pub fn parse_values(spec: &str) -> Result<Vec<usize>> {
    let mut values = Vec::new();
    for part in spec.split(',') {
        let v: usize = part
            .trim()
            .parse()
            .map_err(|_| usage(format!("values must be integers, got {part:?}")))?;
        if values.contains(&v) {
            eprintln!("mscaps: duplicate value {v} ignored");
        } else {
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(usage("values list is empty"));
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flag_config_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg");
        std::fs::write(&path, "# comment\nepochs = 7\n\nlr=0.5\n").unwrap();
        let s = Settings::load(Some(&path)).unwrap();
        assert_eq!(s.get("epochs", Some(3usize), 50).unwrap(), 3);
        assert_eq!(s.get("epochs", None::<usize>, 50).unwrap(), 7);
        assert_eq!(s.get("batch", None::<usize>, 64).unwrap(), 64);
        assert_eq!(s.get("lr", None::<f64>, 1e-3).unwrap(), 0.5);
    }

    #[test]
    fn malformed_config_lines_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg");
        std::fs::write(&path, "epochs\n").unwrap();
        assert!(Settings::load(Some(&path)).is_err());
        std::fs::write(&path, "epochs=ten\n").unwrap();
        let s = Settings::load(Some(&path)).unwrap();
        assert!(s.get("epochs", None::<usize>, 50).is_err());
    }

    #[test]
    fn size_and_region_specs_parse() {
        assert_eq!(parse_size("128x96").unwrap(), (96, 128));
        assert!(parse_size("128").is_err());
        assert!(parse_size("axb").is_err());
        let r = parse_region("40,41,80,82").unwrap();
        assert_eq!((r.top, r.left, r.bottom, r.right), (40, 41, 80, 82));
        assert!(parse_region("40,40,80").is_err());
    }

    #[test]
    fn value_lists_deduplicate() {
        assert_eq!(parse_values("9,13,9,17").unwrap(), vec![9, 13, 17]);
        assert!(parse_values("9,x").is_err());
        assert!(parse_values("").is_err());
    }
}
